#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

pub const BIN: &str = env!("CARGO_BIN_EXE_modelbridge");

/// A long-running `modelbridge` child, killed on drop.
pub struct Proc {
    pub child: Child,
    pub port: u16,
}

impl Proc {
    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Starts `modelbridge <args>` and waits for its `READY port=<p>` line.
pub fn start(args: &[&str]) -> Proc {
    let mut child = Command::new(BIN)
        .args(args)
        .env_remove("BRIDGE_PORT")
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .expect("spawn modelbridge");
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let port = line
        .trim()
        .strip_prefix("READY port=")
        .unwrap_or_else(|| panic!("unexpected first line {line:?}"))
        .parse()
        .unwrap();
    Proc { child, port }
}

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("BRIDGE_PORT")
        .output()
        .expect("run modelbridge")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let head = rd.headers().unwrap().iter().map(str::to_string).collect();
    let rows = rd
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect();
    (head, rows)
}

pub fn column(head: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let i = head.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    (1..xs.len()).map(|i| 0.5 * (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1])).sum()
}

/// Mean of the smooth response over the uniform input box by 200 x 200
/// tensor Simpson quadrature.
pub fn smooth_uniform_mean() -> f64 {
    let (fa, fb) = (0.25, 0.41);
    let (da, db) = (-6.776, -5.544);
    let d_mid = 0.5 * (da + db);
    let f = |fr: f64, d: f64| (0.3 * fr).exp() * (1.0 + 0.1 * (d - d_mid) * (d - d_mid));
    let n = 200;
    let w = |i: usize| if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
    let (hf, hd) = ((fb - fa) / n as f64, (db - da) / n as f64);
    let mut s = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            s += w(i) * w(j) * f(fa + hf * i as f64, da + hd * j as f64);
        }
    }
    s * hf * hd / 9.0 / ((fb - fa) * (db - da))
}

/// A free loopback port (bound and released).
pub fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}
