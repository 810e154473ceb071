mod common;

use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use common::{get, post, serve, serve_with};
use modelbridge::models::{DelayModel, DoublingModel, FnModel, Instrumented, LinearModel};
use modelbridge::protocol::{decode_response, ErrorKind, OperationKind, ProtocolError};
use modelbridge::server::{ServeError, ServerConfig};
use modelbridge::serve_models;
use proptest::prelude::*;
use serde_json::{json, Value};

fn error_kind(body: &str) -> ErrorKind {
    ProtocolError::from_json(body.as_bytes())
        .unwrap_or_else(|| panic!("not an error body: {body}"))
        .kind
}

#[test]
fn doubling_model_over_http() {
    let server = serve(DoublingModel::default());
    let (status, body) = post(&server.url(), "/Evaluate", r#"{"name":"forward","input":[[3.0]],"config":{}}"#);
    assert_eq!(status, 200);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v, json!({"output": [[6.0]]}));
}

#[test]
fn unknown_model_is_400() {
    let server = serve(DoublingModel::default());
    let (status, body) = post(&server.url(), "/Evaluate", r#"{"name":"missing","input":[[3.0]]}"#);
    assert_eq!(status, 400);
    assert_eq!(error_kind(&body), ErrorKind::UnknownModel);
}

#[test]
fn error_statuses() {
    let server = serve(DoublingModel::default());
    let url = server.url();
    let cases = [
        ("/Evaluate", r#"{"name":"forward","input":[[1.0,2.0]]}"#, 400, ErrorKind::InvalidDimensions),
        ("/Evaluate", r#"{"name":"forward""#, 400, ErrorKind::MalformedRequest),
        (
            "/Gradient",
            r#"{"name":"forward","input":[[1.0]],"outWrt":0,"inWrt":0,"sens":[1.0]}"#,
            400,
            ErrorKind::UnsupportedOperation,
        ),
        ("/Gradient", r#"{"name":"forward","input":[[1.0]]}"#, 400, ErrorKind::MalformedRequest),
        ("/InputSizes", r#"{"name":"nope"}"#, 400, ErrorKind::UnknownModel),
        ("/ModelInfo", r#"not json"#, 400, ErrorKind::MalformedRequest),
    ];
    for (path, body, status, kind) in cases {
        let (s, b) = post(&url, path, body);
        assert_eq!((s, error_kind(&b)), (status, kind), "{path} {body}");
    }
}

#[test]
fn descriptor_endpoints_reflect_registration() {
    let linear = LinearModel::new("lin", vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    let server = serve_models(
        vec![Arc::new(DoublingModel::default()), Arc::new(linear)],
        ServerConfig::local(),
    )
    .unwrap();
    let url = server.url();
    let (status, info) = get(&url, "/Info");
    assert_eq!(status, 200);
    assert_eq!(
        serde_json::from_str::<Value>(&info).unwrap(),
        json!({"protocolVersion": 1, "models": ["forward", "lin"]})
    );
    let (_, b) = post(&url, "/InputSizes", r#"{"name":"lin","config":{}}"#);
    assert_eq!(serde_json::from_str::<Value>(&b).unwrap(), json!({"inputSizes": [3]}));
    let (_, b) = post(&url, "/OutputSizes", r#"{"name":"lin","config":{}}"#);
    assert_eq!(serde_json::from_str::<Value>(&b).unwrap(), json!({"outputSizes": [2]}));
    let (_, b) = post(&url, "/ModelInfo", r#"{"name":"lin"}"#);
    assert_eq!(
        serde_json::from_str::<Value>(&b).unwrap(),
        json!({"support": {"Evaluate": true, "Gradient": true, "ApplyJacobian": true, "ApplyHessian": true}})
    );
    let (_, b) = post(&url, "/ModelInfo", r#"{"name":"forward"}"#);
    assert_eq!(
        serde_json::from_str::<Value>(&b).unwrap(),
        json!({"support": {"Evaluate": true, "Gradient": false, "ApplyJacobian": false, "ApplyHessian": false}})
    );
    let (_, b) = post(
        &url,
        "/ApplyJacobian",
        r#"{"name":"lin","input":[[0.0,0.0,0.0]],"outWrt":0,"inWrt":0,"vec":[1.0,0.0,0.0]}"#,
    );
    assert_eq!(serde_json::from_str::<Value>(&b).unwrap(), json!({"output": [1.0, 4.0]}));
}

#[test]
fn duplicate_names_and_bad_config_rejected() {
    let dup = serve_models(
        vec![Arc::new(DoublingModel::default()), Arc::new(DoublingModel::default())],
        ServerConfig::local(),
    );
    assert!(matches!(dup, Err(ServeError::Config(_))));
    let zero = serve_models(
        vec![Arc::new(DoublingModel::default())],
        ServerConfig::local().with_max_concurrent(0),
    );
    assert!(matches!(zero, Err(ServeError::Config(_))));
}

#[test]
fn busy_port_is_reported_synchronously() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let cfg = ServerConfig {
        port: taken.local_addr().unwrap().port(),
        ..ServerConfig::local()
    };
    let err = serve_models(vec![Arc::new(DoublingModel::default())], cfg).err().unwrap();
    assert!(matches!(err, ServeError::Bind { .. }), "{err}");
}

#[test]
fn two_simultaneous_calls_do_not_overlap() {
    let model = Instrumented::new(DelayModel::new("forward", 1, Duration::from_millis(50)));
    let probe = model.probe();
    let server = serve_with(Arc::new(model), ServerConfig::local());
    let url = server.url();
    std::thread::scope(|s| {
        for _ in 0..2 {
            s.spawn(|| {
                let (status, _) = post(&url, "/Evaluate", r#"{"name":"forward","input":[[1.0]]}"#);
                assert_eq!(status, 200);
            });
        }
    });
    assert_eq!(probe.calls(), 2);
    assert_eq!(probe.high_water(), 1);
}

#[test]
fn exclusivity_under_100_clients() {
    let model = Instrumented::new(DelayModel::new("forward", 1, Duration::from_millis(1)));
    let probe = model.probe();
    let server = serve_with(Arc::new(model), ServerConfig::local());
    let url = server.url();
    std::thread::scope(|s| {
        for i in 0..100 {
            let url = &url;
            s.spawn(move || {
                let (status, body) = post(url, "/Evaluate", &format!(r#"{{"name":"forward","input":[[{i}.0]]}}"#));
                assert_eq!(status, 200);
                let out = decode_response(OperationKind::Evaluate, body.as_bytes()).unwrap();
                assert_eq!(out, vec![vec![i as f64]]);
            });
        }
    });
    assert_eq!(probe.calls(), 100);
    assert_eq!(probe.high_water(), 1);
}

#[test]
fn opt_in_parallelism_is_bounded() {
    let model = Instrumented::new(DelayModel::new("forward", 1, Duration::from_millis(30)));
    let probe = model.probe();
    let server = serve_with(Arc::new(model), ServerConfig::local().with_max_concurrent(3));
    let url = server.url();
    std::thread::scope(|s| {
        for _ in 0..12 {
            s.spawn(|| post(&url, "/Evaluate", r#"{"name":"forward","input":[[1.0]]}"#));
        }
    });
    assert_eq!(probe.calls(), 12);
    assert!(probe.high_water() <= 3);
    assert!(probe.high_water() >= 2);
}

#[test]
fn queued_requests_complete_in_arrival_order() {
    let _t = common::timing_lock();
    let order = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&order);
    let model = FnModel::new("forward", vec![1], vec![1], move |x, _| {
        seen.lock().unwrap().push(x[0][0] as usize);
        std::thread::sleep(Duration::from_millis(40));
        Ok(x.to_vec())
    });
    let server = serve_with(Arc::new(model), ServerConfig::local());
    let url = server.url();
    std::thread::scope(|s| {
        for i in 0..8usize {
            let url = &url;
            s.spawn(move || {
                std::thread::sleep(Duration::from_millis(15 * i as u64));
                post(url, "/Evaluate", &format!(r#"{{"name":"forward","input":[[{i}.0]]}}"#))
            });
        }
    });
    assert_eq!(*order.lock().unwrap(), (0..8).collect::<Vec<_>>());
}

#[test]
fn metadata_is_not_blocked_by_evaluation() {
    let server = serve(DelayModel::new("forward", 1, Duration::from_millis(600)));
    let url = server.url();
    std::thread::scope(|s| {
        s.spawn(|| post(&url, "/Evaluate", r#"{"name":"forward","input":[[1.0]]}"#));
        std::thread::sleep(Duration::from_millis(100));
        let t = Instant::now();
        let (status, _) = get(&url, "/Info");
        assert_eq!(status, 200);
        let (status, _) = post(&url, "/InputSizes", r#"{"name":"forward"}"#);
        assert_eq!(status, 200);
        assert!(t.elapsed() < Duration::from_millis(300), "{:?}", t.elapsed());
    });
}

#[test]
fn model_failures_map_to_500() {
    let failing = FnModel::new("fails", vec![1], vec![1], |_, _| {
        Err(ProtocolError::model_failure("solver diverged"))
    });
    let panicking = FnModel::new("panics", vec![1], vec![1], |_, _| panic!("segfault in solver"));
    let wrong_shape = FnModel::new("shape", vec![1], vec![2], |x, _| Ok(x.to_vec()));
    let server = serve_models(
        vec![Arc::new(failing), Arc::new(panicking), Arc::new(wrong_shape)],
        ServerConfig::local(),
    )
    .unwrap();
    let url = server.url();
    for name in ["fails", "panics", "shape"] {
        let (status, body) = post(&url, "/Evaluate", &format!(r#"{{"name":"{name}","input":[[1.0]]}}"#));
        assert_eq!(status, 500, "{body}");
        assert_eq!(error_kind(&body), ErrorKind::ModelFailure);
    }
    let (_, body) = post(&url, "/Evaluate", r#"{"name":"fails","input":[[1.0]]}"#);
    assert!(body.contains("solver diverged"));
    let (_, body) = post(&url, "/Evaluate", r#"{"name":"panics","input":[[1.0]]}"#);
    assert!(body.contains("segfault in solver"));
    assert_eq!(get(&url, "/Info").0, 200);
}

#[test]
fn body_limit_is_enforced() {
    let cfg = ServerConfig {
        body_limit: 64,
        ..ServerConfig::local()
    };
    let server = serve_with(Arc::new(DoublingModel::default()), cfg);
    let big = format!(r#"{{"name":"forward","input":[[1.0]],"config":{{"pad":"{}"}}}}"#, "x".repeat(200));
    let (status, body) = post(&server.url(), "/Evaluate", &big);
    assert_eq!(status, 400);
    assert_eq!(error_kind(&body), ErrorKind::MalformedRequest);
}

#[test]
fn unknown_endpoint_gives_error_body() {
    let server = serve(DoublingModel::default());
    let (status, body) = post(&server.url(), "/Frobnicate", "{}");
    assert_eq!(status, 400);
    assert_eq!(error_kind(&body), ErrorKind::MalformedRequest);
}

#[test]
fn shutdown_is_idempotent_and_releases_port() {
    let server = serve(DoublingModel::default());
    let port = server.port();
    server.shutdown();
    assert!(!server.is_running());
    server.shutdown();
    assert!(TcpListener::bind(("127.0.0.1", port)).is_ok());
}

#[test]
fn shutdown_lets_running_evaluation_finish_and_rejects_queue() {
    let server = Arc::new(serve(DelayModel::new("forward", 1, Duration::from_millis(250))));
    let url = server.url();
    std::thread::scope(|s| {
        let running = s.spawn(|| post(&url, "/Evaluate", r#"{"name":"forward","input":[[4.0]]}"#));
        std::thread::sleep(Duration::from_millis(50));
        let queued = s.spawn(|| post(&url, "/Evaluate", r#"{"name":"forward","input":[[5.0]]}"#));
        std::thread::sleep(Duration::from_millis(50));
        let t = Instant::now();
        server.shutdown();
        let (status, body) = running.join().unwrap();
        assert_eq!(status, 200, "{body}");
        assert_eq!(serde_json::from_str::<Value>(&body).unwrap(), json!({"output": [[4.0]]}));
        let (status, body) = queued.join().unwrap();
        assert_eq!(status, 503);
        assert_eq!(error_kind(&body), ErrorKind::Unavailable);
        assert!(t.elapsed() < Duration::from_secs(2));
    });
}

fn assert_well_formed(status: u16, body: &str) {
    if status == 200 {
        let out = decode_response(OperationKind::Evaluate, body.as_bytes());
        assert!(out.is_ok(), "{body}");
        assert!(ProtocolError::from_json(body.as_bytes()).is_none());
    } else {
        let e = ProtocolError::from_json(body.as_bytes()).unwrap_or_else(|| panic!("{status}: {body}"));
        assert_eq!(e.kind.http_status(), status);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_response_is_output_or_error(
        noise in prop::collection::vec(any::<u8>(), 0..64),
        x in -1e6f64..1e6,
        pick in 0usize..4,
    ) {
        thread_local! {
            static SERVER: modelbridge::ServerHandle = common::serve(DoublingModel::default());
        }
        let url = SERVER.with(|s| s.url());
        let body = match pick {
            0 => String::from_utf8_lossy(&noise).into_owned(),
            1 => format!(r#"{{"name":"forward","input":[[{x:?}]]}}"#),
            2 => format!(r#"{{"name":"forward","input":[[{x:?},{x:?}]]}}"#),
            _ => format!(r#"{{"name":"forward","input":{x:?}}}"#),
        };
        let (status, resp) = post(&url, "/Evaluate", &body);
        assert_well_formed(status, &resp);
        if pick == 1 {
            prop_assert_eq!(status, 200);
        }
    }
}
