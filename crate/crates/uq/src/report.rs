//! CSV and JSON output.
//!
//! | file | header |
//! |------|--------|
//! | forward samples | `sample,theta_0,..,theta_{d-1},output_0,..,output_{m-1}` |
//! | chain samples | `chain,level,step,theta_0,..,theta_{d-1},log_density` |
//! | density curve | `x,density` |
//!
//! Floats are written in shortest round-trip form.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::estimate::{MeanEstimate, SampleSet};
use crate::mcmc::ChainResult;
use crate::mlda::pooled_samples;
use crate::UqError;

fn header(prefix: &[&str], name: &str, n: usize, suffix: &[&str]) -> Vec<String> {
    prefix
        .iter()
        .map(|s| s.to_string())
        .chain((0..n).map(|i| format!("{name}_{i}")))
        .chain(suffix.iter().map(|s| s.to_string()))
        .collect()
}

pub fn write_samples<W: Write>(out: W, set: &SampleSet) -> Result<(), UqError> {
    let dim = set.points.first().map_or(0, Vec::len);
    let outputs = set.values.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut head = header(&["sample"], "theta", dim, &[]);
    head.extend(header(&[], "output", outputs, &[]));
    w.write_record(&head)?;
    for (i, (p, v)) in set.points.iter().zip(&set.values).enumerate() {
        let row = std::iter::once(i.to_string()).chain(p.iter().chain(v).map(f64::to_string));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Every level of every chain, coarse levels included.
pub fn write_chains<W: Write>(out: W, chains: &[ChainResult]) -> Result<(), UqError> {
    let dim = chains
        .iter()
        .flat_map(|c| c.levels.iter())
        .find_map(|l| l.samples.first())
        .map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(&["chain", "level", "step"], "theta", dim, &["log_density"]))?;
    for c in chains {
        for (level, trace) in c.levels.iter().enumerate() {
            for (step, (theta, lp)) in trace.samples.iter().zip(&trace.log_density).enumerate() {
                let row = [c.chain.to_string(), level.to_string(), step.to_string()]
                    .into_iter()
                    .chain(theta.iter().map(f64::to_string))
                    .chain(std::iter::once(lp.to_string()));
                w.write_record(row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_density<W: Write>(out: W, xs: &[f64], density: &[f64]) -> Result<(), UqError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "density"])?;
    for (x, d) in xs.iter().zip(density) {
        w.write_record([x.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), UqError> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, UqError> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub fine_samples: usize,
    pub acceptance_rate: Vec<f64>,
    pub evaluations_per_level: Vec<u64>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcSummary {
    pub chains: Vec<ChainSummary>,
    /// Pooled fine-level estimate over chains that completed; the standard
    /// error ignores autocorrelation.
    pub fine: Option<MeanEstimate>,
    pub evaluations_per_level: Vec<u64>,
}

impl McmcSummary {
    pub fn new(results: &[ChainResult]) -> Self {
        let chains: Vec<ChainSummary> = results
            .iter()
            .map(|c| ChainSummary {
                chain: c.chain,
                fine_samples: c.samples().len(),
                acceptance_rate: c.acceptance_rate(),
                evaluations_per_level: c.evaluations_per_level(),
                aborted: c.aborted.clone(),
            })
            .collect();
        let depth = results.first().map_or(0, |c| c.levels.len());
        let evaluations_per_level = (0..depth)
            .map(|l| results.iter().map(|c| c.levels[l].evaluations).sum())
            .collect();
        let pooled = pooled_samples(results);
        let fine = (!pooled.is_empty()).then(|| MeanEstimate::from_values(&pooled));
        Self { chains, fine, evaluations_per_level }
    }
}
