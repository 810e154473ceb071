//! `uq` subcommands. Each writes `samples.csv` and `summary.json` into
//! `--out`; `forward` also writes the output density as `kde.csv`.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Subcommand};
use modelbridge::{Config, Model, RemoteModel};
use modelbridge_uq::kde::trapezoid;
use modelbridge_uq::report::{self, McmcSummary};
use modelbridge_uq::{
    forward_mc, forward_qmc, mlda, Bandwidth, ChainResult, Distribution, Kde, LogDensity, MeanEstimate,
    MldaHierarchy, ModelDensity, ProductDistribution,
};
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;

#[derive(Subcommand)]
pub enum UqCommand {
    /// Monte Carlo forward propagation with a density estimate of one output.
    Forward(ForwardArgs),
    /// Quasi-Monte Carlo (Halton) forward propagation.
    Qmc(QmcArgs),
    /// Random-walk Metropolis on a served log-density.
    Rwm(RwmArgs),
    /// Multilevel delayed acceptance over levels of a served log-density.
    Mlda(MldaArgs),
}

#[derive(Args)]
pub struct Target {
    #[arg(long)]
    model_url: String,
    #[arg(long, default_value = "forward")]
    model_name: String,
    /// Requests in flight at once (forward methods) or chains run at once (samplers).
    #[arg(long, default_value_t = 8)]
    parallelism: usize,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct ForwardArgs {
    #[command(flatten)]
    target: Target,
    /// One per model input, e.g. `triangular:0.25,0.41`, `beta:-6.776,-5.544,10,10`,
    /// `uniform:a,b`, `normal:mu,sigma`.
    #[arg(long = "dist", required = true)]
    dists: Vec<Distribution>,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `auto` (Silverman) or a positive number.
    #[arg(long, default_value = "auto")]
    bandwidth: Bandwidth,
    /// Estimate the density on the positive half-line via a log transform.
    #[arg(long)]
    positive: bool,
    #[arg(long, default_value_t = 512)]
    grid: usize,
    /// Which flattened model output the density is estimated for.
    #[arg(long, default_value_t = 0)]
    output_index: usize,
}

#[derive(Args)]
pub struct QmcArgs {
    #[command(flatten)]
    target: Target,
    /// One per model input; uniform, normal or triangular.
    #[arg(long = "dist", required = true)]
    dists: Vec<Distribution>,
    #[arg(long, default_value_t = 256)]
    n: usize,
}

#[derive(Args)]
pub struct ChainArgs {
    /// Starting point, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    theta0: Vec<f64>,
    /// Random-walk step size per component, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sigma: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
pub struct RwmArgs {
    #[command(flatten)]
    target: Target,
    #[command(flatten)]
    chain: ChainArgs,
    /// Chain length including the starting point.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Value of the model's level config key; omitted means the model default.
    #[arg(long)]
    level: Option<i64>,
}

#[derive(Args)]
pub struct MldaArgs {
    #[command(flatten)]
    target: Target,
    #[command(flatten)]
    chain: ChainArgs,
    /// Fine-level transitions per chain.
    #[arg(long, default_value_t = 500)]
    n_fine: usize,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Level config values from coarse to fine; repeating a value gives identical levels.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    levels: Vec<i64>,
    /// Coarse steps per proposal between consecutive levels, one fewer than `--levels`.
    #[arg(long, value_delimiter = ',', default_value = "25,2")]
    subsampling: Vec<usize>,
    /// Config key that selects the level.
    #[arg(long, default_value = "level")]
    level_key: String,
}

pub fn run(cmd: UqCommand) -> Result<(), CliError> {
    match cmd {
        UqCommand::Forward(a) => forward(a),
        UqCommand::Qmc(a) => qmc(a),
        UqCommand::Rwm(a) => rwm(a),
        UqCommand::Mlda(a) => run_mlda(a),
    }
}

fn connect(t: &Target) -> Result<Arc<RemoteModel>, CliError> {
    if t.parallelism == 0 {
        return Err(CliError::Usage("--parallelism must be positive".into()));
    }
    Ok(Arc::new(RemoteModel::connect(&t.model_url, &t.model_name)?))
}

fn out_dir(t: &Target) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&t.out)
        .map_err(|e| CliError::Resource(format!("cannot create {}: {e}", t.out.display())))?;
    Ok(&t.out)
}

fn target_json(t: &Target) -> serde_json::Value {
    json!({ "model_url": t.model_url, "model_name": t.model_name, "parallelism": t.parallelism })
}

#[derive(Serialize)]
struct KdeSummary {
    output_index: usize,
    bandwidth: f64,
    positive: bool,
    grid_points: usize,
    integral: f64,
}

fn forward(a: ForwardArgs) -> Result<(), CliError> {
    let model = connect(&a.target)?;
    let dist = ProductDistribution::new(a.dists.clone())?;
    let outputs: usize = model.descriptor().output_sizes.iter().sum();
    if a.output_index >= outputs {
        return Err(CliError::Usage(format!(
            "--output-index {} but the model has {outputs} outputs",
            a.output_index
        )));
    }
    let started = Instant::now();
    let set = forward_mc(model.as_ref(), &dist, a.n, &Config::new(), a.target.parallelism, a.seed)?;
    let elapsed = started.elapsed().as_secs_f64();
    let values = set.output(a.output_index);
    let kde = if a.positive {
        Kde::positive(&values, a.bandwidth)?
    } else {
        Kde::new(&values, a.bandwidth)?
    };
    let (grid, density) = kde.grid(a.grid);
    let dir = out_dir(&a.target)?;
    report::write_samples(report::create(&dir.join("samples.csv"))?, &set)?;
    report::write_density(report::create(&dir.join("kde.csv"))?, &grid, &density)?;
    let summary = json!({
        "command": "forward",
        "target": target_json(&a.target),
        "distributions": a.dists.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "n": a.n,
        "seed": a.seed,
        "estimate": set.estimate(),
        "kde": KdeSummary {
            output_index: a.output_index,
            bandwidth: kde.bandwidth(),
            positive: kde.is_positive(),
            grid_points: grid.len(),
            integral: trapezoid(&grid, &density),
        },
        "elapsed_s": elapsed,
    });
    report::write_json(&dir.join("summary.json"), &summary)?;
    print_estimate(&set.estimate());
    Ok(())
}

fn qmc(a: QmcArgs) -> Result<(), CliError> {
    let model = connect(&a.target)?;
    let dist = ProductDistribution::new(a.dists.clone())?;
    let started = Instant::now();
    let set = forward_qmc(model.as_ref(), &dist, a.n, &Config::new(), a.target.parallelism)?;
    let elapsed = started.elapsed().as_secs_f64();
    let dir = out_dir(&a.target)?;
    report::write_samples(report::create(&dir.join("samples.csv"))?, &set)?;
    let estimate = set.estimate();
    let summary = json!({
        "command": "qmc",
        "target": target_json(&a.target),
        "distributions": a.dists.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "n": a.n,
        "mean": estimate.mean,
        "elapsed_s": elapsed,
    });
    report::write_json(&dir.join("summary.json"), &summary)?;
    print_estimate(&estimate);
    Ok(())
}

fn print_estimate(e: &MeanEstimate) {
    for (i, (m, s)) in e.mean.iter().zip(&e.stderr).enumerate() {
        println!("output_{i} mean={m} stderr={s}");
    }
}

fn density(model: &Arc<RemoteModel>, config: Config, dim: usize) -> Result<Arc<dyn LogDensity>, CliError> {
    let d = ModelDensity::new(model.clone() as Arc<dyn Model>, config)?;
    d.check_dimension(dim)?;
    Ok(Arc::new(d))
}

fn write_chains(t: &Target, command: &str, extra: serde_json::Value, chains: &[ChainResult], elapsed: f64) -> Result<(), CliError> {
    let dir = out_dir(t)?;
    report::write_chains(report::create(&dir.join("samples.csv"))?, chains)?;
    let summary = McmcSummary::new(chains);
    let doc = json!({
        "command": command,
        "target": target_json(t),
        "settings": extra,
        "summary": summary,
        "elapsed_s": elapsed,
    });
    report::write_json(&dir.join("summary.json"), &doc)?;
    for c in &summary.chains {
        println!(
            "chain {} samples={} acceptance={:?} evaluations={:?}{}",
            c.chain,
            c.fine_samples,
            c.acceptance_rate,
            c.evaluations_per_level,
            c.aborted.as_deref().map(|m| format!(" aborted: {m}")).unwrap_or_default()
        );
    }
    if summary.chains.iter().all(|c| c.aborted.is_some()) {
        return Err(CliError::Failed("every chain aborted".into()));
    }
    Ok(())
}

fn rwm(a: RwmArgs) -> Result<(), CliError> {
    let model = connect(&a.target)?;
    let config = a.level.map_or_else(Config::new, |l| Config::new().with("level", l));
    let target = density(&model, config, a.chain.theta0.len())?;
    let started = Instant::now();
    let chain = modelbridge_uq::rwm(target.as_ref(), &a.chain.theta0, &a.chain.sigma, a.n, a.chain.seed)?;
    let settings = json!({
        "theta0": a.chain.theta0, "sigma": a.chain.sigma, "n": a.n, "seed": a.chain.seed, "level": a.level,
    });
    write_chains(&a.target, "rwm", settings, &[chain], started.elapsed().as_secs_f64())
}

fn run_mlda(a: MldaArgs) -> Result<(), CliError> {
    let model = connect(&a.target)?;
    let levels = a
        .levels
        .iter()
        .map(|&l| density(&model, Config::new().with(a.level_key.as_str(), l), a.chain.theta0.len()))
        .collect::<Result<Vec<_>, _>>()?;
    let h = MldaHierarchy::new(levels, a.subsampling.clone(), a.chain.sigma.clone())?;
    let started = Instant::now();
    let chains = mlda(&h, &a.chain.theta0, a.n_fine, a.chains, a.chain.seed, a.target.parallelism)?;
    let settings = json!({
        "theta0": a.chain.theta0, "sigma": a.chain.sigma, "n_fine": a.n_fine, "chains": a.chains,
        "seed": a.chain.seed, "levels": a.levels, "subsampling": a.subsampling,
        "expected_evaluations_per_chain": h.expected_evaluations(a.n_fine),
    });
    write_chains(&a.target, "mlda", settings, &chains, started.elapsed().as_secs_f64())
}
