use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afc::boundslab::{self, BoundTrialReport, VerifyOptions};
use afc::config::{BaselineMode, ExperimentConfig};
use afc::error::Error;
use afc::importance::{self, EstimateOptions, VariabilityRow};
use afc::tensor::{inject_fault, Fault};
use afc::trainer::{run_experiment, Summary};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "afc", version, about = "Class-incremental learning with importance-weighted feature consolidation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run(RunArgs),
    /// Run one experiment per value of a configuration key.
    Sweep(SweepArgs),
    /// Run the numerical bound suites and gradient checks.
    Verify(VerifyArgs),
    /// Print the per-layer importance of a finished run, sorted.
    InspectImportance(InspectArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<BaselineMode>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// `key=v1,v2,...`; `sample_size=8,16,...,full` produces an importance
    /// variability table instead of sub-runs.
    spec: String,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Repeated estimations per sample size.
    #[arg(long, default_value_t = 10)]
    repeats: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    ReluSignFlip,
}

#[derive(Args)]
struct VerifyArgs {
    /// Writes `verify.json` here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reduced trial counts.
    #[arg(long)]
    quick: bool,
    /// Corrupts a backward rule so the harness can be seen to fail.
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Args)]
struct InspectArgs {
    /// A run directory containing `importance.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Only this stage; defaults to the last one.
    #[arg(long)]
    stage: Option<usize>,
}

fn parse_mode(s: &str) -> Result<BaselineMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::InspectImportance(a) => cmd_inspect(&a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

/// Loads the config, applies flag overrides and resolves the output dir.
fn resolve(c: &Common) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = c.mode {
        cfg.mode = m;
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Failure::Config("no output directory: pass --out or set output_dir".into()))?;
    cfg.output_dir = Some(out.clone());
    Ok((cfg, out))
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let mut c = cfg.clone();
    c.output_dir = None;
    let doc = serde_json::json!({ "config_hash": cfg.hash(), "config": c });
    let mut text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
    text.push('\n');
    fs::write(dir.join("config.json"), text)?;
    Ok(())
}

fn run_one(cfg: &ExperimentConfig, out: &Path) -> CliResult<Summary> {
    let data = cfg.load_dataset()?;
    write_config(cfg, out)?;
    Ok(run_experiment(cfg, &data, Some(out))?.summary)
}

fn cmd_run(a: &RunArgs) -> CliResult<()> {
    let (cfg, out) = resolve(&a.common)?;
    let s = run_one(&cfg, &out)?;
    println!(
        "{}: avg incremental accuracy NME {:.2} CNN {:.2} -> {}",
        s.mode,
        s.avg_inc_acc_nme,
        s.avg_inc_acc_cnn,
        out.join("summary.json").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    key: String,
    value: String,
    config_hash: String,
    mode: String,
    avg_inc_acc_nme: f64,
    avg_inc_acc_cnn: f64,
    avg_acc_nme: f64,
    avg_acc_cnn: f64,
    bwt_nme: Option<f64>,
    bwt_cnn: Option<f64>,
}

fn parse_spec(spec: &str) -> CliResult<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("sweep spec {spec:?} is not key=v1,v2,...")))?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    if key.is_empty() || values.is_empty() {
        return Err(Failure::Config(format!("sweep spec {spec:?} has no values")));
    }
    Ok((key.trim().to_string(), values))
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let (cfg, out) = resolve(&a.common)?;
    let (key, values) = parse_spec(&a.spec)?;
    fs::create_dir_all(&out)?;
    if key == "sample_size" {
        return sweep_sample_size(&cfg, &out, &values, a.repeats);
    }
    let configs: Vec<(String, ExperimentConfig)> = values
        .iter()
        .map(|v| Ok((v.clone(), cfg.with_override(&key, v)?)))
        .collect::<CliResult<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let results: Vec<CliResult<Summary>> = pool.install(|| {
        configs
            .par_iter()
            .map(|(v, c)| run_one(c, &out.join(format!("{key}={v}"))))
            .collect()
    });
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    for ((v, c), r) in configs.iter().zip(results) {
        let s = r?;
        println!("{key}={v}: NME {:.2} CNN {:.2}", s.avg_inc_acc_nme, s.avg_inc_acc_cnn);
        w.serialize(SweepRow {
            key: key.clone(),
            value: v.clone(),
            config_hash: c.hash(),
            mode: s.mode.to_string(),
            avg_inc_acc_nme: s.avg_inc_acc_nme,
            avg_inc_acc_cnn: s.avg_inc_acc_cnn,
            avg_acc_nme: s.avg_acc_nme,
            avg_acc_cnn: s.avg_acc_cnn,
            bwt_nme: s.bwt_nme,
            bwt_cnn: s.bwt_cnn,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the experiment once, then re-estimates importance of the final model
/// on random subsets of the last stage's classes for each sample size.
fn sweep_sample_size(cfg: &ExperimentConfig, out: &Path, values: &[String], repeats: usize) -> CliResult<()> {
    let data = cfg.load_dataset()?;
    let run_dir = out.join("run");
    write_config(cfg, &run_dir)?;
    let r = run_experiment(cfg, &data, Some(&run_dir))?;
    let last = r.plan.stages.last().expect("at least one stage");
    let indices: Vec<usize> = (0..data.train.labels.len())
        .filter(|&i| last.contains(&data.train.labels[i]))
        .collect();
    let sizes: Vec<usize> = values
        .iter()
        .map(|v| match v.as_str() {
            "full" => Ok(indices.len()),
            s => s
                .parse()
                .map_err(|_| Failure::Config(format!("sample size {s:?} is not an integer or \"full\""))),
        })
        .collect::<CliResult<_>>()?;
    let opts = EstimateOptions {
        batch_size: cfg.importance.batch_size,
        include_true_class: cfg.loss.include_true_class,
        train_mode_bn: cfg.importance.train_mode_bn,
        sample_limit: None,
    };
    let rows: Vec<VariabilityRow> = importance::importance_variability(
        &r.model,
        &data.train,
        &indices,
        &r.plan,
        &sizes,
        repeats,
        cfg.train.seed,
        &opts,
    )?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["sample_size", "mean_std"])?;
    let mut per = csv::Writer::from_path(out.join("variability.csv"))?;
    per.write_record(["sample_size", "layer", "channel", "std"])?;
    println!("{:>12} {:>12}", "sample_size", "mean_std");
    for row in &rows {
        println!("{:>12} {:>12.6}", row.sample_size, row.mean_std);
        w.write_record([row.sample_size.to_string(), row.mean_std.to_string()])?;
        for (l, layer) in row.std.iter().enumerate() {
            for (c, s) in layer.iter().enumerate() {
                per.write_record([row.sample_size.to_string(), l.to_string(), c.to_string(), s.to_string()])?;
            }
        }
    }
    w.flush()?;
    per.flush()?;
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> CliResult<()> {
    let opts = VerifyOptions {
        seed: a.seed,
        ..if a.quick { VerifyOptions::quick() } else { VerifyOptions::default() }
    };
    inject_fault(a.inject_fault.map(|f| match f {
        FaultArg::ReluSignFlip => Fault::ReluSignFlip,
    }));
    let reports: Vec<BoundTrialReport> = boundslab::verify_all(&opts)?;
    inject_fault(None);
    let text = serde_json::to_string_pretty(&reports).map_err(Error::from)?;
    println!("{text}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("verify.json"), format!("{text}\n"))?;
    }
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.suite.as_str()).collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("failing suites: {}", failing.join(", "))))
    }
}

#[derive(serde::Deserialize)]
struct ImportanceRecord {
    stage: usize,
    layer: usize,
    channel: usize,
    raw: f64,
    normalized: f64,
}

fn cmd_inspect(a: &InspectArgs) -> CliResult<()> {
    let path = a.out.join("importance.csv");
    if !path.is_file() {
        return Err(Failure::Config(format!("{} does not exist", path.display())));
    }
    let mut records: Vec<ImportanceRecord> = csv::Reader::from_path(&path)?
        .deserialize()
        .collect::<Result<_, _>>()?;
    let stage = match a.stage.or_else(|| records.iter().map(|r| r.stage).max()) {
        Some(s) => s,
        None => return Err(Failure::Config(format!("{} is empty", path.display()))),
    };
    records.retain(|r| r.stage == stage);
    if records.is_empty() {
        return Err(Failure::Config(format!("no importance rows for stage {stage}")));
    }
    records.sort_by(|x, y| x.layer.cmp(&y.layer).then(y.normalized.total_cmp(&x.normalized)));
    let mut w = csv::Writer::from_path(a.out.join(format!("importance_sorted_{stage:03}.csv")))?;
    w.write_record(["stage", "layer", "rank", "channel", "raw", "normalized"])?;
    let mut layer = usize::MAX;
    let mut rank = 0;
    for r in &records {
        if r.layer != layer {
            layer = r.layer;
            rank = 0;
            println!("stage {stage} layer {layer}");
        }
        println!("  {rank:>4}  channel {:>4}  {:.6}", r.channel, r.normalized);
        w.write_record([
            stage.to_string(),
            layer.to_string(),
            rank.to_string(),
            r.channel.to_string(),
            r.raw.to_string(),
            r.normalized.to_string(),
        ])?;
        rank += 1;
    }
    w.flush()?;
    Ok(())
}
