// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use infotransfer::config::{apply_override, ExperimentConfig};
use infotransfer::exact_info::fuzz_theorems;
use infotransfer::lautum::{lautum_from_covariances, lautum_from_samples, sample_gaussian};
use infotransfer::linalg::{Matrix, SymMatrix};
use infotransfer::mine::{correlated_gaussians, fit_mine, MineFitConfig};
use infotransfer::models::AdamConfig;
use infotransfer::pipeline::{run_experiment, write_csv_rows, ExperimentResult};
use infotransfer::{seeds, Error};

#[derive(Parser)]
#[command(name = "infotransfer", version, about = "Information-regularized semi-supervised transfer learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and emit a CSV row.
    Run(RunArgs),
    /// Run the method × labeled-count × seed grid and emit a CSV table with summary rows.
    Sweep(SweepArgs),
    /// Fuzz the discrete decomposition identities; exits 4 on any residual above tolerance.
    VerifyTheorems(VerifyArgs),
    /// Fit a critic on correlated 1-D Gaussians and report the clipped MI estimate.
    EstimateMi(MiArgs),
    /// Sample-based Gaussian Lautum estimate against the closed form.
    EstimateLautum(LautumArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `optimizer.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Append CSV rows here instead of printing to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed; for `sweep`, replaces the seed list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Also write the full result (traces and config echo) as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Experiments run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Args)]
struct MiArgs {
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = infotransfer::mine::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct LautumArgs {
    /// Correlation between each input coordinate and its proxy coordinate.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Instability(String),
    Acceptance(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Instability(_) => 3,
            Failure::Acceptance(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Instability(m) | Failure::Acceptance(m) | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Validation(_) => Failure::Config(e.to_string()),
            Error::Instability(_) => Failure::Instability(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::VerifyTheorems(a) => verify(a),
        Command::EstimateMi(a) => estimate_mi(a),
        Command::EstimateLautum(a) => estimate_lautum(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn read_doc(path: Option<&Path>) -> Result<Value, Failure> {
    match path {
        None => Ok(Value::Null),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Writes rows to `--out` (appending, header only for a new or empty file)
/// or to stdout with a header.
fn emit(out: Option<&Path>, rows: &[Vec<String>]) -> Result<(), Failure> {
    match out {
        Some(p) => {
            let fresh = std::fs::metadata(p).map(|m| m.len() == 0).unwrap_or(true);
            let file = OpenOptions::new().create(true).append(true).open(p)?;
            write_csv_rows(file, fresh, rows)?;
        }
        None => write_csv_rows(io::stdout().lock(), true, rows)?,
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<(), Failure> {
    let mut overrides = a.common.set.clone();
    if let Some(s) = a.common.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = ExperimentConfig::from_value(read_doc(a.common.config.as_deref())?, &overrides)?;
    let result = run_experiment(&cfg)?;
    emit(a.common.out.as_deref(), &[result.csv_row()])?;
    if let Some(p) = a.json {
        let text = serde_json::to_string_pretty(&result).map_err(|e| Failure::Other(e.to_string()))?;
        std::fs::write(p, text)?;
    }
    if result.unstable {
        return Err(Failure::Instability(format!(
            "{} of {} pre-transfer iterations were skipped",
            result.skipped_iterations, result.total_iterations
        )));
    }
    Ok(())
}

/// The grid of a sweep, read from the `sweep` block of the config.
#[derive(Debug, Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
struct SweepSpec {
    methods: Vec<String>,
    labeled_counts: Vec<usize>,
    seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            methods: vec!["standard".into(), "lautum".into(), "mi".into()],
            labeled_counts: vec![10, 50, 200],
            seeds: (0..10).collect(),
        }
    }
}

fn parse_sweep(doc: Value, overrides: &[String], seed: Option<u64>) -> Result<(ExperimentConfig, SweepSpec), Failure> {
    let mut doc = doc;
    let sweep_doc = match &mut doc {
        Value::Object(m) => m.remove("sweep"),
        Value::Null => None,
        _ => return Err(Failure::Config("config: top level must be an object".into())),
    };
    let mut sweep = serde_json::to_value(SweepSpec::default()).expect("sweep spec serializes");
    if let Some(Value::Object(m)) = sweep_doc {
        for (k, v) in m {
            match sweep.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(Failure::Config(format!("sweep.{k}: unknown key"))),
            }
        }
    } else if sweep_doc.is_some() {
        return Err(Failure::Config("sweep: expected an object".into()));
    }
    let (sweep_sets, base_sets): (Vec<&String>, Vec<&String>) = overrides.iter().partition(|o| o.starts_with("sweep."));
    for o in sweep_sets {
        apply_override(&mut sweep, &o["sweep.".len()..]).map_err(|e| Failure::Config(format!("sweep.{e}")))?;
    }
    let mut spec: SweepSpec = serde_json::from_value(sweep).map_err(|e| Failure::Config(format!("sweep: {e}")))?;
    if let Some(s) = seed {
        spec.seeds = vec![s];
    }
    for (field, empty) in [
        ("sweep.methods", spec.methods.is_empty()),
        ("sweep.labeled_counts", spec.labeled_counts.is_empty()),
        ("sweep.seeds", spec.seeds.is_empty()),
    ] {
        if empty {
            return Err(Failure::Config(format!("{field}: must not be empty")));
        }
    }
    let base_sets: Vec<String> = base_sets.into_iter().cloned().collect();
    let base = ExperimentConfig::from_value(doc, &base_sets)?;
    Ok((base, spec))
}

fn cell_config(base: &ExperimentConfig, method: &str, labeled: usize, seed: u64) -> Result<ExperimentConfig, Error> {
    let cfg = ExperimentConfig { method: method.to_string(), labeled_target_count: labeled, seed, ..base.clone() };
    cfg.validate()?;
    Ok(cfg)
}

fn failed_row(cfg: &ExperimentConfig, err: &Error) -> Vec<String> {
    let mut row = ExperimentResult::placeholder(cfg).csv_row();
    *row.last_mut().expect("status column") = format!("error: {err}");
    row
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let (base, spec) = parse_sweep(read_doc(a.common.config.as_deref())?, &a.common.set, a.common.seed)?;
    let mut methods = spec.methods.clone();
    methods.sort();
    methods.dedup();
    let mut counts = spec.labeled_counts.clone();
    counts.sort_unstable();
    counts.dedup();
    let mut seed_list = spec.seeds.clone();
    seed_list.sort_unstable();
    seed_list.dedup();
    let mut cells = Vec::new();
    for m in &methods {
        for &l in &counts {
            for &s in &seed_list {
                cells.push(cell_config(&base, m, l, s)?);
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| Failure::Other(e.to_string()))?;
    let results: Vec<Result<ExperimentResult, Error>> = pool.install(|| cells.par_iter().map(run_experiment).collect());

    let mut rows = Vec::with_capacity(results.len() + 2 * methods.len() * counts.len());
    let mut worst: Option<Failure> = None;
    for (cfg, r) in cells.iter().zip(&results) {
        match r {
            Ok(res) => {
                if res.unstable && worst.as_ref().is_none_or(|w| w.code() < 3) {
                    worst = Some(Failure::Instability(format!("{} seed {} was unstable", res.method, res.seed)));
                }
                rows.push(res.csv_row());
            }
            Err(e) => {
                log::error!("{} labeled={} seed={}: {e}", cfg.method, cfg.labeled_target_count, cfg.seed);
                let msg = format!("{} labeled={} seed={}: {e}", cfg.method, cfg.labeled_target_count, cfg.seed);
                let f = if matches!(e, Error::Instability(_)) { Failure::Instability(msg) } else { Failure::Other(msg) };
                if worst.as_ref().is_none_or(|w| w.code() < f.code()) {
                    worst = Some(f);
                }
                rows.push(failed_row(cfg, e));
            }
        }
    }
    for m in &methods {
        for &l in &counts {
            let ok: Vec<&ExperimentResult> = results
                .iter()
                .filter_map(|r| r.as_ref().ok())
                .filter(|r| &r.method == m && r.labeled_count == l)
                .collect();
            let template = cell_config(&base, m, l, seed_list[0])?;
            let mut mean_row = ExperimentResult::placeholder(&template);
            let mut std_row = mean_row.clone();
            if !ok.is_empty() {
                let (tm, ts) = mean_std(&ok.iter().map(|r| r.target_test_accuracy).collect::<Vec<_>>());
                let (sm, ss) = mean_std(&ok.iter().map(|r| r.source_test_accuracy).collect::<Vec<_>>());
                let (wm, ws) = mean_std(&ok.iter().map(|r| r.wallclock_s).collect::<Vec<_>>());
                (mean_row.target_test_accuracy, mean_row.source_test_accuracy, mean_row.wallclock_s) = (tm, sm, wm);
                (std_row.target_test_accuracy, std_row.source_test_accuracy, std_row.wallclock_s) = (ts, ss, ws);
            }
            for (label, r) in [("mean", mean_row), ("std", std_row)] {
                let mut row = r.csv_row();
                row[2] = label.to_string();
                *row.last_mut().expect("status column") = format!("summary n={}", ok.len());
                rows.push(row);
            }
        }
    }
    emit(a.common.out.as_deref(), &rows)?;
    match worst {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn print_json(v: &Value) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(|e| Failure::Other(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<(), Failure> {
    let mut rng = seeds::rng(a.seed, "theorems", 0);
    let report = fuzz_theorems(&mut rng, a.cases)?;
    let passes = report.passes(a.tol);
    print_json(&json!({ "tolerance": a.tol, "passes": passes, "report": report }))?;
    if passes {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!("a residual exceeded {}", a.tol)))
    }
}

fn estimate_mi(a: MiArgs) -> Result<(), Failure> {
    if !(a.rho.abs() < 1.0) {
        return Err(Failure::Config(format!("rho: must lie in (-1, 1), got {}", a.rho)));
    }
    let (x, z) = correlated_gaussians(&mut seeds::rng(a.seed, "mi_data", 0), a.samples, a.rho);
    let cfg = MineFitConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        tau: a.tau,
        optimizer: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        seed: a.seed,
        ..MineFitConfig::default()
    };
    let fit = fit_mine(&x, &z, &cfg)?;
    print_json(&json!({
        "rho": a.rho,
        "samples": a.samples,
        "estimate": fit.estimate,
        "analytic": -0.5 * (1.0 - a.rho * a.rho).ln(),
        "epoch_bounds": fit.epoch_bounds,
    }))
}

fn estimate_lautum(a: LautumArgs) -> Result<(), Failure> {
    if !(a.rho.abs() < 1.0) || a.dim == 0 {
        return Err(Failure::Config("rho must lie in (-1, 1) and dim must be positive".into()));
    }
    let d = a.dim;
    let mut cov = Matrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        cov[(i, i)] = 1.0;
        cov[(d + i, d + i)] = 1.0;
        cov[(i, d + i)] = a.rho;
        cov[(d + i, i)] = a.rho;
    }
    let cov = SymMatrix::new(cov)?;
    let samples = sample_gaussian(&mut seeds::rng(a.seed, "lautum_data", 0), &cov, a.samples)?;
    let x = samples.slice_cols(0, d);
    let w = samples.slice_cols(d, 2 * d);
    let estimate = lautum_from_samples(&x, &w)?;
    let exact = lautum_from_covariances(
        &SymMatrix::identity(d),
        &SymMatrix::identity(d).into_matrix(),
        &cov.as_matrix().slice_cols(d, 2 * d).slice_rows(0, d),
    )?;
    print_json(&json!({
        "rho": a.rho,
        "dim": d,
        "samples": a.samples,
        "estimate": estimate.value,
        "closed_form": exact.value,
        "min_eigenvalue": estimate.min_eigenvalue,
    }))
}
