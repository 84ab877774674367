use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use multidag::harness::{self, AggregateMode, SweepConfig};
use multidag::io::{self, Manifest};
use multidag::joint::theory_lambda;
use multidag::{AcyclicityVariant, Error, Hyperparams, SimConfig, TaskBundle};

/// Joint estimation of Gaussian DAGs that share a causal order.
#[derive(Parser)]
#[command(name = "multidag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a family of SEMs and sample data from it.
    Simulate(SimulateArgs),
    /// Estimate the DAGs from data with the continuous solver.
    Fit(FitArgs),
    /// Estimate the DAGs by exhaustive search over orders (small p only).
    Oracle(FitArgs),
    /// Score an estimate against a ground-truth family.
    Eval(EvalArgs),
    /// Run a simulate, fit, evaluate grid and write one results CSV.
    Sweep(SweepArgs),
    /// Summarize a results CSV for plotting.
    Aggregate(AggregateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON file with simulation settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Number of tasks with equal noise variances (defaults to K).
    #[arg(long)]
    kp: Option<usize>,
    #[arg(long)]
    keep_prob: Option<f64>,
    /// Edge magnitude range, as `lo,hi`.
    #[arg(long, value_parser = parse_pair)]
    weight_range: Option<(f64, f64)>,
    /// Samples per task.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Per-task data CSVs, in task order.
    #[arg(long, num_args = 1.., required_unless_present = "manifest", conflicts_with = "manifest")]
    data: Vec<PathBuf>,
    /// Manifest written by `simulate`; its data files are used.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON file with solver hyperparameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "lambda_c")]
    lambda: Option<f64>,
    /// Use lambda = c * sqrt(K p ln p / n) with the smallest task size n.
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    edge_threshold: Option<f64>,
    /// Refit the selected supports by least squares.
    #[arg(long)]
    refit: bool,
    #[arg(long, value_parser = parse_variant)]
    h: Option<AcyclicityVariant>,
    #[arg(long)]
    outer_iters: Option<usize>,
    #[arg(long)]
    inner_iters: Option<usize>,
    /// Use the exhaustive search (same as the `oracle` subcommand).
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Edge list written by `fit`.
    #[arg(long)]
    estimate: PathBuf,
    /// Order file written by `fit`.
    #[arg(long)]
    order: PathBuf,
    #[arg(long)]
    family: PathBuf,
    /// Samples per task used for the fit (enters θ).
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = f64::NAN)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Results CSV; defaults to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep finished jobs in an existing results file.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    record_runtime: bool,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    results: PathBuf,
    /// transition, heatmap or table.
    #[arg(long)]
    mode: String,
    /// Output CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo = a.trim().parse().map_err(|_| format!("bad number {a:?}"))?;
    let hi = b.trim().parse().map_err(|_| format!("bad number {b:?}"))?;
    Ok((lo, hi))
}

fn parse_variant(s: &str) -> Result<AcyclicityVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numeric() {
            3
        } else if matches!(e, Error::InvalidConfig(_)) {
            1
        } else {
            2
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn stdout_failure(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: format!("writing to stdout: {e}"),
    }
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let mut cfg: SimConfig = match &a.config {
        Some(path) => io::read_json(path)?,
        None => SimConfig::default(),
    };
    if let Some(p) = a.p {
        cfg.p = p;
    }
    if let Some(s) = a.s {
        cfg.s = s;
    }
    if let Some(k) = a.k {
        cfg.k = k;
        cfg.k_identifiable = k;
    }
    if let Some(kp) = a.kp {
        cfg.k_identifiable = kp;
    }
    if let Some(q) = a.keep_prob {
        cfg.keep_prob = q;
    }
    if let Some(w) = a.weight_range {
        cfg.weight_range = w;
    }
    if a.n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()).into());
    }
    let manifest = harness::simulate_to_dir(&cfg, a.n, a.seed, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn load_bundle(a: &FitArgs) -> Result<TaskBundle, Failure> {
    let paths: Vec<PathBuf> = match &a.manifest {
        Some(m) => {
            let manifest: Manifest = io::read_json(m)?;
            let base = m.parent().unwrap_or(Path::new("."));
            manifest.data.iter().map(|d| base.join(d)).collect()
        }
        None => a.data.clone(),
    };
    let data = paths
        .iter()
        .map(|p| io::read_data(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TaskBundle::new(data)?)
}

fn fit(a: FitArgs, oracle: bool) -> CmdResult {
    let bundle = load_bundle(&a)?;
    let mut hyper: Hyperparams = match &a.config {
        Some(path) => io::read_json(path)?,
        None => Hyperparams::default(),
    };
    if let Some(l) = a.lambda {
        hyper.lambda = l;
    }
    if let Some(c) = a.lambda_c {
        let n = bundle.sample_sizes().into_iter().min().unwrap_or(1);
        hyper.lambda = theory_lambda(c, bundle.p(), n, bundle.k());
    }
    if let Some(s) = a.seed {
        hyper.seed = s;
    }
    if let Some(w) = a.edge_threshold {
        hyper.edge_threshold = w;
    }
    if let Some(v) = a.h {
        hyper.h_variant = v;
    }
    if let Some(m) = a.outer_iters {
        hyper.outer_iters = m;
    }
    if let Some(m) = a.inner_iters {
        hyper.inner_iters = m;
    }
    hyper.refit |= a.refit;
    if hyper.outer_iters == 0 {
        return Err(Error::InvalidConfig("outer_iters must be at least 1".into()).into());
    }
    let summary =
        harness::fit_to_dir(&bundle, &hyper, oracle || a.oracle, &a.out).map_err(|e| {
            let mut f = Failure::from(e.clone());
            if matches!(e, Error::NonFinite { .. }) {
                f.message = format!(
                    "{} (step = {}, optimizer = {:?}, alpha0 = {}, tau = {})",
                    f.message, hyper.step, hyper.optimizer, hyper.alpha0, hyper.tau
                );
            }
            f
        })?;
    println!(
        "{}: objective {:.6}, converged {}, order {:?}",
        a.out.display(),
        summary.objective,
        summary.converged,
        summary.order
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let family = io::read_family(&a.family)?;
    let estimate = io::read_edges(&a.estimate, family.p(), family.k())?;
    let order = io::read_order(&a.order)?;
    let rows = harness::evaluate(&estimate, &order, &family, a.n, a.lambda, a.seed)?;
    match &a.out {
        Some(path) => harness::write_rows(path, &rows)?,
        None => harness::write_rows_to(std::io::stdout().lock(), &rows).map_err(stdout_failure)?,
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> CmdResult {
    let mut cfg: SweepConfig = io::read_json(&a.config)?;
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    cfg.record_runtime |= a.record_runtime;
    let out = a.out.or_else(|| cfg.output.clone()).ok_or_else(|| {
        Failure::from(Error::InvalidConfig(
            "no results path: pass --out or set output".into(),
        ))
    })?;
    let summary = harness::run_sweep(&cfg, &out, a.resume, |done, total| {
        if done == total || done % (total / 20).max(1) == 0 {
            eprintln!("{done}/{total} jobs");
        }
    })?;
    println!(
        "{}: {} jobs run, {} skipped, {} failed, {} rows",
        out.display(),
        summary.jobs_run,
        summary.jobs_skipped,
        summary.failed_jobs,
        summary.rows
    );
    Ok(())
}

fn aggregate(a: AggregateArgs) -> CmdResult {
    let mode: AggregateMode = a.mode.parse()?;
    let rows = harness::read_results(&a.results)?;
    let summary = harness::aggregate(&rows, mode).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", a.results.display()),
    })?;
    match &a.out {
        Some(path) => summary.write(path)?,
        None => summary
            .write_to(std::io::stdout().lock())
            .map_err(stdout_failure)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a, false),
        Command::Oracle(a) => fit(a, true),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Aggregate(a) => aggregate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
