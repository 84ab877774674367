//! Experiment plumbing: simulate-to-disk, evaluation, seeded sweeps over
//! `(p, s, K, K', n)` and aggregation of their results.
//!
//! Each sweep job (one grid cell and replicate) is seeded from a stable hash
//! of its coordinates, so results do not depend on the grid around it, on
//! the thread count or on the order in which jobs finish. The results file
//! is appended after every job and sorted once the sweep completes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Permutation;
use crate::group_lasso::ols_refit;
use crate::io::{self, Manifest};
use crate::joint::{fit_joint, theory_lambda, Hyperparams};
use crate::metrics::{n_for_theta, order_success, structure_metrics, theta, MetricsReport};
use crate::oracle::{fit_exhaustive, DEFAULT_MAX_P};
use crate::sim::{generate_family, sample_data, support, SemFamily, SimConfig, TaskBundle};

/// Environment variable holding the default worker count for sweeps.
pub const THREADS_ENV: &str = "MULTIDAG_THREADS";

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Order-sensitive hash of a few integers, stable across builds.
pub fn stable_hash(values: &[u64]) -> u64 {
    values
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |h, &v| splitmix(h ^ splitmix(v)))
}

/// Seed of the data stream that goes with a family drawn from `seed`.
pub fn data_seed(seed: u64) -> u64 {
    splitmix(seed ^ 0xDA7A)
}

/// How the group-norm weight is chosen for each cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum LambdaRule {
    Fixed {
        value: f64,
    },
    /// `c·sqrt(K·p·ln p / n)`, see [`theory_lambda`].
    Theory {
        c: f64,
    },
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::Theory { c: 0.1 }
    }
}

impl LambdaRule {
    pub fn lambda(&self, p: usize, n: usize, k: usize) -> f64 {
        match *self {
            LambdaRule::Fixed { value } => value,
            LambdaRule::Theory { c } => theory_lambda(c, p, n, k),
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            LambdaRule::Fixed { value } => value,
            LambdaRule::Theory { c } => c,
        };
        if v >= 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "lambda rule parameter {v} must be finite and >= 0"
            )))
        }
    }
}

/// Grid, replicate and estimator settings of a sweep.
///
/// `s` and `s_per_p` are alternatives (the latter gives `s = round(c·p)`),
/// as are `n` and `log_theta` (the latter picks the `n` that puts θ at the
/// target, at least 1). `kp` defaults to `K` in every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub p: Vec<usize>,
    pub s: Vec<usize>,
    pub s_per_p: Vec<f64>,
    pub k: Vec<usize>,
    pub kp: Option<Vec<usize>>,
    pub n: Vec<usize>,
    pub log_theta: Vec<f64>,
    pub replicates: usize,
    pub base_seed: u64,
    pub weight_range: (f64, f64),
    pub keep_prob: f64,
    pub lambda: LambdaRule,
    pub hyper: Hyperparams,
    /// Use the exhaustive estimator instead of the continuous solver.
    pub oracle: bool,
    pub output: Option<PathBuf>,
    /// Worker count; falls back to the environment, then to all cores.
    pub threads: Option<usize>,
    /// Wall times make the results file non-reproducible, so they are opt-in.
    pub record_runtime: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            p: vec![16],
            s: vec![16],
            s_per_p: Vec::new(),
            k: vec![1],
            kp: None,
            n: vec![100],
            log_theta: Vec::new(),
            replicates: 64,
            base_seed: 0,
            weight_range: sim.weight_range,
            keep_prob: sim.keep_prob,
            lambda: LambdaRule::default(),
            hyper: Hyperparams::default(),
            oracle: false,
            output: None,
            threads: None,
            record_runtime: false,
        }
    }
}

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub p: usize,
    pub s: usize,
    pub k: usize,
    pub kp: usize,
    pub n: usize,
}

impl Cell {
    pub fn seed(&self, base: u64, replicate: usize) -> u64 {
        let h = stable_hash(&[
            self.p as u64,
            self.s as u64,
            self.k as u64,
            self.kp as u64,
            self.n as u64,
            replicate as u64,
        ]);
        base ^ h
    }

    pub fn theta(&self) -> f64 {
        theta(
            self.n as f64,
            self.k as f64,
            self.kp as f64,
            self.p as f64,
            self.s as f64,
        )
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if self.p.is_empty() || self.k.is_empty() {
            return bad("the p and k grids must be non-empty");
        }
        if self.s.is_empty() == self.s_per_p.is_empty() {
            return bad("set exactly one of s and s_per_p");
        }
        if self.n.is_empty() == self.log_theta.is_empty() {
            return bad("set exactly one of n and log_theta");
        }
        if self.kp.as_ref().is_some_and(|v| v.is_empty()) {
            return bad("the kp grid must be non-empty when given");
        }
        if self.n.contains(&0) {
            return bad("n must be at least 1");
        }
        if self.log_theta.iter().any(|v| !v.is_finite()) || self.s_per_p.iter().any(|v| !(*v > 0.0))
        {
            return bad("log_theta must be finite and s_per_p positive");
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1");
        }
        self.lambda.validate()?;
        self.hyper.validate()?;
        for cell in self.cells() {
            self.sim_config(&cell).validate()?;
        }
        Ok(())
    }

    /// Cells in canonical order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = BTreeSet::new();
        for &p in &self.p {
            let s_values: Vec<usize> = if self.s.is_empty() {
                self.s_per_p
                    .iter()
                    .map(|c| (c * p as f64).round() as usize)
                    .collect()
            } else {
                self.s.clone()
            };
            for &s in &s_values {
                for &k in &self.k {
                    let kps = self.kp.clone().unwrap_or_else(|| vec![k]);
                    for &kp in &kps {
                        let ns: Vec<usize> = if self.n.is_empty() {
                            self.log_theta
                                .iter()
                                .map(|lt| {
                                    let n = n_for_theta(
                                        lt.exp(),
                                        k as f64,
                                        kp as f64,
                                        p as f64,
                                        s as f64,
                                    );
                                    (n.round() as usize).max(1)
                                })
                                .collect()
                        } else {
                            self.n.clone()
                        };
                        for &n in &ns {
                            out.insert(Cell { p, s, k, kp, n });
                        }
                    }
                }
            }
        }
        out.into_iter().collect()
    }

    pub fn sim_config(&self, cell: &Cell) -> SimConfig {
        SimConfig {
            p: cell.p,
            s: cell.s,
            k: cell.k,
            k_identifiable: cell.kp,
            weight_range: self.weight_range,
            keep_prob: self.keep_prob,
        }
    }

    fn thread_count(&self) -> usize {
        self.threads
            .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
            .filter(|&t| t > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

/// One row of a sweep results file: a task of one replicate of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub p: usize,
    pub s: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "Kp")]
    pub kp: usize,
    pub n: usize,
    pub replicate: usize,
    pub task: usize,
    pub seed: u64,
    pub theta: f64,
    pub lambda: f64,
    pub order_success: Option<bool>,
    pub fdr: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub shd: Option<usize>,
    pub nnz: Option<usize>,
    pub frob_err: Option<f64>,
    pub converged: Option<bool>,
    pub runtime_s: Option<f64>,
    pub status: String,
}

impl ResultRow {
    fn key(&self) -> (Cell, usize, usize) {
        (self.cell(), self.replicate, self.task)
    }

    pub fn cell(&self) -> Cell {
        Cell {
            p: self.p,
            s: self.s,
            k: self.k,
            kp: self.kp,
            n: self.n,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// An order and per-task adjacency matrices from either estimator.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub order: Permutation,
    pub adjacency: Vec<DMatrix<f64>>,
    pub objective: f64,
    pub converged: bool,
}

/// Exhaustive estimate, thresholded and optionally refitted like the
/// continuous one.
pub fn oracle_estimate(bundle: &TaskBundle, lambda: f64, hyper: &Hyperparams) -> Result<Estimate> {
    let fit = fit_exhaustive(bundle, lambda, DEFAULT_MAX_P, &hyper.polish)?;
    let thresholded: Vec<DMatrix<f64>> = fit
        .weights
        .tasks()
        .iter()
        .map(|g| {
            g.map(|v| {
                if v.abs() > hyper.edge_threshold {
                    v
                } else {
                    0.0
                }
            })
        })
        .collect();
    let adjacency = if hyper.refit {
        let supports: Vec<_> = thresholded.iter().map(support).collect();
        ols_refit(bundle, &supports)?.into_tasks()
    } else {
        thresholded
    };
    Ok(Estimate {
        order: fit.order,
        adjacency,
        objective: fit.objective,
        converged: true,
    })
}

pub fn joint_estimate(bundle: &TaskBundle, hyper: &Hyperparams) -> Result<Estimate> {
    let r = fit_joint(bundle, hyper)?;
    Ok(Estimate {
        order: r.order.expect("fit_joint ran at least one outer iteration"),
        adjacency: r.per_task_adjacency,
        objective: r.objective,
        converged: r.converged,
    })
}

/// Scores an estimate against the family: one row per task, then a row of
/// column means with `task` unset.
pub fn evaluate(
    adjacency: &[DMatrix<f64>],
    order: &Permutation,
    family: &SemFamily,
    n: usize,
    lambda: f64,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    let truths = family.truth_weights();
    if adjacency.len() != truths.len()
        || adjacency
            .iter()
            .any(|a| a.shape() != (family.p(), family.p()))
    {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {} tasks, truth has {} tasks of p = {}",
            adjacency.len(),
            truths.len(),
            family.p()
        )));
    }
    if order.len() != family.p() {
        return Err(Error::DimensionMismatch(format!(
            "order has {} nodes, truth has p = {}",
            order.len(),
            family.p()
        )));
    }
    let success = order_success(order, &truths);
    let (p, k, kp) = (family.p(), family.k(), family.n_identifiable);
    let s = family.union_support.len();
    let th = theta(n as f64, k as f64, kp as f64, p as f64, s as f64);
    let mut rows: Vec<MetricsReport> = adjacency
        .iter()
        .zip(&truths)
        .enumerate()
        .map(|(task, (est, truth))| {
            let m = structure_metrics(est, truth);
            MetricsReport {
                task: Some(task),
                fdr: m.fdr,
                tpr: m.tpr,
                fpr: m.fpr,
                shd: m.shd as f64,
                nnz: m.nnz as f64,
                order_success: success,
                frob_err: (est - truth).norm_squared(),
                theta: th,
                p,
                s,
                k,
                k_identifiable: kp,
                n,
                lambda,
                seed,
            }
        })
        .collect();
    let mean = |f: fn(&MetricsReport) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let aggregate = MetricsReport {
        task: None,
        fdr: mean(|r| r.fdr),
        tpr: mean(|r| r.tpr),
        fpr: mean(|r| r.fpr),
        shd: mean(|r| r.shd),
        nnz: mean(|r| r.nnz),
        frob_err: mean(|r| r.frob_err),
        ..rows[0].clone()
    };
    rows.push(aggregate);
    Ok(rows)
}

/// Run summary written next to a fit's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: Vec<usize>,
    pub lambda: f64,
    pub objective: f64,
    /// Acyclicity of the continuous mask; absent for the exhaustive search.
    pub h: Option<f64>,
    pub converged: bool,
    pub rounding_error: Option<String>,
    pub order: Vec<usize>,
    pub wall_time_s: f64,
}

/// Fits `bundle` and writes `edges.csv`, `order.csv`, `diagnostics.csv`
/// (continuous solver only) and `summary.json` under `dir`.
pub fn fit_to_dir(
    bundle: &TaskBundle,
    hyper: &Hyperparams,
    use_oracle: bool,
    dir: &Path,
) -> Result<RunSummary> {
    let start = Instant::now();
    let (est, h, rounding_error, diagnostics) = if use_oracle {
        (
            oracle_estimate(bundle, hyper.lambda, hyper)?,
            None,
            None,
            None,
        )
    } else {
        let r = fit_joint(bundle, hyper)?;
        let est = Estimate {
            order: r
                .order
                .clone()
                .expect("fit_joint ran at least one outer iteration"),
            adjacency: r.per_task_adjacency.clone(),
            objective: r.objective,
            converged: r.converged,
        };
        (
            est,
            Some(r.raw_h),
            r.rounding_error.map(|e| e.to_string()),
            Some(r.diagnostics),
        )
    };
    let wall = start.elapsed().as_secs_f64();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_edges(&dir.join("edges.csv"), &est.adjacency)?;
    io::write_order(&dir.join("order.csv"), &est.order)?;
    if let Some(d) = diagnostics {
        io::write_diagnostics(&dir.join("diagnostics.csv"), &d)?;
    }
    let summary = RunSummary {
        method: if use_oracle {
            "exhaustive"
        } else {
            "continuous"
        }
        .into(),
        p: bundle.p(),
        k: bundle.k(),
        n: bundle.sample_sizes(),
        lambda: hyper.lambda,
        objective: est.objective,
        h,
        converged: est.converged,
        rounding_error,
        order: est.order.sequence(),
        wall_time_s: wall,
    };
    io::write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Draws a family and its data and writes `family.json`, one
/// `task_<k>.csv` per task and `manifest.json` under `dir`.
pub fn simulate_to_dir(cfg: &SimConfig, n: usize, seed: u64, dir: &Path) -> Result<PathBuf> {
    let family = generate_family(cfg, seed)?;
    let bundle = sample_data(&family, n, data_seed(seed))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_family(
        &dir.join("family.json"),
        &family,
        Some(cfg.clone()),
        Some(seed),
    )?;
    let mut data = Vec::new();
    for (k, x) in bundle.tasks().iter().enumerate() {
        let name = PathBuf::from(format!("task_{k}.csv"));
        io::write_data(&dir.join(&name), x)?;
        data.push(name);
    }
    let manifest = Manifest {
        family: "family.json".into(),
        data,
        n,
        seed,
    };
    let path = dir.join("manifest.json");
    io::write_json(&path, &manifest)?;
    Ok(path)
}

fn run_job(cfg: &SweepConfig, cell: Cell, replicate: usize) -> Vec<ResultRow> {
    let seed = cell.seed(cfg.base_seed, replicate);
    let lambda = cfg.lambda.lambda(cell.p, cell.n, cell.k);
    let start = Instant::now();
    let outcome = (|| -> Result<(Estimate, SemFamily)> {
        let family = generate_family(&cfg.sim_config(&cell), seed)?;
        let bundle = sample_data(&family, cell.n, data_seed(seed))?;
        let hyper = Hyperparams {
            lambda,
            seed,
            ..cfg.hyper.clone()
        };
        let est = if cfg.oracle {
            oracle_estimate(&bundle, lambda, &hyper)?
        } else {
            joint_estimate(&bundle, &hyper)?
        };
        Ok((est, family))
    })();
    let runtime = cfg.record_runtime.then(|| start.elapsed().as_secs_f64());
    let blank = |task: usize, status: String| ResultRow {
        p: cell.p,
        s: cell.s,
        k: cell.k,
        kp: cell.kp,
        n: cell.n,
        replicate,
        task,
        seed,
        theta: cell.theta(),
        lambda,
        order_success: None,
        fdr: None,
        tpr: None,
        fpr: None,
        shd: None,
        nnz: None,
        frob_err: None,
        converged: None,
        runtime_s: runtime,
        status,
    };
    match outcome {
        Ok((est, family)) => {
            let truths = family.truth_weights();
            let success = order_success(&est.order, &truths);
            est.adjacency
                .iter()
                .zip(&truths)
                .enumerate()
                .map(|(task, (a, t))| {
                    let m = structure_metrics(a, t);
                    ResultRow {
                        order_success: Some(success),
                        fdr: Some(m.fdr),
                        tpr: Some(m.tpr),
                        fpr: Some(m.fpr),
                        shd: Some(m.shd),
                        nnz: Some(m.nnz),
                        frob_err: Some((a - t).norm_squared()),
                        converged: Some(est.converged),
                        ..blank(task, "ok".into())
                    }
                })
                .collect()
        }
        Err(e) => {
            let status = format!("error: {e}").replace(['\n', '\r'], " ");
            (0..cell.k)
                .map(|task| blank(task, status.clone()))
                .collect()
        }
    }
}

/// Header line of a results file.
pub fn results_header() -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record([
        "p",
        "s",
        "K",
        "Kp",
        "n",
        "replicate",
        "task",
        "seed",
        "theta",
        "lambda",
        "order_success",
        "fdr",
        "tpr",
        "fpr",
        "shd",
        "nnz",
        "frob_err",
        "converged",
        "runtime_s",
        "status",
    ])
    .expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii header")
}

fn row_lines(rows: &[ResultRow]) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 rows")
}

/// Reads a results file, ignoring a trailing line cut short by a crash.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(path, &text)
}

fn parse_results(path: &Path, text: &str) -> Result<Vec<ResultRow>> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    if complete.is_empty() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_reader(complete.as_bytes());
    let header = r.headers().map_err(|e| Error::io(path, e))?;
    let expected = results_header();
    let found = header.iter().collect::<Vec<_>>().join(",");
    if found != expected.trim_end() {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("unexpected results header {found:?}"),
        });
    }
    r.deserialize()
        .map(|row| row.map_err(|e| io_csv_err(path, e)))
        .collect()
}

fn io_csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.into(),
        line: e.position().map_or(0, |p| p.line()),
        msg: e.to_string(),
    }
}

/// Writes serializable rows as CSV with a header.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows_to(file, rows).map_err(|e| Error::io(path, e))
}

/// [`write_rows`] into any writer, e.g. standard output.
pub fn write_rows_to<W: Write, T: Serialize>(
    out: W,
    rows: &[T],
) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_sorted(path: &Path, mut rows: Vec<ResultRow>) -> Result<()> {
    rows.sort_by_key(ResultRow::key);
    let tmp = path.with_extension("csv.tmp");
    let mut text = results_header();
    text.push_str(&row_lines(&rows));
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// What a sweep did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepSummary {
    pub jobs_run: usize,
    pub jobs_skipped: usize,
    pub failed_jobs: usize,
    pub rows: usize,
}

/// Runs every (cell, replicate) job not already in `results`.
///
/// Without `resume` an existing file is replaced. With it, jobs that
/// already have all their rows are skipped. `progress` is called after
/// each finished job with the number done and the number scheduled.
pub fn run_sweep(
    cfg: &SweepConfig,
    results: &Path,
    resume: bool,
    mut progress: impl FnMut(usize, usize),
) -> Result<SweepSummary> {
    cfg.validate()?;
    if let Some(dir) = results.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let existing = if resume && results.exists() {
        read_results(results)?
    } else {
        Vec::new()
    };
    let mut per_job: BTreeMap<(Cell, usize), usize> = BTreeMap::new();
    for r in &existing {
        *per_job.entry((r.cell(), r.replicate)).or_default() += 1;
    }
    let done: BTreeSet<(Cell, usize)> = per_job
        .into_iter()
        .filter(|((cell, _), count)| *count == cell.k)
        .map(|(key, _)| key)
        .collect();
    // Rows of partially written jobs are dropped and the job rerun.
    let kept: Vec<ResultRow> = existing
        .into_iter()
        .filter(|r| done.contains(&(r.cell(), r.replicate)))
        .collect();
    write_sorted(results, kept)?;

    let jobs: Vec<(Cell, usize)> = cfg
        .cells()
        .into_iter()
        .flat_map(|c| (0..cfg.replicates).map(move |r| (c, r)))
        .filter(|job| !done.contains(job))
        .collect();
    let skipped = cfg.cells().len() * cfg.replicates - jobs.len();

    let mut file = fs::OpenOptions::new()
        .append(true)
        .open(results)
        .map_err(|e| Error::io(results, e))?;
    let total = jobs.len();
    let threads = cfg.thread_count();
    let (tx, rx) = mpsc::channel::<Vec<ResultRow>>();
    let mut failed = 0;
    std::thread::scope(|scope| -> Result<()> {
        let jobs = &jobs;
        scope.spawn(move || dispatch(cfg, jobs, threads, tx));
        for (finished, rows) in rx.into_iter().enumerate() {
            failed += rows.first().is_some_and(|r| !r.is_ok()) as usize;
            file.write_all(row_lines(&rows).as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| Error::io(results, e))?;
            progress(finished + 1, total);
        }
        Ok(())
    })?;
    drop(file);

    let all = read_results(results)?;
    let rows = all.len();
    write_sorted(results, all)?;
    Ok(SweepSummary {
        jobs_run: total,
        jobs_skipped: skipped,
        failed_jobs: failed,
        rows,
    })
}

#[cfg(feature = "parallel")]
fn dispatch(
    cfg: &SweepConfig,
    jobs: &[(Cell, usize)],
    threads: usize,
    tx: mpsc::Sender<Vec<ResultRow>>,
) {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(|| {
        jobs.par_iter().for_each_with(tx, |tx, &(cell, rep)| {
            let _ = tx.send(run_job(cfg, cell, rep));
        })
    });
}

#[cfg(not(feature = "parallel"))]
fn dispatch(
    cfg: &SweepConfig,
    jobs: &[(Cell, usize)],
    _threads: usize,
    tx: mpsc::Sender<Vec<ResultRow>>,
) {
    for &(cell, rep) in jobs {
        let _ = tx.send(run_job(cfg, cell, rep));
    }
}

/// Summary layouts produced from a results file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateMode {
    /// Success probability against binned `log θ`, per `p`.
    Transition,
    /// Success probability over the `n x K` grid, per `(p, s)`.
    Heatmap,
    /// Mean and standard deviation of per-task SHD, per `(p, n, K)`.
    Table,
}

impl FromStr for AggregateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transition" => Ok(AggregateMode::Transition),
            "heatmap" => Ok(AggregateMode::Heatmap),
            "table" => Ok(AggregateMode::Table),
            other => Err(Error::InvalidConfig(format!(
                "unknown aggregate mode {other:?} (expected transition, heatmap or table)"
            ))),
        }
    }
}

pub const LOG_THETA_BIN: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub log_theta_bin: f64,
    pub p: usize,
    pub success_prob: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub p: usize,
    pub s: usize,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub success_prob: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub p: usize,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub shd_mean: f64,
    pub shd_std: f64,
    pub count: usize,
}

/// Aggregated output of one mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregate {
    Transition(Vec<TransitionRow>),
    Heatmap(Vec<HeatmapRow>),
    Table(Vec<TableRow>),
}

impl Aggregate {
    pub fn write(&self, path: &Path) -> Result<()> {
        match self {
            Aggregate::Transition(r) => write_rows(path, r),
            Aggregate::Heatmap(r) => write_rows(path, r),
            Aggregate::Table(r) => write_rows(path, r),
        }
    }

    pub fn write_to<W: Write>(&self, out: W) -> std::result::Result<(), csv::Error> {
        match self {
            Aggregate::Transition(r) => write_rows_to(out, r),
            Aggregate::Heatmap(r) => write_rows_to(out, r),
            Aggregate::Table(r) => write_rows_to(out, r),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Aggregate::Transition(r) => r.len(),
            Aggregate::Heatmap(r) => r.len(),
            Aggregate::Table(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One success flag per finished (cell, replicate).
fn replicate_successes(rows: &[ResultRow]) -> BTreeMap<(Cell, usize), bool> {
    rows.iter()
        .filter(|r| r.is_ok())
        .filter_map(|r| r.order_success.map(|s| ((r.cell(), r.replicate), s)))
        .collect()
}

fn rate(v: &[bool]) -> f64 {
    v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
}

/// Groups the successful rows of a results file. Failed jobs are left out.
pub fn aggregate(rows: &[ResultRow], mode: AggregateMode) -> Result<Aggregate> {
    if !rows.iter().any(ResultRow::is_ok) {
        return Err(Error::InvalidConfig(
            "no successful rows to aggregate".into(),
        ));
    }
    Ok(match mode {
        AggregateMode::Transition => {
            let mut groups: BTreeMap<(i64, usize), Vec<bool>> = BTreeMap::new();
            for ((cell, _), ok) in replicate_successes(rows) {
                let bin = (cell.theta().ln() / LOG_THETA_BIN).round() as i64;
                groups.entry((bin, cell.p)).or_default().push(ok);
            }
            Aggregate::Transition(
                groups
                    .into_iter()
                    .map(|((bin, p), v)| TransitionRow {
                        log_theta_bin: bin as f64 * LOG_THETA_BIN,
                        p,
                        success_prob: rate(&v),
                        count: v.len(),
                    })
                    .collect(),
            )
        }
        AggregateMode::Heatmap => {
            let mut groups: BTreeMap<(usize, usize, usize, usize), Vec<bool>> = BTreeMap::new();
            for ((cell, _), ok) in replicate_successes(rows) {
                groups
                    .entry((cell.p, cell.s, cell.n, cell.k))
                    .or_default()
                    .push(ok);
            }
            Aggregate::Heatmap(
                groups
                    .into_iter()
                    .map(|((p, s, n, k), v)| HeatmapRow {
                        p,
                        s,
                        n,
                        k,
                        success_prob: rate(&v),
                        count: v.len(),
                    })
                    .collect(),
            )
        }
        AggregateMode::Table => {
            let mut groups: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
            for r in rows.iter().filter(|r| r.is_ok()) {
                if let Some(shd) = r.shd {
                    groups.entry((r.p, r.n, r.k)).or_default().push(shd as f64);
                }
            }
            Aggregate::Table(
                groups
                    .into_iter()
                    .map(|((p, n, k), v)| {
                        let m = v.len() as f64;
                        let mean = v.iter().sum::<f64>() / m;
                        let var = if v.len() > 1 {
                            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)
                        } else {
                            0.0
                        };
                        TableRow {
                            p,
                            n,
                            k,
                            shd_mean: mean,
                            shd_std: var.sqrt(),
                            count: v.len(),
                        }
                    })
                    .collect(),
            )
        }
    })
}

/// Reads a CSV written by [`write_rows`].
pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| io_csv_err(path, e)))
        .collect()
}
