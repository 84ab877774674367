//! Browser demo for `multidag`.
//!
//! Three operations are exported to JavaScript, each returning a JSON string:
//! `simulate_and_fit`, `acyclicity` and `theta`. The same logic is available
//! to Rust callers through [`demo_fit`], [`demo_acyclicity`] and [`demo_theta`].

use multidag::graph::{self, AcyclicityVariant};
use multidag::joint::{fit_joint_observed, theory_lambda};
use multidag::metrics::{self, structure_metrics};
use multidag::sim::{generate_family, sample_data};
use multidag::{Hyperparams, SimConfig};
use nalgebra::DMatrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct TaskView {
    /// True edges as `(from, to, weight)`.
    pub truth: Vec<(usize, usize, f64)>,
    pub estimate: Vec<(usize, usize, f64)>,
    pub shd: usize,
    pub tpr: f64,
    pub fdr: f64,
}

#[derive(Debug, Serialize)]
pub struct FitView {
    pub p: usize,
    pub true_order: Vec<usize>,
    /// Estimated order, sources first.
    pub order: Vec<usize>,
    pub order_success: bool,
    pub converged: bool,
    pub lambda: f64,
    pub theta: f64,
    pub objective: f64,
    /// `h` of the mask after each outer iteration.
    pub h_trace: Vec<f64>,
    pub tasks: Vec<TaskView>,
}

#[derive(Debug, Serialize)]
pub struct AcyclicityView {
    pub h: f64,
    /// Row-major gradient.
    pub grad: Vec<f64>,
    pub acyclic: bool,
}

#[derive(Debug, Serialize)]
pub struct ThetaView {
    pub theta: f64,
    /// Samples per task needed for θ = 1.
    pub n_at_one: f64,
}

fn edges(m: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                out.push((i, j, m[(i, j)]));
            }
        }
    }
    out
}

/// Draws a family with K tasks, samples `n` rows per task and fits it jointly
/// with `λ = c·sqrt(K p ln p / n)`.
pub fn demo_fit(
    p: usize,
    s: usize,
    k: usize,
    n: usize,
    seed: u64,
    lambda_c: f64,
) -> Result<FitView, String> {
    if p > 12 {
        return Err("p is capped at 12 in the demo".into());
    }
    let cfg = SimConfig {
        p,
        s,
        k,
        k_identifiable: k,
        ..SimConfig::default()
    };
    let family = generate_family(&cfg, seed).map_err(|e| e.to_string())?;
    let bundle = sample_data(&family, n, seed.wrapping_add(1)).map_err(|e| e.to_string())?;
    let lambda = theory_lambda(lambda_c, p, n, k);
    let hyper = Hyperparams {
        lambda,
        seed,
        ..Hyperparams::default()
    };
    let mut h_trace = Vec::new();
    let fit = fit_joint_observed(&bundle, &hyper, |d, _, _| h_trace.push(d.h))
        .map_err(|e| e.to_string())?;
    let order = fit.order.clone().ok_or("no iteration ran")?;
    let truths = family.truth_weights();
    let tasks = truths
        .iter()
        .zip(&fit.per_task_adjacency)
        .map(|(truth, est)| {
            let m = structure_metrics(est, truth);
            TaskView {
                truth: edges(truth),
                estimate: edges(est),
                shd: m.shd,
                tpr: m.tpr,
                fdr: m.fdr,
            }
        })
        .collect();
    Ok(FitView {
        p,
        true_order: family.shared_order.sequence(),
        order: order.sequence(),
        order_success: metrics::order_success(&order, &truths),
        converged: fit.converged,
        lambda,
        theta: metrics::theta(n as f64, k as f64, k as f64, p as f64, s.max(1) as f64),
        objective: fit.objective,
        h_trace,
        tasks,
    })
}

/// `h` and its gradient for a row-major `p × p` matrix.
pub fn demo_acyclicity(values: &[f64], p: usize, variant: &str) -> Result<AcyclicityView, String> {
    if values.len() != p * p {
        return Err(format!("expected {} entries, got {}", p * p, values.len()));
    }
    let variant: AcyclicityVariant = variant
        .parse()
        .map_err(|e: multidag::Error| e.to_string())?;
    let t = DMatrix::from_row_slice(p, p, values);
    let a = graph::acyclicity(&t, variant).map_err(|e| e.to_string())?;
    Ok(AcyclicityView {
        h: a.value,
        grad: a.gradient.transpose().as_slice().to_vec(),
        acyclic: graph::is_acyclic(&t),
    })
}

pub fn demo_theta(n: f64, k: f64, k_identifiable: f64, p: f64, s: f64) -> ThetaView {
    ThetaView {
        theta: metrics::theta(n, k, k_identifiable, p, s),
        n_at_one: metrics::n_for_theta(1.0, k, k_identifiable, p, s),
    }
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn simulate_and_fit(
    p: usize,
    s: usize,
    k: usize,
    n: usize,
    seed: u32,
    lambda_c: f64,
) -> Result<String, JsValue> {
    to_js(demo_fit(p, s, k, n, seed as u64, lambda_c))
}

#[wasm_bindgen]
pub fn acyclicity(values: &[f64], p: usize, variant: &str) -> Result<String, JsValue> {
    to_js(demo_acyclicity(values, p, variant))
}

#[wasm_bindgen]
pub fn theta(n: f64, k: f64, k_identifiable: f64, p: f64, s: f64) -> Result<String, JsValue> {
    to_js(Ok(demo_theta(n, k, k_identifiable, p, s)))
}
