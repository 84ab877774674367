//! Ground-truth multi-task linear SEM families and their samples.
//!
//! All tasks share one causal order and draw their edges from one union
//! support. Each observation row solves `x = Gᵀx + w` with
//! `w ~ N(0, diag(noise_vars))`.

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{is_consistent, Permutation};

/// Variance range for tasks that are not required to be identifiable.
pub const HETEROSCEDASTIC_RANGE: (f64, f64) = (0.5, 2.0);

/// Parameters of [`generate_family`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub p: usize,
    /// Size of the union support.
    pub s: usize,
    /// Number of tasks.
    pub k: usize,
    /// Number of leading tasks with unit (equal) noise variances.
    pub k_identifiable: usize,
    /// Edge magnitudes are uniform on `[lo, hi]` with a random sign.
    pub weight_range: (f64, f64),
    /// Probability that a task keeps each union edge.
    pub keep_prob: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            p: 4,
            s: 3,
            k: 2,
            k_identifiable: 2,
            weight_range: (0.5, 2.0),
            keep_prob: 0.9,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let max_pairs = self.p * self.p.saturating_sub(1) / 2;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.p == 0 {
            return bad("p must be positive".into());
        }
        if self.s == 0 || self.s > max_pairs {
            return bad(format!(
                "s = {} must lie in 1..={max_pairs} for p = {}",
                self.s, self.p
            ));
        }
        if self.k == 0 || self.k_identifiable == 0 || self.k_identifiable > self.k {
            return bad(format!(
                "need 0 < K' <= K, got K = {}, K' = {}",
                self.k, self.k_identifiable
            ));
        }
        let (lo, hi) = self.weight_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return bad(format!(
                "weight range [{lo}, {hi}] must satisfy 0 < lo < hi"
            ));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep_prob = {} must lie in (0, 1]", self.keep_prob));
        }
        Ok(())
    }
}

/// One task's ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SemModel {
    /// `weights[(i, j)]` is the effect of node `i` on node `j`.
    pub weights: DMatrix<f64>,
    pub noise_vars: Vec<f64>,
    pub order: Permutation,
}

impl SemModel {
    pub fn new(weights: DMatrix<f64>, noise_vars: Vec<f64>, order: Permutation) -> Result<Self> {
        let p = order.len();
        if weights.nrows() != p || weights.ncols() != p || noise_vars.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "model weights {}x{}, {} variances, order of length {p}",
                weights.nrows(),
                weights.ncols(),
                noise_vars.len()
            )));
        }
        if let Some(&v) = noise_vars.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "noise variance {v} is not positive"
            )));
        }
        if !is_consistent(&weights, &order) {
            return Err(Error::InvalidConfig(
                "weights are inconsistent with the order".into(),
            ));
        }
        Ok(Self {
            weights,
            noise_vars,
            order,
        })
    }

    pub fn p(&self) -> usize {
        self.order.len()
    }

    /// Nonzero entries as `(src, dst)` pairs in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        support(&self.weights)
    }
}

pub(crate) fn support(g: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let p = g.nrows();
    let mut out = Vec::new();
    for i in 0..p {
        for j in 0..p {
            if g[(i, j)] != 0.0 {
                out.push((i, j));
            }
        }
    }
    out
}

/// K related models sharing one order and one union support.
#[derive(Debug, Clone, PartialEq)]
pub struct SemFamily {
    pub models: Vec<SemModel>,
    pub shared_order: Permutation,
    /// Sampled union support `S_0`, sorted row-major.
    pub union_support: Vec<(usize, usize)>,
    /// Number of leading tasks with equal noise variances (`K'`).
    pub n_identifiable: usize,
}

impl SemFamily {
    pub fn p(&self) -> usize {
        self.shared_order.len()
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }

    /// Union of the per-task supports actually realized, sorted row-major.
    pub fn realized_union(&self) -> Vec<(usize, usize)> {
        let p = self.p();
        let mut any = DMatrix::<f64>::zeros(p, p);
        for m in &self.models {
            for (i, j) in m.edges() {
                any[(i, j)] = 1.0;
            }
        }
        support(&any)
    }

    pub fn truth_weights(&self) -> Vec<DMatrix<f64>> {
        self.models.iter().map(|m| m.weights.clone()).collect()
    }
}

/// Observation matrices for K tasks over the same `p` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBundle {
    data: Vec<DMatrix<f64>>,
}

impl TaskBundle {
    /// Matrix `k` is `n_k x p`; all must share `p` and have at least one row.
    pub fn new(data: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = data.first() else {
            return Err(Error::DimensionMismatch(
                "a bundle needs at least one task".into(),
            ));
        };
        let p = first.ncols();
        for (k, x) in data.iter().enumerate() {
            if x.ncols() != p {
                return Err(Error::DimensionMismatch(format!(
                    "task {k} has {} columns, task 0 has {p}",
                    x.ncols()
                )));
            }
            if x.nrows() == 0 {
                return Err(Error::DimensionMismatch(format!("task {k} has no rows")));
            }
        }
        Ok(Self { data })
    }

    pub fn p(&self) -> usize {
        self.data[0].ncols()
    }

    pub fn k(&self) -> usize {
        self.data.len()
    }

    pub fn n(&self, task: usize) -> usize {
        self.data[task].nrows()
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        self.data.iter().map(|x| x.nrows()).collect()
    }

    pub fn task(&self, k: usize) -> &DMatrix<f64> {
        &self.data[k]
    }

    pub fn tasks(&self) -> &[DMatrix<f64>] {
        &self.data
    }

    /// Scaled Gram matrices `XᵀX / n` per task.
    pub fn grams(&self) -> Vec<DMatrix<f64>> {
        self.data
            .iter()
            .map(|x| x.tr_mul(x) / x.nrows() as f64)
            .collect()
    }

    /// Same data with every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }
}

/// Draws a random family: a uniform order, a uniform union support among
/// the order-consistent pairs, and per-task Bernoulli edge retention.
pub fn generate_family(cfg: &SimConfig, seed: u64) -> Result<SemFamily> {
    cfg.validate()?;
    let p = cfg.p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut seq: Vec<usize> = (0..p).collect();
    seq.shuffle(&mut rng);
    let order = Permutation::from_sequence(&seq)?;

    // Pairs (a, b) of positions with a < b, enumerated row-major.
    let max_pairs = p * (p - 1) / 2;
    let mut union_support: Vec<(usize, usize)> = index::sample(&mut rng, max_pairs, cfg.s)
        .into_iter()
        .map(|idx| {
            let (a, b) = position_pair(p, idx);
            (seq[a], seq[b])
        })
        .collect();
    union_support.sort_unstable();

    let (lo, hi) = cfg.weight_range;
    let mut models = Vec::with_capacity(cfg.k);
    for task in 0..cfg.k {
        let mut weights = DMatrix::zeros(p, p);
        for &(i, j) in &union_support {
            if cfg.keep_prob >= 1.0 || rng.random::<f64>() < cfg.keep_prob {
                let magnitude = rng.random_range(lo..hi);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                weights[(i, j)] = sign * magnitude;
            }
        }
        let noise_vars = if task < cfg.k_identifiable {
            vec![1.0; p]
        } else {
            let (vlo, vhi) = HETEROSCEDASTIC_RANGE;
            (0..p).map(|_| rng.random_range(vlo..vhi)).collect()
        };
        models.push(SemModel::new(weights, noise_vars, order.clone())?);
    }

    Ok(SemFamily {
        models,
        shared_order: order,
        union_support,
        n_identifiable: cfg.k_identifiable,
    })
}

/// Maps a linear index in `0..p(p-1)/2` to the position pair `(a, b)`, `a < b`.
fn position_pair(p: usize, mut idx: usize) -> (usize, usize) {
    for a in 0..p {
        let row = p - 1 - a;
        if idx < row {
            return (a, a + 1 + idx);
        }
        idx -= row;
    }
    unreachable!("pair index out of range")
}

/// Independent RNG stream for task `k` under `seed`.
pub(crate) fn task_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Samples `n` rows for every task of the family by ancestral sampling.
pub fn sample_data(family: &SemFamily, n: usize, seed: u64) -> Result<TaskBundle> {
    if n == 0 {
        return Err(Error::InvalidConfig(
            "sample size n must be at least 1".into(),
        ));
    }
    let data = family
        .models
        .iter()
        .enumerate()
        .map(|(k, model)| sample_model(model, n, &mut task_rng(seed, k)))
        .collect();
    TaskBundle::new(data)
}

/// Samples `n` rows from one model.
pub fn sample_model(model: &SemModel, n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let p = model.p();
    let seq = model.order.sequence();
    let parents: Vec<Vec<(usize, f64)>> = (0..p)
        .map(|j| {
            (0..p)
                .filter(|&i| model.weights[(i, j)] != 0.0)
                .map(|i| (i, model.weights[(i, j)]))
                .collect()
        })
        .collect();
    let sd: Vec<f64> = model.noise_vars.iter().map(|v| v.sqrt()).collect();

    let mut x = DMatrix::zeros(n, p);
    let mut row = vec![0.0; p];
    for r in 0..n {
        for &j in &seq {
            let z: f64 = rng.sample(StandardNormal);
            let mean: f64 = parents[j].iter().map(|&(i, w)| w * row[i]).sum();
            row[j] = mean + sd[j] * z;
        }
        for j in 0..p {
            x[(r, j)] = row[j];
        }
    }
    x
}

/// Exact covariance `(I - G)^{-T} Ω (I - G)^{-1}` of a model.
pub fn covariance(model: &SemModel) -> DMatrix<f64> {
    let p = model.p();
    let ident = DMatrix::<f64>::identity(p, p);
    let inv = (&ident - &model.weights)
        .try_inverse()
        .expect("I - G is unit triangular up to permutation for a DAG");
    let omega = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(model.noise_vars.clone()));
    inv.transpose() * omega * inv
}
