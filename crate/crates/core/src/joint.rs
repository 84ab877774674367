//! Continuous joint estimator: K weight matrices `G_k` share one real mask
//! `T`, the effective weights are `G_k ∘ T`, and `T` is pulled towards the
//! all-ones matrix subject to the acyclicity constraint `h(T) = 0`.
//!
//! The smooth part
//!
//! ```text
//! f(G, T; β, α) = Σ_k (1/2n_k)‖X_k − X_k (G_k∘T)‖² + ρ‖1 − T‖² + β h(T) + α h(T)²
//! ```
//!
//! is minimized by gradient steps followed by the two group soft-thresholds
//! (on `G` with weight `|T_ij|`, on `T` with weight `‖G_ij‖`); the outer loop
//! runs dual ascent on `β` and grows `α` geometrically. Diagonals of `G` and
//! `T` are pinned to zero.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    acyclicity, h_value, mask_from_permutation, order_by_row_sums, permutation_from_mask,
    AcyclicityVariant, Permutation, DEFAULT_ROUND_TOL,
};
use crate::group_lasso::{
    fit_fixed_order_grams, group_norm, group_shrink, ols_refit, FixedOrderOptions, WeightStack,
};
use crate::sim::{support, TaskBundle};

/// First-order update used for the smooth part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// Plain gradient descent with step `Hyperparams::step`.
    Gradient,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Hyperparameters of [`fit_joint`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Weight of the `‖1 − T‖²` attraction.
    pub rho: f64,
    /// Group-norm weight.
    pub lambda: f64,
    /// Initial quadratic-penalty coefficient.
    pub alpha0: f64,
    /// Initial dual variable.
    pub beta0: f64,
    /// Proximal step size `t`; also the step of plain gradient descent.
    pub step: f64,
    /// Growth rate: `α ← α(1 + δ)` after each outer iteration.
    pub delta: f64,
    /// Dual step: `β ← β + τ h(T)`.
    pub tau: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub h_variant: AcyclicityVariant,
    pub tol_h: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Off-diagonal entries of the initial `T` are uniform on this range.
    pub init_range: (f64, f64),
    /// Rounding band used when reading the order off the final mask.
    pub round_tol: f64,
    /// Effective weights at or below this magnitude are dropped.
    pub edge_threshold: f64,
    /// Refit the thresholded support by least squares.
    pub refit: bool,
    /// Solver settings for the final fixed-order polish.
    pub polish: FixedOrderOptions,
    /// The loss is summed over tasks, so with many tasks it swamps the mask
    /// terms. Beyond this many tasks `rho`, `alpha0`, `beta0` and `tau` are
    /// scaled by `K / reference_tasks`; see [`Hyperparams::for_tasks`].
    pub reference_tasks: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            rho: 1.0,
            lambda: 0.05,
            alpha0: 0.1,
            beta0: 0.0,
            step: 1e-6,
            delta: 0.25,
            tau: 10.0,
            outer_iters: 30,
            inner_iters: 300,
            h_variant: AcyclicityVariant::Expm,
            tol_h: 1e-8,
            seed: 0,
            optimizer: Optimizer::default(),
            init_range: (0.1, 0.2),
            round_tol: DEFAULT_ROUND_TOL,
            edge_threshold: 0.3,
            refit: false,
            polish: FixedOrderOptions::default(),
            reference_tasks: 8,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rho", self.rho),
            ("alpha0", self.alpha0),
            ("step", self.step),
            ("tau", self.tau),
            ("tol_h", self.tol_h),
            ("delta", self.delta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} = {v} must be positive"
                )));
            }
        }
        let non_negative = [
            ("lambda", self.lambda),
            ("beta0", self.beta0),
            ("round_tol", self.round_tol),
            ("edge_threshold", self.edge_threshold),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} = {v} must be >= 0")));
            }
        }
        if self.reference_tasks == 0 {
            return Err(Error::InvalidConfig(
                "reference_tasks must be at least 1".into(),
            ));
        }
        if self.inner_iters == 0 {
            return Err(Error::InvalidConfig(
                "inner_iters must be at least 1".into(),
            ));
        }
        let (lo, hi) = self.init_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "init_range [{lo}, {hi}] is empty"
            )));
        }
        if let Optimizer::Adam { lr, .. } = self.optimizer {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "adam lr = {lr} must be positive"
                )));
            }
        }
        Ok(())
    }
}

impl Hyperparams {
    /// The settings actually used for `k` tasks: the mask-term coefficients
    /// multiplied by `max(1, k / reference_tasks)`.
    pub fn for_tasks(&self, k: usize) -> Hyperparams {
        let scale = (k as f64 / self.reference_tasks.max(1) as f64).max(1.0);
        Hyperparams {
            rho: self.rho * scale,
            alpha0: self.alpha0 * scale,
            beta0: self.beta0 * scale,
            tau: self.tau * scale,
            ..self.clone()
        }
    }
}

/// Regularization rule `λ = c · sqrt(K p ln p / n)`.
///
/// The `sqrt(K)` factor keeps the threshold above the norm of a group of
/// `K` pure-noise coefficients.
pub fn theory_lambda(c: f64, p: usize, n: usize, k: usize) -> f64 {
    let p = p as f64;
    c * (k as f64 * p * p.ln().max(0.0) / n as f64).sqrt()
}

/// State recorded at the end of each outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterDiagnostics {
    pub iteration: usize,
    /// `f + λ·group_norm(G∘T)` with the multipliers used in this iteration.
    pub objective: f64,
    pub h: f64,
    pub beta: f64,
    pub alpha: f64,
}

/// Output of [`fit_joint`].
#[derive(Debug, Clone)]
pub struct EstimationResult {
    /// Final effective weights: the fixed-order polish under `order`.
    pub weights: WeightStack,
    /// Final mask: the permutation mask of `order`, or the raw mask when no
    /// iteration ran.
    pub mask: DMatrix<f64>,
    /// Continuous mask at the end of the iterations.
    pub raw_mask: DMatrix<f64>,
    /// Continuous effective weights `G∘T` at the end of the iterations.
    pub raw_weights: WeightStack,
    pub order: Option<Permutation>,
    /// Thresholded (optionally refitted) estimate per task.
    pub per_task_adjacency: Vec<DMatrix<f64>>,
    pub diagnostics: Vec<OuterDiagnostics>,
    /// The raw mask rounded cleanly into a permutation mask with `h ≤ tol_h`.
    pub converged: bool,
    /// Why rounding failed, when it did; the order then comes from row sums.
    pub rounding_error: Option<Error>,
    /// `h` of the raw mask.
    pub raw_h: f64,
    /// Joint objective of `weights` (loss plus group penalty).
    pub objective: f64,
}

/// Cached data for evaluating `f` and its gradient.
struct SmoothProblem<'a> {
    grams: Vec<DMatrix<f64>>,
    hyper: &'a Hyperparams,
}

struct SmoothEval {
    value: f64,
    grad_g: Vec<DMatrix<f64>>,
    grad_t: DMatrix<f64>,
}

impl<'a> SmoothProblem<'a> {
    fn new(bundle: &TaskBundle, hyper: &'a Hyperparams) -> Self {
        Self {
            grams: bundle.grams(),
            hyper,
        }
    }

    /// Loss term `½ tr((I − Ḡ)ᵀ S (I − Ḡ))` summed over tasks.
    fn loss(&self, g: &[DMatrix<f64>], t: &DMatrix<f64>) -> f64 {
        let p = t.nrows();
        let ident = DMatrix::<f64>::identity(p, p);
        self.grams
            .iter()
            .zip(g)
            .map(|(s, gk)| {
                let resid = &ident - gk.component_mul(t);
                0.5 * resid.dot(&(s * &resid))
            })
            .sum()
    }

    fn mask_term(&self, t: &DMatrix<f64>) -> f64 {
        self.hyper.rho * t.iter().map(|v| (1.0 - v) * (1.0 - v)).sum::<f64>()
    }

    fn value(&self, g: &[DMatrix<f64>], t: &DMatrix<f64>, beta: f64, alpha: f64) -> Result<f64> {
        let h = h_value(t, self.hyper.h_variant)?;
        Ok(self.loss(g, t) + self.mask_term(t) + beta * h + alpha * h * h)
    }

    fn eval(
        &self,
        g: &[DMatrix<f64>],
        t: &DMatrix<f64>,
        beta: f64,
        alpha: f64,
    ) -> Result<SmoothEval> {
        let p = t.nrows();
        let acyc = acyclicity(t, self.hyper.h_variant)?;
        let h = acyc.value;
        let mut value = self.mask_term(t) + beta * h + alpha * h * h;
        let mut grad_t =
            t.map(|v| -2.0 * self.hyper.rho * (1.0 - v)) + acyc.gradient * (beta + 2.0 * alpha * h);
        let mut grad_g = Vec::with_capacity(g.len());
        let ident = DMatrix::<f64>::identity(p, p);
        for (s, gk) in self.grams.iter().zip(g) {
            let masked = gk.component_mul(t);
            // ∂loss/∂Ḡ = S Ḡ − S = −S (I − Ḡ)
            let resid = &ident - &masked;
            let d_masked = -(s * &resid);
            value -= 0.5 * resid.dot(&d_masked);
            grad_t += d_masked.component_mul(gk);
            let mut dg = d_masked.component_mul(t);
            dg.fill_diagonal(0.0);
            grad_g.push(dg);
        }
        grad_t.fill_diagonal(0.0);
        Ok(SmoothEval {
            value,
            grad_g,
            grad_t,
        })
    }
}

/// Value of the smooth objective `f` at `(G, T)`.
pub fn smooth_objective(
    g: &WeightStack,
    t: &DMatrix<f64>,
    beta: f64,
    alpha: f64,
    bundle: &TaskBundle,
    hyper: &Hyperparams,
) -> Result<f64> {
    check_shapes(g, t, bundle)?;
    SmoothProblem::new(bundle, hyper).value(g.tasks(), t, beta, alpha)
}

/// Gradients of `f` with respect to `G` and `T`; diagonal entries are zero.
pub fn gradient_f(
    g: &WeightStack,
    t: &DMatrix<f64>,
    beta: f64,
    alpha: f64,
    bundle: &TaskBundle,
    hyper: &Hyperparams,
) -> Result<(WeightStack, DMatrix<f64>)> {
    check_shapes(g, t, bundle)?;
    let e = SmoothProblem::new(bundle, hyper).eval(g.tasks(), t, beta, alpha)?;
    Ok((WeightStack::from_tasks(e.grad_g)?, e.grad_t))
}

fn check_shapes(g: &WeightStack, t: &DMatrix<f64>, bundle: &TaskBundle) -> Result<()> {
    let p = bundle.p();
    if g.k() != bundle.k() || g.p() != p || t.nrows() != p || t.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "G is {}x{p}x{p}-shaped as {}x{}x{}, T is {}x{}, bundle K = {}",
            bundle.k(),
            g.k(),
            g.p(),
            g.p(),
            t.nrows(),
            t.ncols(),
            bundle.k()
        )));
    }
    Ok(())
}

/// Per-variable first-order optimizer state.
enum Stepper {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        steps: i32,
        m: Vec<DMatrix<f64>>,
        v: Vec<DMatrix<f64>>,
    },
    Gradient {
        step: f64,
    },
}

impl Stepper {
    fn new(opt: Optimizer, step: f64, k: usize, p: usize) -> Self {
        match opt {
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => Stepper::Adam {
                lr,
                beta1,
                beta2,
                eps,
                steps: 0,
                m: vec![DMatrix::zeros(p, p); k + 1],
                v: vec![DMatrix::zeros(p, p); k + 1],
            },
            Optimizer::Gradient => Stepper::Gradient { step },
        }
    }

    /// Updates `params[i] -= step(grads[i])`; index `k` is `T`.
    fn apply(&mut self, params: &mut [&mut DMatrix<f64>], grads: &[&DMatrix<f64>]) {
        match self {
            Stepper::Gradient { step } => {
                for (x, g) in params.iter_mut().zip(grads) {
                    **x -= *g * *step;
                }
            }
            Stepper::Adam {
                lr,
                beta1,
                beta2,
                eps,
                steps,
                m,
                v,
            } => {
                *steps += 1;
                let c1 = 1.0 - beta1.powi(*steps);
                let c2 = 1.0 - beta2.powi(*steps);
                for (idx, (x, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (mi, vi) = (&mut m[idx], &mut v[idx]);
                    for ((xv, &gv), (mv, vv)) in x
                        .iter_mut()
                        .zip(g.iter())
                        .zip(mi.iter_mut().zip(vi.iter_mut()))
                    {
                        *mv = *beta1 * *mv + (1.0 - *beta1) * gv;
                        *vv = *beta2 * *vv + (1.0 - *beta2) * gv * gv;
                        *xv -= *lr * (*mv / c1) / ((*vv / c2).sqrt() + *eps);
                    }
                }
            }
        }
    }
}

/// Both proximal steps: groups of `G` shrink by `t λ |T_ij|`, then entries
/// of `T` shrink by `t λ ‖G_ij‖` using the updated `G`.
fn proximal_steps(g: &mut [DMatrix<f64>], t: &mut DMatrix<f64>, c: f64) {
    let p = t.nrows();
    for i in 0..p {
        for j in 0..p {
            if i == j {
                continue;
            }
            let norm = g
                .iter()
                .map(|gk| gk[(i, j)] * gk[(i, j)])
                .sum::<f64>()
                .sqrt();
            let scale = group_shrink(norm, c * t[(i, j)].abs());
            let norm = if scale != 1.0 {
                for gk in g.iter_mut() {
                    gk[(i, j)] *= scale;
                }
                norm * scale
            } else {
                norm
            };
            let tv = t[(i, j)];
            t[(i, j)] = tv.signum() * (tv.abs() - c * norm).max(0.0);
        }
    }
}

/// Runs the augmented-Lagrangian proximal-gradient scheme and extracts an
/// estimate.
pub fn fit_joint(bundle: &TaskBundle, hyper: &Hyperparams) -> Result<EstimationResult> {
    fit_joint_observed(bundle, hyper, |_, _, _| {})
}

/// [`fit_joint`] with a callback run at the end of every outer iteration,
/// before the multiplier update, with the diagnostics row, `G` and `T`.
pub fn fit_joint_observed<F>(
    bundle: &TaskBundle,
    hyper: &Hyperparams,
    mut observe: F,
) -> Result<EstimationResult>
where
    F: FnMut(&OuterDiagnostics, &[DMatrix<f64>], &DMatrix<f64>),
{
    hyper.validate()?;
    let p = bundle.p();
    let k = bundle.k();
    let scaled = hyper.for_tasks(k);
    let hyper = &scaled;
    let problem = SmoothProblem::new(bundle, hyper);

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let (lo, hi) = hyper.init_range;
    let mut t = DMatrix::from_fn(p, p, |i, j| {
        if i == j || lo == hi {
            if i == j {
                0.0
            } else {
                lo
            }
        } else {
            rng.random_range(lo..hi)
        }
    });
    let mut g = vec![DMatrix::<f64>::zeros(p, p); k];
    let mut beta = hyper.beta0;
    let mut alpha = hyper.alpha0;
    let mut stepper = Stepper::new(hyper.optimizer, hyper.step, k, p);
    let prox_c = hyper.step * hyper.lambda;
    let mut diagnostics = Vec::with_capacity(hyper.outer_iters);

    for outer in 0..hyper.outer_iters {
        for inner in 0..hyper.inner_iters {
            let e = problem.eval(&g, &t, beta, alpha)?;
            if !e.value.is_finite() {
                return Err(Error::NonFinite { outer, inner });
            }
            {
                let mut params: Vec<&mut DMatrix<f64>> = g.iter_mut().collect();
                params.push(&mut t);
                let mut grads: Vec<&DMatrix<f64>> = e.grad_g.iter().collect();
                grads.push(&e.grad_t);
                stepper.apply(&mut params, &grads);
            }
            for gk in g.iter_mut() {
                gk.fill_diagonal(0.0);
            }
            t.fill_diagonal(0.0);
            proximal_steps(&mut g, &mut t, prox_c);
        }
        let h = h_value(&t, hyper.h_variant)?;
        let masked: Vec<DMatrix<f64>> = g.iter().map(|gk| gk.component_mul(&t)).collect();
        let objective = problem.value(&g, &t, beta, alpha)?
            + hyper.lambda * group_norm(&WeightStack::from_tasks(masked)?);
        if !objective.is_finite() || !h.is_finite() {
            return Err(Error::NonFinite {
                outer,
                inner: hyper.inner_iters,
            });
        }
        let row = OuterDiagnostics {
            iteration: outer,
            objective,
            h,
            beta,
            alpha,
        };
        observe(&row, &g, &t);
        diagnostics.push(row);
        beta += hyper.tau * h;
        alpha *= 1.0 + hyper.delta;
    }

    let raw_h = h_value(&t, hyper.h_variant)?;
    let raw_weights = WeightStack::from_tasks(g.iter().map(|gk| gk.component_mul(&t)).collect())?;

    if hyper.outer_iters == 0 {
        let objective =
            crate::oracle::loss(bundle, &raw_weights) + hyper.lambda * group_norm(&raw_weights);
        return Ok(EstimationResult {
            weights: raw_weights.clone(),
            mask: t.clone(),
            raw_mask: t,
            raw_weights,
            order: None,
            per_task_adjacency: vec![DMatrix::zeros(p, p); k],
            diagnostics,
            converged: false,
            rounding_error: None,
            raw_h,
            objective,
        });
    }

    let (order, rounding_error) = match permutation_from_mask(&t, hyper.round_tol) {
        Ok(order) => (order, None),
        Err(e) => (order_by_row_sums(&t), Some(e)),
    };
    let mask = mask_from_permutation(&order);
    let converged = rounding_error.is_none() && h_value(&mask, hyper.h_variant)? <= hyper.tol_h;

    let polish = fit_fixed_order_grams(&problem.grams, &order, hyper.lambda, &hyper.polish)?;
    let (_, per_task_adjacency) = extract_estimate(
        &polish.weights,
        &mask,
        hyper.edge_threshold,
        bundle,
        hyper.refit,
    )?;

    Ok(EstimationResult {
        weights: polish.weights,
        mask,
        raw_mask: t,
        raw_weights,
        order: Some(order),
        per_task_adjacency,
        diagnostics,
        converged,
        rounding_error,
        raw_h,
        objective: polish.objective,
    })
}

/// Reads the order off `t` and builds per-task adjacency matrices from the
/// effective weights `g ∘ t`, restricted to the rounded mask.
///
/// Entries with magnitude at most `threshold` are dropped. With `refit`,
/// the surviving support is refitted by least squares on `bundle`.
pub fn extract_estimate(
    g: &WeightStack,
    t: &DMatrix<f64>,
    threshold: f64,
    bundle: &TaskBundle,
    refit: bool,
) -> Result<(Permutation, Vec<DMatrix<f64>>)> {
    let order = permutation_from_mask(t, DEFAULT_ROUND_TOL)?;
    let rounded = mask_from_permutation(&order);
    let effective: Vec<DMatrix<f64>> = g
        .tasks()
        .iter()
        .map(|gk| {
            gk.component_mul(t).component_mul(&rounded).map(|v| {
                if v.abs() > threshold {
                    v
                } else {
                    0.0
                }
            })
        })
        .collect();
    if !refit {
        return Ok((order, effective));
    }
    let supports: Vec<Vec<(usize, usize)>> = effective.iter().map(support).collect();
    let refitted = ols_refit(bundle, &supports)?;
    Ok((order, refitted.into_tasks()))
}
