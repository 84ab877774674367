//! The l1/l2 group norm across tasks, its proximal operator, the
//! fixed-order multi-task group Lasso and unpenalized refitting.
//!
//! With the order fixed, the joint objective
//! `Σ_k (1/2n_k)‖X_k − X_k G_k‖² + λ Σ_ij ‖G_ij‖₂` separates into one group
//! Lasso per column `j`, whose predictors are the nodes ranked before `j`.
//! Every solver here works on the scaled Gram matrices `S_k = X_kᵀX_k / n_k`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{first_violation, Permutation};
use crate::sim::TaskBundle;

/// K stacked `p x p` weight matrices; group `(i, j)` is the K-vector of
/// entry `(i, j)` across tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStack {
    tasks: Vec<DMatrix<f64>>,
}

impl WeightStack {
    pub fn zeros(k: usize, p: usize) -> Self {
        Self {
            tasks: vec![DMatrix::zeros(p, p); k],
        }
    }

    pub fn from_tasks(tasks: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = tasks.first() else {
            return Err(Error::DimensionMismatch(
                "a weight stack needs at least one task".into(),
            ));
        };
        let p = first.nrows();
        for (k, g) in tasks.iter().enumerate() {
            if g.nrows() != p || g.ncols() != p {
                return Err(Error::DimensionMismatch(format!(
                    "task {k} weights are {}x{}, expected {p}x{p}",
                    g.nrows(),
                    g.ncols()
                )));
            }
        }
        Ok(Self { tasks })
    }

    pub fn k(&self) -> usize {
        self.tasks.len()
    }

    pub fn p(&self) -> usize {
        self.tasks[0].nrows()
    }

    pub fn task(&self, k: usize) -> &DMatrix<f64> {
        &self.tasks[k]
    }

    pub fn task_mut(&mut self, k: usize) -> &mut DMatrix<f64> {
        &mut self.tasks[k]
    }

    pub fn tasks(&self) -> &[DMatrix<f64>] {
        &self.tasks
    }

    pub fn into_tasks(self) -> Vec<DMatrix<f64>> {
        self.tasks
    }

    /// Euclidean norm of group `(i, j)`.
    pub fn group_norm_at(&self, i: usize, j: usize) -> f64 {
        self.tasks
            .iter()
            .map(|g| g[(i, j)] * g[(i, j)])
            .sum::<f64>()
            .sqrt()
    }

    /// Matrix of group norms.
    pub fn group_norms(&self) -> DMatrix<f64> {
        let p = self.p();
        DMatrix::from_fn(p, p, |i, j| self.group_norm_at(i, j))
    }

    /// Elementwise product of every task with `mask`.
    pub fn masked(&self, mask: &DMatrix<f64>) -> Self {
        Self {
            tasks: self.tasks.iter().map(|g| g.component_mul(mask)).collect(),
        }
    }

    /// Sets every diagonal entry to zero.
    pub fn zero_diagonal(&mut self) {
        for g in &mut self.tasks {
            g.fill_diagonal(0.0);
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.tasks.iter().map(|g| g.norm_squared()).sum()
    }
}

/// `Σ_ij ‖G_ij‖₂`; for a single task this is the entrywise l1 norm.
pub fn group_norm(stack: &WeightStack) -> f64 {
    let p = stack.p();
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..p {
            total += stack.group_norm_at(i, j);
        }
    }
    total
}

/// Group-wise soft threshold: each group is scaled by `max(0, 1 - c/‖v‖)`.
pub fn prox_group(stack: &WeightStack, c: f64) -> WeightStack {
    assert!(c >= 0.0, "prox threshold must be non-negative");
    let p = stack.p();
    let mut out = stack.clone();
    for i in 0..p {
        for j in 0..p {
            let norm = stack.group_norm_at(i, j);
            let scale = group_shrink(norm, c);
            if scale != 1.0 {
                for g in &mut out.tasks {
                    g[(i, j)] *= scale;
                }
            }
        }
    }
    out
}

/// Multiplier applied to a group of norm `norm` by a soft threshold at `c`.
#[inline]
pub(crate) fn group_shrink(norm: f64, c: f64) -> f64 {
    if norm <= c || norm == 0.0 {
        0.0
    } else {
        1.0 - c / norm
    }
}

/// Options for [`fit_fixed_order`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedOrderOptions {
    /// Stop when the relative objective decrease falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Power iterations used to estimate each Gram's spectral norm.
    pub power_iters: usize,
    /// Required sup-norm of the proximal gradient mapping at termination.
    pub gradient_map_tol: f64,
}

impl Default for FixedOrderOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 5000,
            power_iters: 20,
            gradient_map_tol: 1e-7,
        }
    }
}

/// Result of a fixed-order fit.
#[derive(Debug, Clone)]
pub struct FixedOrderFit {
    pub weights: WeightStack,
    /// `Σ_k (1/2n_k)‖X_k − X_k G_k‖² + λ·group_norm(G)`.
    pub objective: f64,
    /// Largest iteration count over the column subproblems.
    pub iterations: usize,
    /// All column subproblems met the stopping rule before `max_iter`.
    pub converged: bool,
}

/// Solution of a single column subproblem.
#[derive(Debug, Clone)]
pub struct ColumnFit {
    /// `parents.len() x K`; column `k` holds task `k`'s coefficients.
    pub coef: DMatrix<f64>,
    /// Column loss plus column penalty.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Restricted quadratic data for one column: `A_k = S_k[P,P]`,
/// `b_k = S_k[P,j]`, `c_k = S_k[j,j] / 2`.
struct ColumnProblem {
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    c: f64,
}

impl ColumnProblem {
    fn new(grams: &[DMatrix<f64>], j: usize, parents: &[usize]) -> Self {
        let m = parents.len();
        let a = grams
            .iter()
            .map(|s| DMatrix::from_fn(m, m, |r, c| s[(parents[r], parents[c])]))
            .collect();
        let b = grams
            .iter()
            .map(|s| DVector::from_fn(m, |r, _| s[(parents[r], j)]))
            .collect();
        let c = grams.iter().map(|s| 0.5 * s[(j, j)]).sum();
        Self { a, b, c }
    }

    fn k(&self) -> usize {
        self.a.len()
    }

    /// Smooth value and gradient at `x` (`m x K`).
    fn smooth(&self, x: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let mut grad = DMatrix::zeros(x.nrows(), x.ncols());
        let mut value = self.c;
        for k in 0..self.k() {
            let xk = x.column(k);
            let ax = &self.a[k] * xk;
            value += 0.5 * xk.dot(&ax) - self.b[k].dot(&xk);
            grad.set_column(k, &(ax - &self.b[k]));
        }
        (value, grad)
    }

    fn smooth_value(&self, x: &DMatrix<f64>) -> f64 {
        let mut value = self.c;
        for k in 0..self.k() {
            let xk = x.column(k);
            value += 0.5 * xk.dot(&(&self.a[k] * xk)) - self.b[k].dot(&xk);
        }
        value
    }

    fn lipschitz_estimate(&self, iters: usize) -> f64 {
        let m = self.a.first().map_or(0, |a| a.nrows());
        if m == 0 {
            return 1.0;
        }
        let mut best = 0.0f64;
        for a in &self.a {
            let mut v = DVector::from_element(m, 1.0 / (m as f64).sqrt());
            let mut est = 0.0;
            for _ in 0..iters.max(1) {
                let w = a * &v;
                let norm = w.norm();
                if norm == 0.0 {
                    break;
                }
                est = v.dot(&w);
                v = w / norm;
            }
            best = best.max(est);
        }
        if best > 0.0 {
            best
        } else {
            1.0
        }
    }
}

fn row_penalty(x: &DMatrix<f64>) -> f64 {
    x.row_iter().map(|r| r.norm()).sum()
}

fn prox_rows(v: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    let mut out = v.clone();
    for mut row in out.row_iter_mut() {
        let scale = group_shrink(row.norm(), c);
        row *= scale;
    }
    out
}

/// Accelerated proximal gradient with function-value restart and
/// backtracking on the Lipschitz estimate.
fn solve_column_problem(
    prob: &ColumnProblem,
    m: usize,
    lambda: f64,
    opts: &FixedOrderOptions,
) -> ColumnFit {
    let k = prob.k();
    if m == 0 {
        return ColumnFit {
            coef: DMatrix::zeros(0, k),
            objective: prob.c,
            iterations: 0,
            converged: true,
        };
    }
    let mut lip = prob.lipschitz_estimate(opts.power_iters);
    let mut x = DMatrix::<f64>::zeros(m, k);
    let mut y = x.clone();
    let mut momentum = 1.0f64;
    let mut obj = prob.smooth_value(&x);
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iter {
        iterations = it;
        let (f_y, grad) = prob.smooth(&y);
        let (x_new, f_new) = loop {
            let cand = prox_rows(&(&y - &grad / lip), lambda / lip);
            let diff = &cand - &y;
            let f_cand = prob.smooth_value(&cand);
            let bound = f_y + grad.dot(&diff) + 0.5 * lip * diff.norm_squared();
            if f_cand <= bound + 1e-12 * bound.abs().max(1.0) {
                break (cand, f_cand);
            }
            lip *= 2.0;
        };
        let obj_new = f_new + lambda * row_penalty(&x_new);
        let grad_map = ((&x_new - &y) * lip).amax();

        if obj_new > obj {
            // Momentum overshot: restart from the last accepted iterate.
            momentum = 1.0;
            y = x.clone();
            continue;
        }
        let decrease = (obj - obj_new) / obj_new.abs().max(1.0);
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        y = &x_new + (&x_new - &x) * ((momentum - 1.0) / next_momentum);
        momentum = next_momentum;
        x = x_new;
        obj = obj_new;
        if decrease < opts.tol && grad_map <= opts.gradient_map_tol {
            converged = true;
            break;
        }
    }
    ColumnFit {
        coef: x,
        objective: obj,
        iterations,
        converged,
    }
}

/// Solves column `j`'s group Lasso over `parents` given scaled Grams.
pub fn solve_column(
    grams: &[DMatrix<f64>],
    j: usize,
    parents: &[usize],
    lambda: f64,
    opts: &FixedOrderOptions,
) -> ColumnFit {
    let prob = ColumnProblem::new(grams, j, parents);
    solve_column_problem(&prob, parents.len(), lambda, opts)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "lambda = {lambda} must be finite and >= 0"
        )))
    }
}

/// Fixed-order fit from precomputed scaled Grams.
pub fn fit_fixed_order_grams(
    grams: &[DMatrix<f64>],
    perm: &Permutation,
    lambda: f64,
    opts: &FixedOrderOptions,
) -> Result<FixedOrderFit> {
    check_lambda(lambda)?;
    let p = perm.len();
    if let Some(s) = grams.iter().find(|s| s.nrows() != p || s.ncols() != p) {
        return Err(Error::DimensionMismatch(format!(
            "Gram is {}x{}, order has {p} nodes",
            s.nrows(),
            s.ncols()
        )));
    }
    let k = grams.len();
    let mut stack = WeightStack::zeros(k, p);
    let mut objective = 0.0;
    let mut iterations = 0;
    let mut converged = true;
    for j in 0..p {
        let parents = perm.predecessors(j);
        let col = solve_column(grams, j, &parents, lambda, opts);
        for (r, &i) in parents.iter().enumerate() {
            for t in 0..k {
                stack.tasks[t][(i, j)] = col.coef[(r, t)];
            }
        }
        objective += col.objective;
        iterations = iterations.max(col.iterations);
        converged &= col.converged;
    }
    Ok(FixedOrderFit {
        weights: stack,
        objective,
        iterations,
        converged,
    })
}

/// Multi-task group Lasso with the support restricted to `perm`.
pub fn fit_fixed_order(
    bundle: &TaskBundle,
    perm: &Permutation,
    lambda: f64,
    opts: &FixedOrderOptions,
) -> Result<FixedOrderFit> {
    if bundle.p() != perm.len() {
        return Err(Error::DimensionMismatch(format!(
            "bundle has p = {}, order has {} nodes",
            bundle.p(),
            perm.len()
        )));
    }
    fit_fixed_order_grams(&bundle.grams(), perm, lambda, opts)
}

/// Smallest λ for which the all-zero stack is optimal under `perm`.
pub fn lambda_max(grams: &[DMatrix<f64>], perm: &Permutation) -> f64 {
    let p = perm.len();
    let mut best = 0.0f64;
    for j in 0..p {
        for i in perm.predecessors(j) {
            let norm = grams.iter().map(|s| s[(i, j)].powi(2)).sum::<f64>().sqrt();
            best = best.max(norm);
        }
    }
    best
}

/// Subgradient optimality residuals of a fixed-order solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// Largest `‖∇_ij‖ / λ` over zero groups inside the allowed support.
    pub max_zero_group_ratio: f64,
    /// Largest `‖∇_ij + λ G_ij/‖G_ij‖‖_∞` over nonzero groups.
    pub max_active_deviation: f64,
}

/// Checks the group-Lasso optimality conditions of `stack` under `perm`.
pub fn kkt_report(
    grams: &[DMatrix<f64>],
    perm: &Permutation,
    lambda: f64,
    stack: &WeightStack,
) -> KktReport {
    let p = perm.len();
    let k = grams.len();
    // ∇ of the smooth loss w.r.t. G_k is S_k G_k − S_k.
    let grads: Vec<DMatrix<f64>> = grams
        .iter()
        .zip(stack.tasks())
        .map(|(s, g)| s * g - s)
        .collect();
    let mut zero_ratio = 0.0f64;
    let mut active_dev = 0.0f64;
    for j in 0..p {
        for i in perm.predecessors(j) {
            let gnorm = stack.group_norm_at(i, j);
            let grad: Vec<f64> = grads.iter().map(|d| d[(i, j)]).collect();
            if gnorm == 0.0 {
                let n = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ratio = if lambda > 0.0 { n / lambda } else { n };
                zero_ratio = zero_ratio.max(ratio);
            } else {
                for t in 0..k {
                    let dev = grad[t] + lambda * stack.tasks[t][(i, j)] / gnorm;
                    active_dev = active_dev.max(dev.abs());
                }
            }
        }
    }
    KktReport {
        max_zero_group_ratio: zero_ratio,
        max_active_deviation: active_dev,
    }
}

/// Unpenalized least squares per task and column on the given parent sets.
///
/// `supports[k]` lists task `k`'s edges as `(src, dst)`. A ridge of `1e-10`
/// is added to each restricted Gram before the Cholesky solve.
pub fn ols_refit(bundle: &TaskBundle, supports: &[Vec<(usize, usize)>]) -> Result<WeightStack> {
    const RIDGE: f64 = 1e-10;
    if supports.len() != bundle.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} support sets for {} tasks",
            supports.len(),
            bundle.k()
        )));
    }
    let p = bundle.p();
    let grams = bundle.grams();
    let mut stack = WeightStack::zeros(bundle.k(), p);
    for (k, edges) in supports.iter().enumerate() {
        let mut parents = vec![Vec::new(); p];
        for &(i, j) in edges {
            if i >= p || j >= p || i == j {
                return Err(Error::DimensionMismatch(format!(
                    "edge ({i},{j}) is not an off-diagonal entry of a {p}x{p} matrix"
                )));
            }
            parents[j].push(i);
        }
        for (j, pa) in parents.iter_mut().enumerate() {
            pa.sort_unstable();
            pa.dedup();
            if pa.is_empty() {
                continue;
            }
            if pa.len() >= bundle.n(k) {
                return Err(Error::RankDeficient { task: k, column: j });
            }
            let s = &grams[k];
            let m = pa.len();
            let a = DMatrix::from_fn(m, m, |r, c| {
                s[(pa[r], pa[c])] + if r == c { RIDGE } else { 0.0 }
            });
            let b = DVector::from_fn(m, |r, _| s[(pa[r], j)]);
            let chol = a
                .cholesky()
                .ok_or(Error::RankDeficient { task: k, column: j })?;
            let w = chol.solve(&b);
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::RankDeficient { task: k, column: j });
            }
            for (r, &i) in pa.iter().enumerate() {
                stack.tasks[k][(i, j)] = w[r];
            }
        }
    }
    Ok(stack)
}

/// Checks that every task of `stack` is consistent with `perm`.
pub fn check_consistent(stack: &WeightStack, perm: &Permutation) -> Result<()> {
    for (task, g) in stack.tasks().iter().enumerate() {
        if let Some((row, col)) = first_violation(g, perm) {
            return Err(Error::InconsistentStack { task, row, col });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_family, sample_data, SimConfig};
    use proptest::prelude::*;

    fn stack_from(k: usize, p: usize, vals: &[f64]) -> WeightStack {
        let tasks = (0..k)
            .map(|t| DMatrix::from_row_slice(p, p, &vals[t * p * p..(t + 1) * p * p]))
            .collect();
        WeightStack::from_tasks(tasks).unwrap()
    }

    #[test]
    fn group_norm_basics() {
        assert_eq!(group_norm(&WeightStack::zeros(3, 4)), 0.0);
        let one = stack_from(1, 2, &[0.0, -1.5, 2.0, 0.0]);
        assert_eq!(group_norm(&one), 3.5);
        let mut two = WeightStack::zeros(2, 3);
        two.task_mut(0)[(1, 2)] = 3.0;
        two.task_mut(1)[(1, 2)] = 4.0;
        assert_eq!(group_norm(&two), 5.0);
    }

    #[test]
    fn prox_identity_and_kill() {
        let s = stack_from(2, 2, &[0.0, 0.3, -0.2, 0.0, 0.0, 0.4, 0.1, 0.0]);
        assert_eq!(prox_group(&s, 0.0), s);
        let out = prox_group(&s, 0.5);
        // group (0,1) has norm 0.5 -> zero; group (1,0) has norm sqrt(0.05) -> zero
        assert_eq!(out, WeightStack::zeros(2, 2));
        let zero = WeightStack::zeros(2, 2);
        assert_eq!(prox_group(&zero, 1.0), zero);
    }

    /// Bisection on the derivative of the radial profile of the prox objective.
    fn numeric_prox_group(v: &[f64], c: f64) -> Vec<f64> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return v.to_vec();
        }
        // The minimizer is r * v/|v| with r in [0, |v|]; f(r) = (r-|v|)²/2 + c r.
        let df = |r: f64| r - norm + c;
        let r = if df(0.0) >= 0.0 {
            0.0
        } else {
            let (mut a, mut b) = (0.0, norm);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if df(m) < 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            0.5 * (a + b)
        };
        v.iter().map(|x| x * r / norm).collect()
    }

    proptest! {
        #[test]
        fn prox_matches_numeric_minimizer(v in proptest::collection::vec(-2.0f64..2.0, 1..6)) {
            let k = v.len();
            let mut s = WeightStack::zeros(k, 2);
            for (t, &x) in v.iter().enumerate() {
                s.task_mut(t)[(0, 1)] = x;
            }
            let out = prox_group(&s, 0.3);
            let expected = numeric_prox_group(&v, 0.3);
            for t in 0..k {
                prop_assert!((out.task(t)[(0, 1)] - expected[t]).abs() < 1e-8);
            }
        }

        #[test]
        fn prox_is_non_expansive(
            u in proptest::collection::vec(-2.0f64..2.0, 18),
            w in proptest::collection::vec(-2.0f64..2.0, 18),
            c in 0.0f64..1.5,
        ) {
            let a = stack_from(2, 3, &u);
            let b = stack_from(2, 3, &w);
            let pa = prox_group(&a, c);
            let pb = prox_group(&b, c);
            let lhs: f64 = pa.tasks().iter().zip(pb.tasks()).map(|(x, y)| (x - y).norm_squared()).sum();
            let rhs: f64 = a.tasks().iter().zip(b.tasks()).map(|(x, y)| (x - y).norm_squared()).sum();
            prop_assert!(lhs <= rhs + 1e-12);
        }
    }

    fn bundle(
        p: usize,
        s: usize,
        k: usize,
        n: usize,
        seed: u64,
    ) -> (crate::sim::SemFamily, TaskBundle) {
        let cfg = SimConfig {
            p,
            s,
            k,
            k_identifiable: k,
            ..Default::default()
        };
        let fam = generate_family(&cfg, seed).unwrap();
        let b = sample_data(&fam, n, seed + 100).unwrap();
        (fam, b)
    }

    #[test]
    fn large_lambda_gives_zero_stack() {
        let (fam, b) = bundle(5, 6, 2, 200, 1);
        let grams = b.grams();
        let lmax = lambda_max(&grams, &fam.shared_order);
        let fit =
            fit_fixed_order(&b, &fam.shared_order, lmax * 1.0001, &Default::default()).unwrap();
        assert_eq!(fit.weights, WeightStack::zeros(2, 5));
        let fit = fit_fixed_order(&b, &fam.shared_order, lmax * 0.9, &Default::default()).unwrap();
        assert!(group_norm(&fit.weights) > 0.0);
    }

    #[test]
    fn zero_lambda_is_ols() {
        let (fam, b) = bundle(5, 6, 1, 2000, 2);
        let perm = &fam.shared_order;
        let fit = fit_fixed_order(&b, perm, 0.0, &Default::default()).unwrap();
        // Normal equations on the full predecessor sets.
        let x = b.task(0);
        for j in 0..5 {
            let pa = perm.predecessors(j);
            if pa.is_empty() {
                continue;
            }
            let xs = DMatrix::from_fn(x.nrows(), pa.len(), |r, c| x[(r, pa[c])]);
            let y = x.column(j).into_owned();
            let beta = (xs.tr_mul(&xs)).lu().solve(&xs.tr_mul(&y)).unwrap();
            for (r, &i) in pa.iter().enumerate() {
                assert!((fit.weights.task(0)[(i, j)] - beta[r]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_tasks_give_identical_solutions() {
        let (fam, b) = bundle(5, 5, 1, 300, 3);
        let twin = TaskBundle::new(vec![b.task(0).clone(), b.task(0).clone()]).unwrap();
        for lambda in [0.0, 0.05, 0.3] {
            let fit =
                fit_fixed_order(&twin, &fam.shared_order, lambda, &Default::default()).unwrap();
            assert_eq!(fit.weights.task(0), fit.weights.task(1));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (_, b) = bundle(4, 3, 1, 50, 4);
        let err = fit_fixed_order(&b, &Permutation::identity(5), 0.1, &Default::default());
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn solution_is_consistent_and_satisfies_kkt() {
        for seed in 0..10 {
            let (fam, b) = bundle(6, 7, 3, 100, 10 + seed);
            let lambda = 0.05 + 0.02 * seed as f64;
            let fit = fit_fixed_order(&b, &fam.shared_order, lambda, &Default::default()).unwrap();
            check_consistent(&fit.weights, &fam.shared_order).unwrap();
            let kkt = kkt_report(&b.grams(), &fam.shared_order, lambda, &fit.weights);
            assert!(kkt.max_zero_group_ratio <= 1.0 + 1e-4, "{kkt:?}");
            assert!(kkt.max_active_deviation <= 1e-4, "{kkt:?}");
        }
    }

    #[test]
    fn ols_refit_basics() {
        let (fam, b) = bundle(4, 4, 2, 100, 5);
        let empty = ols_refit(&b, &[vec![], vec![]]).unwrap();
        assert_eq!(empty, WeightStack::zeros(2, 4));
        let supports: Vec<_> = fam.models.iter().map(|m| m.edges()).collect();
        let fit = ols_refit(&b, &supports).unwrap();
        for (k, m) in fam.models.iter().enumerate() {
            for (i, j) in crate::sim::support(fit.task(k)) {
                assert!(m.weights[(i, j)] != 0.0);
            }
        }
    }

    #[test]
    fn ols_refit_recovers_truth() {
        let (fam, b) = bundle(6, 8, 1, 100_000, 6);
        let fit = ols_refit(&b, &[fam.models[0].edges()]).unwrap();
        let err = (fit.task(0) - &fam.models[0].weights).amax();
        assert!(err < 0.02, "max error {err}");

        // Residual variance matches the unit noise variance.
        let x = b.task(0);
        let resid = x - x * fit.task(0);
        let n = x.nrows() as f64;
        for j in 0..6 {
            let var = resid.column(j).norm_squared() / n;
            assert!(
                (var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(),
                "node {j}: {var}"
            );
        }
    }

    #[test]
    fn ols_refit_rank_deficiency() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = TaskBundle::new(vec![x]).unwrap();
        // Two parents with only two rows.
        let err = ols_refit(&b, &[vec![(0, 2), (1, 2)]]);
        assert!(matches!(
            err,
            Err(Error::RankDeficient { task: 0, column: 2 })
        ));
    }
}
