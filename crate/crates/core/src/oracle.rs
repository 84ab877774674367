//! Brute-force joint estimator over all causal orders, for small `p`.
//!
//! The fixed-order objective separates by column and each column depends
//! only on its predecessor set, so column fits are cached by
//! `(column, parent set)`: at most `p · 2^(p-1)` group-Lasso solves back all
//! `p!` orders.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{for_each_permutation, Permutation};
use crate::group_lasso::{
    check_consistent, group_norm, solve_column, FixedOrderOptions, WeightStack,
};
use crate::sim::TaskBundle;

/// Default cap on `p` for the exhaustive search.
pub const DEFAULT_MAX_P: usize = 6;

/// Minimizer of the joint objective over all orders.
#[derive(Debug, Clone)]
pub struct ExhaustiveFit {
    pub order: Permutation,
    pub weights: WeightStack,
    pub objective: f64,
}

/// Enumerates every order, fitting each with the fixed-order solver.
///
/// Ties keep the lexicographically smallest rank vector.
pub fn fit_exhaustive(
    bundle: &TaskBundle,
    lambda: f64,
    max_p: usize,
    opts: &FixedOrderOptions,
) -> Result<ExhaustiveFit> {
    let p = bundle.p();
    if p > max_p {
        return Err(Error::DimensionTooLarge { p, max_p });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "lambda = {lambda} must be finite and >= 0"
        )));
    }
    let grams = bundle.grams();
    let k = bundle.k();

    // Column objectives for every (column, parent bitmask).
    let mut cache: HashMap<(usize, u32), (f64, DMatrix<f64>)> = HashMap::new();
    let mut column = |j: usize, parents: &[usize]| -> f64 {
        let mask = parents.iter().fold(0u32, |m, &i| m | (1 << i));
        cache
            .entry((j, mask))
            .or_insert_with(|| {
                let fit = solve_column(&grams, j, parents, lambda, opts);
                (fit.objective, fit.coef)
            })
            .0
    };

    let mut best: Option<(f64, Permutation)> = None;
    for_each_permutation(p, |perm| {
        let objective: f64 = (0..p).map(|j| column(j, &perm.predecessors(j))).sum();
        if best.as_ref().is_none_or(|(b, _)| objective < *b) {
            best = Some((objective, perm.clone()));
        }
    });
    let (objective, order) = best.expect("at least one permutation");

    let mut weights = WeightStack::zeros(k, p);
    for j in 0..p {
        let parents = order.predecessors(j);
        let mask = parents.iter().fold(0u32, |m, &i| m | (1 << i));
        let coef = &cache[&(j, mask)].1;
        for (r, &i) in parents.iter().enumerate() {
            for t in 0..k {
                weights.task_mut(t)[(i, j)] = coef[(r, t)];
            }
        }
    }
    Ok(ExhaustiveFit {
        order,
        weights,
        objective,
    })
}

/// `Σ_k (1/2n_k)‖X_k − X_k G_k‖² + λ·group_norm(G)` for a stack consistent
/// with `order`, evaluated from the raw data.
pub fn objective_at(
    bundle: &TaskBundle,
    order: &Permutation,
    stack: &WeightStack,
    lambda: f64,
) -> Result<f64> {
    if stack.k() != bundle.k() || stack.p() != bundle.p() || order.len() != bundle.p() {
        return Err(Error::DimensionMismatch(format!(
            "stack {}x{}x{}, bundle K = {} p = {}, order of {} nodes",
            stack.k(),
            stack.p(),
            stack.p(),
            bundle.k(),
            bundle.p(),
            order.len()
        )));
    }
    check_consistent(stack, order)?;
    Ok(loss(bundle, stack) + lambda * group_norm(stack))
}

/// Squared-error part of the joint objective.
pub fn loss(bundle: &TaskBundle, stack: &WeightStack) -> f64 {
    bundle
        .tasks()
        .iter()
        .zip(stack.tasks())
        .map(|(x, g)| (x - x * g).norm_squared() / (2.0 * x.nrows() as f64))
        .sum()
}
