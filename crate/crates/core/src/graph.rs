//! Permutations, permutation masks, smooth acyclicity functions and
//! order-consistency predicates.
//!
//! A [`Permutation`] is stored as its rank function: `rank(i)` is the
//! position of node `i` in the causal order. A matrix is consistent with a
//! permutation when every nonzero entry `(i, j)` has `rank(i) < rank(j)`,
//! i.e. edges run from earlier to later nodes.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expm::expm;

/// Default width of the band around 0.5 in which mask rounding is refused.
pub const DEFAULT_ROUND_TOL: f64 = 1e-3;

/// A causal order over `p` nodes, stored as the rank of each node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    ranks: Vec<usize>,
}

impl Permutation {
    /// Builds a permutation from ranks: `ranks[i]` is node `i`'s position.
    pub fn from_ranks(ranks: Vec<usize>) -> Result<Self> {
        let p = ranks.len();
        let mut seen = vec![false; p];
        for &r in &ranks {
            if r >= p {
                return Err(Error::InvalidPermutation {
                    len: p,
                    detail: format!("rank {r} out of range"),
                });
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(Error::InvalidPermutation {
                    len: p,
                    detail: format!("rank {r} repeated"),
                });
            }
        }
        Ok(Self { ranks })
    }

    /// Builds a permutation from a topological sequence: `sequence[k]` is the
    /// node placed at position `k`.
    pub fn from_sequence(sequence: &[usize]) -> Result<Self> {
        let inverse = Self::from_ranks(sequence.to_vec())?;
        let mut ranks = vec![0; sequence.len()];
        for (pos, &node) in sequence.iter().enumerate() {
            ranks[node] = pos;
        }
        debug_assert_eq!(inverse.len(), ranks.len());
        Ok(Self { ranks })
    }

    pub fn identity(p: usize) -> Self {
        Self {
            ranks: (0..p).collect(),
        }
    }

    /// The order that visits nodes from `p - 1` down to `0`.
    pub fn reversal(p: usize) -> Self {
        Self {
            ranks: (0..p).rev().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    /// Position of `node` in the order.
    pub fn rank(&self, node: usize) -> usize {
        self.ranks[node]
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    /// Nodes listed from first to last.
    pub fn sequence(&self) -> Vec<usize> {
        let mut seq = vec![0; self.ranks.len()];
        for (node, &r) in self.ranks.iter().enumerate() {
            seq[r] = node;
        }
        seq
    }

    /// True when `i` may be a parent of `j`.
    pub fn precedes(&self, i: usize, j: usize) -> bool {
        self.ranks[i] < self.ranks[j]
    }

    /// Candidate parents of `j`: every node ranked before it, in node order.
    pub fn predecessors(&self, j: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.precedes(i, j)).collect()
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(ranks: Vec<usize>) -> Result<Self> {
        Self::from_ranks(ranks)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.ranks
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, r) in self.ranks.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{r}")?;
        }
        write!(f, ")")
    }
}

/// Which smooth acyclicity function to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcyclicityVariant {
    /// `tr(exp(T∘T)) - p`
    #[default]
    Expm,
    /// `tr((I + T∘T)^p) - p`
    Poly,
}

impl FromStr for AcyclicityVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expm" => Ok(Self::Expm),
            "poly" => Ok(Self::Poly),
            other => Err(Error::InvalidConfig(format!(
                "unknown acyclicity variant `{other}` (expected expm or poly)"
            ))),
        }
    }
}

fn ensure_square(m: &DMatrix<f64>) -> Result<usize> {
    if m.is_square() {
        Ok(m.nrows())
    } else {
        Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        })
    }
}

fn hadamard_square(t: &DMatrix<f64>) -> DMatrix<f64> {
    t.map(|v| v * v)
}

fn matrix_power(base: &DMatrix<f64>, mut exp: usize) -> DMatrix<f64> {
    let n = base.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut acc = base.clone();
    while exp > 0 {
        if exp & 1 == 1 {
            result = &result * &acc;
        }
        exp >>= 1;
        if exp > 0 {
            acc = &acc * &acc;
        }
    }
    result
}

/// Value and gradient of an acyclicity function evaluated together.
#[derive(Debug, Clone)]
pub struct Acyclicity {
    pub value: f64,
    pub gradient: DMatrix<f64>,
}

/// Evaluates `h(T)` and its gradient, sharing the expensive matrix function.
pub fn acyclicity(t: &DMatrix<f64>, variant: AcyclicityVariant) -> Result<Acyclicity> {
    let p = ensure_square(t)?;
    let a = hadamard_square(t);
    match variant {
        AcyclicityVariant::Expm => {
            let e = expm(&a);
            let value = e.trace() - p as f64;
            let gradient = e.transpose().component_mul(t) * 2.0;
            Ok(Acyclicity { value, gradient })
        }
        AcyclicityVariant::Poly => {
            if p == 0 {
                return Ok(Acyclicity {
                    value: 0.0,
                    gradient: DMatrix::zeros(0, 0),
                });
            }
            let b = DMatrix::identity(p, p) + a;
            let pow_m1 = matrix_power(&b, p - 1);
            let value = (&pow_m1 * &b).trace() - p as f64;
            let gradient = pow_m1.transpose().component_mul(t) * (2.0 * p as f64);
            Ok(Acyclicity { value, gradient })
        }
    }
}

/// `tr(exp(T∘T)) - p`.
pub fn h_expm(t: &DMatrix<f64>) -> Result<f64> {
    let p = ensure_square(t)?;
    Ok(expm(&hadamard_square(t)).trace() - p as f64)
}

/// `tr((I + T∘T)^p) - p`.
pub fn h_poly(t: &DMatrix<f64>) -> Result<f64> {
    let p = ensure_square(t)?;
    if p == 0 {
        return Ok(0.0);
    }
    let b = DMatrix::identity(p, p) + hadamard_square(t);
    Ok(matrix_power(&b, p).trace() - p as f64)
}

pub fn h_value(t: &DMatrix<f64>, variant: AcyclicityVariant) -> Result<f64> {
    match variant {
        AcyclicityVariant::Expm => h_expm(t),
        AcyclicityVariant::Poly => h_poly(t),
    }
}

/// Gradient of the chosen acyclicity function at `t`.
pub fn grad_h(t: &DMatrix<f64>, variant: AcyclicityVariant) -> Result<DMatrix<f64>> {
    acyclicity(t, variant).map(|a| a.gradient)
}

/// Binary mask with `T[i][j] = 1` exactly when `rank(i) < rank(j)`.
pub fn mask_from_permutation(perm: &Permutation) -> DMatrix<f64> {
    let p = perm.len();
    DMatrix::from_fn(p, p, |i, j| if perm.precedes(i, j) { 1.0 } else { 0.0 })
}

/// Recovers the permutation encoded by a (near-)binary mask.
///
/// Off-diagonal entries are rounded at 0.5; entries within `tol` of 0.5 are
/// refused. The rounded mask must be exactly the mask of some permutation.
pub fn permutation_from_mask(t: &DMatrix<f64>, tol: f64) -> Result<Permutation> {
    let p = ensure_square(t)?;
    let mut rounded = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            if i == j {
                continue;
            }
            let v = t[(i, j)];
            if !v.is_finite() || (v - 0.5).abs() <= tol {
                return Err(Error::RoundingAmbiguous {
                    row: i,
                    col: j,
                    value: v,
                });
            }
            if v > 0.5 {
                rounded[(i, j)] = 1.0;
            }
        }
    }

    // Row sums of a permutation mask are exactly {0, 1, ..., p-1}; node with
    // row sum r has r successors, so its rank is p - 1 - r.
    let mut ranks = vec![0; p];
    let mut seen = vec![false; p];
    for i in 0..p {
        let sum = rounded.row(i).sum() as usize;
        let rank = p - 1 - sum.min(p - 1);
        if seen[rank] {
            return Err(Error::NotPermutationMask(format!(
                "row sums do not form {{0..{}}} (node {i} has {sum} successors)",
                p - 1
            )));
        }
        seen[rank] = true;
        ranks[i] = rank;
    }
    let perm = Permutation { ranks };
    if mask_from_permutation(&perm) != rounded {
        return Err(Error::NotPermutationMask(
            "row-sum signature matches but the pattern is not transitive".into(),
        ));
    }
    Ok(perm)
}

/// True iff every nonzero entry `(i, j)` of `g` has `rank(i) < rank(j)`.
pub fn is_consistent(g: &DMatrix<f64>, perm: &Permutation) -> bool {
    debug_assert_eq!(g.nrows(), perm.len());
    first_violation(g, perm).is_none()
}

/// First nonzero entry of `g` that violates the order, scanning row-major.
pub fn first_violation(g: &DMatrix<f64>, perm: &Permutation) -> Option<(usize, usize)> {
    let p = g.nrows();
    for i in 0..p {
        for j in 0..p {
            if g[(i, j)] != 0.0 && !perm.precedes(i, j) {
                return Some((i, j));
            }
        }
    }
    None
}

/// A topological order of the nonzero pattern, or `None` if it has a cycle
/// (self-loops count as cycles). Kahn's algorithm with smallest-index-first.
pub fn topological_order(g: &DMatrix<f64>) -> Option<Permutation> {
    let p = g.nrows();
    let mut indeg = vec![0usize; p];
    for i in 0..p {
        for j in 0..p {
            if g[(i, j)] != 0.0 {
                indeg[j] += 1;
            }
        }
    }
    let mut queue: VecDeque<usize> = (0..p).filter(|&j| indeg[j] == 0).collect();
    let mut seq = Vec::with_capacity(p);
    while let Some(i) = queue.pop_front() {
        seq.push(i);
        for j in 0..p {
            if g[(i, j)] != 0.0 {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
    }
    if seq.len() == p {
        Some(Permutation::from_sequence(&seq).expect("Kahn output is a permutation"))
    } else {
        None
    }
}

pub fn is_acyclic(g: &DMatrix<f64>) -> bool {
    topological_order(g).is_some()
}

/// Heuristic order from a continuous mask: nodes with larger row sums of
/// `|T|` come first, ties broken by node index.
pub fn order_by_row_sums(t: &DMatrix<f64>) -> Permutation {
    let p = t.nrows();
    let sums: Vec<f64> = (0..p)
        .map(|i| (0..p).filter(|&j| j != i).map(|j| t[(i, j)].abs()).sum())
        .collect();
    let mut seq: Vec<usize> = (0..p).collect();
    seq.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
    Permutation::from_sequence(&seq).expect("sorted indices form a permutation")
}

/// Calls `f` on every permutation of `0..p`, as rank vectors in
/// lexicographic order.
pub fn for_each_permutation(p: usize, mut f: impl FnMut(&Permutation)) {
    let mut ranks: Vec<usize> = (0..p).collect();
    loop {
        f(&Permutation {
            ranks: ranks.clone(),
        });
        // next lexicographic permutation
        let Some(i) = (1..p).rev().find(|&i| ranks[i - 1] < ranks[i]) else {
            return;
        };
        let j = (i..p).rev().find(|&j| ranks[j] > ranks[i - 1]).unwrap();
        ranks.swap(i - 1, j);
        ranks[i..].reverse();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(p: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(p, p, v)
    }

    fn upper_ones(p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(p, p, |i, j| if i < j { 1.0 } else { 0.0 })
    }

    /// exp(T∘T) by plain Taylor series, for checking the 2x2 value.
    fn series_h(t: &DMatrix<f64>) -> f64 {
        let a = t.map(|v| v * v);
        let p = a.nrows();
        let mut term = DMatrix::<f64>::identity(p, p);
        let mut sum = term.clone();
        for k in 1..80 {
            term = &term * &a / k as f64;
            sum += &term;
        }
        sum.trace() - p as f64
    }

    #[test]
    fn h_of_zero_is_zero() {
        for p in 0..6 {
            let z = DMatrix::zeros(p, p);
            assert_eq!(h_expm(&z).unwrap(), 0.0);
            assert_eq!(h_poly(&z).unwrap(), 0.0);
        }
    }

    #[test]
    fn h_expm_two_cycle() {
        let t = mat(2, &[0.0, 1.0, 1.0, 0.0]);
        let expected = series_h(&t);
        assert!((expected - (2.0 * 1f64.cosh() - 2.0)).abs() < 1e-14);
        assert!((h_expm(&t).unwrap() - 1.086_161_269_6).abs() < 1e-9);
        assert!((h_expm(&t).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn h_poly_two_cycle() {
        let t = mat(2, &[0.0, 1.0, 1.0, 0.0]);
        assert!((h_poly(&t).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn triangular_masks_are_acyclic() {
        let t = upper_ones(3);
        assert!(h_expm(&t).unwrap().abs() < 1e-12);
        assert!(h_poly(&t).unwrap().abs() < 1e-12);
        let perm = Permutation::from_ranks(vec![2, 0, 3, 1]).unwrap();
        let m = mask_from_permutation(&perm) * 0.7;
        assert!(h_expm(&m).unwrap().abs() < 1e-12);
    }

    #[test]
    fn non_square_rejected() {
        let t = DMatrix::zeros(2, 3);
        assert!(matches!(h_expm(&t), Err(Error::NotSquare { .. })));
        assert!(matches!(h_poly(&t), Err(Error::NotSquare { .. })));
        assert!(matches!(
            grad_h(&t, AcyclicityVariant::Poly),
            Err(Error::NotSquare { .. })
        ));
        assert!("cubic".parse::<AcyclicityVariant>().is_err());
    }

    #[test]
    fn gradient_of_zero_is_zero() {
        let z = DMatrix::zeros(4, 4);
        for v in [AcyclicityVariant::Expm, AcyclicityVariant::Poly] {
            assert_eq!(grad_h(&z, v).unwrap(), z);
        }
    }

    #[test]
    fn gradient_vanishes_on_strictly_upper_masks() {
        // exp(A) for strictly upper A is upper triangular, so its transpose
        // never overlaps the support of T.
        let t = DMatrix::from_fn(5, 5, |i, j| {
            if i < j {
                0.3 + 0.1 * (i + j) as f64
            } else {
                0.0
            }
        });
        for v in [AcyclicityVariant::Expm, AcyclicityVariant::Poly] {
            let g = grad_h(&t, v).unwrap();
            assert!(g.amax() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut s = 3u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for variant in [AcyclicityVariant::Expm, AcyclicityVariant::Poly] {
            let t = DMatrix::from_fn(6, 6, |_, _| next());
            let g = grad_h(&t, variant).unwrap();
            let eps = 1e-5;
            for i in 0..6 {
                for j in 0..6 {
                    let mut tp = t.clone();
                    tp[(i, j)] += eps;
                    let mut tm = t.clone();
                    tm[(i, j)] -= eps;
                    let fd = (h_value(&tp, variant).unwrap() - h_value(&tm, variant).unwrap())
                        / (2.0 * eps);
                    let rel = (fd - g[(i, j)]).abs() / g[(i, j)].abs().max(1.0);
                    assert!(
                        rel < 1e-5,
                        "{variant:?} ({i},{j}): fd {fd} vs {}",
                        g[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn identity_mask_is_upper_triangular() {
        assert_eq!(
            mask_from_permutation(&Permutation::identity(4)),
            upper_ones(4)
        );
        assert_eq!(
            mask_from_permutation(&Permutation::identity(1)),
            DMatrix::zeros(1, 1)
        );
        assert_eq!(
            mask_from_permutation(&Permutation::reversal(3)),
            upper_ones(3).transpose()
        );
    }

    #[test]
    fn mask_round_trip_small() {
        let perm = Permutation::from_ranks(vec![2, 0, 1]).unwrap();
        let back = permutation_from_mask(&mask_from_permutation(&perm), DEFAULT_ROUND_TOL).unwrap();
        assert_eq!(back, perm);
    }

    #[test]
    fn rounding_band_is_refused() {
        let mut t = mask_from_permutation(&Permutation::identity(3));
        t[(0, 2)] = 0.5 + 5e-4;
        assert!(matches!(
            permutation_from_mask(&t, 1e-3),
            Err(Error::RoundingAmbiguous { row: 0, col: 2, .. })
        ));
    }

    #[test]
    fn dense_mask_is_not_a_permutation_mask() {
        let t = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1.0 });
        assert!(matches!(
            permutation_from_mask(&t, 1e-3),
            Err(Error::NotPermutationMask(_))
        ));
    }

    #[test]
    fn intransitive_signature_is_rejected() {
        // a->b, a->c, b->a: row sums {2,1,0} but not a permutation mask.
        let t = mat(3, &[0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            permutation_from_mask(&t, 1e-3),
            Err(Error::NotPermutationMask(_))
        ));
    }

    #[test]
    fn exhaustive_round_trip_up_to_five() {
        for p in 1..=5 {
            let mut count = 0;
            for_each_permutation(p, |perm| {
                count += 1;
                let mask = mask_from_permutation(perm);
                let back = permutation_from_mask(&mask, DEFAULT_ROUND_TOL).unwrap();
                assert_eq!(mask_from_permutation(&back), mask);
                let mut sums: Vec<usize> = (0..p).map(|i| mask.row(i).sum() as usize).collect();
                sums.sort_unstable();
                assert_eq!(sums, (0..p).collect::<Vec<_>>());
                assert_eq!(mask.sum() as usize, p * (p - 1) / 2);
            });
            assert_eq!(count, (1..=p).product::<usize>());
        }
    }

    #[test]
    fn consistency_predicate() {
        let z = DMatrix::zeros(3, 3);
        assert!(is_consistent(&z, &Permutation::reversal(3)));
        let mut g = DMatrix::zeros(3, 3);
        g[(1, 2)] = 0.8;
        assert!(is_consistent(&g, &Permutation::identity(3)));
        assert!(!is_consistent(&g, &Permutation::reversal(3)));
    }

    #[test]
    fn sequence_and_ranks_are_inverse() {
        let perm = Permutation::from_sequence(&[2, 0, 1]).unwrap();
        assert_eq!(perm.ranks(), &[1, 2, 0]);
        assert_eq!(perm.sequence(), vec![2, 0, 1]);
        assert!(Permutation::from_ranks(vec![0, 0]).is_err());
        assert!(Permutation::from_ranks(vec![0, 2]).is_err());
    }

    fn perm_strategy(max_p: usize) -> impl Strategy<Value = Permutation> {
        (1..=max_p)
            .prop_flat_map(|p| Just((0..p).collect::<Vec<_>>()).prop_shuffle())
            .prop_map(|r| Permutation::from_ranks(r).unwrap())
    }

    proptest! {
        #[test]
        fn round_trip_random_up_to_eight(perm in perm_strategy(8)) {
            let mask = mask_from_permutation(&perm);
            let back = permutation_from_mask(&mask, DEFAULT_ROUND_TOL).unwrap();
            prop_assert_eq!(mask_from_permutation(&back), mask);
        }

        #[test]
        fn h_zero_iff_acyclic(p in 1usize..7, bits in proptest::collection::vec(any::<bool>(), 36)) {
            let t = DMatrix::from_fn(p, p, |i, j| {
                if i != j && bits[i * 6 + j] { 1.0 } else { 0.0 }
            });
            let acyclic = is_acyclic(&t);
            let he = h_expm(&t).unwrap();
            let hp = h_poly(&t).unwrap();
            prop_assert!(he >= -1e-9 && hp >= -1e-9);
            prop_assert_eq!(he.abs() <= 1e-9, acyclic);
            prop_assert_eq!(hp.abs() <= 1e-9, acyclic);
        }
    }
}
