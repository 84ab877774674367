//! Edge-classification metrics, order success, weight error and the
//! sample-complexity parameter.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::graph::{is_consistent, Permutation};
use crate::group_lasso::WeightStack;

/// Counts and rates from comparing an estimated pattern to the truth.
///
/// Each predicted edge is a true positive (same direction in the truth), a
/// reverse (only the opposite direction is true) or a false positive. A
/// false negative is a true edge predicted in neither direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub true_positive: usize,
    pub reverse: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub truth_edges: usize,
    pub fdr: f64,
    pub tpr: f64,
    /// False positives over ground-truth positives.
    pub fpr: f64,
    pub shd: usize,
    pub nnz: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Compares the nonzero patterns of `est` and `truth` (diagonals ignored).
pub fn structure_metrics(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> StructureMetrics {
    assert_eq!(
        est.shape(),
        truth.shape(),
        "estimate and truth differ in shape"
    );
    let p = est.nrows();
    let on = |m: &DMatrix<f64>, i: usize, j: usize| i != j && m[(i, j)] != 0.0;
    let (mut tp, mut rev, mut fp, mut fneg, mut truth_edges) = (0, 0, 0, 0, 0);
    for i in 0..p {
        for j in 0..p {
            if on(est, i, j) {
                if on(truth, i, j) {
                    tp += 1;
                } else if on(truth, j, i) {
                    rev += 1;
                } else {
                    fp += 1;
                }
            }
            if on(truth, i, j) {
                truth_edges += 1;
                if !on(est, i, j) && !on(est, j, i) {
                    fneg += 1;
                }
            }
        }
    }
    let nnz = tp + rev + fp;
    StructureMetrics {
        true_positive: tp,
        reverse: rev,
        false_positive: fp,
        false_negative: fneg,
        truth_edges,
        fdr: ratio(rev + fp, nnz),
        tpr: ratio(tp, truth_edges),
        fpr: ratio(fp, truth_edges),
        shd: fneg + rev + fp,
        nnz,
    }
}

/// True iff `order` is consistent with every true DAG.
pub fn order_success(order: &Permutation, truths: &[DMatrix<f64>]) -> bool {
    truths.iter().all(|g| is_consistent(g, order))
}

/// `(p/s) · sqrt(n/(p ln p) · K'²/K)`.
pub fn theta(n: f64, k: f64, k_identifiable: f64, p: f64, s: f64) -> f64 {
    (p / s) * (n / (p * p.ln()) * k_identifiable * k_identifiable / k).sqrt()
}

/// Sample size that puts θ at `target` for the given dimensions.
pub fn n_for_theta(target: f64, k: f64, k_identifiable: f64, p: f64, s: f64) -> f64 {
    let ratio = target * s / p;
    ratio * ratio * p * p.ln() * k / (k_identifiable * k_identifiable)
}

/// Mean over tasks of the squared Frobenius distance.
pub fn frob_error(est: &WeightStack, truth: &WeightStack) -> f64 {
    assert_eq!(est.k(), truth.k(), "task counts differ");
    est.tasks()
        .iter()
        .zip(truth.tasks())
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        / est.k() as f64
}

/// One evaluated task, with the run context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Option<usize>,
    pub fdr: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub shd: f64,
    pub nnz: f64,
    pub order_success: bool,
    pub frob_err: f64,
    pub theta: f64,
    pub p: usize,
    pub s: usize,
    pub k: usize,
    pub k_identifiable: usize,
    pub n: usize,
    pub lambda: f64,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::for_each_permutation;
    use proptest::prelude::*;

    fn chain3() -> DMatrix<f64> {
        let mut g = DMatrix::zeros(3, 3);
        g[(0, 1)] = 1.0;
        g[(1, 2)] = -0.7;
        g
    }

    #[test]
    fn perfect_estimate() {
        let t = chain3();
        let m = structure_metrics(&t, &t);
        assert_eq!((m.fdr, m.tpr, m.fpr, m.shd, m.nnz), (0.0, 1.0, 0.0, 0, 2));
    }

    #[test]
    fn transposed_estimate_is_all_reverses() {
        let t = chain3();
        let m = structure_metrics(&t.transpose(), &t);
        assert_eq!(m.tpr, 0.0);
        assert_eq!(m.reverse, 2);
        assert_eq!(m.shd, 2);
        assert_eq!(m.nnz, 2);
        assert_eq!(m.fdr, 1.0);
    }

    #[test]
    fn empty_estimate() {
        let t = chain3();
        let m = structure_metrics(&DMatrix::zeros(3, 3), &t);
        assert_eq!((m.fdr, m.tpr, m.shd, m.nnz), (0.0, 0.0, 2, 0));
    }

    /// Classifies every unordered pair independently of the row-major pass.
    fn brute_shd(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> (usize, usize, usize, usize) {
        let p = est.nrows();
        let (mut tp, mut rev, mut fp, mut fneg) = (0, 0, 0, 0);
        for i in 0..p {
            for j in (i + 1)..p {
                let e = (est[(i, j)] != 0.0, est[(j, i)] != 0.0);
                let t = (truth[(i, j)] != 0.0, truth[(j, i)] != 0.0);
                for (pred, same, opposite) in [(e.0, t.0, t.1), (e.1, t.1, t.0)] {
                    if pred {
                        if same {
                            tp += 1;
                        } else if opposite {
                            rev += 1;
                        } else {
                            fp += 1;
                        }
                    }
                }
                if (t.0 || t.1) && !e.0 && !e.1 {
                    fneg += 1;
                }
            }
        }
        (tp, rev, fp, fneg)
    }

    proptest! {
        #[test]
        fn matches_pairwise_classifier(
            est_bits in proptest::collection::vec(any::<bool>(), 25),
            truth_bits in proptest::collection::vec(any::<bool>(), 10),
            w in 0.1f64..3.0,
        ) {
            let est = DMatrix::from_fn(5, 5, |i, j| if i != j && est_bits[i * 5 + j] { w } else { 0.0 });
            // truth: a DAG over the upper triangle
            let mut idx = 0;
            let mut truth = DMatrix::zeros(5, 5);
            for i in 0..5 {
                for j in (i + 1)..5 {
                    if truth_bits[idx] { truth[(i, j)] = 1.0; }
                    idx += 1;
                }
            }
            let m = structure_metrics(&est, &truth);
            let (tp, rev, fp, fneg) = brute_shd(&est, &truth);
            prop_assert_eq!((m.true_positive, m.reverse, m.false_positive, m.false_negative), (tp, rev, fp, fneg));
            prop_assert_eq!(m.shd, m.false_negative + m.reverse + m.false_positive);
            prop_assert_eq!(m.nnz, tp + rev + fp);
            // magnitudes do not matter
            let scaled = structure_metrics(&(est.map(|v| v * -3.5)), &(truth.clone() * 0.2));
            prop_assert_eq!(scaled, m);
        }
    }

    #[test]
    fn order_success_cases() {
        let empty = vec![DMatrix::zeros(3, 3)];
        assert!(order_success(&Permutation::reversal(3), &empty));
        let truths = vec![chain3()];
        assert!(order_success(&Permutation::identity(3), &truths));
        let swapped = Permutation::from_ranks(vec![0, 2, 1]).unwrap();
        assert!(!order_success(&swapped, &truths));
    }

    #[test]
    fn order_success_is_constant_on_consistent_set() {
        // Truths on p = 5 with a partial order: every consistent order succeeds,
        // every inconsistent order fails.
        let mut a = DMatrix::zeros(5, 5);
        a[(0, 2)] = 1.0;
        a[(3, 4)] = 1.0;
        let mut b = DMatrix::zeros(5, 5);
        b[(2, 4)] = 1.0;
        let truths = vec![a, b];
        let mut consistent = 0;
        for_each_permutation(5, |perm| {
            let ok = truths.iter().all(|g| is_consistent(g, perm));
            assert_eq!(order_success(perm, &truths), ok);
            consistent += ok as usize;
        });
        // {0,2,3} precede 4 with 0 before 2 (3 ways), node 1 anywhere (5 ways).
        assert_eq!(consistent, 15);
    }

    #[test]
    fn theta_values() {
        let (p, s, k) = (16.0, 16.0, 4.0);
        let n = 16.0 * 16f64.ln();
        assert!((theta(n, k, k, p, s) - 2.0).abs() < 1e-12);
        let t1 = theta(100.0, 3.0, 3.0, 10.0, 7.0);
        let t4 = theta(400.0, 3.0, 3.0, 10.0, 7.0);
        assert!((t4 / t1 - 2.0).abs() < 1e-12);
        let direct = (10.0 / 7.0) * (100.0 * 3.0 / (10.0 * 10f64.ln())).sqrt();
        assert!((t1 - direct).abs() < 1e-12);
        assert!(
            (theta(n_for_theta(5.0, 4.0, 3.0, 20.0, 25.0), 4.0, 3.0, 20.0, 25.0) - 5.0).abs()
                < 1e-9
        );
    }

    #[test]
    fn frobenius_error() {
        let truth = WeightStack::from_tasks(vec![chain3(), chain3() * 2.0]).unwrap();
        assert_eq!(frob_error(&truth, &truth), 0.0);
        let mut est = truth.clone();
        est.task_mut(1)[(2, 0)] = 0.5;
        assert!((frob_error(&est, &truth) - 0.25 / 2.0).abs() < 1e-15);

        let mut other = truth.clone();
        other.task_mut(0)[(0, 1)] = -0.3;
        other.task_mut(1)[(1, 2)] = 4.0;
        let mut flat = 0.0;
        for k in 0..2 {
            for v in (other.task(k) - truth.task(k)).iter() {
                flat += v * v;
            }
        }
        assert!((frob_error(&other, &truth) - flat / 2.0).abs() < 1e-12);
    }
}
