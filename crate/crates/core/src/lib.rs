//! Joint estimation of multiple Gaussian linear SEMs that share a causal
//! order and a sparse union of supports.
//!
//! The pieces:
//! - [`graph`]: permutations, permutation masks and smooth acyclicity functions.
//! - [`sim`]: ground-truth families and data sampling.
//! - [`group_lasso`]: the l1/l2 group norm, its prox and the fixed-order solver.
//! - [`joint`]: the continuous masked program and its proximal solver.
//! - [`oracle`]: exhaustive search over orders for small problems.
//! - [`metrics`]: structure metrics, order success and θ.
//! - [`io`] and [`harness`]: file formats, sweeps and aggregation.

pub mod error;
mod expm;
pub mod graph;
pub mod group_lasso;
pub mod harness;
pub mod io;
pub mod joint;
pub mod metrics;
pub mod oracle;
pub mod sim;

pub use error::{Error, Result};
pub use expm::expm;
pub use graph::{AcyclicityVariant, Permutation};
pub use group_lasso::WeightStack;
pub use joint::{fit_joint, EstimationResult, Hyperparams};
pub use sim::{SemFamily, SemModel, SimConfig, TaskBundle};
