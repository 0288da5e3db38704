//! MU-MIMO uplink symbol detection: expectation propagation (EP), Bayesian
//! parallel interference cancellation (BPIC), their GNN-refined variants
//! GEPNet and GPICNet, training, and posterior-approximation diagnostics.
// NaN-rejecting guards are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cavity;
pub mod complexity;
pub mod detect;
pub mod error;
pub mod gnn;
pub mod linalg;
pub mod model;
pub mod neural;
pub mod rng;
pub mod sweep;
pub mod train;

pub use cavity::{discrete_moments, gaussian_product, CavityDistribution};
pub use error::{Error, Result};
pub use model::{sample_instance, Constellation, SystemInstance};
pub use rng::RngStream;
