//! Estimation, debiased inference and FDR-controlled simultaneous testing for
//! high-dimensional two-component mixed linear regression
//!
//! ```text
//! y = ⟨x, β₁⟩ + ε  with probability ω,   y = ⟨x, β₂⟩ + ε  otherwise,   ε ~ N(0, σ²).
//! ```
//!
//! The pipeline is [`init::initialize`] → [`em::em_fit`] → [`debias::debias`]
//! → [`inference::confidence_intervals`] / [`inference::multiple_test`].
//! [`sim`] generates synthetic data and runs Monte-Carlo experiments, and
//! [`netgraph`] builds node-wise dependence networks.

pub mod debias;
pub mod em;
pub mod error;
pub mod inference;
pub mod init;
pub mod lasso;
pub mod model;
pub mod netgraph;
pub mod normal;
pub mod sim;

pub use nalgebra;

pub use debias::{debias, DebiasMethod, DebiasOptions, DebiasedFit, SurrogateOptions, VarianceRule};
pub use em::{em_fit, EmConfig, EmFit, SigmaMode};
pub use error::{MlrError, Result};
pub use inference::{confidence_intervals, multiple_test, IntervalSet, TestOutcome};
pub use init::{initialize, InitConfig, Tuning};
pub use model::{MlrDataset, Responsibilities, ThetaParams};
