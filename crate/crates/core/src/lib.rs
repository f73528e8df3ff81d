//! Simulation and estimation for the linear parabolic SPDE
//!
//! ```text
//! dX_t(y) = (θ0 X + θ1 ∂_y X + θ2 ∂_yy X) dt + σ_t dB_t(y),   y ∈ [0, 1],  X_t(0) = X_t(1) = 0
//! ```
//!
//! observed on a discrete grid `(i/n, y_j)`.
//!
//! * [`model`]: parameters, eigensystem and volatility paths.
//! * [`simulate`]: exact spectral simulation of the observed field.
//! * [`estimate`]: realized volatility, volatility and quarticity estimators, confidence
//!   intervals and the log-ratio curvature estimator.
//! * [`regress`]: joint least-squares estimation of normalized integrated volatility and curvature.
//! * [`oracle`]: exact finite-`K` moments and first-order moment formulas.
//! * [`harness`]: reproducible parallel Monte Carlo experiments.

pub mod error;
pub mod estimate;
pub mod harness;
pub mod model;
pub mod normal;
pub mod oracle;
pub mod regress;
pub mod simulate;

pub use error::{Error, Result};
pub use estimate::EstimateWithCI;
pub use harness::{ExperimentConfig, ExperimentReport};
pub use model::{OperatorParams, VolatilitySpec};
pub use regress::{RegressionData, RegressionFit};
pub use simulate::{FieldSample, InitialCondition, SamplingGrid, SimulationConfig, Synthesizer};
