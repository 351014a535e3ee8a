//! Multi-variable conformal prediction.
//!
//! Calibrates prediction sets `{r : s(r, q) <= 0}` over residuals
//! `r = y - f(x)` of an external point predictor, with finite-sample coverage
//! certificates:
//!
//! - [`scp`]: scalar, dimension-wise (Bonferroni) and data-split split
//!   conformal baselines.
//! - [`remmcp`]: cascading scenario programs with constraint removal; the
//!   expected coverage is fixed a priori by the outlier budget.
//! - [`relmcp`]: penalised constraint relaxation with an a-posteriori
//!   miscoverage certificate and an adaptive penalty search.
//!
//! [`evalharness`] measures coverage and Monte Carlo volume and runs seeded
//! multi-run experiments; [`dataio`] covers synthetic generators, CSV and the
//! JSON model format.

pub mod dataio;
pub mod error;
pub mod evalharness;
pub mod model;
pub mod numerics;
pub mod relmcp;
pub mod remmcp;
pub mod residuals;
pub mod rng;
pub mod scores;
pub mod scp;

pub use error::{McpError, Result};
pub use model::{CalibratedModel, Certificate, Method};
pub use residuals::ResidualSet;
pub use scores::{FamilyKind, ParamVector, PredictionSet, ScoreFamily};
