//! Numerical kernel shared by the calibrators.

pub mod kmeans;
pub mod linalg;
pub mod optim;
pub mod roots;
pub mod special;

pub use kmeans::{kmeans, KMeansResult};
pub use optim::{
    forward_difference, minimize_constrained, minimize_constrained_with, minimize_unconstrained,
    ConstrainedOptions, ConstraintSet, OptimProblem, OptimResult,
};
pub use roots::bisect_root;
pub use special::{ln_beta, ln_gamma, log_binomial, reg_inc_beta};
