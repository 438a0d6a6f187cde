//! Mixed-effects modelling of longitudinal curves.
//!
//! Each subject's trajectory is expanded in cubic B-spline bases: a shared
//! mean curve (fixed effects) plus a subject-specific deviation (random
//! effects with an unstructured covariance) and i.i.d. Gaussian noise.
//! Parameters are estimated by an EM algorithm on the marginal likelihood,
//! and the basis dimensions are chosen by information criteria, including a
//! variant whose penalty uses the analytic Hessian of the marginal
//! log-likelihood. A seeded Monte Carlo harness measures how often each
//! criterion recovers the dimensions used to generate the data.

pub mod bspline;
pub mod criteria;
mod error;
pub mod estimation;
pub mod model;
pub mod simulation;

pub use error::{Error, Result};
