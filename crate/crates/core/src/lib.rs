//! Monte Carlo evaluation of the stochastic representation of mixed
//! Robin/Dirichlet backward parabolic problems on domains with a moving
//! cavity, with a finite-difference reference solver, a shape cost
//! functional and a Bayesian inverse layer.

pub mod bayes;
pub mod config;
pub mod error;
pub mod estimator;
pub mod expr;
pub mod fd;
pub mod geometry;
pub mod inverse;
pub mod observation;
pub mod problem;
pub mod rng;
pub mod run;
pub mod sde;
pub mod sparse;

pub use error::{Error, Result};
