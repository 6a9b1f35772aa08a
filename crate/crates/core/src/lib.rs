//! Preconditioned stochastic gradient Langevin dynamics for Bayesian neural networks.

mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod net;
pub mod params;
pub mod precond;
pub mod prior;
pub mod rng;
pub mod sgld;

pub use error::{Error, Result};
