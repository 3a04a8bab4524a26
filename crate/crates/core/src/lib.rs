//! Two-scale Lorenz-96 testbed for data-driven sub-grid parameterization.
//!
//! The crate covers the whole chain: integrating the coupled slow/fast
//! system, characterising its chaos through the Lyapunov spectrum, learning
//! closures for the fast-scale forcing (pooled polynomial regression and
//! per-component sparse regression over monomial dictionaries), modelling the
//! closure residuals as AR(1) noise, and scoring the reduced models by
//! trajectory error, marginal-density divergence and ensemble Kalman filter
//! skill.

pub mod ar;
pub mod chaos;
pub mod dictionary;
pub mod dynamics;
pub mod enkf;
pub mod error;
pub mod experiment;
pub mod regression;
pub mod rng;
pub mod sparse;
pub mod stats;

pub use error::{Error, Result};
