//! Learning finite-horizon optimal feedback laws for control-affine systems
//! from value-function surrogates trained over ensembles of initial states.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bilinear;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod learning;
pub mod metrics;
pub mod models;
pub mod ode;
pub mod optimize;
pub mod oracle;
pub mod problem;

pub use error::{Error, Result};
