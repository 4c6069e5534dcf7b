//! HyperGPA: a hypernetwork that reads recent periods of coupled time
//! series and generates forecaster parameters for the next period.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod l1;
pub mod l2;
pub mod metrics;
pub mod path;
pub mod target;
pub mod train;

pub use error::{Error, Result};
