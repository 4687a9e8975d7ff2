//! Distributed model predictive control for cascaded hydro power valleys.

pub mod bnb;
pub mod error;
pub mod instances;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod network;
pub mod observer;
pub mod problem;
pub mod serde_util;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
