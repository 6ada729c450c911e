//! Distributed scenario-based stochastic MPC for speed advisories to
//! human drivers crossing a signal-free intersection.

pub mod coordination;
pub mod error;
pub mod linmodel;
pub mod ocp;
pub mod qp;
pub mod scenario;
pub mod sim;
pub mod stability;

pub use error::{Error, Result};
