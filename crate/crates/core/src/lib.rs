//! Horizon-based observers and trackers for discrete-time systems.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod deadbeat;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mhe;
pub mod min_energy;
pub mod nonlinear;
pub mod random;
pub mod registry;
pub mod system;

pub use error::{ConfigError, Error, Result, Violation};
pub use linalg::{Matrix, Vector};
