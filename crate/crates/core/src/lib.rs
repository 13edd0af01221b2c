//! Synthesis and verification of functional observers for linear systems with a
//! state delay and delayed output measurements.
//!
//! The crate is organised bottom-up: [`linalg`] holds the dense kernels, [`model`]
//! the plant/functional/observer types, [`existence`] and [`synthesis`] the
//! constraint builders and observer assembly, [`lmi`] the Lyapunov–Krasovskii
//! certificates and [`dde`] the simulation and spectral verification tools.

use openblas_src as _;

pub mod dde;
pub mod error;
pub mod exec;
pub mod existence;
pub mod fixtures;
pub mod linalg;
pub mod lmi;
pub mod model;
pub mod synthesis;

pub use error::{Error, Result};
pub use linalg::Matrix;
