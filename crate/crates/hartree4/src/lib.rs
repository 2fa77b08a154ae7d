//! Numerical lab for L2-critical Hartree multisolitons in four dimensions.

pub mod approx_soliton;
pub mod cli_io;
pub mod error;
pub mod evolver;
pub mod field4;
pub mod ground_state;
pub mod linearized_ops;
pub mod mbody;
pub mod modulation;
pub mod multipole;
pub mod numerics;
pub mod radial_core;
pub mod vec4;

pub use error::{Error, Result};
