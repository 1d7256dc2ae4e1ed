//! Equivariant optimal-transport flow matching for Boltzmann generators.

pub mod error;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod energy;
pub mod eval;
pub mod geom;
pub mod matching;
pub mod net;
pub mod ode;
pub mod sampler;
pub mod store;

pub use error::{Error, Result};
