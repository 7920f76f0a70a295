//! Mean-field-game solver and interacting-particle simulator.
//!
//! The crate is organised in layers: probability measures and test-function
//! dictionaries, controlled Lévy–Khintchine generators, forward kinetic
//! equations, backward mild Hamilton–Jacobi–Bellman solvers, the mean-field
//! fixed point, finite-population simulation, and sensitivity analysis.

pub mod error;
pub mod generators;
pub mod gridop;
pub mod hjb;
pub mod kinetic;
pub mod linalg;
pub mod measures;
pub mod mfg;
pub mod nparticle;
pub mod policy;
pub mod registry;
pub mod sensitivity;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
