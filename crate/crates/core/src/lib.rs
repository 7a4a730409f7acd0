//! Shell models of turbulence (GOY and SABRA) driven by pure-jump Lévy noise.
//!
//! The crate covers the noise (`levy`), the finite-shell model (`shell`),
//! time stepping and the mild-solution split (`integrator`), gradient
//! estimation without differentiating the test function (`bel`) and the
//! ensemble probes used to study ergodicity (`ergolab`).

pub mod bel;
pub mod ergolab;
pub mod error;
pub mod integrator;
pub mod levy;
pub mod quad;
pub mod rng;
pub mod shell;
pub mod stats;

pub use error::{Error, Result};
