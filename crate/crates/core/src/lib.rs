//! Quantum accelerator modes near kicked-rotor resonances of arbitrary order.
//!
//! - [`resonance`]: rational resonances, resonant quasi-momenta, Gauss
//!   coefficients.
//! - [`quantum`]: exact one-kick propagation of the gravity-kicked rotor and
//!   ensemble tau scans.
//! - [`epsmaps`]: the epsilon-classical torus maps indexed by periodic
//!   delta-sequences.
//! - [`orbits`]: periodic orbits, jumping indices, accelerations and ray
//!   stability.
//! - [`detect`]: accelerator-mode tracking in simulated momentum
//!   distributions.
//! - [`io`]: CSV formats.

pub mod detect;
pub mod epsmaps;
pub mod error;
pub mod io;
pub mod orbits;
pub mod quantum;
pub mod resonance;

pub use error::{QamError, Result};
