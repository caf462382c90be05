//! Cavity cat-state preparation by continuous quantum non-demolition
//! photon-number measurement and coherent-displacement feedback.
//!
//! The crate is organized bottom-up:
//!
//! - [`fock`]: truncated Fock space, standard states, displacement, Husimi Q.
//! - [`sme`]: Itô integration of the conditioned stochastic master equation.
//! - [`protocol`]: the feedback / displace / probe / center stage machine.
//! - [`crescent`]: crescent eigenstates and finite-β measurement statistics.
//! - [`fidelity`]: optimal overlap with two-component displaced-squeezed states.
//! - [`ensemble`]: Monte Carlo orchestration, statistics and persistence.
//! - [`cli`]: the command-line surface used by the `qnd-cat` binary.

pub mod cli;
pub mod config;
pub mod crescent;
pub mod ensemble;
pub mod error;
pub mod fidelity;
pub mod fock;
pub mod io;
pub mod protocol;
pub mod simplex;
pub mod sme;

pub use error::{Error, Result};
pub use num_complex::Complex64;
