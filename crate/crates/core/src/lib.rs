//! Optimal finite-dimensional probe states for two-mode phase estimation
//! under particle loss.
//!
//! The crate is organised bottom-up:
//!
//! * [`fock`] — two-mode Fock basis, Schwinger operators and phase unitaries.
//! * [`channels`] — the particle-loss channel (Kraus form plus a four-mode
//!   trace-out reference).
//! * [`metrology`] — quantum and classical Fisher information, the symmetric
//!   logarithmic derivative and the measurement catalog.
//! * [`probes`] — the analytical noiseless optimal probe states and the
//!   small-loss expansion of their QFI.
//! * [`optimize`] — a COBYLA trust-region optimizer and the constrained probe
//!   search built on top of it.
//! * [`bayes`] — Monte-Carlo simulation of Bayesian phase estimation with the
//!   two-step SLD-measurement strategy and an adaptive counting baseline.
//!
//! Data-parallel loops (restarts, sweeps, trajectories, phase scans) go
//! through [`par`], which uses rayon when the `parallel` feature is enabled
//! and plain iterators otherwise.

pub mod bayes;
pub mod channels;
pub mod error;
pub mod fock;
pub mod io;
pub mod linalg;
pub mod metrology;
pub mod optimize;
pub mod par;
pub mod probes;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Complex double used for every amplitude and matrix element.
pub type C64 = nalgebra::Complex<f64>;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;
/// Dense complex column vector.
pub type CVector = nalgebra::DVector<C64>;
