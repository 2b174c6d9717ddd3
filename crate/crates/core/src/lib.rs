//! Driven-dissipative Kerr cavity: Liouvillian spectra, metastable two-mode
//! dynamics, geometric connections and dynamical hysteresis.
//!
//! All quantities are in units of the cavity decay rate κ. The generator
//! convention is i d|ρ)/dt = 𝓛|ρ), so eigenvalues read λ = ω − iγ with γ ≥ 0.

pub mod critical;
pub mod dynamics;
pub mod error;
pub mod extraction;
pub mod geometry;
pub mod io;
mod krylov;
pub mod liouville;
pub mod meanfield;
pub mod model;
pub mod operators;
pub mod spectral;
pub mod spline;

pub use error::{Error, Result};
pub use liouville::{AffineLiouvillian, Liouvillian};
pub use model::{Branch, DensityState, ModelParams, ObservableSeries, SweepParameter};
pub use spectral::SpectralData;

pub type C64 = num_complex::Complex64;
