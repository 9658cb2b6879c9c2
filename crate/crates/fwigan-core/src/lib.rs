//! fwigan-core: differentiable 2D acoustic wave propagation and adversarial
//! full-waveform inversion.
//!
//! The crate is generic over the scalar type through [`scalar::Scalar`]
//! (implemented for `f32` and `f64`); the aliases below fix the common
//! concrete choices.

pub mod critic;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod modelzoo;
pub mod nn;
pub mod optimize;
pub mod propagator;
pub mod rng;
pub mod scalar;
pub mod source;

pub use geometry::{AcquisitionGeometry, Grid2D, VelocityModel};
pub use propagator::{ShotGathers, SpongeProfile, Wavefields};
pub use source::Wavelet;

pub type VelocityModel64 = geometry::VelocityModel<f64>;
pub type VelocityModel32 = geometry::VelocityModel<f32>;
pub type ShotGathers64 = propagator::ShotGathers<f64>;
pub type ShotGathers32 = propagator::ShotGathers<f32>;
