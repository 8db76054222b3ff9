//! Physics-informed optical inversion and spectral unmixing of spectroscopic
//! photoacoustic (sPA) pixels.
//!
//! The crate is organised bottom-up:
//!
//! - [`spectra`]: wavelength grids, chromophore absorption spectra and the
//!   rectified pseudoinverse unmixing kernel.
//! - [`forward`]: the diffusion-approximation optical forward model.
//! - [`baselines`]: nonnegative least squares and HALS nonnegative matrix
//!   factorization.
//! - [`nn`]: activations, batch normalization, dense blocks and Adam.
//! - [`model`]: the SPOI-AE autoencoder (two encoders plus the physics decoder)
//!   and its training loop.
//! - [`metrics`]: MSE, MSAD, per-wavelength R², average spectra and SO2.
//! - [`phantom`]: labeled synthetic datasets with blood inclusions at depth.
//! - [`io`]: dataset, tensor-record, mask and CSV formats.

// `!(x > 0.0)` deliberately rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod batch;
pub mod config;
pub mod error;
pub mod forward;
pub mod io;
mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod spectra;

pub use batch::PixelBatch;
pub use error::{Error, Result};
pub use spectra::{ConcentrationMatrix, SpectraMatrix, WavelengthGrid};

use std::fmt::{Debug, Display};

/// Floating-point element type usable by the networks and the decoder.
///
/// Training runs in `f32`; gradient checks and oracles instantiate `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
