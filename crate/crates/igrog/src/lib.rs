//! Non-Cartesian MRI reconstruction toolkit.
//!
//! The crate turns off-grid, field-corrupted multi-coil k-space data into
//! Cartesian data so that reconstruction can run on plain FFTs. It contains
//! three gridding routes (Kaiser-Bessel NUFFT, classic GROG via fractional
//! kernel powers, and implicit GRAPPA-kernel networks), the field-correction
//! machinery built on time segmentation, iterative solvers (CG-SENSE, FISTA
//! with L1 wavelet), and a quantitative benchmark harness.
//!
//! Conventions used throughout:
//! * k-space coordinates are in grid units (delta_k = 1, cycles per FOV);
//!   valid integer coordinates lie in `[-N/2, N/2)`.
//! * arrays are row-major, last axis fastest; k-space arrays are stored
//!   FFT-shifted so index 0 is the most negative frequency and DC sits at
//!   `floor(N/2)`.
//! * an image voxel at index `i` has spatial coordinate `r = i - floor(N/2)`
//!   in voxel units, so the forward model phase is `exp(-j 2 pi k r / N)`.
//! * everything computes in double precision; the file format additionally
//!   carries single precision for interchange.

pub mod analysis;
pub mod array;
pub mod dcf;
pub mod fft;
pub mod fieldcorr;
pub mod grog;
pub mod igrog;
pub mod io;
pub mod mlp;
pub mod nufft;
pub mod recon;
pub mod sim;
pub mod wavelet;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use array::{usable_calibration_region, CalRegion, Calibration, CoilMaps, ComplexArray, Grid, Trajectory};
pub use io::{read_array, write_array, Precision};
