//! Snapshot spectral imaging: a coded-aperture (CASSI) forward model, a small
//! reverse-mode tensor engine, and a focal-modulation U-Net that reconstructs
//! hyperspectral cubes and detects objects from a single 2-D measurement.

pub mod cassi;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod detection;
pub mod focal;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod params;
pub mod suites;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
