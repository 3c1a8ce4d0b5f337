//! Simulation of quarter, three-quarter and low-resolution image sensors and
//! reconstruction of the high-resolution image with a locally fully
//! connected network (LFCR) followed by a VDSR residual enhancer.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod image;
pub mod layer;
pub mod lfcr;
pub mod metrics;
pub mod sensor;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vdsr;

pub use error::{Error, Result};
