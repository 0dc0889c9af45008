//! Forensic voice comparison engine: MFCC features, channel compensation,
//! GMM-UBM and i-vector/PLDA scoring, score calibration and validation.

pub mod audio;
pub mod calibration;
pub mod cldf;
pub mod error;
pub mod features;
pub mod gmm;
pub mod ivector;
pub mod manifest;
pub mod math;
pub mod normalize;
pub mod persist;
pub mod pipeline;
pub mod plda;
pub mod scoring;
pub mod synthetic;
pub mod validation;

pub use error::{Error, Result};
