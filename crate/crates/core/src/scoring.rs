//! Specific-source GMM-UBM scoring: mean per-frame log-likelihood ratio.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gmm::{DiagonalGmm, CHUNK_FRAMES};

/// Uncalibrated score. Not a likelihood ratio until passed through calibration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub n_frames: usize,
}

fn check_shapes(speaker: &DiagonalGmm, ubm: &DiagonalGmm) -> Result<()> {
    if !speaker.same_shape(ubm) {
        return Err(Error::InvalidModel(format!(
            "speaker model {}x{} vs UBM {}x{}",
            speaker.components(),
            speaker.dim(),
            ubm.components(),
            ubm.dim()
        )));
    }
    Ok(())
}

pub fn frame_llr(speaker: &DiagonalGmm, ubm: &DiagonalGmm, x: &[f64]) -> Result<f64> {
    check_shapes(speaker, ubm)?;
    Ok(speaker.log_density(x)? - ubm.log_density(x)?)
}

pub fn score_recording(
    speaker: &DiagonalGmm,
    ubm: &DiagonalGmm,
    questioned: &FeatureMatrix,
) -> Result<Score> {
    check_shapes(speaker, ubm)?;
    if questioned.is_empty() {
        return Err(Error::InsufficientData("no questioned frames".into()));
    }
    if questioned.dims() != ubm.dim() {
        return Err(Error::DimensionMismatch {
            expected: ubm.dim(),
            got: questioned.dims(),
        });
    }
    let m = questioned.dims();
    // Chunk partial sums are added in order, independent of thread count.
    let partials: Vec<f64> = questioned
        .as_flat()
        .par_chunks(CHUNK_FRAMES * m)
        .map(|chunk| {
            chunk
                .chunks_exact(m)
                .map(|x| speaker.log_density(x).unwrap() - ubm.log_density(x).unwrap())
                .sum::<f64>()
        })
        .collect();
    let n = questioned.frames();
    let value = partials.iter().sum::<f64>() / n as f64;
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite score".into()));
    }
    Ok(Score { value, n_frames: n })
}
