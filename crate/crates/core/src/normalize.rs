//! Feature-domain channel compensation: CMS, CMVN and feature warping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, Stage};
use crate::math::inverse_normal_cdf;

pub const DEFAULT_HALF_WINDOW: usize = 150;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    pub half_window_frames: usize,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig {
            half_window_frames: DEFAULT_HALF_WINDOW,
        }
    }
}

/// Compensation applied after feature extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Compensation {
    None,
    Cms,
    Cmvn,
    /// CMS with a sliding window of `2*half_window+1` frames.
    LocalCms,
    LocalCmvn,
    #[default]
    Warp,
}

pub fn compensate(
    features: &FeatureMatrix,
    method: Compensation,
    warp: &WarpConfig,
) -> Result<FeatureMatrix> {
    match method {
        Compensation::None => Ok(features.clone()),
        Compensation::Cms => cms(features),
        Compensation::Cmvn => cmvn(features),
        Compensation::LocalCms => local_cms(features, warp.half_window_frames),
        Compensation::LocalCmvn => local_cmvn(features, warp.half_window_frames),
        Compensation::Warp => feature_warp(features, warp),
    }
}

fn mean_var(col: &[f64]) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn columns(features: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..features.dims()).map(|d| features.column(d)).collect()
}

/// Subtracts each dimension's mean over all frames.
pub fn cms(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    if features.is_empty() {
        return Err(Error::InsufficientData("CMS needs at least one frame".into()));
    }
    let cols: Vec<Vec<f64>> = columns(features)
        .into_iter()
        .map(|c| {
            let (m, _) = mean_var(&c);
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    Ok(features.with_columns(&cols, Stage::Compensated))
}

/// Mean and variance normalization with population variance. A constant
/// dimension becomes all zeros.
pub fn cmvn(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    if features.frames() < 2 {
        return Err(Error::InsufficientData("CMVN needs at least two frames".into()));
    }
    let cols: Vec<Vec<f64>> = columns(features)
        .into_iter()
        .enumerate()
        .map(|(d, c)| {
            let (m, var) = mean_var(&c);
            if var <= 0.0 {
                log::warn!("CMVN: dimension {d} has zero variance, zeroing it");
                vec![0.0; c.len()]
            } else {
                let sd = var.sqrt();
                c.iter().map(|v| (v - m) / sd).collect()
            }
        })
        .collect();
    Ok(features.with_columns(&cols, Stage::Compensated))
}

fn window(t: usize, len: usize, half: usize) -> std::ops::Range<usize> {
    t.saturating_sub(half)..(t + half + 1).min(len)
}

pub fn local_cms(features: &FeatureMatrix, half_window: usize) -> Result<FeatureMatrix> {
    local(features, half_window, false)
}

pub fn local_cmvn(features: &FeatureMatrix, half_window: usize) -> Result<FeatureMatrix> {
    local(features, half_window, true)
}

fn local(features: &FeatureMatrix, half_window: usize, scale: bool) -> Result<FeatureMatrix> {
    if features.frames() < 2 || half_window == 0 {
        return Err(Error::InsufficientData(
            "sliding normalization needs two frames and a nonzero window".into(),
        ));
    }
    let n = features.frames();
    let cols: Vec<Vec<f64>> = columns(features)
        .into_par_iter()
        .map(|c| {
            (0..n)
                .map(|t| {
                    let (m, var) = mean_var(&c[window(t, n, half_window)]);
                    if !scale {
                        c[t] - m
                    } else if var > 0.0 {
                        (c[t] - m) / var.sqrt()
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(features.with_columns(&cols, Stage::Compensated))
}

/// Warps one value track: within a window truncated at the edges, rank the
/// centre value (ties by frame order), `p = (r - 0.5) / M`, output `Phi^-1(p)`.
pub fn warp_track(track: &[f64], half_window: usize) -> Vec<f64> {
    let n = track.len();
    (0..n)
        .map(|t| {
            let w = window(t, n, half_window);
            let m = w.len();
            let x = track[t];
            // 1-based rank under a stable sort: strictly smaller values plus
            // equal values that come earlier in time, plus one.
            let rank = w
                .clone()
                .filter(|&s| track[s] < x || (track[s] == x && s < t))
                .count()
                + 1;
            inverse_normal_cdf((rank as f64 - 0.5) / m as f64)
        })
        .collect()
}

pub fn feature_warp(features: &FeatureMatrix, config: &WarpConfig) -> Result<FeatureMatrix> {
    if features.frames() < 2 {
        return Err(Error::InsufficientData("warping needs at least two frames".into()));
    }
    if config.half_window_frames == 0 {
        return Err(Error::InvalidConfig("warp half window must be >= 1".into()));
    }
    let cols: Vec<Vec<f64>> = columns(features)
        .par_iter()
        .map(|c| warp_track(c, config.half_window_frames))
        .collect();
    Ok(features.with_columns(&cols, Stage::Compensated))
}
