//! Affine score-to-log-likelihood-ratio calibration: pooled-variance
//! two-Gaussian closed form and prior-weighted logistic regression.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{normal_log_pdf, softplus};
use crate::persist::{ConfigHash, Provenance};

pub const MAX_IRLS_ITERATIONS: usize = 200;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMethod {
    PooledGaussian,
    #[default]
    Logistic,
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationMethod::PooledGaussian => "pooled_gaussian",
            CalibrationMethod::Logistic => "logistic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mu_same: f64,
    pub mu_diff: f64,
    pub pooled_variance: f64,
}

impl GaussianSummary {
    /// Ratio of the two class densities at `score`, evaluated directly.
    pub fn direct_log_ratio(&self, score: f64) -> f64 {
        normal_log_pdf(score, self.mu_same, self.pooled_variance)
            - normal_log_pdf(score, self.mu_diff, self.pooled_variance)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationModel {
    pub method: CalibrationMethod,
    pub intercept: f64,
    pub slope: f64,
    pub summary: Option<GaussianSummary>,
    pub n_same: usize,
    pub n_diff: usize,
    /// SHA-256 of the training score file, when one exists.
    pub scores_fingerprint: String,
    pub provenance: Provenance,
}

impl CalibrationModel {
    pub fn from_coefficients(method: CalibrationMethod, intercept: f64, slope: f64) -> Self {
        CalibrationModel {
            method,
            intercept,
            slope,
            summary: None,
            n_same: 0,
            n_diff: 0,
            scores_fingerprint: String::new(),
            provenance: Provenance::default(),
        }
    }

    /// Natural-log likelihood ratio `a + b * score`.
    pub fn apply(&self, score: f64) -> f64 {
        self.intercept + self.slope * score
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "method={}\na={}\nb={}\n",
            self.method, self.intercept, self.slope
        );
        if let Some(g) = &self.summary {
            s += &format!(
                "mu_same={}\nmu_diff={}\npooled_variance={}\n",
                g.mu_same, g.mu_diff, g.pooled_variance
            );
        }
        s += &format!(
            "n_same={}\nn_diff={}\nscores_sha256={}\nseed={}\nconfig_hash={}\n",
            self.n_same,
            self.n_diff,
            self.scores_fingerprint,
            self.provenance.seed,
            self.provenance.config_hash
        );
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|r| Error::format(path, r))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let get = |k: &str| -> Option<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
        };
        let need = |k: &str| get(k).ok_or_else(|| format!("missing {k}"));
        let num = |k: &str| -> std::result::Result<f64, String> {
            need(k)?.parse::<f64>().map_err(|_| format!("bad {k}"))
        };
        let method = match need("method")? {
            "pooled_gaussian" => CalibrationMethod::PooledGaussian,
            "logistic" => CalibrationMethod::Logistic,
            other => return Err(format!("unknown method {other}")),
        };
        let summary = if get("mu_same").is_some() {
            Some(GaussianSummary {
                mu_same: num("mu_same")?,
                mu_diff: num("mu_diff")?,
                pooled_variance: num("pooled_variance")?,
            })
        } else {
            None
        };
        let (a, b) = (num("a")?, num("b")?);
        if !(a.is_finite() && b.is_finite()) {
            return Err("non-finite coefficients".into());
        }
        Ok(CalibrationModel {
            method,
            intercept: a,
            slope: b,
            summary,
            n_same: num("n_same")? as usize,
            n_diff: num("n_diff")? as usize,
            scores_fingerprint: need("scores_sha256")?.to_string(),
            provenance: Provenance {
                seed: need("seed")?.parse().map_err(|_| "bad seed".to_string())?,
                config_hash: ConfigHash::from_hex(need("config_hash")?)
                    .ok_or_else(|| "bad config_hash".to_string())?,
            },
        })
    }
}

fn check_classes(same: &[f64], diff: &[f64]) -> Result<()> {
    if same.len() < 2 || diff.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "calibration needs two scores per class, got {} same and {} different",
            same.len(),
            diff.len()
        )));
    }
    if same.iter().chain(diff).any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite calibration score".into()));
    }
    Ok(())
}

/// `b = (mu_s - mu_d) / var`, `a = -b (mu_s + mu_d) / 2`.
pub fn from_gaussian_summary(g: GaussianSummary) -> Result<CalibrationModel> {
    if !(g.pooled_variance > 0.0) {
        return Err(Error::Numerical("zero pooled score variance".into()));
    }
    let b = (g.mu_same - g.mu_diff) / g.pooled_variance;
    let a = -b * (g.mu_same + g.mu_diff) / 2.0;
    let mut m = CalibrationModel::from_coefficients(CalibrationMethod::PooledGaussian, a, b);
    m.summary = Some(g);
    Ok(m)
}

pub fn fit_pooled_gaussian(same: &[f64], diff: &[f64]) -> Result<CalibrationModel> {
    check_classes(same, diff)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ms, md) = (mean(same), mean(diff));
    let ss: f64 = same.iter().map(|s| (s - ms).powi(2)).sum::<f64>()
        + diff.iter().map(|s| (s - md).powi(2)).sum::<f64>();
    let mut m = from_gaussian_summary(GaussianSummary {
        mu_same: ms,
        mu_diff: md,
        pooled_variance: ss / (same.len() + diff.len()) as f64,
    })?;
    m.n_same = same.len();
    m.n_diff = diff.len();
    Ok(m)
}

/// Prior-weighted binomial deviance, each class carrying half the total weight.
pub fn weighted_deviance(same: &[f64], diff: &[f64], a: f64, b: f64) -> f64 {
    let n = (same.len() + diff.len()) as f64;
    let ws = n / (2.0 * same.len() as f64);
    let wd = n / (2.0 * diff.len() as f64);
    2.0 * (ws * same.iter().map(|s| softplus(-(a + b * s))).sum::<f64>()
        + wd * diff.iter().map(|s| softplus(a + b * s)).sum::<f64>())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression by Newton/IRLS with per-trial weights `N / (2 N_class)`.
/// Stops when the gradient norm, divided by the total weight, falls below
/// [`GRADIENT_TOLERANCE`].
pub fn fit_logistic(same: &[f64], diff: &[f64]) -> Result<CalibrationModel> {
    check_classes(same, diff)?;
    let fold = |v: &[f64], f: fn(f64, f64) -> f64, init| v.iter().copied().fold(init, f);
    let (min_s, max_s) = (fold(same, f64::min, f64::INFINITY), fold(same, f64::max, f64::NEG_INFINITY));
    let (min_d, max_d) = (fold(diff, f64::min, f64::INFINITY), fold(diff, f64::max, f64::NEG_INFINITY));
    if max_d <= min_s || max_s <= min_d {
        return Err(Error::PerfectSeparation);
    }
    let n = (same.len() + diff.len()) as f64;
    let ws = n / (2.0 * same.len() as f64);
    let wd = n / (2.0 * diff.len() as f64);
    let trials = || {
        same.iter()
            .map(move |&s| (s, 1.0, ws))
            .chain(diff.iter().map(move |&s| (s, 0.0, wd)))
    };
    let (mut a, mut b) = (0.0f64, 0.0f64);
    let mut dev = weighted_deviance(same, diff, a, b);
    for _ in 0..MAX_IRLS_ITERATIONS {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (s, t, w) in trials() {
            let p = sigmoid(a + b * s);
            let r = w * (p - t);
            g0 += r;
            g1 += r * s;
            let c = w * p * (1.0 - p);
            h00 += c;
            h01 += c * s;
            h11 += c * s * s;
        }
        if (g0 * g0 + g1 * g1).sqrt() / n < GRADIENT_TOLERANCE {
            let mut m = CalibrationModel::from_coefficients(CalibrationMethod::Logistic, a, b);
            m.n_same = same.len();
            m.n_diff = diff.len();
            return Ok(m);
        }
        let det = h00 * h11 - h01 * h01;
        if !(det > 0.0) {
            return Err(Error::Numerical("singular logistic Hessian".into()));
        }
        let da = (h11 * g0 - h01 * g1) / det;
        let db = (h00 * g1 - h01 * g0) / det;
        // Newton step with halving until the deviance does not increase.
        let mut step = 1.0;
        loop {
            let (na, nb) = (a - step * da, b - step * db);
            let nd = weighted_deviance(same, diff, na, nb);
            if nd <= dev || step < 1e-10 {
                a = na;
                b = nb;
                dev = nd;
                break;
            }
            step *= 0.5;
        }
    }
    Err(Error::NoConvergence(MAX_IRLS_ITERATIONS))
}

pub fn fit(method: CalibrationMethod, same: &[f64], diff: &[f64]) -> Result<CalibrationModel> {
    match method {
        CalibrationMethod::PooledGaussian => fit_pooled_gaussian(same, diff),
        CalibrationMethod::Logistic => fit_logistic(same, diff),
    }
}
