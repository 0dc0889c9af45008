//! Two-covariance PLDA: fitting, closed-form pair scoring, and the discrete
//! and quadrature reference evaluations of the same likelihood ratio.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::cldf::speaker_scatter;
use crate::error::{Error, Result};
use crate::ivector::Embedding;
use crate::math::{cholesky, mvn_log_pdf, normal_log_pdf};
use crate::persist::{BinReader, BinWriter, Provenance};

const PLDA_MAGIC: &[u8; 4] = b"FVCP";
/// Quadrature intervals used by [`plda_score_integral_oracle`].
pub const QUADRATURE_INTERVALS: usize = 20_000;

#[derive(Clone, Debug, PartialEq)]
pub struct PldaModel {
    pub mu_b: DVector<f64>,
    pub sigma_w: DMatrix<f64>,
    pub sigma_b: DMatrix<f64>,
}

impl PldaModel {
    pub fn new(mu_b: DVector<f64>, sigma_w: DMatrix<f64>, sigma_b: DMatrix<f64>) -> Result<Self> {
        let d = mu_b.len();
        if sigma_w.shape() != (d, d) || sigma_b.shape() != (d, d) {
            return Err(Error::InvalidModel("PLDA covariance shapes differ from the mean".into()));
        }
        if sigma_w.iter().chain(sigma_b.iter()).chain(mu_b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite PLDA parameter".into()));
        }
        Ok(PldaModel { mu_b, sigma_w, sigma_b })
    }

    pub fn scalar(mu_b: f64, var_w: f64, var_b: f64) -> Self {
        PldaModel {
            mu_b: DVector::from_element(1, mu_b),
            sigma_w: DMatrix::from_element(1, 1, var_w),
            sigma_b: DMatrix::from_element(1, 1, var_b),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu_b.len()
    }

    /// Pooled within-speaker covariance (divide by the total count of
    /// recordings from multi-recording speakers), population mean and
    /// covariance of speaker means.
    pub fn fit(labels: &[String], vectors: &[DVector<f64>]) -> Result<Self> {
        let sc = speaker_scatter(labels, vectors)?;
        if sc.speakers < 2 {
            return Err(Error::InsufficientData(format!(
                "PLDA needs at least two speakers, found {}",
                sc.speakers
            )));
        }
        if sc.within_count == 0 {
            return Err(Error::InsufficientData(
                "no speaker has two or more recordings".into(),
            ));
        }
        let d = sc.within.nrows();
        let mut sigma_w = sc.within;
        if cholesky(&sigma_w, "").is_err() {
            let scale = if sigma_w.trace() > 0.0 {
                sigma_w.trace() / d as f64
            } else if sc.between.trace() > 0.0 {
                sc.between.trace() / d as f64
            } else {
                1.0
            };
            log::warn!("PLDA within-speaker covariance is not positive definite; flooring");
            sigma_w += DMatrix::identity(d, d) * (1e-8 * scale);
        }
        PldaModel::new(sc.mean_of_means, sigma_w, sc.between)
    }

    pub fn fit_embeddings(labels: &[String], embeddings: &[Embedding]) -> Result<Self> {
        let v: Vec<DVector<f64>> = embeddings.iter().map(|e| e.values.clone()).collect();
        Self::fit(labels, &v)
    }

    pub fn scorer(&self) -> Result<PldaScorer> {
        let d = self.dim();
        let total = &self.sigma_w + &self.sigma_b;
        let mut stacked = DMatrix::zeros(2 * d, 2 * d);
        stacked.view_mut((0, 0), (d, d)).copy_from(&total);
        stacked.view_mut((d, d), (d, d)).copy_from(&total);
        stacked.view_mut((0, d), (d, d)).copy_from(&self.sigma_b);
        stacked.view_mut((d, 0), (d, d)).copy_from(&self.sigma_b);
        let mut mean2 = DVector::zeros(2 * d);
        mean2.rows_mut(0, d).copy_from(&self.mu_b);
        mean2.rows_mut(d, d).copy_from(&self.mu_b);
        Ok(PldaScorer {
            mu_b: self.mu_b.clone(),
            mean2,
            joint: cholesky(&stacked, "stacked PLDA covariance")?,
            marginal: cholesky(&total, "PLDA marginal covariance")?,
        })
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        let mut w = BinWriter::new(PLDA_MAGIC);
        w.u64(self.dim() as u64)
            .f64s(self.mu_b.as_slice())
            .f64s(self.sigma_w.as_slice())
            .f64s(self.sigma_b.as_slice())
            .provenance(provenance);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        let mut r = BinReader::open(path, PLDA_MAGIC)?;
        let d = r.dim()?;
        let mu = DVector::from_vec(r.f64s(d)?);
        let w = DMatrix::from_vec(d, d, r.f64s(d * d)?);
        let b = DMatrix::from_vec(d, d, r.f64s(d * d)?);
        let prov = r.provenance()?;
        r.finish()?;
        Ok((PldaModel::new(mu, w, b).map_err(|e| Error::format(path, e.to_string()))?, prov))
    }
}

/// Factorized covariances for repeated pair scoring.
pub struct PldaScorer {
    mu_b: DVector<f64>,
    mean2: DVector<f64>,
    joint: Cholesky<f64, Dyn>,
    marginal: Cholesky<f64, Dyn>,
}

impl PldaScorer {
    /// Natural-log ratio of the same-speaker joint density to the product of marginals.
    pub fn score(&self, v_q: &DVector<f64>, v_k: &DVector<f64>) -> Result<f64> {
        let d = self.mu_b.len();
        if v_q.len() != d || v_k.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: if v_q.len() != d { v_q.len() } else { v_k.len() },
            });
        }
        let mut stacked = DVector::zeros(2 * d);
        stacked.rows_mut(0, d).copy_from(v_q);
        stacked.rows_mut(d, d).copy_from(v_k);
        let num = mvn_log_pdf(&stacked, &self.mean2, &self.joint);
        let den = mvn_log_pdf(v_q, &self.mu_b, &self.marginal) + mvn_log_pdf(v_k, &self.mu_b, &self.marginal);
        Ok(num - den)
    }
}

pub fn plda_score(model: &PldaModel, v_q: &DVector<f64>, v_k: &DVector<f64>) -> Result<f64> {
    model.scorer()?.score(v_q, v_k)
}

/// Scalar reference: averages over an explicit list of speaker means.
/// Numerator pairs both recordings with the same mean; denominator pairs
/// `v_k` with mean `i` and `v_q` with every other mean `j != i`.
pub fn plda_score_discrete_oracle(speaker_means: &[f64], var_w: f64, v_q: f64, v_k: f64) -> Result<f64> {
    let n = speaker_means.len();
    if n < 2 {
        return Err(Error::InsufficientData("need at least two speaker means".into()));
    }
    let pdf = |x: f64, m: f64| normal_log_pdf(x, m, var_w).exp();
    let fq: Vec<f64> = speaker_means.iter().map(|&m| pdf(v_q, m)).collect();
    let fk: Vec<f64> = speaker_means.iter().map(|&m| pdf(v_k, m)).collect();
    let sum_q: f64 = fq.iter().sum();
    let num = fq.iter().zip(&fk).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let den = fk
        .iter()
        .zip(&fq)
        .map(|(k, q)| k * (sum_q - q) / (n - 1) as f64)
        .sum::<f64>()
        / n as f64;
    Ok(num.ln() - den.ln())
}

/// Scalar reference: composite Simpson quadrature of the same-speaker and
/// different-speaker integrals over `mu_b +- 10 sigma_b`.
pub fn plda_score_integral_oracle(mu_b: f64, var_w: f64, var_b: f64, v_q: f64, v_k: f64) -> f64 {
    let sd_b = var_b.sqrt();
    let (lo, hi) = (mu_b - 10.0 * sd_b, mu_b + 10.0 * sd_b);
    let n = QUADRATURE_INTERVALS;
    let h = (hi - lo) / n as f64;
    let (mut both, mut only_q, mut only_k) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let mu = lo + h * i as f64;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let prior = normal_log_pdf(mu, mu_b, var_b).exp();
        let fq = normal_log_pdf(v_q, mu, var_w).exp();
        let fk = normal_log_pdf(v_k, mu, var_w).exp();
        both += w * fq * fk * prior;
        only_q += w * fq * prior;
        only_k += w * fk * prior;
    }
    let s = h / 3.0;
    (both * s).ln() - (only_q * s).ln() - (only_k * s).ln()
}
