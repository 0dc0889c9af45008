//! Baum-Welch statistics, total-variability training with a minimum-divergence
//! step, i-vector extraction, whitening, and the PCA-supervector extractor.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gmm::{DiagonalGmm, CHUNK_FRAMES};
use crate::math::{
    cholesky, condition_number, mean_of, scatter_about, sorted_symmetric_eigen, sym_inv_sqrt,
    sym_sqrt, NormalSampler,
};
use crate::persist::{BinReader, BinWriter, Provenance};

const STATS_MAGIC: &[u8; 4] = b"FVCS";
const TV_MAGIC: &[u8; 4] = b"FVCT";
const WHITEN_MAGIC: &[u8; 4] = b"FVCW";
const PCA_MAGIC: &[u8; 4] = b"FVCA";
/// Regularize a covariance before inversion only when it is this badly conditioned.
pub const MAX_CONDITION: f64 = 1e10;

/// Zeroth-order counts and centralized first-order sums of one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct BaumWelchStats {
    pub recording_id: String,
    pub counts: Vec<f64>,
    /// `G * M`, component-major.
    pub first: Vec<f64>,
    pub dim: usize,
}

impl BaumWelchStats {
    pub fn components(&self) -> usize {
        self.counts.len()
    }

    pub fn first_order(&self, g: usize) -> &[f64] {
        &self.first[g * self.dim..(g + 1) * self.dim]
    }

    pub fn total_count(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(STATS_MAGIC);
        w.u64(self.counts.len() as u64)
            .u64(self.dim as u64)
            .f64s(&self.counts)
            .f64s(&self.first);
        w.write_to(path)
    }

    pub fn load(path: &Path, recording_id: &str) -> Result<Self> {
        let mut r = BinReader::open(path, STATS_MAGIC)?;
        let g = r.dim()?;
        let m = r.dim()?;
        let counts = r.f64s(g)?;
        let first = r.f64s(g * m)?;
        r.finish()?;
        Ok(BaumWelchStats {
            recording_id: recording_id.to_string(),
            counts,
            first,
            dim: m,
        })
    }
}

/// `n_g = sum_i gamma_gi`, `f_g = sum_i gamma_gi (x_i - mu_g)`.
pub fn accumulate_stats(
    ubm: &DiagonalGmm,
    features: &FeatureMatrix,
    recording_id: &str,
) -> Result<BaumWelchStats> {
    if features.is_empty() {
        return Err(Error::InsufficientData("no frames for statistics".into()));
    }
    if features.dims() != ubm.dim() {
        return Err(Error::DimensionMismatch {
            expected: ubm.dim(),
            got: features.dims(),
        });
    }
    let (g, m) = (ubm.components(), ubm.dim());
    let partials: Vec<(Vec<f64>, Vec<f64>)> = features
        .as_flat()
        .par_chunks(CHUNK_FRAMES * m)
        .map(|chunk| {
            let mut counts = vec![0.0; g];
            let mut first = vec![0.0; g * m];
            let mut post = vec![0.0; g];
            for x in chunk.chunks_exact(m) {
                ubm.posteriors(x, &mut post);
                for (c, &p) in post.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    counts[c] += p;
                    let mu = ubm.mean(c);
                    for d in 0..m {
                        first[c * m + d] += p * (x[d] - mu[d]);
                    }
                }
            }
            (counts, first)
        })
        .collect();
    let mut counts = vec![0.0; g];
    let mut first = vec![0.0; g * m];
    for (c, f) in partials {
        counts.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
        first.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
    }
    Ok(BaumWelchStats {
        recording_id: recording_id.to_string(),
        counts,
        first,
        dim: m,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingStage {
    RawIvector,
    Whitened,
    Cldf,
}

impl fmt::Display for EmbeddingStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingStage::RawIvector => "raw_ivector",
            EmbeddingStage::Whitened => "whitened",
            EmbeddingStage::Cldf => "cldf",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub recording_id: String,
    pub stage: EmbeddingStage,
    pub values: DVector<f64>,
}

impl Embedding {
    pub fn new(recording_id: impl Into<String>, stage: EmbeddingStage, values: DVector<f64>) -> Self {
        Embedding {
            recording_id: recording_id.into(),
            stage,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Writes `recording_id,stage,v1..vR` rows.
pub fn write_embeddings_csv(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for e in embeddings {
        let mut row = vec![e.recording_id.clone(), e.stage.to_string()];
        row.extend(e.values.iter().map(|v| format!("{v:e}")));
        w.write_record(&row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Total-variability subspace `T` together with the UBM it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalVariabilityModel {
    pub ubm: DiagonalGmm,
    /// `(G*M) x R`; block `g` holds rows `g*M..(g+1)*M`.
    pub t: DMatrix<f64>,
}

/// Posterior of the latent factor for one recording.
#[derive(Clone, Debug)]
pub struct FactorPosterior {
    /// `L = I + sum_g n_g T_g' Sigma_g^-1 T_g`.
    pub precision: DMatrix<f64>,
    /// `L^-1 T' Sigma^-1 f`.
    pub mean: DVector<f64>,
    /// `L^-1`.
    pub covariance: DMatrix<f64>,
}

impl FactorPosterior {
    /// `L^-1 + mean mean'`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.covariance + &self.mean * self.mean.transpose()
    }
}

/// Sums gathered over all recordings in one E-step.
#[derive(Clone, Debug)]
pub struct EStepSums {
    /// Per component `sum_j n_gj <phi phi'>_j`, each `R x R`.
    pub weighted_second: Vec<DMatrix<f64>>,
    /// `sum_j f_j <phi_j>'`, `(G*M) x R`.
    pub first_cross: DMatrix<f64>,
    /// `sum_j <phi phi'>_j`.
    pub second_sum: DMatrix<f64>,
    pub recordings: usize,
}

impl EStepSums {
    /// `(1/J) sum_j (L_j^-1 + <phi_j><phi_j>')`.
    pub fn mean_second_moment(&self) -> DMatrix<f64> {
        &self.second_sum / self.recordings as f64
    }
}

impl TotalVariabilityModel {
    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    pub fn block(&self, g: usize) -> DMatrix<f64> {
        let m = self.ubm.dim();
        self.t.rows(g * m, m).clone_owned()
    }

    fn check(&self, stats: &BaumWelchStats) -> Result<()> {
        if stats.components() != self.ubm.components() || stats.dim != self.ubm.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ubm.components() * self.ubm.dim(),
                got: stats.components() * stats.dim,
            });
        }
        Ok(())
    }

    /// `T_g' Sigma_g^-1 T_g` for each component.
    pub fn component_precisions(&self) -> Vec<DMatrix<f64>> {
        let m = self.ubm.dim();
        (0..self.ubm.components())
            .into_par_iter()
            .map(|g| {
                let block = self.t.rows(g * m, m);
                let inv_var = DVector::from_iterator(m, self.ubm.variance(g).iter().map(|v| 1.0 / v));
                let scaled = DMatrix::from_diagonal(&inv_var) * block;
                block.transpose() * scaled
            })
            .collect()
    }

    /// `T' Sigma^-1 f`.
    fn projected_first(&self, stats: &BaumWelchStats) -> DVector<f64> {
        let r = self.rank();
        let m = self.ubm.dim();
        let mut b = DVector::zeros(r);
        for g in 0..self.ubm.components() {
            let var = self.ubm.variance(g);
            let f = stats.first_order(g);
            for d in 0..m {
                let w = f[d] / var[d];
                if w != 0.0 {
                    b.axpy(w, &self.t.row(g * m + d).transpose(), 1.0);
                }
            }
        }
        b
    }

    pub fn posterior_with(&self, precisions: &[DMatrix<f64>], stats: &BaumWelchStats) -> Result<FactorPosterior> {
        self.check(stats)?;
        let r = self.rank();
        let mut l = DMatrix::identity(r, r);
        for (g, p) in precisions.iter().enumerate() {
            if stats.counts[g] != 0.0 {
                l += p * stats.counts[g];
            }
        }
        let chol = cholesky(&l, "factor posterior precision")?;
        let mean = chol.solve(&self.projected_first(stats));
        let covariance = chol.inverse();
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite i-vector".into()));
        }
        Ok(FactorPosterior {
            precision: l,
            mean,
            covariance,
        })
    }

    pub fn posterior(&self, stats: &BaumWelchStats) -> Result<FactorPosterior> {
        self.posterior_with(&self.component_precisions(), stats)
    }

    pub fn e_step(&self, stats: &[BaumWelchStats]) -> Result<EStepSums> {
        let precisions = self.component_precisions();
        let posteriors = stats
            .par_iter()
            .map(|s| self.posterior_with(&precisions, s))
            .collect::<Result<Vec<_>>>()?;
        let (g, m, r) = (self.ubm.components(), self.ubm.dim(), self.rank());
        let mut sums = EStepSums {
            weighted_second: vec![DMatrix::zeros(r, r); g],
            first_cross: DMatrix::zeros(g * m, r),
            second_sum: DMatrix::zeros(r, r),
            recordings: stats.len(),
        };
        for (s, post) in stats.iter().zip(&posteriors) {
            let second = post.second_moment();
            for c in 0..g {
                if s.counts[c] != 0.0 {
                    sums.weighted_second[c] += &second * s.counts[c];
                }
            }
            let f = DVector::from_column_slice(&s.first);
            sums.first_cross.ger(1.0, &f, &post.mean, 1.0);
            sums.second_sum += second;
        }
        Ok(sums)
    }

    pub fn extract(&self, stats: &BaumWelchStats) -> Result<Embedding> {
        let post = self.posterior(stats)?;
        Ok(Embedding::new(
            stats.recording_id.clone(),
            EmbeddingStage::RawIvector,
            post.mean,
        ))
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        let (g, m, r) = (self.ubm.components(), self.ubm.dim(), self.rank());
        let mut w = BinWriter::new(TV_MAGIC);
        w.u64(g as u64)
            .u64(m as u64)
            .u64(r as u64)
            .f64s(self.ubm.weights())
            .f64s(self.ubm.supervector())
            .f64s(self.ubm.variances_flat());
        let rows: Vec<f64> = (0..g * m).flat_map(|i| self.t.row(i).iter().copied().collect::<Vec<_>>()).collect();
        w.f64s(&rows).provenance(provenance);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        let mut rd = BinReader::open(path, TV_MAGIC)?;
        let g = rd.dim()?;
        let m = rd.dim()?;
        let r = rd.dim()?;
        let weights = rd.f64s(g)?;
        let means = rd.f64s(g * m)?;
        let vars = rd.f64s(g * m)?;
        let t = rd.f64s(g * m * r)?;
        let prov = rd.provenance()?;
        rd.finish()?;
        let ubm = DiagonalGmm::from_flat(weights, means, vars, m)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok((
            TotalVariabilityModel {
                ubm,
                t: DMatrix::from_row_slice(g * m, r, &t),
            },
            prov,
        ))
    }
}

/// Maximum-likelihood update: `T_g = (sum_j f_gj <phi_j>') (sum_j n_gj <phi phi'>_j)^-1`.
pub fn m_step(sums: &EStepSums, components: usize, dim: usize) -> Result<DMatrix<f64>> {
    let r = sums.second_sum.nrows();
    let blocks = (0..components)
        .into_par_iter()
        .map(|g| {
            let cross = sums.first_cross.rows(g * dim, dim);
            let a = &sums.weighted_second[g];
            if a.iter().all(|&v| v == 0.0) {
                // Component never visited: leave its block at zero contribution.
                return Ok(DMatrix::zeros(dim, r));
            }
            let chol = cholesky(a, "component second-moment sum")?;
            // A symmetric, so T_g' = A^-1 cross'.
            Ok(chol.solve(&cross.transpose()).transpose())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = DMatrix::zeros(components * dim, r);
    for (g, b) in blocks.into_iter().enumerate() {
        t.rows_mut(g * dim, dim).copy_from(&b);
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite T update".into()));
    }
    Ok(t)
}

/// Minimum-divergence rescaling: `Q = (P^-1)^(1/2)` with
/// `P^-1 = (1/J) sum_j <phi phi'>_j`, then `T <- T Q`. Returns `(T, Q)`.
pub fn min_divergence(t_ml: &DMatrix<f64>, sums: &EStepSums) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = sym_sqrt(&sums.mean_second_moment())?;
    Ok((t_ml * &q, q))
}

#[derive(Clone, Debug)]
pub struct TvTraining {
    pub model: TotalVariabilityModel,
    /// Frobenius norm of the change in `T` at each iteration.
    pub frobenius_changes: Vec<f64>,
}

pub fn init_t_matrix(ubm: &DiagonalGmm, rank: usize, seed: u64) -> Result<TotalVariabilityModel> {
    let rows = ubm.components() * ubm.dim();
    if rank == 0 || rank > rows {
        return Err(Error::RankExceeded {
            requested: rank,
            available: rows,
        });
    }
    let mut rng = NormalSampler::new(seed);
    let t = DMatrix::from_fn(rows, rank, |_, _| rng.standard());
    Ok(TotalVariabilityModel { ubm: ubm.clone(), t })
}

pub fn train_t_matrix(
    stats: &[BaumWelchStats],
    ubm: &DiagonalGmm,
    rank: usize,
    iterations: usize,
    seed: u64,
) -> Result<TvTraining> {
    if iterations == 0 {
        return Err(Error::InvalidConfig("need at least one T-matrix iteration".into()));
    }
    if stats.is_empty() {
        return Err(Error::InsufficientData("no statistics for T training".into()));
    }
    if stats.len() < rank {
        log::warn!(
            "training a rank-{rank} subspace from only {} recordings",
            stats.len()
        );
    }
    let mut model = init_t_matrix(ubm, rank, seed)?;
    let mut frobenius_changes = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let sums = model.e_step(stats)?;
        let t_ml = m_step(&sums, ubm.components(), ubm.dim())?;
        let (t_md, _) = min_divergence(&t_ml, &sums)?;
        frobenius_changes.push((&t_md - &model.t).norm());
        model.t = t_md;
    }
    Ok(TvTraining {
        model,
        frobenius_changes,
    })
}

/// Centering, inverse principal square root of the covariance, length normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    pub matrix: DMatrix<f64>,
    pub condition_number: f64,
}

/// Adds `1e-6 * trace / R` to the diagonal when `cov` is not safely invertible.
pub(crate) fn regularize(cov: &DMatrix<f64>, what: &str) -> DMatrix<f64> {
    let cond = condition_number(cov);
    if cond.is_finite() && cond <= MAX_CONDITION {
        return cov.clone();
    }
    let r = cov.nrows();
    let ridge = (1e-6 * cov.trace() / r as f64).max(1e-12);
    log::warn!("{what}: condition number {cond:e}, adding ridge {ridge:e}");
    cov + DMatrix::identity(r, r) * ridge
}

impl WhiteningTransform {
    pub fn fit(training: &[Embedding]) -> Result<Self> {
        if training.len() < 2 {
            return Err(Error::InsufficientData("whitening needs at least two embeddings".into()));
        }
        let dim = training[0].dim();
        let rows: Vec<DVector<f64>> = training
            .iter()
            .map(|e| {
                if e.dim() != dim {
                    Err(Error::DimensionMismatch {
                        expected: dim,
                        got: e.dim(),
                    })
                } else {
                    Ok(e.values.clone())
                }
            })
            .collect::<Result<_>>()?;
        let mean = mean_of(&rows, dim);
        let cov = regularize(&scatter_about(&rows, &mean), "whitening covariance");
        let matrix = sym_inv_sqrt(&cov)?;
        Ok(WhiteningTransform {
            mean,
            condition_number: condition_number(&cov),
            matrix,
        })
    }

    /// Centered and decorrelated, before length normalization.
    pub fn decorrelate(&self, values: &DVector<f64>) -> Result<DVector<f64>> {
        if values.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: values.len(),
            });
        }
        let centered = values - &self.mean;
        if centered.norm() == 0.0 {
            return Err(Error::ZeroNormEmbedding);
        }
        Ok(&self.matrix * centered)
    }

    pub fn apply(&self, embedding: &Embedding) -> Result<Embedding> {
        let w = self.decorrelate(&embedding.values)?;
        let norm = w.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNormEmbedding);
        }
        Ok(Embedding::new(
            embedding.recording_id.clone(),
            EmbeddingStage::Whitened,
            w / norm,
        ))
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        let r = self.mean.len();
        let mut w = BinWriter::new(WHITEN_MAGIC);
        w.u64(r as u64)
            .f64s(self.mean.as_slice())
            .f64s(self.matrix.as_slice())
            .f64s(&[self.condition_number])
            .provenance(provenance);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        let mut rd = BinReader::open(path, WHITEN_MAGIC)?;
        let r = rd.dim()?;
        let mean = DVector::from_vec(rd.f64s(r)?);
        let matrix = DMatrix::from_vec(r, r, rd.f64s(r * r)?);
        let cond = rd.f64s(1)?[0];
        let prov = rd.provenance()?;
        rd.finish()?;
        Ok((
            WhiteningTransform {
                mean,
                matrix,
                condition_number: cond,
            },
            prov,
        ))
    }
}

/// Principal directions of MAP-adapted supervectors about the UBM supervector.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaSupervectorModel {
    pub ubm_supervector: DVector<f64>,
    /// `D x R`, orthonormal columns.
    pub directions: DMatrix<f64>,
    pub variances: DVector<f64>,
}

impl PcaSupervectorModel {
    /// Uses the `J x J` Gram matrix of centered supervectors, so the cost does
    /// not grow with the supervector dimension squared.
    pub fn fit(ubm: &DiagonalGmm, adapted: &[DiagonalGmm], rank: usize) -> Result<Self> {
        let m = DVector::from_column_slice(ubm.supervector());
        let dim = m.len();
        let j = adapted.len();
        if j == 0 {
            return Err(Error::InsufficientData("no supervectors".into()));
        }
        let mut centered = DMatrix::zeros(dim, j);
        for (c, g) in adapted.iter().enumerate() {
            if !g.same_shape(ubm) {
                return Err(Error::InvalidModel("adapted model shape differs from UBM".into()));
            }
            let s = DVector::from_column_slice(g.supervector());
            centered.set_column(c, &(s - &m));
        }
        let gram = centered.transpose() * &centered / j as f64;
        let (values, vectors) = sorted_symmetric_eigen(&gram);
        let top = values[0].max(0.0);
        let available = values.iter().filter(|&&v| v > 1e-12 * top && v > 0.0).count();
        if rank == 0 || rank > available {
            return Err(Error::RankExceeded {
                requested: rank,
                available,
            });
        }
        let mut directions = DMatrix::zeros(dim, rank);
        for k in 0..rank {
            let u = &centered * vectors.column(k) / (j as f64 * values[k]).sqrt();
            directions.set_column(k, &u);
        }
        Ok(PcaSupervectorModel {
            ubm_supervector: m,
            directions,
            variances: values.rows(0, rank).clone_owned(),
        })
    }

    pub fn project(&self, adapted: &DiagonalGmm, recording_id: &str) -> Result<Embedding> {
        let s = DVector::from_column_slice(adapted.supervector());
        if s.len() != self.ubm_supervector.len() {
            return Err(Error::DimensionMismatch {
                expected: self.ubm_supervector.len(),
                got: s.len(),
            });
        }
        Ok(Embedding::new(
            recording_id,
            EmbeddingStage::RawIvector,
            self.directions.transpose() * (s - &self.ubm_supervector),
        ))
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        let (d, r) = self.directions.shape();
        let mut w = BinWriter::new(PCA_MAGIC);
        w.u64(d as u64)
            .u64(r as u64)
            .f64s(self.ubm_supervector.as_slice())
            .f64s(self.directions.as_slice())
            .f64s(self.variances.as_slice())
            .provenance(provenance);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        let mut rd = BinReader::open(path, PCA_MAGIC)?;
        let d = rd.dim()?;
        let r = rd.dim()?;
        let m = DVector::from_vec(rd.f64s(d)?);
        let dirs = DMatrix::from_vec(d, r, rd.f64s(d * r)?);
        let vars = DVector::from_vec(rd.f64s(r)?);
        let prov = rd.provenance()?;
        rd.finish()?;
        Ok((
            PcaSupervectorModel {
                ubm_supervector: m,
                directions: dirs,
                variances: vars,
            },
            prov,
        ))
    }
}

/// Fits the PCA model on `adapted` and projects each of them.
pub fn pca_supervector_ivector(
    ubm: &DiagonalGmm,
    adapted: &[(String, DiagonalGmm)],
    rank: usize,
) -> Result<(PcaSupervectorModel, Vec<Embedding>)> {
    let models: Vec<DiagonalGmm> = adapted.iter().map(|(_, g)| g.clone()).collect();
    let pca = PcaSupervectorModel::fit(ubm, &models, rank)?;
    let out = adapted
        .iter()
        .map(|(id, g)| pca.project(g, id))
        .collect::<Result<Vec<_>>>()?;
    Ok((pca, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_ubm(means: &[f64], vars: &[f64], weights: &[f64]) -> DiagonalGmm {
        DiagonalGmm::new(
            weights.to_vec(),
            means.iter().map(|&m| vec![m]).collect(),
            vars.iter().map(|&v| vec![v]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_component_stats() {
        let ubm = scalar_ubm(&[1.0], &[2.0], &[1.0]);
        let fm = FeatureMatrix::from_rows(&[vec![0.0], vec![3.0], vec![4.5]]).unwrap();
        let s = accumulate_stats(&ubm, &fm, "r").unwrap();
        assert_eq!(s.counts, vec![3.0]);
        assert_eq!(s.first, vec![-1.0 + 2.0 + 3.5]);
        let at_mean = FeatureMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(accumulate_stats(&ubm, &at_mean, "r").unwrap().first, vec![0.0]);
    }

    #[test]
    fn three_frame_two_component_table() {
        let ubm = scalar_ubm(&[-1.0, 2.0], &[1.0, 4.0], &[0.3, 0.7]);
        let xs = [0.0, -1.5, 3.0];
        let fm = FeatureMatrix::from_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap();
        let s = accumulate_stats(&ubm, &fm, "r").unwrap();
        let pdf = |x: f64, m: f64, v: f64| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let (mut n, mut f) = ([0.0; 2], [0.0; 2]);
        for &x in &xs {
            let a = 0.3 * pdf(x, -1.0, 1.0);
            let b = 0.7 * pdf(x, 2.0, 4.0);
            let (ga, gb) = (a / (a + b), b / (a + b));
            n[0] += ga;
            n[1] += gb;
            f[0] += ga * (x + 1.0);
            f[1] += gb * (x - 2.0);
        }
        for g in 0..2 {
            assert!((s.counts[g] - n[g]).abs() < 1e-12);
            assert!((s.first[g] - f[g]).abs() < 1e-12);
        }
        assert!((s.total_count() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_first_order_gives_zero_ivector() {
        let ubm = scalar_ubm(&[0.0, 1.0], &[1.0, 1.0], &[0.5, 0.5]);
        let model = init_t_matrix(&ubm, 2, 4).unwrap();
        let stats = BaumWelchStats {
            recording_id: "z".into(),
            counts: vec![3.0, 5.0],
            first: vec![0.0, 0.0],
            dim: 1,
        };
        let e = model.extract(&stats).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
        let sums = model.e_step(&[stats.clone(), stats]).unwrap();
        assert!(sums.first_cross.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whitening_gives_unit_norm_and_identity_covariance() {
        let mut rng = NormalSampler::new(5);
        let train: Vec<Embedding> = (0..40)
            .map(|i| {
                let a = rng.normal(3.0, 2.0);
                let b = rng.normal(-1.0, 0.5) + 0.8 * a;
                let c = rng.normal(0.0, 1.0);
                Embedding::new(format!("e{i}"), EmbeddingStage::RawIvector, DVector::from_vec(vec![a, b, c]))
            })
            .collect();
        let w = WhiteningTransform::fit(&train).unwrap();
        let dec: Vec<DVector<f64>> = train.iter().map(|e| w.decorrelate(&e.values).unwrap()).collect();
        let cov = scatter_about(&dec, &DVector::zeros(3));
        assert!((cov - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-6);
        for e in &train {
            assert!((w.apply(e).unwrap().values.norm() - 1.0).abs() < 1e-12);
        }
        let at_mean = Embedding::new("m", EmbeddingStage::RawIvector, w.mean.clone());
        assert!(matches!(w.apply(&at_mean), Err(Error::ZeroNormEmbedding)));
    }

    #[test]
    fn supervector_length_is_components_times_dims() {
        let g = DiagonalGmm::from_flat(vec![1.0 / 1024.0; 1024], vec![0.0; 1024 * 42], vec![1.0; 1024 * 42], 42).unwrap();
        assert_eq!(g.supervector().len(), 43_008);
    }

    #[test]
    fn pca_first_direction_follows_dominant_axis() {
        let ubm = DiagonalGmm::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]).unwrap();
        let mut rng = NormalSampler::new(8);
        let axis = DVector::from_vec(vec![0.6, 0.8]);
        let models: Vec<(String, DiagonalGmm)> = (0..30)
            .map(|i| {
                let t = rng.normal(0.0, 3.0);
                let n = rng.normal(0.0, 0.1);
                let p = &axis * t + DVector::from_vec(vec![-0.8, 0.6]) * n;
                (
                    format!("r{i}"),
                    DiagonalGmm::new(vec![1.0], vec![vec![p[0], p[1]]], vec![vec![1.0, 1.0]]).unwrap(),
                )
            })
            .collect();
        let (pca, emb) = pca_supervector_ivector(&ubm, &models, 1).unwrap();
        // Closed-form leading eigenvector of the 2x2 scatter about the origin.
        let mut s = [[0.0; 2]; 2];
        for (_, g) in &models {
            let v = g.supervector();
            for a in 0..2 {
                for b in 0..2 {
                    s[a][b] += v[a] * v[b] / 30.0;
                }
            }
        }
        let tr = s[0][0] + s[1][1];
        let det = s[0][0] * s[1][1] - s[0][1] * s[0][1];
        let lambda = tr / 2.0 + (tr * tr / 4.0 - det).sqrt();
        let ev = DVector::from_vec(vec![s[0][1], lambda - s[0][0]]).normalize();
        let cos = pca.directions.column(0).dot(&ev).abs();
        assert!(cos > 0.99, "{cos}");
        assert!((pca.directions.column(0).dot(&axis)).abs() > 0.99);
        assert_eq!(emb.len(), 30);
        let zero = pca.project(&ubm, "ubm").unwrap();
        assert_eq!(zero.values[0], 0.0);
        assert!(matches!(
            PcaSupervectorModel::fit(&ubm, &[ubm.clone()], 1),
            Err(Error::RankExceeded { .. })
        ));
    }

    #[test]
    fn tv_model_round_trip() {
        let ubm = scalar_ubm(&[0.0, 1.0], &[1.0, 2.0], &[0.5, 0.5]);
        let model = init_t_matrix(&ubm, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tv.bin");
        model.save(&p, &Provenance::default()).unwrap();
        assert_eq!(TotalVariabilityModel::load(&p).unwrap().0, model);
    }
}
