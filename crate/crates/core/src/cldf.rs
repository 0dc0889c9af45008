//! Canonical linear discriminant functions over labeled embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ivector::{regularize, Embedding, EmbeddingStage};
use crate::math::{cholesky, mean_of, scatter_about, sorted_symmetric_eigen};
use crate::persist::{BinReader, BinWriter, Provenance};

const CLDF_MAGIC: &[u8; 4] = b"FVCL";
pub const DEFAULT_MAX_DIMS: usize = 50;

/// Groups vectors by speaker label in sorted label order.
pub fn group_by_speaker<'a>(
    labels: &'a [String],
    vectors: &'a [DVector<f64>],
) -> Result<BTreeMap<&'a str, Vec<&'a DVector<f64>>>> {
    if labels.len() != vectors.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: vectors.len(),
        });
    }
    let mut groups: BTreeMap<&str, Vec<&DVector<f64>>> = BTreeMap::new();
    for (l, v) in labels.iter().zip(vectors) {
        groups.entry(l.as_str()).or_default().push(v);
    }
    Ok(groups)
}

/// Pooled within-speaker scatter (divided by the total count) and the
/// population covariance of speaker means about their mean.
pub struct SpeakerScatter {
    pub within: DMatrix<f64>,
    pub between: DMatrix<f64>,
    pub mean_of_means: DVector<f64>,
    pub speakers: usize,
    pub within_count: usize,
}

pub fn speaker_scatter(labels: &[String], vectors: &[DVector<f64>]) -> Result<SpeakerScatter> {
    let groups = group_by_speaker(labels, vectors)?;
    let dim = vectors
        .first()
        .map(|v| v.len())
        .ok_or_else(|| Error::InsufficientData("no embeddings".into()))?;
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::InsufficientData("embeddings differ in dimension".into()));
    }
    let mut within = DMatrix::zeros(dim, dim);
    let mut within_count = 0;
    let mut means = Vec::with_capacity(groups.len());
    for members in groups.values() {
        let owned: Vec<DVector<f64>> = members.iter().map(|v| (*v).clone()).collect();
        let m = mean_of(&owned, dim);
        if owned.len() >= 2 {
            within += scatter_about(&owned, &m) * owned.len() as f64;
            within_count += owned.len();
        }
        means.push(m);
    }
    if within_count > 0 {
        within /= within_count as f64;
    }
    let mean_of_means = mean_of(&means, dim);
    let between = scatter_about(&means, &mean_of_means);
    Ok(SpeakerScatter {
        within,
        between,
        mean_of_means,
        speakers: groups.len(),
        within_count,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CldfTransform {
    pub mean: DVector<f64>,
    /// `R x D`, columns in descending eigenvalue order with `u' S_w u = 1`.
    pub projection: DMatrix<f64>,
    /// Full generalized eigenvalue spectrum, descending.
    pub eigenvalues: DVector<f64>,
}

impl CldfTransform {
    pub fn fit(labels: &[String], vectors: &[DVector<f64>], dims: usize) -> Result<Self> {
        let groups = group_by_speaker(labels, vectors)?;
        if groups.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "CLDF needs two speakers, found {}",
                groups.len()
            )));
        }
        if let Some((s, _)) = groups.iter().find(|(_, v)| v.len() < 2) {
            return Err(Error::InsufficientData(format!(
                "speaker {s} has a single embedding"
            )));
        }
        let r = vectors[0].len();
        let available = r.min(groups.len() - 1);
        if dims == 0 || dims > available {
            return Err(Error::RankExceeded {
                requested: dims,
                available,
            });
        }
        let sc = speaker_scatter(labels, vectors)?;
        let sw = regularize(&sc.within, "within-speaker scatter");
        let chol = cholesky(&sw, "within-speaker scatter")?;
        let l = chol.l();
        // M = L^-1 S_b L^-T
        let left = l
            .solve_lower_triangular(&sc.between)
            .ok_or_else(|| Error::Singular("within-speaker factor".into()))?;
        let m = l
            .solve_lower_triangular(&left.transpose())
            .ok_or_else(|| Error::Singular("within-speaker factor".into()))?;
        let (values, vectors_m) = sorted_symmetric_eigen(&m);
        let lt = l.transpose();
        let mut projection = DMatrix::zeros(r, dims);
        for k in 0..dims {
            let u = lt
                .solve_upper_triangular(&vectors_m.column(k).clone_owned())
                .ok_or_else(|| Error::Singular("within-speaker factor".into()))?;
            projection.set_column(k, &u);
        }
        let eigenvalues = values.map(|v| v.max(0.0));
        Ok(CldfTransform {
            mean: mean_of(vectors, r),
            projection,
            eigenvalues,
        })
    }

    pub fn fit_embeddings(labels: &[String], embeddings: &[Embedding], dims: usize) -> Result<Self> {
        let v: Vec<DVector<f64>> = embeddings.iter().map(|e| e.values.clone()).collect();
        Self::fit(labels, &v, dims)
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        Ok(self.projection.transpose() * (x - &self.mean))
    }

    pub fn apply(&self, embedding: &Embedding) -> Result<Embedding> {
        Ok(Embedding::new(
            embedding.recording_id.clone(),
            EmbeddingStage::Cldf,
            self.project(&embedding.values)?,
        ))
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        let (r, d) = self.projection.shape();
        let mut w = BinWriter::new(CLDF_MAGIC);
        w.u64(r as u64)
            .u64(d as u64)
            .u64(self.eigenvalues.len() as u64)
            .f64s(self.mean.as_slice())
            .f64s(self.projection.as_slice())
            .f64s(self.eigenvalues.as_slice())
            .provenance(provenance);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        let mut rd = BinReader::open(path, CLDF_MAGIC)?;
        let r = rd.dim()?;
        let d = rd.dim()?;
        let k = rd.dim()?;
        let mean = DVector::from_vec(rd.f64s(r)?);
        let projection = DMatrix::from_vec(r, d, rd.f64s(r * d)?);
        let eigenvalues = DVector::from_vec(rd.f64s(k)?);
        let prov = rd.provenance()?;
        rd.finish()?;
        Ok((
            CldfTransform {
                mean,
                projection,
                eigenvalues,
            },
            prov,
        ))
    }
}

/// `min(50, speakers - 1)`, also capped by the input dimension.
pub fn default_dims(speakers: usize, input_dim: usize) -> usize {
    DEFAULT_MAX_DIMS.min(speakers.saturating_sub(1)).min(input_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::NormalSampler;

    fn corpus(
        speakers: usize,
        per: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    ) -> (Vec<String>, Vec<DVector<f64>>) {
        let mut rng = NormalSampler::new(seed);
        let mut labels = Vec::new();
        let mut vecs = Vec::new();
        for s in 0..speakers {
            let centre: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, spread)).collect();
            for _ in 0..per {
                labels.push(format!("s{s}"));
                vecs.push(DVector::from_iterator(dim, centre.iter().map(|c| c + rng.standard())));
            }
        }
        (labels, vecs)
    }

    #[test]
    fn two_speakers_isotropic_follows_mean_difference() {
        let mut rng = NormalSampler::new(2);
        let (a, b) = (DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![4.0, -1.0]));
        let mut labels = Vec::new();
        let mut vecs = Vec::new();
        for i in 0..400 {
            let (l, c) = if i % 2 == 0 { ("a", &a) } else { ("b", &b) };
            labels.push(l.to_string());
            vecs.push(c + DVector::from_vec(vec![rng.normal(0.0, 0.5), rng.normal(0.0, 0.5)]));
        }
        let t = CldfTransform::fit(&labels, &vecs, 1).unwrap();
        let dir = t.projection.column(0).normalize();
        let diff = (&b - &a).normalize();
        assert!(dir.dot(&diff).abs() > 0.999);
    }

    #[test]
    fn rank_bound_and_errors() {
        let (labels, vecs) = corpus(3, 4, 5, 3.0, 1);
        let t = CldfTransform::fit(&labels, &vecs, 2).unwrap();
        assert_eq!(t.output_dim(), 2);
        assert!(matches!(
            CldfTransform::fit(&labels, &vecs, 3),
            Err(Error::RankExceeded { available: 2, .. })
        ));
        assert_eq!(default_dims(3, 5), 2);
        assert_eq!(default_dims(100, 400), 50);
    }

    #[test]
    fn within_covariance_is_identity_and_eigenvalues_descend() {
        let (labels, vecs) = corpus(12, 6, 4, 3.0, 7);
        let t = CldfTransform::fit(&labels, &vecs, 4).unwrap();
        let projected: Vec<DVector<f64>> = vecs.iter().map(|v| t.project(v).unwrap()).collect();
        let sc = speaker_scatter(&labels, &projected).unwrap();
        assert!((sc.within - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-6);
        for w in t.eigenvalues.as_slice().windows(2) {
            assert!(w[0] >= w[1] && w[1] >= 0.0);
        }
        assert!(t.project(&t.mean).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn leading_fisher_ratio_dominates_original_axes() {
        let (labels, vecs) = corpus(10, 5, 3, 2.0, 11);
        let t = CldfTransform::fit(&labels, &vecs, 1).unwrap();
        let sc = speaker_scatter(&labels, &vecs).unwrap();
        let u = t.projection.column(0);
        let ratio_u = (u.transpose() * &sc.between * u)[0] / (u.transpose() * &sc.within * u)[0];
        for d in 0..3 {
            let r = sc.between[(d, d)] / sc.within[(d, d)];
            assert!(ratio_u >= r - 1e-12);
        }
        assert!((ratio_u - t.eigenvalues[0]).abs() < 1e-9 * ratio_u.max(1.0));
    }

    #[test]
    fn shuffled_labels_collapse_the_leading_eigenvalue() {
        let (labels, vecs) = corpus(20, 10, 4, 4.0, 3);
        let t = CldfTransform::fit(&labels, &vecs, 1).unwrap();
        let mut rng = NormalSampler::new(99);
        let mut shuffled = labels.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.index(i + 1);
            shuffled.swap(i, j);
        }
        let s = CldfTransform::fit(&shuffled, &vecs, 1).unwrap();
        assert!(s.eigenvalues[0] < 0.2 * t.eigenvalues[0]);
    }

    #[test]
    fn separated_speakers_separate_after_projection() {
        let (labels, vecs) = corpus(2, 8, 3, 10.0, 5);
        let t = CldfTransform::fit(&labels, &vecs, 1).unwrap();
        let p: Vec<f64> = vecs.iter().map(|v| t.project(v).unwrap()[0]).collect();
        let mut max_within: f64 = 0.0;
        let mut min_between = f64::INFINITY;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let d = (p[i] - p[j]).abs();
                if labels[i] == labels[j] {
                    max_within = max_within.max(d);
                } else {
                    min_between = min_between.min(d);
                }
            }
        }
        assert!(max_within < min_between);
    }
}
