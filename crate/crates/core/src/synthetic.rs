//! Seeded generators for feature corpora, embedding populations and score sets.
//!
//! All sampling goes through [`NormalSampler`] (ChaCha8 uniforms, Box-Muller),
//! so a spec and seed give the same corpus on every platform.

use nalgebra::{DMatrix, DVector};

use crate::audio::Framing;
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, Stage};
use crate::manifest::Condition;
use crate::math::{sym_sqrt, NormalSampler};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCorpusSpec {
    pub num_speakers: usize,
    pub recordings_per_speaker: usize,
    pub frames_per_recording: usize,
    /// Extra speakers drawn from the same population and kept apart as a
    /// background sample for UBM training.
    pub background_speakers: usize,
    pub dim: usize,
    /// Components in each speaker's generating mixture.
    pub components: usize,
    /// Spread of the shared population component means.
    pub population_spread: f64,
    /// Std. dev. of isotropic per-speaker, per-component mean offsets.
    pub between_std: f64,
    /// Rank of an additional low-rank speaker offset shared across components.
    pub speaker_rank: usize,
    /// Per-coordinate std. dev. of the low-rank part.
    pub factor_std: f64,
    /// Std. dev. of per-recording, per-component mean perturbations.
    pub within_std: f64,
    /// Std. dev. of frames around their component mean.
    pub frame_std: f64,
    /// Constant offset added to every frame of a recording with this condition.
    pub channel_offsets: Vec<(Condition, Vec<f64>)>,
    pub seed: u64,
}

impl FeatureCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0
            || self.recordings_per_speaker == 0
            || self.frames_per_recording == 0
            || self.dim == 0
            || self.components == 0
        {
            return Err(Error::InvalidConfig("synthetic corpus counts must be >= 1".into()));
        }
        if [self.population_spread, self.between_std, self.factor_std, self.within_std, self.frame_std]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::InvalidConfig("synthetic spreads must be finite and >= 0".into()));
        }
        if self.channel_offsets.iter().any(|(_, o)| o.len() != self.dim) {
            return Err(Error::InvalidConfig("channel offset has the wrong dimension".into()));
        }
        Ok(())
    }

    pub fn channel_offset(&self, condition: Condition) -> Vec<f64> {
        self.channel_offsets
            .iter()
            .find(|(c, _)| *c == condition)
            .map(|(_, o)| o.clone())
            .unwrap_or_else(|| vec![0.0; self.dim])
    }
}

/// Generating parameters of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerTruth {
    pub speaker_id: String,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SyntheticRecording {
    pub recording_id: String,
    pub speaker_id: String,
    pub condition: Condition,
    /// Frames including session perturbations and channel offset.
    pub features: FeatureMatrix,
    /// Per-component session perturbation of the speaker means.
    pub session_offsets: Vec<Vec<f64>>,
    pub channel_offset: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FeatureCorpus {
    pub speakers: Vec<SpeakerTruth>,
    pub recordings: Vec<SyntheticRecording>,
    pub background_speakers: Vec<SpeakerTruth>,
    pub background: Vec<SyntheticRecording>,
    pub frame_variance: f64,
}

pub fn speaker_id(s: usize) -> String {
    format!("spk{s:03}")
}

/// Recordings alternate questioned-like and known-like conditions.
pub fn gen_feature_corpus(spec: &FeatureCorpusSpec) -> Result<FeatureCorpus> {
    spec.validate()?;
    let mut rng = NormalSampler::new(spec.seed);
    let (g, m) = (spec.components, spec.dim);
    let population: Vec<Vec<f64>> = (0..g)
        .map(|_| (0..m).map(|_| rng.normal(0.0, spec.population_spread)).collect())
        .collect();
    let raw_w: Vec<f64> = (0..g).map(|_| 0.5 + rng.uniform()).collect();
    let total: f64 = raw_w.iter().sum();
    let weights: Vec<f64> = raw_w.iter().map(|w| w / total).collect();

    let k = spec.speaker_rank;
    let loading_std = if k > 0 { spec.factor_std / (k as f64).sqrt() } else { 0.0 };
    let loadings: Vec<f64> = (0..g * m * k).map(|_| rng.normal(0.0, loading_std)).collect();

    let mut speakers = Vec::with_capacity(spec.num_speakers);
    let mut recordings = Vec::new();
    let mut background_speakers = Vec::with_capacity(spec.background_speakers);
    let mut background = Vec::new();
    for s in 0..spec.num_speakers + spec.background_speakers {
        let is_background = s >= spec.num_speakers;
        let factors: Vec<f64> = (0..k).map(|_| rng.standard()).collect();
        let offsets: Vec<f64> = (0..g * m)
            .map(|i| {
                let low_rank: f64 = (0..k).map(|j| loadings[i * k + j] * factors[j]).sum();
                low_rank + rng.normal(0.0, spec.between_std)
            })
            .collect();
        let means: Vec<Vec<f64>> = population
            .iter()
            .enumerate()
            .map(|(c, mu)| mu.iter().enumerate().map(|(d, &v)| v + offsets[c * m + d]).collect())
            .collect();
        let truth = SpeakerTruth {
            speaker_id: if is_background {
                format!("bkg{:03}", s - spec.num_speakers)
            } else {
                speaker_id(s)
            },
            weights: weights.clone(),
            means,
        };
        for r in 0..spec.recordings_per_speaker {
            let condition = if r % 2 == 0 {
                Condition::QuestionedLike
            } else {
                Condition::KnownLike
            };
            let session: Vec<Vec<f64>> = (0..g)
                .map(|_| (0..m).map(|_| rng.normal(0.0, spec.within_std)).collect())
                .collect();
            let channel = spec.channel_offset(condition);
            let mut data = Vec::with_capacity(spec.frames_per_recording * m);
            for _ in 0..spec.frames_per_recording {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut c = g - 1;
                for (k, w) in truth.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        c = k;
                        break;
                    }
                }
                for d in 0..m {
                    data.push(truth.means[c][d] + session[c][d] + channel[d] + rng.normal(0.0, spec.frame_std));
                }
            }
            let target = if is_background { &mut background } else { &mut recordings };
            target.push(SyntheticRecording {
                recording_id: format!("{}_r{r}", truth.speaker_id),
                speaker_id: truth.speaker_id.clone(),
                condition,
                features: FeatureMatrix::from_flat(data, m, Framing::default(), Stage::Raw)?,
                session_offsets: session,
                channel_offset: channel,
            });
        }
        if is_background {
            background_speakers.push(truth);
        } else {
            speakers.push(truth);
        }
    }
    Ok(FeatureCorpus {
        speakers,
        recordings,
        background_speakers,
        background,
        frame_variance: spec.frame_std * spec.frame_std,
    })
}

/// Adds a constant vector to every frame.
pub fn add_offset(features: &FeatureMatrix, offset: &[f64]) -> Result<FeatureMatrix> {
    if offset.len() != features.dims() {
        return Err(Error::DimensionMismatch {
            expected: features.dims(),
            got: offset.len(),
        });
    }
    let data: Vec<f64> = features
        .as_flat()
        .iter()
        .enumerate()
        .map(|(i, v)| v + offset[i % offset.len()])
        .collect();
    Ok(features.with_data(data, features.stage))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCorpusSpec {
    pub num_speakers: usize,
    pub per_speaker: usize,
    pub mu_b: DVector<f64>,
    pub sigma_b: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct EmbeddingCorpus {
    pub labels: Vec<String>,
    pub vectors: Vec<DVector<f64>>,
    pub speaker_means: Vec<DVector<f64>>,
    pub spec: EmbeddingCorpusSpec,
}

/// Speaker means from `N(mu_b, Sigma_b)`, recordings from `N(mean, Sigma_w)`.
pub fn gen_embedding_corpus(spec: &EmbeddingCorpusSpec) -> Result<EmbeddingCorpus> {
    let d = spec.mu_b.len();
    if spec.num_speakers == 0 || spec.per_speaker == 0 || d == 0 {
        return Err(Error::InvalidConfig("embedding corpus counts must be >= 1".into()));
    }
    if spec.sigma_b.shape() != (d, d) || spec.sigma_w.shape() != (d, d) {
        return Err(Error::InvalidConfig("covariance shapes differ from mu_b".into()));
    }
    let root_b = sym_sqrt(&spec.sigma_b)?;
    let root_w = sym_sqrt(&spec.sigma_w)?;
    let mut rng = NormalSampler::new(spec.seed);
    let mut labels = Vec::new();
    let mut vectors = Vec::new();
    let mut speaker_means = Vec::new();
    for s in 0..spec.num_speakers {
        let mean = rng.multivariate(&spec.mu_b, &root_b);
        for _ in 0..spec.per_speaker {
            labels.push(speaker_id(s));
            vectors.push(rng.multivariate(&mean, &root_w));
        }
        speaker_means.push(mean);
    }
    Ok(EmbeddingCorpus {
        labels,
        vectors,
        speaker_means,
        spec: spec.clone(),
    })
}

/// I.i.d. Gaussian scores for the two trial classes.
pub fn gen_score_sets(
    mu_same: f64,
    mu_diff: f64,
    variance: f64,
    per_class: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(variance > 0.0) {
        return Err(Error::InvalidConfig("score variance must be positive".into()));
    }
    let sd = variance.sqrt();
    let mut rng = NormalSampler::new(seed);
    let same = (0..per_class).map(|_| rng.normal(mu_same, sd)).collect();
    let diff = (0..per_class).map(|_| rng.normal(mu_diff, sd)).collect();
    Ok((same, diff))
}
