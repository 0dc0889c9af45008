//! Batch orchestration over manifests: extraction, training, calibration,
//! comparison and validation for both scoring paths.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioBuffer};
use crate::calibration::{self, CalibrationMethod, CalibrationModel};
use crate::cldf::{self, CldfTransform};
use crate::error::{Error, Result, StageExt};
use crate::features::{self, FeatureMatrix, MfccConfig, Stage};
use crate::gmm::{self, DiagonalGmm, EmConfig};
use crate::ivector::{
    self, BaumWelchStats, PcaSupervectorModel, TotalVariabilityModel, WhiteningTransform,
};
use crate::manifest::{Condition, Manifest, ManifestRow, Split};
use crate::normalize::{self, Compensation, WarpConfig};
use crate::persist::{bytes_sha256, file_sha256, ConfigHash, Provenance};
use crate::plda::{PldaModel, PldaScorer};
use crate::scoring;
use crate::synthetic::{FeatureCorpus, FeatureCorpusSpec};
use crate::validation::{self, TrialSet, ValidationReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringPath {
    #[default]
    GmmUbm,
    IvectorPlda,
}

impl fmt::Display for ScoringPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringPath::GmmUbm => "gmm-ubm",
            ScoringPath::IvectorPlda => "ivector-plda",
        })
    }
}

impl std::str::FromStr for ScoringPath {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gmm-ubm" => Ok(ScoringPath::GmmUbm),
            "ivector-plda" => Ok(ScoringPath::IvectorPlda),
            o => Err(format!("unknown scoring path {o:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Extractor {
    #[default]
    FactorAnalysis,
    PcaSupervector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VadConfig {
    pub threshold_db_below_peak: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            threshold_db_below_peak: audio::DEFAULT_THRESHOLD_DB,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompensationConfig {
    pub method: Compensation,
    pub half_window_frames: usize,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        CompensationConfig {
            method: Compensation::Warp,
            half_window_frames: normalize::DEFAULT_HALF_WINDOW,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub num_components: usize,
    pub max_iterations: usize,
    pub threshold: f64,
    pub variance_floor_factor: f64,
    pub relevance_factor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        GmmConfig {
            num_components: em.num_components,
            max_iterations: em.max_iterations,
            threshold: em.threshold,
            variance_floor_factor: em.variance_floor_factor,
            relevance_factor: 16.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvectorConfig {
    pub extractor: Extractor,
    pub rank: usize,
    pub iterations: usize,
    /// Output dimension of CLDF; 0 selects `min(50, speakers - 1)`.
    pub cldf_dims: usize,
}

impl Default for IvectorConfig {
    fn default() -> Self {
        IvectorConfig {
            extractor: Extractor::FactorAnalysis,
            rank: 400,
            iterations: 5,
            cldf_dims: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Also pool population-split recordings into UBM training.
    pub ubm_includes_population: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub method: CalibrationMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub path: ScoringPath,
    pub vad: VadConfig,
    pub mfcc: MfccConfig,
    pub compensation: CompensationConfig,
    pub gmm: GmmConfig,
    pub ivector: IvectorConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Re-serialized form; the config hash is taken over these bytes.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> ConfigHash {
        ConfigHash::of_bytes(self.canonical_text().as_bytes())
    }

    /// Hash over the settings that determine extracted features only, so
    /// switching scoring path or model sizes does not invalidate them.
    pub fn feature_hash(&self) -> ConfigHash {
        #[derive(Serialize)]
        struct FeatureSettings<'a> {
            vad: &'a VadConfig,
            mfcc: &'a MfccConfig,
            compensation: &'a CompensationConfig,
        }
        let text = toml::to_string(&FeatureSettings {
            vad: &self.vad,
            mfcc: &self.mfcc,
            compensation: &self.compensation,
        })
        .expect("config serializes");
        ConfigHash::of_bytes(text.as_bytes())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.seed,
            config_hash: self.hash(),
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            num_components: self.gmm.num_components,
            max_iterations: self.gmm.max_iterations,
            threshold: self.gmm.threshold,
            variance_floor_factor: self.gmm.variance_floor_factor,
            seed: self.seed,
        }
    }

    pub fn warp(&self) -> WarpConfig {
        WarpConfig {
            half_window_frames: self.compensation.half_window_frames,
        }
    }

    pub fn feature_stage(&self) -> Stage {
        match self.compensation.method {
            Compensation::None => Stage::Raw,
            _ => Stage::Compensated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gmm.num_components == 0 {
            return Err(Error::InvalidConfig("gmm.num_components must be >= 1".into()));
        }
        if !(self.gmm.relevance_factor >= 0.0) {
            return Err(Error::InvalidConfig("gmm.relevance_factor must be >= 0".into()));
        }
        if self.ivector.rank == 0 || self.ivector.iterations == 0 {
            return Err(Error::InvalidConfig("ivector rank and iterations must be >= 1".into()));
        }
        if self.compensation.half_window_frames == 0 {
            return Err(Error::InvalidConfig("compensation.half_window_frames must be >= 1".into()));
        }
        Ok(())
    }
}

/// Directory layout shared by all commands.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub out_dir: PathBuf,
    pub models_dir: PathBuf,
}

impl Workspace {
    pub fn new(out_dir: impl Into<PathBuf>, models_dir: impl Into<PathBuf>) -> Self {
        Workspace {
            out_dir: out_dir.into(),
            models_dir: models_dir.into(),
        }
    }

    pub fn features_dir(&self) -> PathBuf {
        self.out_dir.join("features")
    }

    pub fn feature_path(&self, recording_id: &str) -> PathBuf {
        self.features_dir().join(format!("{recording_id}.feat"))
    }

    pub fn index_path(&self) -> PathBuf {
        self.features_dir().join("index.csv")
    }

    pub fn ubm_path(&self) -> PathBuf {
        self.models_dir.join("ubm.gmm")
    }

    pub fn speaker_model_path(&self, recording_id: &str) -> PathBuf {
        self.models_dir.join("speakers").join(format!("{recording_id}.gmm"))
    }

    pub fn tv_path(&self) -> PathBuf {
        self.models_dir.join("tv.bin")
    }

    pub fn pca_path(&self) -> PathBuf {
        self.models_dir.join("pca.bin")
    }

    pub fn whitening_path(&self) -> PathBuf {
        self.models_dir.join("whitening.bin")
    }

    pub fn cldf_path(&self) -> PathBuf {
        self.models_dir.join("cldf.bin")
    }

    pub fn plda_path(&self) -> PathBuf {
        self.models_dir.join("plda.bin")
    }

    pub fn calibration_path(&self, path: ScoringPath) -> PathBuf {
        self.models_dir.join(format!("calibration-{path}.txt"))
    }

    pub fn scores_path(&self, split: Split, path: ScoringPath) -> PathBuf {
        self.out_dir.join("scores").join(format!("{split}-{path}.csv"))
    }

    pub fn report_dir(&self, path: ScoringPath, uncalibrated: bool) -> PathBuf {
        let suffix = if uncalibrated { "-uncalibrated" } else { "" };
        self.out_dir.join("report").join(format!("{path}{suffix}"))
    }
}

fn check_provenance(what: &Path, found: &Provenance, cfg: &PipelineConfig) {
    if found.config_hash != cfg.hash() {
        log::warn!(
            "CONFIG MISMATCH: {} was produced by config {} but the current config is {}",
            what.display(),
            found.config_hash,
            cfg.hash()
        );
    }
}

fn unique_ids(manifest: &Manifest) -> Result<()> {
    let mut seen = HashSet::new();
    for r in &manifest.rows {
        if !seen.insert(r.recording_id()) {
            return Err(Error::Manifest(format!(
                "recording id {:?} appears twice; file stems must be unique",
                r.recording_id()
            )));
        }
    }
    Ok(())
}

fn is_feature_file(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "feat")
}

fn vad_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vad");
    PathBuf::from(s)
}

/// Raw features from a WAV file (with energy or sidecar VAD) or a raw feature file.
pub fn raw_features(path: &Path, cfg: &PipelineConfig) -> Result<(FeatureMatrix, String)> {
    if is_feature_file(path) {
        let (fm, header) = features::read_features(path)?;
        if header.stage != Stage::Raw {
            return Err(Error::StageMix(format!(
                "{} is already {}; inputs must be raw",
                path.display(),
                header.stage
            )));
        }
        return Ok((fm, header.vad));
    }
    let buffer: AudioBuffer = audio::read_wav(path)?;
    let framing = cfg.mfcc.framing();
    let sidecar = vad_sidecar(path);
    let (mask, vad) = if sidecar.exists() {
        let segs = audio::read_vad_segments(&sidecar)?;
        (
            audio::mask_from_segments(&segs, buffer.samples.len(), buffer.sample_rate, framing),
            "manual".to_string(),
        )
    } else {
        (
            audio::energy_vad(&buffer, framing, cfg.vad.threshold_db_below_peak)?,
            format!("energy:{}dB", cfg.vad.threshold_db_below_peak),
        )
    };
    if mask.speech_frames() == 0 {
        log::warn!("{}: no speech frames", path.display());
    }
    Ok((features::extract_features(&buffer, &mask, &cfg.mfcc)?, vad))
}

/// Raw features followed by the configured compensation.
pub fn compensated_features(path: &Path, cfg: &PipelineConfig) -> Result<(FeatureMatrix, String)> {
    let (raw, vad) = raw_features(path, cfg).stage("features")?;
    let out = normalize::compensate(&raw, cfg.compensation.method, &cfg.warp()).stage("compensation")?;
    Ok((out, vad))
}

#[derive(Debug, Default)]
pub struct ExtractReport {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
    pub failures: Vec<(String, Error)>,
}

impl ExtractReport {
    pub fn is_partial_failure(&self) -> bool {
        !self.failures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct IndexEntry {
    source_sha256: String,
    config_hash: String,
}

fn read_index(path: &Path) -> BTreeMap<String, IndexEntry> {
    let mut out = BTreeMap::new();
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() >= 3 {
                out.insert(
                    f[0].to_string(),
                    IndexEntry {
                        source_sha256: f[1].to_string(),
                        config_hash: f[2].to_string(),
                    },
                );
            }
        }
    }
    out
}

/// Extracts and compensates every manifest recording. Recordings whose source
/// hash and config hash match the index are skipped. Failures are collected.
pub fn cmd_extract(manifest: &Manifest, cfg: &PipelineConfig, ws: &Workspace) -> Result<ExtractReport> {
    cfg.validate()?;
    unique_ids(manifest)?;
    let dir = ws.features_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let index = read_index(&ws.index_path());
    let hash = cfg.feature_hash().to_hex();
    let results: Vec<(String, std::result::Result<(IndexEntry, bool), Error>)> = manifest
        .rows
        .par_iter()
        .map(|row| {
            let id = row.recording_id();
            let res = (|| {
                let source_sha256 = file_sha256(&row.recording_path)?;
                let entry = IndexEntry {
                    source_sha256,
                    config_hash: hash.clone(),
                };
                let out = ws.feature_path(&id);
                if index.get(&id) == Some(&entry) && out.exists() && features::header_path(&out).exists() {
                    return Ok((entry, false));
                }
                let (fm, vad) = compensated_features(&row.recording_path, cfg)?;
                features::write_features(&out, &fm, &vad, cfg.seed, cfg.feature_hash())?;
                Ok((entry, true))
            })();
            (id, res)
        })
        .collect();
    let mut report = ExtractReport::default();
    let mut lines = String::from("recording_id,source_sha256,config_hash,feature_file\n");
    for (id, res) in results {
        match res {
            Ok((entry, wrote)) => {
                lines += &format!("{id},{},{},{id}.feat\n", entry.source_sha256, entry.config_hash);
                if wrote {
                    report.written.push(id);
                } else {
                    report.skipped.push(id);
                }
            }
            Err(e) => {
                log::error!("extract {id}: {e}");
                report.failures.push((id, e.in_stage("extract")));
            }
        }
    }
    let ip = ws.index_path();
    fs::write(&ip, lines).map_err(|e| Error::io(&ip, e))?;
    Ok(report)
}

fn load_row_features(ws: &Workspace, row: &ManifestRow, cfg: &PipelineConfig) -> Result<FeatureMatrix> {
    let p = ws.feature_path(&row.recording_id());
    if !p.exists() {
        return Err(Error::MissingModel(p));
    }
    let (fm, header) = features::read_features(&p)?;
    if header.config_hash != cfg.feature_hash() {
        log::warn!(
            "CONFIG MISMATCH: features {} were extracted with feature settings {} but the current ones are {}",
            p.display(),
            header.config_hash,
            cfg.feature_hash()
        );
    }
    if fm.stage != cfg.feature_stage() {
        return Err(Error::StageMix(format!(
            "{} is {} but the configuration expects {}",
            p.display(),
            fm.stage,
            cfg.feature_stage()
        )));
    }
    Ok(fm)
}

fn load_rows(ws: &Workspace, rows: &[&ManifestRow], cfg: &PipelineConfig) -> Result<Vec<FeatureMatrix>> {
    rows.par_iter().map(|r| load_row_features(ws, r, cfg)).collect()
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub ubm_frames: usize,
    pub ubm_iterations: usize,
    pub speaker_models: usize,
    pub population_recordings: usize,
    pub embedding_dim: usize,
}

pub fn cmd_train(manifest: &Manifest, cfg: &PipelineConfig, ws: &Workspace) -> Result<TrainReport> {
    cfg.validate()?;
    unique_ids(manifest)?;
    manifest.check_splits()?;
    let prov = cfg.provenance();
    let mut ubm_rows = manifest.split(Split::Ubm);
    if cfg.train.ubm_includes_population {
        ubm_rows.extend(manifest.split(Split::Population));
    }
    if ubm_rows.is_empty() {
        return Err(Error::InsufficientData(
            "no UBM training recordings (ubm split empty)".into(),
        ))
        .stage("ubm");
    }
    let ubm_feats = load_rows(ws, &ubm_rows, cfg).stage("ubm")?;
    let refs: Vec<&FeatureMatrix> = ubm_feats.iter().collect();
    let pooled = FeatureMatrix::concat(&refs).stage("ubm")?;
    let fit = gmm::em_fit(&pooled, &cfg.em_config()).stage("ubm")?;
    log::info!(
        "UBM: {} frames, {} EM iterations, mean log-likelihood {:.4}",
        pooled.frames(),
        fit.trace.len(),
        fit.trace.last().copied().unwrap_or(f64::NAN)
    );
    let ubm = fit.model;
    ubm.save(&ws.ubm_path(), &prov)?;
    let mut report = TrainReport {
        ubm_frames: pooled.frames(),
        ubm_iterations: fit.trace.len(),
        ..Default::default()
    };
    drop(pooled);

    match cfg.path {
        ScoringPath::GmmUbm => {
            let known: Vec<&ManifestRow> = manifest
                .split(Split::Case)
                .into_iter()
                .filter(|r| r.condition == Condition::KnownLike)
                .collect();
            let feats = load_rows(ws, &known, cfg).stage("speaker models")?;
            for (row, fm) in known.iter().zip(&feats) {
                let model = gmm::map_adapt_means(&ubm, fm, cfg.gmm.relevance_factor).stage("speaker models")?;
                model.save(&ws.speaker_model_path(&row.recording_id()), &prov)?;
            }
            report.speaker_models = known.len();
        }
        ScoringPath::IvectorPlda => {
            let pop = manifest.split(Split::Population);
            let feats = load_rows(ws, &pop, cfg).stage("population")?;
            let labels: Vec<String> = pop.iter().map(|r| r.speaker_id.clone()).collect();
            let speakers = labels.iter().collect::<HashSet<_>>().len();
            let raw = match cfg.ivector.extractor {
                Extractor::FactorAnalysis => {
                    let stats: Vec<BaumWelchStats> = pop
                        .par_iter()
                        .zip(&feats)
                        .map(|(r, fm)| ivector::accumulate_stats(&ubm, fm, &r.recording_id()))
                        .collect::<Result<_>>()
                        .stage("statistics")?;
                    let tv = ivector::train_t_matrix(
                        &stats,
                        &ubm,
                        cfg.ivector.rank,
                        cfg.ivector.iterations,
                        cfg.seed,
                    )
                    .stage("t-matrix")?;
                    tv.model.save(&ws.tv_path(), &prov)?;
                    stats
                        .par_iter()
                        .map(|s| tv.model.extract(s))
                        .collect::<Result<Vec<_>>>()
                        .stage("i-vector")?
                }
                Extractor::PcaSupervector => {
                    let adapted: Vec<(String, DiagonalGmm)> = pop
                        .par_iter()
                        .zip(&feats)
                        .map(|(r, fm)| {
                            gmm::map_adapt_means(&ubm, fm, cfg.gmm.relevance_factor)
                                .map(|g| (r.recording_id(), g))
                        })
                        .collect::<Result<_>>()
                        .stage("supervectors")?;
                    let (pca, emb) = ivector::pca_supervector_ivector(&ubm, &adapted, cfg.ivector.rank)
                        .stage("supervector PCA")?;
                    pca.save(&ws.pca_path(), &prov)?;
                    emb
                }
            };
            let whitening = WhiteningTransform::fit(&raw).stage("whitening")?;
            whitening.save(&ws.whitening_path(), &prov)?;
            let white = raw
                .iter()
                .map(|e| whitening.apply(e))
                .collect::<Result<Vec<_>>>()
                .stage("whitening")?;
            let dims = if cfg.ivector.cldf_dims == 0 {
                cldf::default_dims(speakers, cfg.ivector.rank)
            } else {
                cfg.ivector.cldf_dims
            };
            let cldf = CldfTransform::fit_embeddings(&labels, &white, dims).stage("cldf")?;
            cldf.save(&ws.cldf_path(), &prov)?;
            let projected = white
                .iter()
                .map(|e| cldf.apply(e))
                .collect::<Result<Vec<_>>>()
                .stage("cldf")?;
            let plda = PldaModel::fit_embeddings(&labels, &projected).stage("plda")?;
            plda.save(&ws.plda_path(), &prov)?;
            report.population_recordings = pop.len();
            report.embedding_dim = dims;
        }
    }
    let echo = ws.models_dir.join("config.toml");
    fs::write(&echo, cfg.canonical_text()).map_err(|e| Error::io(&echo, e))?;
    Ok(report)
}

enum Prepared {
    Frames(FeatureMatrix),
    Speaker(DiagonalGmm),
    Vector(DVector<f64>),
}

enum EmbeddingFront {
    Factor(TotalVariabilityModel),
    Pca(PcaSupervectorModel),
}

enum Backend {
    Gmm,
    Ivector {
        front: EmbeddingFront,
        whitening: WhiteningTransform,
        cldf: CldfTransform,
        plda: PldaScorer,
    },
}

/// Loaded models for one scoring path.
pub struct Scorer {
    ubm: DiagonalGmm,
    tau: f64,
    backend: Backend,
    /// `(file, sha256)` of every model file used.
    pub fingerprints: Vec<(PathBuf, String)>,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingModel(path.to_path_buf()))
    }
}

impl Scorer {
    pub fn load(cfg: &PipelineConfig, ws: &Workspace) -> Result<Self> {
        let mut fingerprints = Vec::new();
        let mut track = |p: PathBuf| -> Result<PathBuf> {
            require(&p)?;
            fingerprints.push((p.clone(), file_sha256(&p)?));
            Ok(p)
        };
        let up = track(ws.ubm_path())?;
        let (ubm, prov) = DiagonalGmm::load(&up)?;
        check_provenance(&up, &prov, cfg);
        let backend = match cfg.path {
            ScoringPath::GmmUbm => Backend::Gmm,
            ScoringPath::IvectorPlda => {
                let front = match cfg.ivector.extractor {
                    Extractor::FactorAnalysis => {
                        let p = track(ws.tv_path())?;
                        let (tv, prov) = TotalVariabilityModel::load(&p)?;
                        check_provenance(&p, &prov, cfg);
                        if tv.ubm != ubm {
                            log::warn!("total-variability model was trained against a different UBM");
                        }
                        EmbeddingFront::Factor(tv)
                    }
                    Extractor::PcaSupervector => {
                        let p = track(ws.pca_path())?;
                        let (pca, prov) = PcaSupervectorModel::load(&p)?;
                        check_provenance(&p, &prov, cfg);
                        EmbeddingFront::Pca(pca)
                    }
                };
                let p = track(ws.whitening_path())?;
                let (whitening, prov) = WhiteningTransform::load(&p)?;
                check_provenance(&p, &prov, cfg);
                let p = track(ws.cldf_path())?;
                let (cldf, prov) = CldfTransform::load(&p)?;
                check_provenance(&p, &prov, cfg);
                let p = track(ws.plda_path())?;
                let (plda, prov) = PldaModel::load(&p)?;
                check_provenance(&p, &prov, cfg);
                Backend::Ivector {
                    front,
                    whitening,
                    cldf,
                    plda: plda.scorer()?,
                }
            }
        };
        Ok(Scorer {
            ubm,
            tau: cfg.gmm.relevance_factor,
            backend,
            fingerprints,
        })
    }

    fn embed(&self, fm: &FeatureMatrix, id: &str) -> Result<DVector<f64>> {
        let Backend::Ivector { front, whitening, cldf, .. } = &self.backend else {
            unreachable!("embedding requested on the GMM-UBM path")
        };
        let raw = match front {
            EmbeddingFront::Factor(tv) => {
                let stats = ivector::accumulate_stats(&self.ubm, fm, id).stage("statistics")?;
                tv.extract(&stats).stage("i-vector")?
            }
            EmbeddingFront::Pca(pca) => {
                let adapted = gmm::map_adapt_means(&self.ubm, fm, self.tau).stage("supervectors")?;
                pca.project(&adapted, id).stage("supervector PCA")?
            }
        };
        let white = whitening.apply(&raw).stage("whitening")?;
        Ok(cldf.apply(&white).stage("cldf")?.values)
    }

    fn prepare_questioned(&self, fm: FeatureMatrix, id: &str) -> Result<Prepared> {
        match self.backend {
            Backend::Gmm => Ok(Prepared::Frames(fm)),
            Backend::Ivector { .. } => Ok(Prepared::Vector(self.embed(&fm, id)?)),
        }
    }

    fn prepare_known(&self, fm: FeatureMatrix, id: &str) -> Result<Prepared> {
        match self.backend {
            Backend::Gmm => Ok(Prepared::Speaker(
                gmm::map_adapt_means(&self.ubm, &fm, self.tau).stage("map adaptation")?,
            )),
            Backend::Ivector { .. } => Ok(Prepared::Vector(self.embed(&fm, id)?)),
        }
    }

    fn score(&self, questioned: &Prepared, known: &Prepared) -> Result<(f64, usize)> {
        match (&self.backend, questioned, known) {
            (Backend::Gmm, Prepared::Frames(q), Prepared::Speaker(k)) => {
                let s = scoring::score_recording(k, &self.ubm, q).stage("gmm-ubm score")?;
                Ok((s.value, s.n_frames))
            }
            (Backend::Ivector { plda, .. }, Prepared::Vector(q), Prepared::Vector(k)) => {
                Ok((plda.score(q, k).stage("plda score")?, 1))
            }
            _ => unreachable!("prepared inputs do not match the backend"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub questioned_id: String,
    pub known_id: String,
    pub score: f64,
    pub n_frames: usize,
    pub same_speaker: bool,
}

pub fn scores_csv(pairs: &[PairScore]) -> String {
    let mut s = String::from("questioned_id,known_id,score,n_frames,label\n");
    for p in pairs {
        s += &format!(
            "{},{},{},{},{}\n",
            p.questioned_id,
            p.known_id,
            p.score,
            p.n_frames,
            if p.same_speaker { "same" } else { "different" }
        );
    }
    s
}

/// Scores every questioned-like x known-like pair in a split.
pub fn score_split(
    manifest: &Manifest,
    split: Split,
    cfg: &PipelineConfig,
    ws: &Workspace,
    scorer: &Scorer,
) -> Result<Vec<PairScore>> {
    let rows = manifest.split(split);
    let questioned: Vec<&ManifestRow> = rows.iter().copied().filter(|r| r.condition == Condition::QuestionedLike).collect();
    let known: Vec<&ManifestRow> = rows.iter().copied().filter(|r| r.condition == Condition::KnownLike).collect();
    if questioned.is_empty() || known.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{split} split needs both questioned-like and known-like recordings"
        )));
    }
    let q_prep: Vec<Prepared> = questioned
        .par_iter()
        .map(|r| scorer.prepare_questioned(load_row_features(ws, r, cfg)?, &r.recording_id()))
        .collect::<Result<_>>()?;
    let k_prep: Vec<Prepared> = known
        .par_iter()
        .map(|r| scorer.prepare_known(load_row_features(ws, r, cfg)?, &r.recording_id()))
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..questioned.len())
        .flat_map(|q| (0..known.len()).map(move |k| (q, k)))
        .collect();
    pairs
        .par_iter()
        .map(|&(q, k)| {
            let (score, n_frames) = scorer.score(&q_prep[q], &k_prep[k])?;
            Ok(PairScore {
                questioned_id: questioned[q].recording_id(),
                known_id: known[k].recording_id(),
                score,
                n_frames,
                same_speaker: questioned[q].speaker_id == known[k].speaker_id,
            })
        })
        .collect()
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn split_scores(pairs: &[PairScore]) -> (Vec<f64>, Vec<f64>) {
    let same = pairs.iter().filter(|p| p.same_speaker).map(|p| p.score).collect();
    let diff = pairs.iter().filter(|p| !p.same_speaker).map(|p| p.score).collect();
    (same, diff)
}

pub fn cmd_calibrate(manifest: &Manifest, cfg: &PipelineConfig, ws: &Workspace) -> Result<CalibrationModel> {
    cfg.validate()?;
    unique_ids(manifest)?;
    manifest.check_splits()?;
    let scorer = Scorer::load(cfg, ws)?;
    let pairs = score_split(manifest, Split::Calibration, cfg, ws, &scorer).stage("calibration scores")?;
    let (same, diff) = split_scores(&pairs);
    if same.is_empty() {
        return Err(Error::InsufficientData("no same-speaker calibration pairs".into())).stage("calibration");
    }
    let csv = scores_csv(&pairs);
    write_file(&ws.scores_path(Split::Calibration, cfg.path), &csv)?;
    let mut model = calibration::fit(cfg.calibration.method, &same, &diff).stage("calibration")?;
    model.scores_fingerprint = bytes_sha256(csv.as_bytes());
    model.provenance = cfg.provenance();
    model.save(&ws.calibration_path(cfg.path))?;
    Ok(model)
}

pub fn load_calibration(cfg: &PipelineConfig, ws: &Workspace) -> Result<CalibrationModel> {
    let p = ws.calibration_path(cfg.path);
    if !p.exists() {
        return Err(Error::MissingCalibration(p));
    }
    let model = CalibrationModel::load(&p)?;
    check_provenance(&p, &model.provenance, cfg);
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub questioned: PathBuf,
    pub known: PathBuf,
    pub path: ScoringPath,
    pub score: f64,
    pub n_frames: usize,
    pub ln_lr: f64,
    pub fingerprints: Vec<(PathBuf, String)>,
    pub seed: u64,
    pub config_hash: ConfigHash,
}

impl Comparison {
    pub fn log10_lr(&self) -> f64 {
        self.ln_lr / std::f64::consts::LN_10
    }

    pub fn lr(&self) -> f64 {
        self.ln_lr.exp()
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "questioned: {}", self.questioned.display())?;
        writeln!(f, "known: {}", self.known.display())?;
        writeln!(f, "path: {}", self.path)?;
        writeln!(f, "score: {:.6}", self.score)?;
        writeln!(f, "frames: {}", self.n_frames)?;
        writeln!(f, "ln_lr: {:.6}", self.ln_lr)?;
        writeln!(f, "log10_lr: {:.6}", self.log10_lr())?;
        writeln!(f, "lr: {:.6e}", self.lr())?;
        writeln!(f, "provenance:")?;
        writeln!(f, "  seed: {}", self.seed)?;
        writeln!(f, "  config_hash: {}", self.config_hash)?;
        for (p, h) in &self.fingerprints {
            writeln!(f, "  {}: {h}", p.display())?;
        }
        Ok(())
    }
}

/// Compares two recordings (WAV or raw feature files) and reports a calibrated LR.
pub fn cmd_compare(questioned: &Path, known: &Path, cfg: &PipelineConfig, ws: &Workspace) -> Result<Comparison> {
    cfg.validate()?;
    let calibration = load_calibration(cfg, ws)?;
    let mut scorer = Scorer::load(cfg, ws)?;
    let (qf, _) = compensated_features(questioned, cfg).stage("questioned")?;
    let (kf, _) = compensated_features(known, cfg).stage("known")?;
    let id = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let q = scorer.prepare_questioned(qf, &id(questioned)).stage("questioned")?;
    let pre_adapted = ws.speaker_model_path(&id(known));
    let k = if matches!(scorer.backend, Backend::Gmm) && pre_adapted.exists() {
        let (m, prov) = DiagonalGmm::load(&pre_adapted)?;
        check_provenance(&pre_adapted, &prov, cfg);
        scorer.fingerprints.push((pre_adapted.clone(), file_sha256(&pre_adapted)?));
        Prepared::Speaker(m)
    } else {
        scorer.prepare_known(kf, &id(known)).stage("known")?
    };
    let (score, n_frames) = scorer.score(&q, &k)?;
    let cp = ws.calibration_path(cfg.path);
    scorer.fingerprints.push((cp.clone(), file_sha256(&cp)?));
    Ok(Comparison {
        questioned: questioned.to_path_buf(),
        known: known.to_path_buf(),
        path: cfg.path,
        score,
        n_frames,
        ln_lr: calibration.apply(score),
        fingerprints: scorer.fingerprints,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    })
}

/// Scores the test split, calibrates (unless `uncalibrated`, in which case raw
/// scores are read as natural-log LRs) and writes Cllr and Tippett outputs.
pub fn cmd_validate(
    manifest: &Manifest,
    cfg: &PipelineConfig,
    ws: &Workspace,
    uncalibrated: bool,
) -> Result<ValidationReport> {
    cfg.validate()?;
    unique_ids(manifest)?;
    manifest.check_splits()?;
    if manifest.split(Split::Test).is_empty() {
        return Err(Error::InsufficientData("test split is empty".into())).stage("validate");
    }
    let calibration = if uncalibrated {
        None
    } else {
        Some(load_calibration(cfg, ws)?)
    };
    let scorer = Scorer::load(cfg, ws)?;
    let pairs = score_split(manifest, Split::Test, cfg, ws, &scorer).stage("test scores")?;
    write_file(&ws.scores_path(Split::Test, cfg.path), &scores_csv(&pairs))?;
    let to_llr = |s: f64| calibration.as_ref().map_or(s, |c| c.apply(s));
    let (same, diff) = split_scores(&pairs);
    let trials = TrialSet::new(
        same.into_iter().map(to_llr).collect(),
        diff.into_iter().map(to_llr).collect(),
    )
    .stage("validate")?;
    let id = format!("{}{}", cfg.path, if uncalibrated { " (uncalibrated)" } else { "" });
    let report = validation::validate(&id, &trials);
    report.write(&ws.report_dir(cfg.path, uncalibrated), &trials)?;
    Ok(report)
}

/// Split assignment for a synthetic corpus: background speakers form the
/// population sample, the first `calibration` casework speakers go to the
/// calibration split and the rest to test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub calibration: usize,
}

impl SplitPlan {
    pub fn split_of(&self, speaker_index: usize) -> Split {
        if speaker_index < self.calibration {
            Split::Calibration
        } else {
            Split::Test
        }
    }

    /// Half the casework speakers calibrate, half test.
    pub fn halves(speakers: usize) -> Self {
        SplitPlan {
            calibration: speakers / 2,
        }
    }
}

/// Writes a synthetic feature corpus as raw feature files plus `manifest.csv`.
/// Background speakers go to the population split.
pub fn write_feature_corpus(corpus: &FeatureCorpus, plan: SplitPlan, dir: &Path, seed: u64) -> Result<PathBuf> {
    let rec_dir = dir.join("recordings");
    fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
    let speaker_index: BTreeMap<&str, usize> = corpus
        .speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.speaker_id.as_str(), i))
        .collect();
    let mut manifest = Manifest::default();
    let tagged = corpus
        .background
        .iter()
        .map(|r| (r, Split::Population))
        .chain(
            corpus
                .recordings
                .iter()
                .map(|r| (r, plan.split_of(speaker_index[r.speaker_id.as_str()]))),
        );
    for (r, split) in tagged {
        let p = rec_dir.join(format!("{}.feat", r.recording_id));
        features::write_features(&p, &r.features, "synthetic", seed, ConfigHash::default())?;
        manifest.rows.push(ManifestRow {
            recording_path: p,
            speaker_id: r.speaker_id.clone(),
            condition: r.condition,
            split,
        });
    }
    let mp = dir.join("manifest.csv");
    write_file(&mp, &manifest.to_csv(Some(dir)))?;
    Ok(mp)
}

/// Model sizes suited to the demo corpus. The UBM pools the population split
/// because synthetic corpora carry no separate ubm split.
pub fn demo_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    cfg.gmm.num_components = 8;
    cfg.ivector.rank = 6;
    cfg.ivector.cldf_dims = 4;
    cfg.train.ubm_includes_population = true;
    cfg
}

/// Writes the corpus, its manifest and a matching `config.toml`.
pub fn cmd_gen_corpus(spec: &FeatureCorpusSpec, plan: SplitPlan, dir: &Path) -> Result<PathBuf> {
    let corpus = crate::synthetic::gen_feature_corpus(spec)?;
    let manifest = write_feature_corpus(&corpus, plan, dir, spec.seed)?;
    write_file(&dir.join("config.toml"), &demo_config(spec.seed).canonical_text())?;
    Ok(manifest)
}

/// Ten casework speakers plus a background sample, alternating conditions,
/// a fixed channel offset on known-like recordings.
pub fn demo_corpus_spec() -> FeatureCorpusSpec {
    FeatureCorpusSpec {
        num_speakers: 10,
        recordings_per_speaker: 4,
        frames_per_recording: 3000,
        background_speakers: 20,
        dim: 6,
        components: 8,
        population_spread: 2.0,
        between_std: 0.15,
        speaker_rank: 4,
        factor_std: 0.4,
        within_std: 0.25,
        frame_std: 1.0,
        channel_offsets: vec![(Condition::KnownLike, vec![1.5, -1.0, 0.5, 0.8, -0.6, 0.3])],
        seed: 0,
    }
}
