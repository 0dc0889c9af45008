#![allow(dead_code)]

pub mod oracle;

use std::path::Path;

use fvc_core::manifest::Manifest;
use fvc_core::pipeline::{self, PipelineConfig, ScoringPath, SplitPlan, Workspace};
use fvc_core::synthetic::FeatureCorpusSpec;
use fvc_core::validation::ValidationReport;

pub fn casework_config(path: ScoringPath, seed: u64) -> PipelineConfig {
    PipelineConfig {
        path,
        ..pipeline::demo_config(seed)
    }
}

pub struct Casework {
    pub calibrated: ValidationReport,
    pub uncalibrated: ValidationReport,
    pub workspace: Workspace,
}

/// Generates the corpus under `dir` and runs extract, train, calibrate and
/// both validations.
pub fn run_casework(spec: &FeatureCorpusSpec, cfg: &PipelineConfig, dir: &Path) -> fvc_core::Result<Casework> {
    let manifest_path = pipeline::cmd_gen_corpus(spec, SplitPlan::halves(spec.num_speakers), &dir.join("corpus"))?;
    let manifest = Manifest::load(&manifest_path)?;
    let ws = Workspace::new(dir.join("out"), dir.join("models"));
    let extract = pipeline::cmd_extract(&manifest, cfg, &ws)?;
    assert!(extract.failures.is_empty(), "{:?}", extract.failures);
    pipeline::cmd_train(&manifest, cfg, &ws)?;
    pipeline::cmd_calibrate(&manifest, cfg, &ws)?;
    let calibrated = pipeline::cmd_validate(&manifest, cfg, &ws, false)?;
    let uncalibrated = pipeline::cmd_validate(&manifest, cfg, &ws, true)?;
    Ok(Casework {
        calibrated,
        uncalibrated,
        workspace: ws,
    })
}
