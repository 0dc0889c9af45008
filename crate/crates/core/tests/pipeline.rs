mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use common::{casework_config, run_casework};
use fvc_core::audio::write_wav_i16;
use fvc_core::manifest::{Condition, Manifest, Split};
use fvc_core::normalize::Compensation;
use fvc_core::pipeline::{self, Extractor, PipelineConfig, ScoringPath, SplitPlan, Workspace};
use fvc_core::synthetic::FeatureCorpusSpec;
use fvc_core::Error;

fn small_spec(speakers: usize, recordings: usize, frames: usize, seed: u64) -> FeatureCorpusSpec {
    FeatureCorpusSpec {
        num_speakers: speakers,
        recordings_per_speaker: recordings,
        frames_per_recording: frames,
        background_speakers: 8,
        seed,
        ..pipeline::demo_corpus_spec()
    }
}

fn gen(spec: &FeatureCorpusSpec, plan: SplitPlan, dir: &Path) -> Manifest {
    let p = pipeline::cmd_gen_corpus(spec, plan, &dir.join("corpus")).unwrap();
    Manifest::load(&p).unwrap()
}

fn workspace(dir: &Path) -> Workspace {
    Workspace::new(dir.join("out"), dir.join("models"))
}

fn voiced(seed: u64) -> Vec<f64> {
    (0..16000)
        .map(|i| {
            let t = i as f64 / 8000.0;
            let f0 = 120.0 + 10.0 * seed as f64;
            let on = t > 0.3 && t < 1.7;
            if on {
                0.4 * (2.0 * PI * f0 * t).sin() + 0.2 * (2.0 * PI * 3.0 * f0 * t).sin()
            } else {
                0.001 * (2.0 * PI * 50.0 * t).sin()
            }
        })
        .collect()
}

fn wav_manifest(dir: &Path, broken: Option<usize>) -> Manifest {
    let mut body = String::from("recording_path,speaker_id,condition,split\n");
    for i in 0..3 {
        let p = dir.join(format!("rec{i}.wav"));
        if broken == Some(i) {
            fs::write(&p, b"RIFF....garbage").unwrap();
        } else {
            write_wav_i16(&p, &voiced(i as u64), 8000).unwrap();
        }
        body += &format!("rec{i}.wav,s{i},known-like,population\n");
    }
    let mp = dir.join("manifest.csv");
    fs::write(&mp, body).unwrap();
    Manifest::load(&mp).unwrap()
}

#[test]
fn extraction_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = wav_manifest(dir.path(), None);
    let cfg = PipelineConfig::default();
    let ws = workspace(dir.path());
    let first = pipeline::cmd_extract(&manifest, &cfg, &ws).unwrap();
    assert_eq!(first.written.len(), 3);
    for i in 0..3 {
        assert!(ws.feature_path(&format!("rec{i}")).exists());
    }
    let index = fs::read(ws.index_path()).unwrap();
    let second = pipeline::cmd_extract(&manifest, &cfg, &ws).unwrap();
    assert!(second.written.is_empty());
    assert_eq!(second.skipped.len(), 3);
    assert_eq!(fs::read(ws.index_path()).unwrap(), index);

    // Changing only the scoring path does not invalidate features.
    let other = PipelineConfig {
        path: ScoringPath::IvectorPlda,
        ..cfg.clone()
    };
    assert!(pipeline::cmd_extract(&manifest, &other, &ws).unwrap().written.is_empty());
    let mut warped_less = cfg;
    warped_less.compensation.method = Compensation::Cms;
    assert_eq!(pipeline::cmd_extract(&manifest, &warped_less, &ws).unwrap().written.len(), 3);
}

#[test]
fn unreadable_recording_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = wav_manifest(dir.path(), Some(1));
    let ws = workspace(dir.path());
    let r = pipeline::cmd_extract(&manifest, &PipelineConfig::default(), &ws).unwrap();
    assert_eq!(r.written.len(), 2);
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].0, "rec1");
    assert!(r.is_partial_failure());
}

#[test]
fn one_pair_per_speaker_gives_six_and_thirty() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(&small_spec(6, 2, 600, 1), SplitPlan { calibration: 6 }, dir.path());
    let cfg = casework_config(ScoringPath::GmmUbm, 1);
    let ws = workspace(dir.path());
    pipeline::cmd_extract(&manifest, &cfg, &ws).unwrap();
    pipeline::cmd_train(&manifest, &cfg, &ws).unwrap();
    let model = pipeline::cmd_calibrate(&manifest, &cfg, &ws).unwrap();
    assert_eq!((model.n_same, model.n_diff), (6, 30));
    let saved = pipeline::load_calibration(&cfg, &ws).unwrap();
    assert_eq!((saved.n_same, saved.n_diff), (6, 30));
    let csv = fs::read_to_string(ws.scores_path(Split::Calibration, cfg.path)).unwrap();
    assert_eq!(csv.lines().count(), 37);

    // No test split in this manifest.
    let err = pipeline::cmd_validate(&manifest, &cfg, &ws, false).unwrap_err();
    assert!(matches!(err.root(), Error::InsufficientData(_)), "{err}");
}

#[test]
fn population_overlap_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.feat", "b.feat"] {
        fs::write(dir.path().join(name), b"").unwrap();
    }
    let mp = dir.path().join("m.csv");
    fs::write(
        &mp,
        "recording_path,speaker_id,condition,split\na.feat,spk7,known-like,population\nb.feat,spk7,questioned-like,test\n",
    )
    .unwrap();
    match Manifest::load(&mp) {
        Err(Error::SplitOverlap { speakers, .. }) => assert_eq!(speakers, vec!["spk7".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn compare_needs_calibration_then_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(&small_spec(4, 2, 600, 2), SplitPlan { calibration: 4 }, dir.path());
    let cfg = casework_config(ScoringPath::GmmUbm, 2);
    let ws = workspace(dir.path());
    pipeline::cmd_extract(&manifest, &cfg, &ws).unwrap();
    pipeline::cmd_train(&manifest, &cfg, &ws).unwrap();
    let q = &manifest.split(Split::Calibration)[0].recording_path;
    let err = pipeline::cmd_compare(q, q, &cfg, &ws).unwrap_err();
    assert!(matches!(err.root(), Error::MissingCalibration(_)), "{err}");

    pipeline::cmd_calibrate(&manifest, &cfg, &ws).unwrap();
    let a = pipeline::cmd_compare(q, q, &cfg, &ws).unwrap();
    let b = pipeline::cmd_compare(q, q, &cfg, &ws).unwrap();
    assert!(a.score > 0.0, "self comparison scored {}", a.score);
    assert_eq!(a, b);
    assert_eq!(a.to_string(), b.to_string());
    assert!(a.fingerprints.iter().any(|(p, _)| p == &ws.calibration_path(cfg.path)));
}

#[test]
fn five_questioned_two_known_gives_fifty_and_two_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = gen(&small_spec(10, 7, 800, 4), SplitPlan::halves(10), dir.path());
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for row in manifest.rows.iter_mut().filter(|r| r.split != Split::Population) {
        let k = seen.entry(row.speaker_id.clone()).or_default();
        row.condition = if *k < 5 { Condition::QuestionedLike } else { Condition::KnownLike };
        *k += 1;
    }
    let cfg = casework_config(ScoringPath::GmmUbm, 4);
    let ws = workspace(dir.path());
    pipeline::cmd_extract(&manifest, &cfg, &ws).unwrap();
    pipeline::cmd_train(&manifest, &cfg, &ws).unwrap();
    let cal = pipeline::cmd_calibrate(&manifest, &cfg, &ws).unwrap();
    assert_eq!((cal.n_same, cal.n_diff), (50, 200));
    let report = pipeline::cmd_validate(&manifest, &cfg, &ws, false).unwrap();
    assert_eq!((report.n_same, report.n_diff), (50, 200));
    let dir = ws.report_dir(cfg.path, false);
    assert!(dir.join("tippett.svg").exists(), "{:?}", fs::read_dir(&dir).unwrap().collect::<Vec<_>>());
}

#[test]
fn single_population_speaker_stops_plda_training() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FeatureCorpusSpec {
        background_speakers: 1,
        ..small_spec(2, 4, 600, 5)
    };
    let manifest = gen(&spec, SplitPlan::halves(2), dir.path());
    let cfg = casework_config(ScoringPath::IvectorPlda, 5);
    let ws = workspace(dir.path());
    pipeline::cmd_extract(&manifest, &cfg, &ws).unwrap();
    let err = pipeline::cmd_train(&manifest, &cfg, &ws).unwrap_err();
    assert!(matches!(err.root(), Error::InsufficientData(_)), "{err}");
}

#[test]
fn toy_corpus_trains_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(&small_spec(2, 4, 1000, 6), SplitPlan::halves(2), dir.path());
    let mut cfg = casework_config(ScoringPath::IvectorPlda, 6);
    cfg.gmm.num_components = 4;
    cfg.ivector.rank = 4;
    cfg.ivector.cldf_dims = 3;
    let ws = workspace(dir.path());
    let start = Instant::now();
    pipeline::cmd_extract(&manifest, &cfg, &ws).unwrap();
    let report = pipeline::cmd_train(&manifest, &cfg, &ws).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert_eq!(report.population_recordings, 32);
    assert_eq!(report.embedding_dim, 3);
    for p in [ws.ubm_path(), ws.tv_path(), ws.whitening_path(), ws.cldf_path(), ws.plda_path()] {
        assert!(p.exists(), "{}", p.display());
    }
}

#[test]
fn cms_is_harmless_without_a_channel() {
    let spec = FeatureCorpusSpec {
        channel_offsets: vec![],
        frames_per_recording: 1500,
        seed: 3,
        ..pipeline::demo_corpus_spec()
    };
    let cllr = |method: Compensation| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = casework_config(ScoringPath::GmmUbm, 7);
        cfg.compensation.method = method;
        run_casework(&spec, &cfg, dir.path()).unwrap().calibrated.cllr
    };
    let plain = cllr(Compensation::None);
    let cms = cllr(Compensation::Cms);
    assert!(cms - plain < 0.1, "CMS {cms} vs none {plain}");
}

#[test]
fn pca_and_factor_analysis_both_beat_the_reference() {
    let spec = FeatureCorpusSpec {
        seed: 3,
        ..pipeline::demo_corpus_spec()
    };
    for extractor in [Extractor::FactorAnalysis, Extractor::PcaSupervector] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = casework_config(ScoringPath::IvectorPlda, 7);
        cfg.ivector.extractor = extractor;
        let run = run_casework(&spec, &cfg, dir.path()).unwrap();
        assert!(run.calibrated.cllr < 1.0, "{extractor:?}: Cllr {}", run.calibrated.cllr);
    }
}
