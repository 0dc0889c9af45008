use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fvc_core::manifest::Manifest;
use fvc_core::pipeline::{self, PipelineConfig, ScoringPath, SplitPlan, Workspace};
use fvc_core::synthetic::FeatureCorpusSpec;

#[derive(Parser)]
#[command(name = "fvc", version, about = "Forensic voice comparison: calibrated likelihood ratios from recordings")]
struct Cli {
    /// Run all parallel work on one thread.
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured scoring path.
    #[arg(long)]
    path: Option<ScoringPath>,
    #[arg(long, default_value = "models")]
    models_dir: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Extract and compensate features for every manifest recording.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the UBM and the models of the selected scoring path.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score calibration-split pairs and fit the calibration model.
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a questioned and a known recording and report the calibrated LR.
    Compare {
        #[arg(long)]
        questioned: PathBuf,
        #[arg(long)]
        known: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score the test split and write Cllr and Tippett outputs.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        /// Treat raw scores as natural-log LRs (for comparison only).
        #[arg(long)]
        uncalibrated: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write a seeded synthetic feature corpus and its manifest.
    GenCorpus {
        #[arg(long, default_value = "corpus")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        speakers: usize,
        #[arg(long, default_value_t = 4)]
        recordings: usize,
        #[arg(long, default_value_t = 3000)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Partial(String),
    Invalid(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Invalid(e.into())
    }
}

fn load_config(common: &Common) -> anyhow::Result<(PipelineConfig, Workspace)> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(path) = common.path {
        cfg.path = path;
    }
    log::info!("config hash {}", cfg.hash());
    Ok((cfg, Workspace::new(&common.out_dir, &common.models_dir)))
}

fn manifest(p: &Path) -> anyhow::Result<Manifest> {
    Ok(Manifest::load(p)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Extract { manifest: m, common } => {
            let (cfg, ws) = load_config(&common)?;
            let report = pipeline::cmd_extract(&manifest(&m)?, &cfg, &ws)?;
            println!(
                "extracted {} recordings, {} up to date, {} failed",
                report.written.len(),
                report.skipped.len(),
                report.failures.len()
            );
            if report.is_partial_failure() {
                let list: Vec<String> = report.failures.iter().map(|(id, e)| format!("{id}: {e}")).collect();
                return Err(Failure::Partial(list.join("\n")));
            }
        }
        Command::Train { manifest: m, common } => {
            let (cfg, ws) = load_config(&common)?;
            let r = pipeline::cmd_train(&manifest(&m)?, &cfg, &ws)?;
            println!(
                "trained {} path: UBM on {} frames ({} EM iterations), {} speaker models, {} population recordings",
                cfg.path, r.ubm_frames, r.ubm_iterations, r.speaker_models, r.population_recordings
            );
        }
        Command::Calibrate { manifest: m, common } => {
            let (cfg, ws) = load_config(&common)?;
            let model = pipeline::cmd_calibrate(&manifest(&m)?, &cfg, &ws)?;
            println!(
                "{} calibration: intercept={:.6} slope={:.6} same_pairs={} different_pairs={}",
                model.method, model.intercept, model.slope, model.n_same, model.n_diff
            );
        }
        Command::Compare {
            questioned,
            known,
            common,
        } => {
            let (cfg, ws) = load_config(&common)?;
            let c = pipeline::cmd_compare(&questioned, &known, &cfg, &ws)?;
            log::info!("ln LR {:.6} for {} vs {}", c.ln_lr, questioned.display(), known.display());
            print!("{c}");
        }
        Command::Validate {
            manifest: m,
            uncalibrated,
            common,
        } => {
            let (cfg, ws) = load_config(&common)?;
            let report = pipeline::cmd_validate(&manifest(&m)?, &cfg, &ws, uncalibrated)?;
            println!("{}", report.summary_line());
            println!("report written to {}", ws.report_dir(cfg.path, uncalibrated).display());
        }
        Command::GenCorpus {
            out_dir,
            speakers,
            recordings,
            frames,
            seed,
        } => {
            let spec = FeatureCorpusSpec {
                num_speakers: speakers,
                recordings_per_speaker: recordings,
                frames_per_recording: frames,
                seed,
                ..pipeline::demo_corpus_spec()
            };
            let m = pipeline::cmd_gen_corpus(&spec, SplitPlan::halves(speakers), &out_dir)?;
            println!("wrote {}", m.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.single_thread {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Partial(msg)) => {
            eprintln!("error: some recordings failed:\n{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
