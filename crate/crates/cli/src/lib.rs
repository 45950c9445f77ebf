//! `hot` command line: data generation, training, calibration, evaluation,
//! ablation, single-image inference and the HTTP service.

mod commands;
mod report;

pub use commands::{calibrate_dir, train_dir, TrainRequest, CALIBRATION_REPORT, DESK_LR, MODEL_CFG, TRAIN_CFG, TRAIN_LOG};

use clap::{Args, Parser, Subcommand};
use hot_core::calibration::ThresholdPolicy;
use hot_core::losses::MixupStrategy;
use hot_core::model::Modality;
use sha2::{Digest, Sha256};
use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const LOCK_FILE: &str = ".hot.lock";

#[derive(Parser, Debug)]
#[command(name = "hot", version, about = "Hierarchical skin-lesion classification with OOD alerting and clinical triage")]
pub struct Cli {
    /// Root seed; every subcommand derives its child seeds from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic paired-image dataset.
    GenerateData(GenerateArgs),
    /// Train a model (and optional companion modalities).
    Train(TrainArgs),
    /// Calibrate OOD and triage thresholds into a checkpoint.
    Calibrate(CalibrateArgs),
    /// Write evaluation tables for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Compare mixup strategies by OOD AUROC.
    Ablate(AblateArgs),
    /// Diagnose one clinical image, optionally with its dermoscopic image.
    Infer(InferArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Generator spec file, or `mini` for the built-in desk-scale spec.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `epochs` from the train config.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Extra models trained with the same settings and stored in
    /// sub-directories: `combined` (multimodal) and/or `dermoscopic`.
    #[arg(long, value_delimiter = ',', value_parser = parse_companion)]
    pub companions: Vec<Modality>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// `youden` or `target-tpr:<q>`.
    #[arg(long, default_value = "youden", value_parser = parse_policy)]
    pub policy: ThresholdPolicy,
    /// Sweep ID test against every OOD-test record instead of validation
    /// against the calibration slice.
    #[arg(long)]
    pub sweep_on_test: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub report_dir: PathBuf,
    #[arg(long)]
    pub sweep_on_test: bool,
    /// Level-3 category for the focused report.
    #[arg(long, default_value = "melanoma")]
    pub category: String,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "none,MX1,MX5")]
    pub strategies: Vec<MixupStrategy>,
    /// Training seeds; defaults to the global seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub clinical: PathBuf,
    #[arg(long)]
    pub dermoscopic: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: std::net::SocketAddr,
    #[arg(long)]
    pub max_upload_bytes: Option<usize>,
    #[arg(long, default_value_t = 3600)]
    pub session_ttl_secs: u64,
    /// Persist sessions here in addition to memory.
    #[arg(long)]
    pub session_dir: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<ThresholdPolicy, String> {
    s.parse().map_err(|e: hot_core::calibration::CalibrationError| e.to_string())
}

fn parse_companion(s: &str) -> Result<Modality, String> {
    match s {
        "combined" | "multimodal" => Ok(Modality::Multimodal),
        "dermoscopic" => Ok(Modality::Dermoscopic),
        _ => Err(format!("unknown companion `{s}` (combined, dermoscopic)")),
    }
}

/// Hex SHA-256 of a resolved configuration document.
pub fn config_digest(resolved: &str) -> String {
    hex::encode(Sha256::digest(resolved.as_bytes()))
}

/// Exclusive marker in an output directory, removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| anyhow::anyhow!("cannot lock {}: {e} (another run active?)", dir.display()))?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Parses `argv` and runs the command; returns the process exit code
/// (0 success, 1 runtime error, 2 usage error).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new().filter_level(cli.log_level).try_init();
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let line = serde_json::json!({"error": format!("{e:#}"), "exit_code": 1});
            eprintln!("{line}");
            1
        }
    }
}
