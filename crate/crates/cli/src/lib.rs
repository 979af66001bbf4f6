//! Dataset generation, training and sweep benchmarks behind the `mfgar` binary.

pub mod bench;
pub mod models;

use std::path::{Path, PathBuf};

use mfgar_pdebench::io::{load_dataset, save_dataset, Manifest};
use mfgar_pdebench::{generate, DatasetConfig, PdeError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use bench::{run_benchmark, BenchmarkOutput, ExperimentConfig, ResultRow, SummaryRow};
pub use models::{fit_model, FitOptions, ModelKind};

/// Exit statuses of the binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    UserError = 1,
    FitFailure = 2,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error(transparent)]
    Data(#[from] PdeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::Fit(_) => ExitStatus::FitFailure,
            CliError::Data(PdeError::Nonconvergent(_)) => ExitStatus::FitFailure,
            _ => ExitStatus::UserError,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Generates a dataset into `out` and returns its manifest and manifest hash.
pub fn cmd_generate(config: &DatasetConfig, out: &Path) -> Result<(Manifest, String)> {
    let ds = generate(config)?;
    let manifest = save_dataset(out, &ds)?;
    let hash = file_sha256(&out.join(mfgar_pdebench::io::MANIFEST))?;
    Ok((manifest, hash))
}

/// What `train` leaves on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_kind: String,
    pub dataset_manifest_sha256: String,
    pub model_file: PathBuf,
    pub model_sha256: String,
    pub output_factorizations: usize,
    pub rmse: Option<f64>,
    pub nll: Option<f64>,
}

/// Fits one model on a saved dataset and writes `model.json`, `trace.csv`
/// and `summary.json` (with test metrics when the dataset has a test set).
///
/// Unaligned data get interpolation starting weights unless `options`
/// already carries some.
pub fn cmd_train(dataset_dir: &Path, kind: ModelKind, options: &FitOptions, out: &Path) -> Result<TrainSummary> {
    let ds = load_dataset(dataset_dir)?;
    std::fs::create_dir_all(out)?;
    let mut options = options.clone();
    if options.weight_init.is_none() && !ds.train.aligned() {
        options.weight_init = models::interpolation_weights(&ds.config.spec)?;
    }
    let fitted = fit_model(kind, &ds.train, &options)?;
    let model_file = out.join("model.json");
    std::fs::write(&model_file, fitted.bundle_json()?)?;
    let mut trace = Vec::new();
    for (i, t) in fitted.traces().iter().enumerate() {
        mfgar::optim::write_trace_csv(t, &mut trace)?;
        if i + 1 < fitted.traces().len() {
            trace.push(b'\n');
        }
    }
    std::fs::write(out.join("trace.csv"), trace)?;
    let report = if ds.test_x.nrows() > 0 { Some(fitted.evaluate(&ds.test_x, &ds.test_y, "test")?) } else { None };
    let summary = TrainSummary {
        model_kind: kind.name().into(),
        dataset_manifest_sha256: file_sha256(&dataset_dir.join(mfgar_pdebench::io::MANIFEST))?,
        model_sha256: file_sha256(&model_file)?,
        model_file,
        output_factorizations: fitted.output_factorizations,
        rmse: report.as_ref().map(|r| r.rmse),
        nll: report.as_ref().map(|r| r.nll),
    };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
