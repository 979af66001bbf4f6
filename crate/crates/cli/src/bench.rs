//! Sweeps over the number of high-fidelity samples.
//!
//! Output directory layout:
//!
//! * `config.json`: the experiment configuration.
//! * `datasets/rep<r>/`: one saved dataset per repeat with the largest sweep
//!   value; a sweep point `n` trains on the first `n` high samples.
//! * `test/`: the shared test set, saved as a dataset with the repeat-0 design.
//! * `models/<model>_n<n>_r<r>.json`: every fitted model bundle.
//! * `results.csv`: one row per (model, n_high, repeat) with provenance hashes;
//!   byte-identical for identical configurations.
//! * `timings.csv`: wall-clock fit and prediction time per row.
//! * `summary.csv`: mean and standard deviation per (model, n_high).
//! * `curves.dat`: the summary as a whitespace table for gnuplot.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mfgar::gar::{FidelityLevel, MultiFidelityDataset};
use mfgar::optim::OptimConfig;
use mfgar::tensalg::DenseTensor;
use mfgar_pdebench::io::{save_dataset, MANIFEST};
use mfgar_pdebench::{generate, make_test_set, DatasetConfig, MeshVariant, PdeKind, PdeSpec, Sampler, Structure};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::models::{fit_model, FitOptions, ModelKind};
use crate::{file_sha256, sha256_hex, CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pde: PdeKind,
    pub mesh_variant: MeshVariant,
    pub models: Vec<ModelKind>,
    pub n_low: usize,
    pub n_high_sweep: Vec<usize>,
    pub n_test: usize,
    pub structure: Structure,
    pub aligned: bool,
    pub sampler: Sampler,
    pub repeats: usize,
    /// Repeat `r` trains on designs drawn with seed `seed + r`; the test set
    /// uses `seed` for every repeat.
    pub seed: u64,
    pub optim: OptimConfig,
}

impl ExperimentConfig {
    pub fn new(pde: PdeKind) -> Self {
        Self {
            pde,
            mesh_variant: MeshVariant::Main,
            models: vec![ModelKind::Gar],
            n_low: 32,
            n_high_sweep: vec![4, 8, 16, 32],
            n_test: 128,
            structure: Structure::Subset,
            aligned: false,
            sampler: Sampler::Sobol,
            repeats: 5,
            seed: 0,
            optim: OptimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let user = |m: String| Err(CliError::User(m));
        if self.repeats == 0 {
            return user("repeats must be at least 1".into());
        }
        if self.models.is_empty() || self.n_high_sweep.is_empty() {
            return user("need at least one model and one sweep value".into());
        }
        if self.n_test == 0 {
            return user("the test set must not be empty".into());
        }
        if let Some(&n) = self.n_high_sweep.iter().find(|&&n| n == 0 || n > self.n_low) {
            return user(format!("sweep value {n} must lie in 1..={} (n_low)", self.n_low));
        }
        if self.models.contains(&ModelKind::Ar) && !self.aligned && self.mesh_variant == MeshVariant::Main {
            return user("the ar model needs equal output shapes; add --aligned or use --mesh-variant appendix".into());
        }
        self.optim.validate().map_err(|e| CliError::User(e.to_string()))?;
        Ok(())
    }

    fn spec(&self) -> PdeSpec {
        PdeSpec::new(self.pde, self.mesh_variant)
    }

    fn dataset_config(&self, repeat: usize) -> DatasetConfig {
        DatasetConfig {
            n_test: 0,
            sampler: self.sampler,
            structure: self.structure,
            aligned: self.aligned,
            seed: self.seed + repeat as u64,
            test_seed: self.seed,
            ..DatasetConfig::new(self.spec(), self.n_low, *self.n_high_sweep.iter().max().unwrap())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: ModelKind,
    pub n_high: usize,
    pub repeat: usize,
    pub seed: u64,
    /// `ok`, or the failure message.
    pub status: String,
    pub rmse: f64,
    pub nll: f64,
    pub dataset: String,
    pub dataset_sha256: String,
    pub model_file: String,
    pub model_sha256: String,
    pub wall_time_s: f64,
}

impl ResultRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub n_high: usize,
    pub n_ok: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub nll_mean: f64,
    pub nll_std: f64,
}

#[derive(Clone, Debug)]
pub struct BenchmarkOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub out: PathBuf,
}

impl BenchmarkOutput {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| !r.ok())
    }

    pub fn summary_for(&self, model: ModelKind, n_high: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.model == model && s.n_high == n_high)
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn first_high(train: &MultiFidelityDataset, n: usize) -> Result<MultiFidelityDataset> {
    let hi = &train.levels[1];
    let rows: Vec<usize> = (0..n).collect();
    let level = FidelityLevel::new(hi.x.rows(0, n).into_owned(), hi.y.select0(&rows)).map_err(|e| CliError::User(e.to_string()))?;
    MultiFidelityDataset::new(vec![train.levels[0].clone(), level]).map_err(|e| CliError::User(e.to_string()))
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

struct Task {
    model: ModelKind,
    n_high: usize,
    repeat: usize,
}

fn run_task(
    cfg: &ExperimentConfig,
    task: &Task,
    train: &MultiFidelityDataset,
    test: &(DMatrix<f64>, DenseTensor),
    dataset: (&str, &str),
    options: &FitOptions,
    out: &Path,
) -> ResultRow {
    let model_path = out.join("models").join(format!("{}_n{}_r{}.json", task.model.name(), task.n_high, task.repeat));
    let mut row = ResultRow {
        model: task.model,
        n_high: task.n_high,
        repeat: task.repeat,
        seed: cfg.seed + task.repeat as u64,
        status: "ok".into(),
        rmse: f64::NAN,
        nll: f64::NAN,
        dataset: dataset.0.into(),
        dataset_sha256: dataset.1.into(),
        model_file: String::new(),
        model_sha256: String::new(),
        wall_time_s: 0.0,
    };
    let start = Instant::now();
    let outcome = (|| -> Result<()> {
        let data = first_high(train, task.n_high)?;
        let fitted = fit_model(task.model, &data, options)?;
        let json = fitted.bundle_json()?;
        fs::write(&model_path, &json)?;
        row.model_file = rel(&model_path, out);
        row.model_sha256 = sha256_hex(json.as_bytes());
        let report = fitted.evaluate(&test.0, &test.1, "test")?;
        row.rmse = report.rmse;
        row.nll = report.nll;
        Ok(())
    })();
    row.wall_time_s = start.elapsed().as_secs_f64();
    if let Err(e) = outcome {
        log::warn!("{} n_high={} repeat={}: {e}", task.model.name(), task.n_high, task.repeat);
        row.status = e.to_string().replace(['\n', ','], " ");
    }
    row
}

/// Runs the sweep, writing everything under `out`.
pub fn run_benchmark(cfg: &ExperimentConfig, out: &Path) -> Result<BenchmarkOutput> {
    cfg.validate()?;
    fs::create_dir_all(out.join("models"))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;

    let options = FitOptions::for_spec(cfg.optim.clone(), &cfg.spec(), cfg.aligned)?;
    let test = make_test_set(&cfg.spec(), cfg.n_test, cfg.seed)?;
    let mut repeats = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let ds = generate(&cfg.dataset_config(r))?;
        if r == 0 {
            let mut with_test = ds.clone();
            with_test.config.n_test = cfg.n_test;
            with_test.test_x = test.0.clone();
            with_test.test_y = test.1.clone();
            save_dataset(&out.join("test"), &with_test)?;
        }
        let dir = out.join("datasets").join(format!("rep{r}"));
        save_dataset(&dir, &ds)?;
        let hash = file_sha256(&dir.join(MANIFEST))?;
        repeats.push((ds.train, rel(&dir, out), hash));
    }

    let mut tasks = Vec::new();
    for &model in &cfg.models {
        for &n_high in &cfg.n_high_sweep {
            for repeat in 0..cfg.repeats {
                tasks.push(Task { model, n_high, repeat });
            }
        }
    }
    let rows: Vec<ResultRow> = tasks
        .par_iter()
        .map(|t| {
            let (train, dir, hash) = &repeats[t.repeat];
            run_task(cfg, t, train, &test, (dir, hash), &options, out)
        })
        .collect();

    let mut summary = Vec::new();
    for &model in &cfg.models {
        for &n_high in &cfg.n_high_sweep {
            let ok: Vec<&ResultRow> = rows.iter().filter(|r| r.model == model && r.n_high == n_high && r.ok()).collect();
            let (rmse_mean, rmse_std) = mean_std(&ok.iter().map(|r| r.rmse).collect::<Vec<_>>());
            let (nll_mean, nll_std) = mean_std(&ok.iter().map(|r| r.nll).collect::<Vec<_>>());
            summary.push(SummaryRow { model, n_high, n_ok: ok.len(), rmse_mean, rmse_std, nll_mean, nll_std });
        }
    }
    write_outputs(cfg, &rows, &summary, out)?;
    Ok(BenchmarkOutput { rows, summary, out: out.to_path_buf() })
}

fn write_outputs(cfg: &ExperimentConfig, rows: &[ResultRow], summary: &[SummaryRow], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("results.csv"))?;
    w.write_record([
        "model", "n_high", "repeat", "seed", "status", "rmse", "nll", "dataset", "dataset_sha256", "model_file", "model_sha256",
    ])?;
    for r in rows {
        w.write_record([
            r.model.name().to_string(),
            r.n_high.to_string(),
            r.repeat.to_string(),
            r.seed.to_string(),
            r.status.clone(),
            num(r.rmse),
            num(r.nll),
            r.dataset.clone(),
            r.dataset_sha256.clone(),
            r.model_file.clone(),
            r.model_sha256.clone(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("timings.csv"))?;
    w.write_record(["model", "n_high", "repeat", "wall_time_s"])?;
    for r in rows {
        w.write_record([r.model.name().to_string(), r.n_high.to_string(), r.repeat.to_string(), format!("{:.3}", r.wall_time_s)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["model", "n_high", "n_ok", "rmse_mean", "rmse_std", "nll_mean", "nll_std"])?;
    for s in summary {
        w.write_record([
            s.model.name().to_string(),
            s.n_high.to_string(),
            s.n_ok.to_string(),
            num(s.rmse_mean),
            num(s.rmse_std),
            num(s.nll_mean),
            num(s.nll_std),
        ])?;
    }
    w.flush()?;

    let mut dat = String::from("# n_high");
    for m in &cfg.models {
        let _ = write!(dat, " {0}_rmse_mean {0}_rmse_std {0}_nll_mean {0}_nll_std", m.name());
    }
    dat.push('\n');
    for &n in &cfg.n_high_sweep {
        let _ = write!(dat, "{n}");
        for &m in &cfg.models {
            let s = summary.iter().find(|s| s.model == m && s.n_high == n).unwrap();
            let _ = write!(dat, " {} {} {} {}", num(s.rmse_mean), num(s.rmse_std), num(s.nll_mean), num(s.nll_std));
        }
        dat.push('\n');
    }
    fs::write(out.join("curves.dat"), dat)?;
    Ok(())
}
