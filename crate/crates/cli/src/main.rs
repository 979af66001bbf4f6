use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mfgar::optim::OptimConfig;
use mfgar_cli::{cmd_generate, cmd_train, run_benchmark, CliError, ExitStatus, ExperimentConfig, FitOptions, ModelKind};
use mfgar_pdebench::{DatasetConfig, MeshVariant, PdeKind, PdeSpec, Sampler, Structure};

#[derive(Parser)]
#[command(name = "mfgar", version, about = "Multi-fidelity fusion benchmarks on canonical PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a PDE at sampled inputs and save a two-fidelity dataset.
    Generate(GenerateArgs),
    /// Fit one model on a saved dataset.
    Train(TrainArgs),
    /// Sweep the number of high-fidelity samples and tabulate test errors.
    Benchmark(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Pde {
    Burgers,
    Poisson,
    Heat,
}

impl From<Pde> for PdeKind {
    fn from(p: Pde) -> Self {
        match p {
            Pde::Burgers => PdeKind::Burgers,
            Pde::Poisson => PdeKind::Poisson,
            Pde::Heat => PdeKind::Heat,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Gar,
    Cigar,
    Ar,
    Hogp,
}

impl From<Model> for ModelKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Gar => ModelKind::Gar,
            Model::Cigar => ModelKind::Cigar,
            Model::Ar => ModelKind::Ar,
            Model::Hogp => ModelKind::Hogp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StructureArg {
    Subset,
    Nonsubset,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Sobol,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Main,
    Appendix,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum)]
    pde: Pde,
    #[arg(long, default_value_t = 32)]
    n_low: usize,
    #[arg(long, value_enum, default_value = "subset")]
    structure: StructureArg,
    /// Record low-fidelity fields on the high-fidelity grid.
    #[arg(long)]
    aligned: bool,
    #[arg(long, value_enum, default_value = "sobol")]
    sampler: SamplerArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "main")]
    mesh_variant: Variant,
    #[arg(long, default_value_t = 128)]
    n_test: usize,
}

#[derive(Args)]
struct OptimArgs {
    /// Optimizer iterations per fitted component.
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    step: f64,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> OptimConfig {
        OptimConfig { max_iters: self.iters, step: self.step, seed, ..OptimConfig::default() }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 8)]
    n_high: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `generate`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    model: Model,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    /// One or more models, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "gar")]
    model: Vec<Model>,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    n_high_sweep: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: PathBuf,
}

fn dataset_config(d: &DataArgs, n_high: usize) -> DatasetConfig {
    let variant = match d.mesh_variant {
        Variant::Main => MeshVariant::Main,
        Variant::Appendix => MeshVariant::Appendix,
    };
    DatasetConfig {
        n_test: d.n_test,
        sampler: match d.sampler {
            SamplerArg::Sobol => Sampler::Sobol,
            SamplerArg::Uniform => Sampler::Uniform,
        },
        structure: match d.structure {
            StructureArg::Subset => Structure::Subset,
            StructureArg::Nonsubset => Structure::Nonsubset,
        },
        aligned: d.aligned,
        seed: d.seed,
        test_seed: d.seed,
        ..DatasetConfig::new(PdeSpec::new(d.pde.into(), variant), d.n_low, n_high)
    }
}

fn run(cli: Cli) -> Result<ExitStatus, CliError> {
    match cli.command {
        Command::Generate(a) => {
            let cfg = dataset_config(&a.data, a.n_high);
            let (m, hash) = cmd_generate(&cfg, &a.out)?;
            println!("wrote {} ({} low, {} high, {} test; {} matched, {} unmatched)", a.out.display(),
                m.parts[0].n, m.parts[1].n, m.parts[2].n, m.plan.matched, m.plan.unmatched);
            println!("manifest sha256 {hash}");
            Ok(ExitStatus::Ok)
        }
        Command::Train(a) => {
            let opts = FitOptions::new(a.optim.config(a.seed));
            let s = cmd_train(&a.dataset, a.model.into(), &opts, &a.out)?;
            println!("model {} -> {}", s.model_kind, s.model_file.display());
            if let (Some(r), Some(n)) = (s.rmse, s.nll) {
                println!("test rmse {r:.6e}  nll {n:.6e}");
            }
            println!("output covariance factorizations: {}", s.output_factorizations);
            Ok(ExitStatus::Ok)
        }
        Command::Benchmark(a) => {
            let d = dataset_config(&a.data, 1);
            let mut cfg = ExperimentConfig::new(d.spec.kind);
            cfg.mesh_variant = d.spec.variant;
            cfg.models = a.model.iter().map(|&m| m.into()).collect();
            cfg.n_low = a.data.n_low;
            cfg.n_high_sweep = a.n_high_sweep.clone();
            cfg.n_test = a.data.n_test;
            cfg.structure = d.structure;
            cfg.aligned = d.aligned;
            cfg.sampler = d.sampler;
            cfg.repeats = a.repeats;
            cfg.seed = a.data.seed;
            cfg.optim = a.optim.config(a.data.seed);
            let out = run_benchmark(&cfg, &a.out)?;
            for s in &out.summary {
                println!("{:6} n_high={:3}  rmse {:.4e} ± {:.1e}  nll {:.4e}  ({} ok)",
                    s.model.name(), s.n_high, s.rmse_mean, s.rmse_std, s.nll_mean, s.n_ok);
            }
            println!("results in {}", a.out.display());
            Ok(if out.any_failed() { ExitStatus::FitFailure } else { ExitStatus::Ok })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Ok(w) = std::env::var("MFGAR_WORKERS") {
        match w.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: worker pool: {e}");
                    return ExitCode::from(ExitStatus::UserError as u8);
                }
            }
            _ => {
                eprintln!("error: MFGAR_WORKERS must be a positive integer, got {w:?}");
                return ExitCode::from(ExitStatus::UserError as u8);
            }
        }
    }
    match run(cli) {
        Ok(s) => ExitCode::from(s as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.status() as u8)
        }
    }
}
