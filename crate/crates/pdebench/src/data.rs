//! Multi-fidelity training designs and held-out test sets.

use mfgar::gar::{build_subset_plan, FidelityLevel, MultiFidelityDataset, SubsetPlan};
use mfgar::tensalg::DenseTensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::resample;
use crate::setup::{solve, Fidelity, PdeSpec};
use crate::sobol::{sobol_points, SobolConfig};
use crate::{PdeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Uniform,
    Sobol,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// High inputs are the first `n_high` low inputs.
    Subset,
    /// High inputs are drawn independently of the low design.
    Nonsubset,
}

const LOW_STREAM: u64 = 0x6c6f77;
const HIGH_STREAM: u64 = 0x68696768;
const TEST_STREAM: u64 = 0x74657374;

/// Independent, never-zero seed for one named stream of a run seed.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)).max(1)
}

/// `n` input points in the problem's parameter box.
///
/// Sobol with seed 0 is the standard sequence (origin included); other seeds
/// apply a digital shift, which keeps the stratification.
pub fn sample_inputs(spec: &PdeSpec, n: usize, sampler: Sampler, seed: u64) -> Result<DMatrix<f64>> {
    let d = spec.input_dim();
    let unit: Vec<Vec<f64>> = match sampler {
        Sampler::Sobol => sobol_points(n, d, SobolConfig { skip_origin: false, shift_seed: seed })?,
        Sampler::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
        }
    };
    let rows: Vec<Vec<f64>> = unit.iter().map(|u| spec.scale_unit(u)).collect();
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

/// Solves every row of `x` and stacks the fields along a new leading mode.
pub fn solve_many(spec: &PdeSpec, x: &DMatrix<f64>, fidelity: Fidelity) -> Result<DenseTensor> {
    let fields: Vec<DenseTensor> = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let input: Vec<f64> = x.row(i).iter().cloned().collect();
            solve(spec, &input, fidelity).map(|s| s.field)
        })
        .collect::<Result<_>>()?;
    Ok(DenseTensor::stack0(&fields)?)
}

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub spec: PdeSpec,
    pub n_low: usize,
    pub n_high: usize,
    pub n_test: usize,
    pub sampler: Sampler,
    pub structure: Structure,
    /// Record low fields on the high output grid.
    pub aligned: bool,
    /// Training design seed.
    pub seed: u64,
    /// Test design seed, kept separate so repeats share one test set.
    pub test_seed: u64,
}

impl DatasetConfig {
    pub fn new(spec: PdeSpec, n_low: usize, n_high: usize) -> Self {
        Self {
            spec,
            n_low,
            n_high,
            n_test: 128,
            sampler: Sampler::Sobol,
            structure: Structure::Subset,
            aligned: false,
            seed: 0,
            test_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.n_low == 0 || self.n_high == 0 {
            return Err(PdeError::InvalidCombination("both levels need at least one sample".into()));
        }
        if self.n_high > self.n_low {
            return Err(PdeError::InvalidCombination(format!(
                "n_high = {} exceeds n_low = {}",
                self.n_high, self.n_low
            )));
        }
        Ok(())
    }
}

/// Training levels plus a high-fidelity test set.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub config: DatasetConfig,
    pub train: MultiFidelityDataset,
    pub plan: SubsetPlan,
    pub test_x: DMatrix<f64>,
    pub test_y: DenseTensor,
}

/// Builds the two training levels.
pub fn make_dataset(
    spec: &PdeSpec,
    n_low: usize,
    n_high: usize,
    sampler: Sampler,
    structure: Structure,
    aligned: bool,
    seed: u64,
) -> Result<MultiFidelityDataset> {
    let cfg = DatasetConfig { sampler, structure, aligned, seed, n_test: 0, ..DatasetConfig::new(spec.clone(), n_low, n_high) };
    train_levels(&cfg)
}

fn train_levels(cfg: &DatasetConfig) -> Result<MultiFidelityDataset> {
    cfg.validate()?;
    let spec = &cfg.spec;
    let low_seed = if cfg.seed == 0 { 0 } else { stream_seed(cfg.seed, LOW_STREAM) };
    let x_low = sample_inputs(spec, cfg.n_low, cfg.sampler, low_seed)?;
    let x_high = match cfg.structure {
        Structure::Subset => x_low.rows(0, cfg.n_high).into_owned(),
        Structure::Nonsubset => sample_inputs(spec, cfg.n_high, cfg.sampler, stream_seed(cfg.seed, HIGH_STREAM))?,
    };
    let mut y_low = solve_many(spec, &x_low, Fidelity::Low)?;
    let y_high = solve_many(spec, &x_high, Fidelity::High)?;
    if cfg.aligned && y_low.shape()[1..] != y_high.shape()[1..] {
        y_low = align_to(spec, &y_low)?;
    }
    let levels = vec![FidelityLevel::new(x_low, y_low)?, FidelityLevel::new(x_high, y_high)?];
    Ok(MultiFidelityDataset::new(levels)?)
}

/// Resamples stacked low-fidelity fields onto the high output grid.
fn align_to(spec: &PdeSpec, y_low: &DenseTensor) -> Result<DenseTensor> {
    let src = spec.output_grid(Fidelity::Low);
    let dst = spec.output_grid(Fidelity::High);
    let fields: Vec<DenseTensor> = (0..y_low.shape()[0])
        .map(|i| resample(&y_low.slice0(i), &src, &dst))
        .collect::<Result<_>>()?;
    Ok(DenseTensor::stack0(&fields)?)
}

/// Uniformly drawn inputs with their high-fidelity fields.
pub fn make_test_set(spec: &PdeSpec, n_test: usize, test_seed: u64) -> Result<(DMatrix<f64>, DenseTensor)> {
    let x = sample_inputs(spec, n_test, Sampler::Uniform, stream_seed(test_seed, TEST_STREAM))?;
    let y = if n_test == 0 {
        let mut shape = spec.output_grid(Fidelity::High).shape();
        shape.insert(0, 0);
        DenseTensor::zeros(&shape)
    } else {
        solve_many(spec, &x, Fidelity::High)?
    };
    Ok((x, y))
}

/// Training levels, their sample plan and the test set.
pub fn generate(cfg: &DatasetConfig) -> Result<GeneratedDataset> {
    let train = train_levels(cfg)?;
    let plan = build_subset_plan(&train, 0, None)?;
    let (test_x, test_y) = make_test_set(&cfg.spec, cfg.n_test, cfg.test_seed)?;
    Ok(GeneratedDataset { config: cfg.clone(), train, plan, test_x, test_y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::setup::{MeshVariant, PdeKind};

    fn poisson() -> PdeSpec {
        PdeSpec::new(PdeKind::Poisson, MeshVariant::Main)
    }

    #[test]
    fn subset_designs_are_prefixes() {
        let d = make_dataset(&poisson(), 12, 12, Sampler::Sobol, Structure::Subset, false, 3).unwrap();
        let plan = build_subset_plan(&d, 0, None).unwrap();
        assert!(plan.unmatched.is_empty());
        assert_eq!(plan.matched, (0..12).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn nonsubset_designs_share_no_inputs() {
        for seed in 0..8 {
            for sampler in [Sampler::Sobol, Sampler::Uniform] {
                let d = make_dataset(&poisson(), 16, 8, sampler, Structure::Nonsubset, false, seed).unwrap();
                let plan = build_subset_plan(&d, 0, None).unwrap();
                assert!(plan.matched.is_empty(), "seed {seed} {sampler:?}");
                assert_eq!(plan.unmatched.len(), 8);
            }
        }
    }

    #[test]
    fn alignment_controls_output_shapes() {
        let un = make_dataset(&poisson(), 4, 2, Sampler::Sobol, Structure::Subset, false, 0).unwrap();
        assert_eq!(un.levels[0].output_shape(), &[9, 9]);
        assert_eq!(un.levels[1].output_shape(), &[33, 33]);
        let al = make_dataset(&poisson(), 4, 2, Sampler::Sobol, Structure::Subset, true, 0).unwrap();
        assert!(al.aligned());
        assert_eq!(al.levels[0].output_shape(), &[33, 33]);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = DatasetConfig::new(poisson(), 6, 3);
        cfg.n_test = 4;
        cfg.seed = 9;
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed = 10;
        assert_ne!(generate(&cfg).unwrap().train, a.train);
    }

    #[test]
    fn standard_sobol_design_starts_at_the_lower_corner() {
        let x = sample_inputs(&poisson(), 2, Sampler::Sobol, 0).unwrap();
        assert_eq!(x.row(0).iter().cloned().collect::<Vec<_>>(), vec![0.1; 5]);
        assert!(x.row(1).iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let r = make_dataset(&poisson(), 4, 8, Sampler::Sobol, Structure::Subset, false, 0);
        assert!(matches!(r, Err(PdeError::InvalidCombination(_))));
    }

    #[test]
    fn stream_seeds_are_distinct_and_nonzero() {
        let s: Vec<u64> = [LOW_STREAM, HIGH_STREAM, TEST_STREAM].iter().map(|&t| stream_seed(0, t)).collect();
        assert!(s.iter().all(|&v| v != 0));
        assert!(s[0] != s[1] && s[1] != s[2] && s[0] != s[2]);
    }
}
