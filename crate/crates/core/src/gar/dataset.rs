use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensalg::DenseTensor;

/// Inputs (one row per sample) and outputs (sample index in mode 0) of one fidelity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityLevel {
    pub x: DMatrix<f64>,
    pub y: DenseTensor,
}

impl FidelityLevel {
    pub fn new(x: DMatrix<f64>, y: DenseTensor) -> Result<Self> {
        if y.ndim() < 2 || y.shape()[0] != x.nrows() {
            return shape_err(format!("{} inputs but outputs of shape {:?}", x.nrows(), y.shape()));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.y.shape()[1..]
    }
}

/// Fidelity levels ordered from lowest to highest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiFidelityDataset {
    pub levels: Vec<FidelityLevel>,
}

impl MultiFidelityDataset {
    pub fn new(levels: Vec<FidelityLevel>) -> Result<Self> {
        if levels.is_empty() {
            return shape_err("a dataset needs at least one level");
        }
        let dim = levels[0].x.ncols();
        for (i, l) in levels.iter().enumerate() {
            if l.x.ncols() != dim {
                return shape_err(format!("level {i} has input dimension {} instead of {dim}", l.x.ncols()));
            }
            if l.n() == 0 {
                return shape_err(format!("level {i} is empty"));
            }
            if i > 0 && l.n() > levels[i - 1].n() {
                return shape_err(format!(
                    "level {i} has more samples ({}) than level {} ({})",
                    l.n(),
                    i - 1,
                    levels[i - 1].n()
                ));
            }
            if !l.y.is_finite() || l.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("level {i} data")));
            }
        }
        Ok(Self { levels })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.levels[0].x.ncols()
    }

    /// Common output mode count after padding.
    pub fn mode_count(&self) -> usize {
        self.levels.iter().map(|l| l.output_shape().len()).max().unwrap_or(0)
    }

    /// Every level padded with trailing size-1 modes to the common mode count.
    pub fn padded(&self) -> Result<Self> {
        let m = self.mode_count();
        let levels = self
            .levels
            .iter()
            .map(|l| {
                let mut shape = l.y.shape().to_vec();
                shape.resize(m + 1, 1);
                Ok(FidelityLevel { x: l.x.clone(), y: l.y.clone().reshape(shape)? })
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    /// True when all levels share the same output shape.
    pub fn aligned(&self) -> bool {
        self.levels.windows(2).all(|w| w[0].output_shape() == w[1].output_shape())
    }
}

/// Correspondence between the samples of two adjacent levels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetPlan {
    /// `(high index, low index)` pairs with identical inputs, in high order.
    pub matched: Vec<(usize, usize)>,
    /// High samples with no low twin, in high order.
    pub unmatched: Vec<usize>,
}

impl SubsetPlan {
    pub fn is_subset(&self) -> bool {
        self.unmatched.is_empty()
    }

    pub fn n_high(&self) -> usize {
        self.matched.len() + self.unmatched.len()
    }

    /// Low index for each high sample (`None` when unmatched).
    pub fn low_index_of(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.n_high()];
        for &(h, l) in &self.matched {
            out[h] = Some(l);
        }
        out
    }
}

fn rows_within(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize, tol: Option<f64>) -> bool {
    match tol {
        None => a.row(i) == b.row(j),
        Some(t) => (a.row(i) - b.row(j)).norm() <= t,
    }
}

/// Matches high-fidelity inputs of `level + 1` against those of `level`.
///
/// Matching is exact unless a Euclidean tolerance is given. A high input
/// with more than one low candidate is an error.
pub fn build_subset_plan(dataset: &MultiFidelityDataset, level: usize, tol: Option<f64>) -> Result<SubsetPlan> {
    if level + 1 >= dataset.n_levels() {
        return shape_err(format!("no level above {level}"));
    }
    let lo = &dataset.levels[level].x;
    let hi = &dataset.levels[level + 1].x;
    let mut plan = SubsetPlan::default();
    for h in 0..hi.nrows() {
        let hits: Vec<usize> = (0..lo.nrows()).filter(|&l| rows_within(hi, h, lo, l, tol)).collect();
        match hits.as_slice() {
            [] => plan.unmatched.push(h),
            [l] => plan.matched.push((h, *l)),
            _ => {
                return Err(Error::AmbiguousMatch(format!(
                    "high sample {h} of level {} matches low samples {:?}",
                    level + 1,
                    hits
                )))
            }
        }
    }
    Ok(plan)
}
