//! Solver error against a four-times refined reference.

use serde::Serialize;

use crate::data::{sample_inputs, Sampler};
use crate::grid::resample;
use crate::setup::{solve, Fidelity, PdeSpec};
use crate::Result;

/// Root-mean-square error of one fidelity against the reference, both read on
/// the reference solver nodes.
pub fn refinement_error(spec: &PdeSpec, input: &[f64], fidelity: Fidelity) -> Result<f64> {
    let mut native = spec.clone();
    native.record_grid = None;
    let reference = solve(&native, input, Fidelity::Reference)?;
    let coarse = solve(&native, input, fidelity)?;
    let up = resample(&coarse.field, &coarse.grid, &reference.grid)?;
    let se: f64 = up.data().iter().zip(reference.field.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((se / up.data().len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FidelityOrdering {
    pub n_inputs: usize,
    pub low_error: f64,
    pub high_error: f64,
}

impl FidelityOrdering {
    pub fn holds(&self) -> bool {
        self.low_error > self.high_error
    }
}

/// Mean low and high refinement errors over `n` Sobol inputs.
pub fn fidelity_ordering(spec: &PdeSpec, n: usize) -> Result<FidelityOrdering> {
    let x = sample_inputs(spec, n, Sampler::Sobol, 0)?;
    let (mut lo, mut hi) = (0.0, 0.0);
    for i in 0..n {
        let input: Vec<f64> = x.row(i).iter().cloned().collect();
        lo += refinement_error(spec, &input, Fidelity::Low)?;
        hi += refinement_error(spec, &input, Fidelity::High)?;
    }
    Ok(FidelityOrdering { n_inputs: n, low_error: lo / n as f64, high_error: hi / n as f64 })
}
