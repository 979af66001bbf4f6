use mfgar::bundle::{FittedModel, ModelBundle};
use mfgar::cigar::{cigar_fit, CigarConfig};
use mfgar::gar::{ar_baseline_fit, gar_fit_recursive, GarConfig, MultiFidelityDataset};
use mfgar::hogp::{output_factorization_count, reset_output_factorization_count, tgp_fit, TgpConfig};
use mfgar::metrics::EvalReport;
use mfgar::optim::{OptimConfig, TraceEntry};
use mfgar::tensalg::{DenseTensor, TuckerWeights};
use mfgar::Error;
use mfgar_pdebench::{interpolation_matrix, Fidelity, PdeSpec};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gar,
    Cigar,
    Ar,
    /// Tensor GP on the high-fidelity samples alone.
    Hogp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gar => "gar",
            ModelKind::Cigar => "cigar",
            ModelKind::Ar => "ar",
            ModelKind::Hogp => "hogp",
        }
    }
}

/// Settings shared by every fitted component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub optim: OptimConfig,
    /// Starting weights for the low-to-high map (see [`interpolation_weights`]).
    pub weight_init: Option<TuckerWeights>,
}

impl FitOptions {
    pub fn new(optim: OptimConfig) -> Self {
        Self { optim, weight_init: None }
    }

    /// Options for data generated from `spec`: when the two fidelities are
    /// recorded on different grids, the weights start at grid interpolation.
    pub fn for_spec(optim: OptimConfig, spec: &PdeSpec, aligned: bool) -> mfgar_pdebench::Result<Self> {
        let weight_init = if aligned { None } else { interpolation_weights(spec)? };
        Ok(Self { optim, weight_init })
    }
}

/// Per-axis linear interpolation from the low to the high output grid, or
/// `None` when both fidelities share a grid.
pub fn interpolation_weights(spec: &PdeSpec) -> mfgar_pdebench::Result<Option<TuckerWeights>> {
    let lo = spec.output_grid(Fidelity::Low);
    let hi = spec.output_grid(Fidelity::High);
    if lo == hi {
        return Ok(None);
    }
    let factors = lo.axes.iter().zip(&hi.axes).map(|(a, b)| interpolation_matrix(a, b)).collect::<mfgar_pdebench::Result<_>>()?;
    Ok(Some(TuckerWeights::new(factors)))
}

/// A fitted model plus bookkeeping from its fit.
pub struct Fitted {
    pub model: FittedModel,
    /// Dense output-covariance factorizations performed while fitting.
    pub output_factorizations: usize,
}

impl Fitted {
    pub fn bundle_json(&self) -> Result<String> {
        ModelBundle::new(self.model.clone()).to_json().map_err(|e| CliError::Fit(e.to_string()))
    }

    pub fn traces(&self) -> Vec<&[TraceEntry]> {
        match &self.model {
            FittedModel::Gar(m) | FittedModel::Ar(m) => {
                std::iter::once(m.low.trace.as_slice()).chain(m.transitions.iter().map(|t| t.trace.as_slice())).collect()
            }
            FittedModel::Cigar(m) => {
                std::iter::once(m.low.trace.as_slice()).chain(m.transitions.iter().map(|t| t.trace.as_slice())).collect()
            }
            FittedModel::Hogp(m) => vec![m.trace.as_slice()],
        }
    }

    pub fn evaluate(&self, x: &DMatrix<f64>, y: &DenseTensor, tag: &str) -> Result<EvalReport> {
        let preds = self.model.predict_many(x).map_err(|e| CliError::Fit(e.to_string()))?;
        let truths: Vec<DenseTensor> = (0..y.shape()[0]).map(|i| y.slice0(i)).collect();
        // models pad outputs with trailing unit modes; compare on the data's shape
        let preds: Vec<_> = preds
            .into_iter()
            .zip(&truths)
            .map(|(mut p, t)| {
                p.mean = p.mean.reshape(t.shape().to_vec())?;
                p.variance_diag = p.variance_diag.reshape(t.shape().to_vec())?;
                Ok(p)
            })
            .collect::<mfgar::Result<_>>()
            .map_err(|e: Error| CliError::Fit(e.to_string()))?;
        EvalReport::evaluate(self.model.kind(), tag, &preds, &truths).map_err(|e| CliError::Fit(e.to_string()))
    }
}

fn fit_error(e: Error) -> CliError {
    match e {
        Error::Unaligned(msg) => CliError::User(format!(
            "{msg}; regenerate the data with --aligned or choose --model gar"
        )),
        Error::Level { source, .. } if matches!(*source, Error::Unaligned(_)) => fit_error(*source),
        other => CliError::Fit(other.to_string()),
    }
}

/// Fits `kind` on a two-level dataset.
pub fn fit_model(kind: ModelKind, data: &MultiFidelityDataset, options: &FitOptions) -> Result<Fitted> {
    let tgp = TgpConfig { optim: options.optim.clone(), ..TgpConfig::default() };
    reset_output_factorization_count();
    let model = match kind {
        ModelKind::Gar => {
            let cfg = GarConfig {
                low: tgp,
                residual_optim: options.optim.clone(),
                weight_init: options.weight_init.clone(),
                ..GarConfig::default()
            };
            FittedModel::Gar(gar_fit_recursive(data, &cfg).map_err(fit_error)?)
        }
        ModelKind::Ar => {
            let cfg = GarConfig { low: tgp, residual_optim: options.optim.clone(), ..GarConfig::default() };
            FittedModel::Ar(ar_baseline_fit(data, &cfg).map_err(fit_error)?)
        }
        ModelKind::Cigar => {
            let cfg = CigarConfig {
                low_optim: options.optim.clone(),
                residual_optim: options.optim.clone(),
                weight_init: options.weight_init.clone(),
                ..CigarConfig::default()
            };
            FittedModel::Cigar(cigar_fit(data, &cfg).map_err(fit_error)?)
        }
        ModelKind::Hogp => {
            let top = data.levels.last().ok_or_else(|| CliError::User("empty dataset".into()))?;
            FittedModel::Hogp(tgp_fit(&top.x, &top.y, &tgp).map_err(fit_error)?)
        }
    };
    Ok(Fitted { model, output_factorizations: output_factorization_count() })
}
