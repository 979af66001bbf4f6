use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cigar::orthonormalize_factor;
use crate::error::{Error, Result};
use crate::tensalg::TuckerWeights;

/// How the Tucker weights of a transition are parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightMode {
    /// Every factor entry is free.
    Full,
    /// `W_1 = ρI`, every other factor the identity (classic autoregression).
    ScaledIdentity,
    /// Free entries projected to orthonormal columns after every step.
    Orthonormal,
    /// Held at their initial value.
    Fixed,
}

/// Identity when sizes agree, otherwise ones on the main diagonal.
pub fn default_weights(high: &[usize], low: &[usize]) -> TuckerWeights {
    TuckerWeights::new(
        high.iter()
            .zip(low)
            .map(|(&h, &l)| DMatrix::from_fn(h, l, |i, j| if i == j { 1.0 } else { 0.0 }))
            .collect(),
    )
}

pub(crate) fn scaled_identity(rho: f64, sizes: &[usize]) -> TuckerWeights {
    TuckerWeights::new(
        sizes
            .iter()
            .enumerate()
            .map(|(m, &d)| DMatrix::identity(d, d) * if m == 0 { rho } else { 1.0 })
            .collect(),
    )
}

/// Validates and normalizes the starting weights for `mode`.
pub(crate) fn prepare(mode: WeightMode, init: TuckerWeights) -> Result<TuckerWeights> {
    match mode {
        WeightMode::ScaledIdentity => {
            for (m, f) in init.factors.iter().enumerate() {
                if f.nrows() != f.ncols() {
                    return Err(Error::Unaligned(format!(
                        "autoregression needs equal output sizes, mode {m} maps {} to {}",
                        f.ncols(),
                        f.nrows()
                    )));
                }
            }
            let rho = init.factors.first().map(|f| f[(0, 0)]).unwrap_or(1.0);
            let sizes: Vec<usize> = init.factors.iter().map(|f| f.nrows()).collect();
            Ok(scaled_identity(rho, &sizes))
        }
        WeightMode::Orthonormal => Ok(TuckerWeights::new(
            init.factors.iter().map(orthonormalize_factor).collect::<Result<_>>()?,
        )),
        WeightMode::Full | WeightMode::Fixed => Ok(init),
    }
}

pub(crate) fn pack(mode: WeightMode, w: &TuckerWeights, out: &mut Vec<f64>) {
    match mode {
        WeightMode::Full | WeightMode::Orthonormal => {
            for f in &w.factors {
                out.extend(f.iter());
            }
        }
        WeightMode::ScaledIdentity => out.push(w.factors.first().map(|f| f[(0, 0)]).unwrap_or(0.0)),
        WeightMode::Fixed => {}
    }
}

pub(crate) fn unpack(mode: WeightMode, template: &TuckerWeights, src: &[f64], pos: &mut usize) -> TuckerWeights {
    match mode {
        WeightMode::Full | WeightMode::Orthonormal => {
            let mut w = template.clone();
            for f in &mut w.factors {
                for v in f.iter_mut() {
                    *v = src[*pos];
                    *pos += 1;
                }
            }
            w
        }
        WeightMode::ScaledIdentity => {
            let rho = src[*pos];
            *pos += 1;
            scaled_identity(rho, &template.out_shape())
        }
        WeightMode::Fixed => template.clone(),
    }
}

/// Packs full factor gradients into the parameterization of `mode`.
pub(crate) fn pack_grads(mode: WeightMode, grads: &[DMatrix<f64>], out: &mut Vec<f64>) {
    match mode {
        WeightMode::Full | WeightMode::Orthonormal => {
            for g in grads {
                out.extend(g.iter());
            }
        }
        WeightMode::ScaledIdentity => out.push(grads.first().map(|g| g.trace()).unwrap_or(0.0)),
        WeightMode::Fixed => {}
    }
}

/// Projects the weight block of a packed vector in place.
pub(crate) fn project(mode: WeightMode, template: &TuckerWeights, theta: &mut [f64]) -> Result<()> {
    if mode != WeightMode::Orthonormal {
        return Ok(());
    }
    let mut pos = 0;
    for f in &template.factors {
        let n = f.len();
        let m = DMatrix::from_column_slice(f.nrows(), f.ncols(), &theta[pos..pos + n]);
        let q = orthonormalize_factor(&m)?;
        theta[pos..pos + n].copy_from_slice(q.as_slice());
        pos += n;
    }
    Ok(())
}
