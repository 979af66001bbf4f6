//! First-order minimization with monotone step acceptance, and a
//! finite-difference gradient audit.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub max_iters: usize,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            step: 1e-2,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.step > 0.0) || !(self.tol >= 0.0) {
            return Err(Error::InvalidParameter(format!("bad optimizer config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub params: Vec<f64>,
    pub objective: f64,
    /// Accepted points only, starting with the initial point.
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub converged: bool,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const GROW: f64 = 1.2;
const SHRINK: f64 = 0.5;
const SMALL_CHANGES_TO_STOP: usize = 3;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Minimizes `f`, which returns the objective and its gradient.
pub fn minimize<F>(f: F, init: &[f64], config: &OptimConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    minimize_projected(f, |_| Ok(()), init, config)
}

/// Like [`minimize`], but every candidate is passed through `project`
/// before it is evaluated.
pub fn minimize_projected<F, P>(mut f: F, mut project: P, init: &[f64], config: &OptimConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    P: FnMut(&mut [f64]) -> Result<()>,
{
    config.validate()?;
    let mut x = init.to_vec();
    project(&mut x)?;
    let (mut fx, mut gx) = f(&x)?;
    if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("objective or gradient not finite at the initial point".into()));
    }
    let n = x.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut t1 = 0i32;
    let mut t2 = 0i32;
    let mut lr = config.step;
    let min_lr = config.step * 1e-10;
    let mut trace = vec![TraceEntry {
        iter: 0,
        objective: fx,
        grad_norm: norm(&gx),
    }];
    let mut small = 0usize;
    let mut converged = false;
    let mut iterations = 0;

    if n == 0 {
        return Ok(OptimResult { params: x, objective: fx, trace, iterations, converged: true });
    }

    while iterations < config.max_iters {
        iterations += 1;
        let b1t = 1.0 - BETA1.powi(t1 + 1);
        let b2t = 1.0 - BETA2.powi(t2 + 1);
        let m_new: Vec<f64> = m.iter().zip(&gx).map(|(mi, g)| BETA1 * mi + (1.0 - BETA1) * g).collect();
        let v_new: Vec<f64> = v.iter().zip(&gx).map(|(vi, g)| BETA2 * vi + (1.0 - BETA2) * g * g).collect();
        let mut cand: Vec<f64> = (0..n)
            .map(|i| x[i] - lr * (m_new[i] / b1t) / ((v_new[i] / b2t).sqrt() + ADAM_EPS))
            .collect();
        let evaluated = project(&mut cand).and_then(|_| f(&cand));
        let accepted = match evaluated {
            Ok((fc, gc)) if fc.is_finite() && gc.iter().all(|g| g.is_finite()) && fc <= fx => Some((fc, gc)),
            _ => None,
        };
        match accepted {
            Some((fc, gc)) => {
                let change = (fx - fc).abs();
                x = cand;
                m = m_new;
                v = v_new;
                t1 += 1;
                t2 += 1;
                let prev = fx;
                fx = fc;
                gx = gc;
                trace.push(TraceEntry { iter: iterations, objective: fx, grad_norm: norm(&gx) });
                lr = (lr * GROW).min(config.step * 1e3);
                if change <= config.tol * prev.abs().max(1e-12) {
                    small += 1;
                    if small >= SMALL_CHANGES_TO_STOP {
                        converged = true;
                        break;
                    }
                } else {
                    small = 0;
                }
            }
            None => {
                // drop the momentum that carried the step past the valley
                m.iter_mut().for_each(|mi| *mi = 0.0);
                t1 = 0;
                lr *= SHRINK;
                if lr < min_lr {
                    converged = true;
                    break;
                }
            }
        }
    }
    Ok(OptimResult { params: x, objective: fx, trace, iterations, converged })
}

/// Largest componentwise relative error between the supplied gradient and
/// central differences with step `eps`.
///
/// Each component is scaled by `max(|fd_i|, 1e-8 + 1e-6·max_j |fd_j|)` so
/// components that are numerically zero do not dominate.
pub fn grad_audit<F>(mut f: F, point: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if point.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("audit point".into()));
    }
    let (_, grad) = f(point)?;
    let mut fd = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + eps;
        let (fp, _) = f(&x)?;
        x[i] = point[i] - eps;
        let (fm, _) = f(&x)?;
        x[i] = point[i];
        fd.push((fp - fm) / (2.0 * eps));
    }
    let big = fd.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let floor = 1e-8 + 1e-6 * big;
    Ok(fd
        .iter()
        .zip(&grad)
        .map(|(d, g)| (d - g).abs() / d.abs().max(floor))
        .fold(0.0, f64::max))
}

/// Writes `iter,objective,grad_norm` rows.
pub fn write_trace_csv<W: Write>(trace: &[TraceEntry], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iter,objective,grad_norm")?;
    for e in trace {
        writeln!(out, "{},{},{}", e.iter, e.objective, e.grad_norm)?;
    }
    Ok(())
}
