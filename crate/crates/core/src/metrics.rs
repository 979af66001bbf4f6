//! Test-set error metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::hogp::PosteriorField;
use crate::tensalg::DenseTensor;

/// Floor applied to predictive variances before taking logs.
pub const VARIANCE_FLOOR: f64 = 1e-12;

fn check_pairs(n_pred: usize, n_truth: usize) -> Result<()> {
    if n_pred != n_truth {
        return shape_err(format!("{n_pred} predictions for {n_truth} truths"));
    }
    if n_pred == 0 {
        return shape_err("empty test set");
    }
    Ok(())
}

fn check_shape(a: &DenseTensor, b: &DenseTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("prediction shape {:?} vs truth {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Root mean squared error over every entry of every test field.
pub fn rmse(means: &[DenseTensor], truths: &[DenseTensor]) -> Result<f64> {
    check_pairs(means.len(), truths.len())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (m, t) in means.iter().zip(truths) {
        check_shape(m, t)?;
        sum += m.sub(t)?.norm_sq();
        count += t.len();
    }
    Ok((sum / count as f64).sqrt())
}

/// RMSE of each test field on its own.
pub fn per_sample_rmse(means: &[DenseTensor], truths: &[DenseTensor]) -> Result<Vec<f64>> {
    check_pairs(means.len(), truths.len())?;
    means
        .iter()
        .zip(truths)
        .map(|(m, t)| {
            check_shape(m, t)?;
            Ok((m.sub(t)?.norm_sq() / t.len() as f64).sqrt())
        })
        .collect()
}

/// Mean per-entry Gaussian NLL without the `½ln 2π` constant.
pub fn nll_metric(preds: &[PosteriorField], truths: &[DenseTensor]) -> Result<f64> {
    check_pairs(preds.len(), truths.len())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        check_shape(&p.mean, t)?;
        check_shape(&p.variance_diag, t)?;
        for ((mu, v), y) in p.mean.data().iter().zip(p.variance_diag.data()).zip(t.data()) {
            let v = v.max(VARIANCE_FLOOR);
            sum += 0.5 * v.ln() + (y - mu).powi(2) / (2.0 * v);
        }
        count += t.len();
    }
    if !sum.is_finite() {
        return Err(Error::NonFinite("nll metric".into()));
    }
    Ok(sum / count as f64)
}

/// Entrywise RMSE across test samples: one field shaped like a single output.
pub fn rmse_error_field(means: &[DenseTensor], truths: &[DenseTensor]) -> Result<DenseTensor> {
    check_pairs(means.len(), truths.len())?;
    let mut acc = DenseTensor::zeros(truths[0].shape());
    for (m, t) in means.iter().zip(truths) {
        check_shape(m, t)?;
        check_shape(t, &acc)?;
        acc = acc.add(&m.sub(t)?.map(|e| e * e))?;
    }
    let n = means.len() as f64;
    Ok(acc.map(|s| (s / n).sqrt()))
}

/// Scores of one model on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: String,
    pub dataset: String,
    pub rmse: f64,
    pub nll: f64,
    pub per_sample_rmse: Vec<f64>,
    pub n_test: usize,
}

impl EvalReport {
    pub fn evaluate(model_kind: &str, dataset: &str, preds: &[PosteriorField], truths: &[DenseTensor]) -> Result<Self> {
        let means: Vec<DenseTensor> = preds.iter().map(|p| p.mean.clone()).collect();
        Ok(Self {
            model_kind: model_kind.to_string(),
            dataset: dataset.to_string(),
            rmse: rmse(&means, truths)?,
            nll: nll_metric(preds, truths)?,
            per_sample_rmse: per_sample_rmse(&means, truths)?,
            n_test: truths.len(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes a header and one row per report; per-sample errors are `;`-joined.
    pub fn write_csv<W: Write>(reports: &[EvalReport], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::InvalidParameter(format!("csv output: {e}"));
        w.write_record(["model_kind", "dataset", "rmse", "nll", "n_test", "per_sample_rmse"]).map_err(io)?;
        for r in reports {
            let per: Vec<String> = r.per_sample_rmse.iter().map(|v| format!("{v:e}")).collect();
            w.write_record([
                r.model_kind.clone(),
                r.dataset.clone(),
                format!("{:e}", r.rmse),
                format!("{:e}", r.nll),
                r.n_test.to_string(),
                per.join(";"),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::InvalidParameter(format!("csv output: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, shape: &[usize]) -> Vec<DenseTensor> {
        (0..n).map(|_| DenseTensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))).collect()
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = random_set(&mut rng, 3, &[2, 2]);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert!(rmse_error_field(&t, &t).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_offset_gives_its_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_set(&mut rng, 4, &[3]);
        let m: Vec<DenseTensor> = t.iter().map(|x| x.map(|v| v - 0.7)).collect();
        assert!((rmse(&m, &t).unwrap() - 0.7).abs() < 1e-14);
    }

    #[test]
    fn rmse_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_set(&mut rng, 5, &[3, 2]);
        let m = random_set(&mut rng, 5, &[3, 2]);
        let mut s = 0.0;
        for i in 0..5 {
            for a in 0..3 {
                for b in 0..2 {
                    s += (m[i].get(&[a, b]) - t[i].get(&[a, b])).powi(2);
                }
            }
        }
        assert!((rmse(&m, &t).unwrap() - (s / 30.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn error_field_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_set(&mut rng, 4, &[2, 3]);
        let m = random_set(&mut rng, 4, &[2, 3]);
        let f = rmse_error_field(&m, &t).unwrap();
        for a in 0..2 {
            for b in 0..3 {
                let s: f64 = (0..4).map(|i| (m[i].get(&[a, b]) - t[i].get(&[a, b])).powi(2)).sum();
                assert!((f.get(&[a, b]) - (s / 4.0).sqrt()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_sample_error_field_is_absolute_error() {
        let t = vec![DenseTensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let m = vec![DenseTensor::new(vec![3], vec![0.0, 1.0, 0.5]).unwrap()];
        assert_eq!(rmse_error_field(&m, &t).unwrap().data(), &[1.0, 3.0, 0.0]);
    }

    fn field(mean: DenseTensor, var: f64) -> PosteriorField {
        let v = DenseTensor::filled(mean.shape(), var);
        PosteriorField { mean, variance_diag: v }
    }

    #[test]
    fn nll_constant_is_omitted() {
        let t = DenseTensor::new(vec![2], vec![0.3, -1.0]).unwrap();
        assert_eq!(nll_metric(&[field(t.clone(), 1.0)], std::slice::from_ref(&t)).unwrap(), 0.0);
        let e2 = std::f64::consts::E.powi(2);
        assert!((nll_metric(&[field(t.clone(), e2)], &[t]).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn nll_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_set(&mut rng, 3, &[4]);
        let preds: Vec<PosteriorField> = (0..3)
            .map(|_| PosteriorField {
                mean: DenseTensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0)),
                variance_diag: DenseTensor::from_fn(&[4], |_| rng.random_range(0.1..2.0)),
            })
            .collect();
        let mut s = 0.0;
        for (p, y) in preds.iter().zip(&t) {
            for e in 0..4 {
                let v = p.variance_diag.get(&[e]);
                s += 0.5 * v.ln() + (y.get(&[e]) - p.mean.get(&[e])).powi(2) / (2.0 * v);
            }
        }
        assert!((nll_metric(&preds, &t).unwrap() - s / 12.0).abs() < 1e-14);
    }

    #[test]
    fn zero_variance_is_floored() {
        let t = DenseTensor::new(vec![1], vec![0.0]).unwrap();
        let v = nll_metric(&[field(t.clone(), 0.0)], &[t]).unwrap();
        assert!((v - 0.5 * VARIANCE_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = vec![DenseTensor::zeros(&[2])];
        let b = vec![DenseTensor::zeros(&[3])];
        assert!(matches!(rmse(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(rmse(&a, &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn report_serializes() {
        let t = vec![DenseTensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let r = EvalReport::evaluate("gar", "poisson", &[field(t[0].map(|v| v + 1.0), 1.0)], &t).unwrap();
        assert_eq!(r.n_test, 1);
        assert!((r.rmse - 1.0).abs() < 1e-15);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut buf = Vec::new();
        EvalReport::write_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("model_kind,dataset,rmse,nll,n_test,per_sample_rmse\ngar,poisson,1e0,"));
    }

    proptest! {
        #[test]
        fn rmse_squared_is_mean_of_error_field_squares(seed in 0u64..500, n in 1usize..6, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_set(&mut rng, n, &[d, 2]);
            let m = random_set(&mut rng, n, &[d, 2]);
            let r = rmse(&m, &t).unwrap();
            let f = rmse_error_field(&m, &t).unwrap();
            let from_field = f.data().iter().map(|v| v * v).sum::<f64>() / f.len() as f64;
            prop_assert!((r * r - from_field).abs() < 1e-12);
            let per = per_sample_rmse(&m, &t).unwrap();
            let from_per = per.iter().map(|v| v * v).sum::<f64>() / n as f64;
            prop_assert!((r * r - from_per).abs() < 1e-12);
        }

        #[test]
        fn nll_is_stationary_at_the_squared_error(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = rng.random_range(-2.0..2.0);
            let mu = y + rng.random_range(0.1..1.0);
            let best = (y - mu) * (y - mu);
            let t = vec![DenseTensor::new(vec![1], vec![y]).unwrap()];
            let at = |v: f64| nll_metric(&[field(DenseTensor::new(vec![1], vec![mu]).unwrap(), v)], &t).unwrap();
            prop_assert!(at(best) <= at(best * 1.05));
            prop_assert!(at(best) <= at(best * 0.95));
        }
    }
}
