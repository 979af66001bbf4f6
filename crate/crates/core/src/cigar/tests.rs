use super::*;
use crate::gar::{gar_nll, gar_predict_many, FidelityLevel};
use crate::oracle::{random_cigar_model, random_inputs};
use crate::hogp::{output_factorization_count, reset_output_factorization_count};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn random_model(seed: u64, n_l: usize, n_h: usize, low: &[usize], high: &[usize], fresh: usize) -> CigarModel {
    random_cigar_model(seed, n_l, n_h, low, high, fresh).unwrap()
}

fn random_factor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn polar(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

#[test]
fn orthonormal_factor_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = polar(&random_factor(&mut rng, 5, 3));
    assert!((orthonormalize_factor(&q).unwrap() - &q).amax() < 1e-12);
}

#[test]
fn scaling_is_removed() {
    let i = DMatrix::<f64>::identity(3, 3);
    assert!((orthonormalize_factor(&(&i * 2.0)).unwrap() - i).amax() < 1e-14);
}

#[test]
fn projection_is_the_nearest_orthonormal_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let m = random_factor(&mut rng, 4, 3);
        let q = orthonormalize_factor(&m).unwrap();
        assert!((q.transpose() * &q - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!((&q - polar(&m)).amax() < 1e-10);
        let best = (&m - &q).norm();
        for _ in 0..20 {
            let other = polar(&random_factor(&mut rng, 4, 3));
            assert!((&m - other).norm() >= best - 1e-12);
        }
    }
}

#[test]
fn rank_deficient_factors_are_rejected() {
    let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
    assert!(matches!(orthonormalize_factor(&m), Err(Error::RankDeficient(_))));
    assert!(matches!(orthonormalize_factor(&DMatrix::zeros(2, 3)), Err(Error::RankDeficient(_))));
}

#[test]
fn nll_equals_gar_nll_at_constrained_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..12 {
        let l = vec![rng.random_range(1..=3), rng.random_range(1..=2)];
        let h: Vec<usize> = l.iter().map(|&d| d + rng.random_range(0..=1)).collect();
        let fresh = if seed % 2 == 0 { 0 } else { rng.random_range(1..=3) };
        let m = random_model(seed, 7, 4, &l, &h, fresh);
        let a = cigar_nll(&m).unwrap();
        let b = gar_nll(&m.to_gar().unwrap()).unwrap();
        assert!(rel(a, b) < 1e-8, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn means_match_gar_under_identity_output_covariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..12 {
        let l = vec![rng.random_range(1..=3), 2];
        let h: Vec<usize> = l.iter().map(|&d| d + rng.random_range(0..=1)).collect();
        let fresh = if seed % 2 == 0 { 0 } else { rng.random_range(1..=3) };
        let m = random_model(100 + seed, 7, 4, &l, &h, fresh);
        let g = m.to_gar().unwrap();
        let mut xs = random_inputs(&mut rng, 3, 2);
        xs.row_mut(2).copy_from(&m.data.levels[1].x.row(3));
        let a = cigar_predict_many(&m, &xs).unwrap();
        let b = gar_predict_many(&g, &xs).unwrap();
        for (p, q) in a.iter().zip(&b) {
            for (u, v) in p.mean.data().iter().zip(q.mean.data()) {
                assert!((u - v).abs() <= 1e-8 * v.abs().max(1.0), "seed {seed}: {u} vs {v}");
            }
        }
    }
}

#[test]
fn square_weights_give_the_gar_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..6 {
        let m = random_model(200 + seed, 6, 4, &[3, 2], &[3, 2], seed as usize % 3);
        let w = &m.transitions[0].weights;
        assert!(row_norms(w).data().iter().all(|r| (r - 1.0).abs() < 1e-12));
        let xs = random_inputs(&mut rng, 3, 2);
        let a = cigar_predict_many(&m, &xs).unwrap();
        let b = gar_predict_many(&m.to_gar().unwrap(), &xs).unwrap();
        for (p, q) in a.iter().zip(&b) {
            for (u, v) in p.variance_diag.data().iter().zip(q.variance_diag.data()) {
                assert!(rel(*u, *v) < 1e-8, "seed {seed}: {u} vs {v}");
            }
        }
    }
}

#[test]
fn rectangular_weights_give_positive_variances() {
    let m = random_model(300, 6, 4, &[2, 2], &[4, 3], 2);
    let xs = random_inputs(&mut ChaCha8Rng::seed_from_u64(6), 4, 2);
    for p in cigar_predict_many(&m, &xs).unwrap() {
        assert!(p.variance_diag.data().iter().all(|v| *v > 0.0 && v.is_finite()));
    }
}

#[test]
fn gradients_pass_audit_at_random_parameters() {
    for (seed, fresh) in [(0, 0), (1, 1), (2, 3)] {
        let m = random_model(400 + seed, 7, 4, &[2, 2], &[3, 2], fresh);
        let err = cigar_grad_audit(&m, 1e-6).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

fn smooth_data(n_l: usize, n_h: usize, d_l: usize, d_h: usize, fresh: bool) -> MultiFidelityDataset {
    let xl = DMatrix::from_fn(n_l, 1, |i, _| i as f64 / (n_l - 1) as f64);
    let mut xh = xl.rows(0, n_h).into_owned();
    if fresh {
        xh[(n_h - 1, 0)] = 0.937;
    }
    let yl = DenseTensor::from_fn(&[n_l, d_l], |i| ((1.0 + i[1] as f64) * 2.0 * xl[(i[0], 0)]).sin());
    let yh = DenseTensor::from_fn(&[n_h, d_h], |i| {
        let x = xh[(i[0], 0)];
        1.3 * ((1.0 + (i[1] % d_l) as f64) * 2.0 * x).sin() + 0.2 * x
    });
    MultiFidelityDataset::new(vec![FidelityLevel::new(xl, yl).unwrap(), FidelityLevel::new(xh, yh).unwrap()]).unwrap()
}

fn quick() -> CigarConfig {
    let optim = OptimConfig { max_iters: 120, step: 0.05, ..Default::default() };
    CigarConfig { low_optim: optim.clone(), residual_optim: optim, ..Default::default() }
}

#[test]
fn fitting_never_factorizes_an_output_covariance() {
    for fresh in [false, true] {
        let ds = smooth_data(10, 5, 4, 5, fresh);
        reset_output_factorization_count();
        let m = cigar_fit(&ds, &quick()).unwrap();
        cigar_nll(&m).unwrap();
        assert_eq!(output_factorization_count(), 0);
    }
}

#[test]
fn orthogonality_holds_along_the_trajectory() {
    for (d_l, d_h) in [(3, 3), (2, 4)] {
        let m = cigar_fit(&smooth_data(10, 5, d_l, d_h, true), &quick()).unwrap();
        let tr = &m.transitions[0];
        assert!(tr.orthogonality_error <= 1e-8, "{}", tr.orthogonality_error);
        assert!(orthogonality_error(&tr.weights) <= 1e-8);
        assert!(tr.trace.windows(2).all(|w| w[1].objective <= w[0].objective));
        assert_eq!(tr.residual.output_covs().unwrap()[0], DMatrix::identity(d_h, d_h));
        assert_eq!(m.low.params.output_covs().unwrap()[0], DMatrix::identity(d_l, d_l));
    }
}

#[test]
fn scalar_outputs_reduce_to_a_unit_scale() {
    let m = cigar_fit(&smooth_data(8, 4, 1, 1, false), &quick()).unwrap();
    let w = m.transitions[0].weights.factors[0][(0, 0)];
    assert!((w.abs() - 1.0).abs() < 1e-12);
}

#[test]
fn far_field_mean_returns_to_the_prior_mean() {
    let cfg = CigarConfig { center: false, ..quick() };
    let m = cigar_fit(&smooth_data(8, 4, 2, 2, false), &cfg).unwrap();
    let p = cigar_predict(&m, &[1e4]).unwrap();
    assert!(p.mean.data().iter().all(|v| v.abs() < 1e-8));
}

#[test]
fn three_level_chains_need_nested_inputs() {
    let ds = smooth_data(8, 4, 2, 2, false);
    let mut top = ds.levels[1].clone();
    top.x = top.x.rows(0, 2).into_owned();
    top.y = top.y.select0(&[0, 1]);
    let mut levels = ds.levels.clone();
    levels.push(top.clone());
    let m = cigar_fit(&MultiFidelityDataset::new(levels.clone()).unwrap(), &quick()).unwrap();
    assert_eq!(m.transitions.len(), 2);
    assert!(cigar_predict(&m, &[0.2]).unwrap().variance_diag.data().iter().all(|v| *v > 0.0));
    levels[2].x[(1, 0)] = 0.77;
    let err = cigar_fit(&MultiFidelityDataset::new(levels).unwrap(), &quick()).unwrap_err();
    assert!(matches!(err, Error::Level { level: 2, .. }));
}

#[test]
fn fitted_model_converts_to_gar() {
    let m = cigar_fit(&smooth_data(10, 5, 2, 3, true), &quick()).unwrap();
    let g = m.to_gar().unwrap();
    assert!(rel(cigar_nll(&m).unwrap(), gar_nll(&g).unwrap()) < 1e-8);
}
