//! Random problem instances and dense reference computations.
//!
//! Everything here forms full covariance matrices and is only usable at desk
//! scale. The structured paths in [`crate::hogp`], [`crate::gar`] and
//! [`crate::cigar`] are checked against these.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cigar::{identity_params, orthonormalize, CigarModel, CigarTransition};
use crate::error::{Error, Result};
use crate::gar::{build_subset_plan, chain_map, dense_joint, FidelityLevel, GarModel, MultiFidelityDataset};
use crate::hogp::{sample_mean, TgpModel, TgpParams};
use crate::kernels::{ard_gram, ArdKernelParams, LatentFeatures};
use crate::tensalg::{kron, kron_all, tucker_apply, DenseTensor, TuckerWeights};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Kernel and feature parameters in a range where all factorizations are well posed.
pub fn random_params(rng: &mut ChaCha8Rng, in_dim: usize, sizes: &[usize]) -> TgpParams {
    let mut features = LatentFeatures::init(sizes, rng.random());
    for f in &mut features.modes {
        f.coords.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        f.kernel.log_lengthscales.iter_mut().for_each(|l| *l = rng.random_range(-0.5..0.5));
    }
    TgpParams {
        input_kernel: ArdKernelParams {
            log_amplitude: rng.random_range(-0.5..0.5),
            log_lengthscales: (0..in_dim).map(|_| rng.random_range(-0.7..0.3)).collect(),
        },
        features,
        log_noise: rng.random_range(-4.0..-1.0),
    }
}

pub fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random_range(0.0..1.0))
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// A two-mode output shape with at most 3 entries per mode.
pub fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..=3), rng.random_range(1..=3)]
}

/// Dense `K ⊗ S_1 ⊗ .. ⊗ S_M` between two input sets.
pub fn dense_tgp_cov(params: &TgpParams, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = ard_gram(&params.input_kernel, x1, x2)?;
    let s = params.output_covs()?;
    let mut refs = vec![&k];
    refs.extend(s.iter());
    Ok(kron_all(&refs))
}

fn dense_nll(sigma: &DMatrix<f64>, r: &DVector<f64>) -> Result<f64> {
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Conditioning("dense covariance not positive definite".into()))?;
    let quad = r.dot(&chol.solve(r));
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(0.5 * (quad + logdet + r.len() as f64 * LN_2PI))
}

/// Negative log density of `vec(y)` under `N(0, K ⊗ S + σ² I)`.
pub fn dense_tgp_nll(params: &TgpParams, x: &DMatrix<f64>, y: &DenseTensor) -> Result<f64> {
    let n = y.len();
    let sigma = dense_tgp_cov(params, x, x)? + DMatrix::identity(n, n) * params.noise();
    dense_nll(&sigma, &y.vec())
}

/// Conditional mean and covariance of the noise-free field at `xs`.
pub fn dense_tgp_conditional(
    params: &TgpParams,
    x: &DMatrix<f64>,
    y: &DenseTensor,
    xs: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = y.len();
    let sigma = dense_tgp_cov(params, x, x)? + DMatrix::identity(n, n) * params.noise();
    let cross = dense_tgp_cov(params, xs, x)?;
    let prior = dense_tgp_cov(params, xs, xs)?;
    let chol = sigma.cholesky().ok_or_else(|| Error::Conditioning("dense covariance not positive definite".into()))?;
    let mean = &cross * chol.solve(&y.vec());
    let cov = prior - &cross * chol.solve(&cross.transpose());
    Ok((mean, cov))
}

/// Random GAR chain over 2-D inputs. Each level's inputs are a prefix of the
/// level below, except that the last `fresh` top inputs are new points.
pub fn random_gar_model(seed: u64, sizes: &[usize], shapes: &[Vec<usize>], fresh: usize) -> Result<GarModel> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 2;
    let mut levels = Vec::new();
    let mut x = random_inputs(&mut rng, sizes[0], dim);
    for (i, (&n, shape)) in sizes.iter().zip(shapes).enumerate() {
        if i > 0 {
            x = x.rows(0, n).into_owned();
            if i + 1 == sizes.len() {
                for r in n - fresh..n {
                    for c in 0..dim {
                        x[(r, c)] = rng.random_range(0.0..1.0);
                    }
                }
            }
        }
        let mut s = vec![n];
        s.extend(shape);
        levels.push(FidelityLevel::new(x.clone(), random_tensor(&mut rng, &s))?);
    }
    let data = MultiFidelityDataset::new(levels)?;
    let l0 = &data.levels[0];
    let low = TgpModel {
        params: random_params(&mut rng, dim, &shapes[0]),
        x: l0.x.clone(),
        y: l0.y.clone(),
        offset: sample_mean(&l0.y),
        trace: vec![],
    };
    let mut ws = Vec::new();
    let mut rs = Vec::new();
    for t in 1..sizes.len() {
        ws.push(TuckerWeights::new(
            shapes[t]
                .iter()
                .zip(&shapes[t - 1])
                .map(|(&h, &l)| DMatrix::from_fn(h, l, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        ));
        rs.push(random_params(&mut rng, dim, &shapes[t]));
    }
    GarModel::from_parts(&data, low, ws, rs)
}

/// Dense conditional of the top level at each row of `xs` given all training
/// outputs: mean and diagonal variance including the top noise.
pub fn dense_gar_predict(model: &GarModel, xs: &DMatrix<f64>) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let (sigma, r) = dense_joint(model, usize::MAX)?;
    let chol = sigma.cholesky().ok_or_else(|| Error::Conditioning("dense joint not positive definite".into()))?;
    let alpha = chol.solve(&r);
    let levels = &model.data.levels;
    let top = levels.len() - 1;
    let params: Vec<&TgpParams> =
        std::iter::once(&model.low.params).chain(model.transitions.iter().map(|t| &t.residual)).collect();
    let mut offset = model.low.offset.clone();
    for tr in &model.transitions {
        offset = tucker_apply(&offset, &tr.weights, 0)?;
    }
    let d = offset.len();
    let mut out = Vec::with_capacity(xs.nrows());
    for i in 0..xs.nrows() {
        let row = xs.rows(i, 1).into_owned();
        let mut cross = DMatrix::zeros(d, r.len());
        let mut prior = DMatrix::zeros(d, d);
        let mut col = 0;
        for (b, lb) in levels.iter().enumerate() {
            let nb = lb.y.len();
            for (s, p) in params.iter().enumerate().take(b + 1) {
                let at = chain_map(model, s, top)?;
                let ab = chain_map(model, s, b)?;
                let sk = TuckerWeights::new(p.output_covs()?).kron();
                let k = ard_gram(&p.input_kernel, &row, &lb.x)?;
                let mut v = cross.view_mut((0, col), (d, nb));
                v += kron(&k, &(&at * &sk * ab.transpose()));
            }
            col += nb;
        }
        for (s, p) in params.iter().enumerate() {
            let at = chain_map(model, s, top)?;
            let sk = TuckerWeights::new(p.output_covs()?).kron();
            prior += &at * sk * at.transpose() * p.input_kernel.diag_value();
        }
        let mean = &cross * &alpha + offset.vec();
        let cov = prior - &cross * chol.solve(&cross.transpose());
        let var = cov.diagonal().map(|v| v + params[top].noise());
        out.push((mean, var));
    }
    Ok(out)
}

/// Classic two-level autoregression `f_h = ρ f_l + f_r` written out directly
/// for scalar outputs. The model must have one transition with a 1×1 weight.
pub fn dense_scalar_ar_nll(model: &GarModel) -> Result<f64> {
    if model.transitions.len() != 1 || model.output_shape().iter().product::<usize>() != 1 {
        return Err(Error::Unsupported("scalar autoregression oracle needs two scalar levels".into()));
    }
    let rho = model.transitions[0].weights.factors.iter().map(|f| f[(0, 0)]).product::<f64>();
    let (xl, xh) = (&model.data.levels[0].x, &model.data.levels[1].x);
    let (pl, pr) = (&model.low.params, &model.transitions[0].residual);
    let (nl, nh) = (xl.nrows(), xh.nrows());
    let sl: f64 = pl.output_covs()?.iter().map(|s| s[(0, 0)]).product();
    let sr: f64 = pr.output_covs()?.iter().map(|s| s[(0, 0)]).product();
    let kl = |a: &DMatrix<f64>, b: &DMatrix<f64>| ard_gram(&pl.input_kernel, a, b).map(|k| k * sl);
    let same = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| if a.row(i) == b.row(j) { 1.0 } else { 0.0 })
    };
    let mut sigma = DMatrix::zeros(nl + nh, nl + nh);
    sigma.view_mut((0, 0), (nl, nl)).copy_from(&(kl(xl, xl)? + DMatrix::identity(nl, nl) * pl.noise()));
    let c = (kl(xl, xh)? + same(xl, xh) * pl.noise()) * rho;
    sigma.view_mut((0, nl), (nl, nh)).copy_from(&c);
    sigma.view_mut((nl, 0), (nh, nl)).copy_from(&c.transpose());
    let hh = (kl(xh, xh)? + DMatrix::identity(nh, nh) * pl.noise()) * rho * rho
        + ard_gram(&pr.input_kernel, xh, xh)? * sr
        + DMatrix::identity(nh, nh) * pr.noise();
    sigma.view_mut((nl, nl), (nh, nh)).copy_from(&hh);
    let mu = model.low.offset.data()[0];
    let y = DVector::from_iterator(
        nl + nh,
        model.data.levels[0].y.data().iter().map(|v| v - mu).chain(model.data.levels[1].y.data().iter().map(|v| v - rho * mu)),
    );
    dense_nll(&sigma, &y)
}

/// Residual NLL and fitted weights of transition `t`, once through the subset
/// path and once through the non-subset path with an empty unmatched set.
pub fn subset_and_empty_imaginary(model: &GarModel, t: usize) -> Result<[(f64, DenseTensor); 2]> {
    let tr = model.transitions.get(t).ok_or_else(|| Error::Unsupported(format!("no transition {t}")))?;
    if !tr.plan.is_subset() {
        return Err(Error::Unsupported("transition has unmatched inputs".into()));
    }
    let lower = model.lower_block(t)?;
    let mut prob = model.problem(t, &lower, &tr.plan)?;
    let plain = prob.state(&tr.weights, &tr.residual)?;
    let dim = model.data.input_dim();
    prob.imag = Some(lower.imaginary(&DMatrix::zeros(0, dim), usize::MAX)?);
    let forced = prob.state(&tr.weights, &tr.residual)?;
    Ok([(plain.nll, plain.beta), (forced.nll, forced.beta)])
}

/// Random two-level CIGAR model over 2-D inputs with orthonormal weights.
/// High inputs are the first `n_h` low inputs except the last `fresh`.
pub fn random_cigar_model(seed: u64, n_l: usize, n_h: usize, low: &[usize], high: &[usize], fresh: usize) -> Result<CigarModel> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xl = random_inputs(&mut rng, n_l, 2);
    let mut xh = xl.rows(0, n_h).into_owned();
    for r in n_h - fresh..n_h {
        xh[(r, 0)] = rng.random_range(0.0..1.0);
        xh[(r, 1)] = rng.random_range(0.0..1.0);
    }
    let mut sl = vec![n_l];
    sl.extend(low);
    let mut sh = vec![n_h];
    sh.extend(high);
    let data = MultiFidelityDataset::new(vec![
        FidelityLevel::new(xl.clone(), random_tensor(&mut rng, &sl))?,
        FidelityLevel::new(xh, random_tensor(&mut rng, &sh))?,
    ])?;
    let y = data.levels[0].y.clone();
    let low_model = TgpModel {
        params: identity_params(random_params(&mut rng, 2, low), low),
        x: xl,
        offset: sample_mean(&y),
        y,
        trace: vec![],
    };
    let weights = orthonormalize(&TuckerWeights::new(
        high.iter()
            .zip(low)
            .map(|(&h, &l)| DMatrix::from_fn(h, l, |_, _| rng.random_range(-1.0..1.0)))
            .collect(),
    ))?;
    let residual = identity_params(random_params(&mut rng, 2, high), high);
    let plan = build_subset_plan(&data, 0, None)?;
    Ok(CigarModel {
        data,
        low: low_model,
        transitions: vec![CigarTransition { weights, residual, plan, trace: vec![], orthogonality_error: 0.0 }],
    })
}
