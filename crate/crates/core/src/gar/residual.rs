//! Likelihood of one level given the level below it.
//!
//! High outputs are modeled as `W ∘ g + r`, where `g` is the lower level's
//! noisy process and `r` the residual TGP. At matched inputs `g` is observed.
//! At unmatched inputs `g` is integrated out through its low-rank posterior
//! `mean + L u`, which adds `F Fᵀ` (`F = W ∘ L` on the unmatched rows) to the
//! residual covariance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::lower::ImaginaryPrior;
use crate::error::{shape_err, Error, Result};
use crate::hogp::{TgpFactor, TgpGrads, TgpParams};
use crate::tensalg::{tucker_apply, tucker_factor_grads, DenseTensor, TuckerWeights};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Data for one transition.
#[derive(Clone, Debug)]
pub(crate) struct ResidualProblem {
    pub x: DMatrix<f64>,
    /// Raw outputs of the upper level.
    pub y: DenseTensor,
    /// Lower-level value paired with each upper sample: observed at matched
    /// rows, offset plus posterior mean at unmatched rows.
    pub anchor: DenseTensor,
    pub unmatched: Vec<usize>,
    pub imag: Option<ImaginaryPrior>,
}

/// Woodbury pieces of the unmatched correction.
#[derive(Debug)]
pub(crate) struct Correction {
    /// `C_r⁻¹ F_a`, one tensor per column.
    pub z: Vec<DenseTensor>,
    pub chol: Cholesky<f64, Dyn>,
    /// `M⁻¹ Fᵀ C_r⁻¹ e`, which also equals `Fᵀ β`.
    pub v: DVector<f64>,
}

#[derive(Debug)]
pub(crate) struct ResidualState {
    pub fac: TgpFactor,
    /// `(C_r + F Fᵀ)⁻¹ e`.
    pub beta: DenseTensor,
    pub nll: f64,
    pub corr: Option<Correction>,
}

impl ResidualProblem {
    fn embed(&self, f_u: &DenseTensor, a: usize) -> DenseTensor {
        let w = self.y.sample_len();
        let n_hat = self.unmatched.len();
        let mut full = DenseTensor::zeros(self.y.shape());
        let src = &f_u.data()[a * n_hat * w..(a + 1) * n_hat * w];
        for (p, &row) in self.unmatched.iter().enumerate() {
            full.data_mut()[row * w..(row + 1) * w].copy_from_slice(&src[p * w..(p + 1) * w]);
        }
        full
    }

    /// Rows `unmatched` of each tensor, stacked as `[k, n̂, ..]`.
    fn restrict(&self, t: &[DenseTensor]) -> Result<DenseTensor> {
        let items: Vec<DenseTensor> = t.iter().map(|x| x.select0(&self.unmatched)).collect();
        DenseTensor::stack0(&items)
    }

    fn mapped_cols(&self, w: &TuckerWeights) -> Result<Option<DenseTensor>> {
        match &self.imag {
            Some(im) if im.rank() > 0 => Ok(Some(tucker_apply(&im.cols, w, 2)?)),
            _ => Ok(None),
        }
    }

    pub fn state(&self, w: &TuckerWeights, params: &TgpParams) -> Result<ResidualState> {
        if self.y.shape()[1..] != params.output_shape()[..] {
            return shape_err(format!(
                "residual features {:?} do not match outputs {:?}",
                params.output_shape(),
                &self.y.shape()[1..]
            ));
        }
        let e = self.y.sub(&tucker_apply(&self.anchor, w, 1)?)?;
        let fac = TgpFactor::new(params, &self.x)?;
        let (quad0, beta0) = fac.sys.quad_and_solve(&e)?;
        let mut quad = quad0;
        let mut logdet = fac.sys.logdet();
        let mut beta = beta0.clone();
        let mut corr = None;
        if let Some(f_u) = self.mapped_cols(w)? {
            let k = f_u.shape()[0];
            let f: Vec<DenseTensor> = (0..k).map(|a| self.embed(&f_u, a)).collect();
            let z: Vec<DenseTensor> = f.iter().map(|fa| fac.sys.solve(fa)).collect::<Result<_>>()?;
            let m = DMatrix::from_fn(k, k, |a, b| f[a].dot(&z[b]) + if a == b { 1.0 } else { 0.0 });
            let m = (&m + m.transpose()) * 0.5;
            let chol = m
                .cholesky()
                .ok_or_else(|| Error::Conditioning("unmatched correction is not positive definite".into()))?;
            let u = DVector::from_fn(k, |a, _| f[a].dot(&beta0));
            let v = chol.solve(&u);
            quad -= u.dot(&v);
            logdet += 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            for (a, za) in z.iter().enumerate() {
                beta = beta.sub(&za.scale(v[a]))?;
            }
            corr = Some(Correction { z, chol, v });
        }
        let nll = 0.5 * (quad + logdet + e.len() as f64 * LN_2PI);
        if !nll.is_finite() {
            return Err(Error::Conditioning("non-finite residual likelihood".into()));
        }
        Ok(ResidualState { fac, beta, nll, corr })
    }

    /// Gradients of the transition NLL: residual hyperparameters and full
    /// weight factors.
    pub fn grads(&self, w: &TuckerWeights, params: &TgpParams, st: &ResidualState) -> Result<(TgpGrads, Vec<DMatrix<f64>>)> {
        let fac = &st.fac;
        let refs = fac.factor_refs();
        // rows of L_M⁻¹ Zᵀ: the correction to tr(C⁻¹ dC) is −Σ z̃ᵀ dC z̃
        let ztil: Vec<DenseTensor> = match &st.corr {
            Some(c) => {
                let k = c.z.len();
                let linv = c
                    .chol
                    .l()
                    .solve_lower_triangular(&DMatrix::identity(k, k))
                    .ok_or_else(|| Error::Conditioning("triangular solve failed".into()))?;
                (0..k)
                    .map(|a| {
                        let mut acc = DenseTensor::zeros(self.y.shape());
                        for b in 0..=a {
                            acc = acc.add(&c.z[b].scale(linv[(a, b)]))?;
                        }
                        Ok(acc)
                    })
                    .collect::<Result<_>>()?
            }
            None => Vec::new(),
        };
        let mut vecs: Vec<(f64, &DenseTensor)> = vec![(1.0, &st.beta)];
        vecs.extend(ztil.iter().map(|z| (1.0, z)));

        let mut g = TgpGrads::zeros(params);
        let gk = (fac.sys.trace_grad(0)? - fac.sys.quadform_grad(0, &vecs, &refs)?) * 0.5;
        g.add_input_gram(&params.input_kernel, &self.x, &self.x, &fac.k, &gk);
        for m in 0..fac.s.len() {
            if fac.s[m].nrows() > 1 {
                let gs = (fac.sys.trace_grad(m + 1)? - fac.sys.quadform_grad(m + 1, &vecs, &refs)?) * 0.5;
                g.add_output_cov(params, m, &fac.s[m], &gs);
            }
        }
        let tr: f64 = fac.sys.denom.data().iter().map(|d| 1.0 / d).sum();
        let zz: f64 = ztil.iter().map(|z| z.norm_sq()).sum();
        g.log_noise = 0.5 * (tr - zz - st.beta.norm_sq()) * params.log_noise.exp();

        let mut gw = tucker_factor_grads(&st.beta.scale(-1.0), &self.anchor, w, 1)?;
        if let (Some(c), Some(im)) = (&st.corr, &self.imag) {
            // ∂/∂F_a = C⁻¹F M⁻¹ − β βᵀF, restricted to unmatched rows
            let k = c.z.len();
            let minv = c.chol.inverse();
            let mut up = Vec::with_capacity(k);
            for a in 0..k {
                let mut acc = st.beta.scale(-c.v[a]);
                for b in 0..k {
                    acc = acc.add(&c.z[b].scale(minv[(b, a)]))?;
                }
                up.push(acc);
            }
            let upstream = self.restrict(&up)?;
            for (dst, src) in gw.iter_mut().zip(tucker_factor_grads(&upstream, &im.cols, w, 2)?) {
                *dst += src;
            }
        }
        Ok((g, gw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gar::lower::LowerBlock;
    use crate::oracle::{random_inputs, random_params, random_tensor};
    use crate::hogp::TgpPosterior;
    use crate::optim::grad_audit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(seed: u64, with_unmatched: bool) -> (ResidualProblem, TuckerWeights, TgpParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pl = random_params(&mut rng, 1, &[2, 2]);
        let xl = random_inputs(&mut rng, 5, 1);
        let yl = random_tensor(&mut rng, &[5, 2, 2]);
        let lower = LowerBlock::new(TgpPosterior::new(&pl, &xl, &yl).unwrap(), DenseTensor::zeros(&[2, 2]));
        let xh_new = random_inputs(&mut rng, 2, 1);
        let xh = DMatrix::from_fn(4, 1, |i, _| if i < 2 { xl[(i, 0)] } else { xh_new[(i - 2, 0)] });
        let unmatched: Vec<usize> = if with_unmatched { vec![2, 3] } else { vec![] };
        let xs = DMatrix::from_fn(unmatched.len(), 1, |i, _| xh[(unmatched[i], 0)]);
        let imag = if with_unmatched { Some(lower.imaginary(&xs, usize::MAX).unwrap()) } else { None };
        let mut anchor = DenseTensor::zeros(&[4, 2, 2]);
        for i in 0..4 {
            let src = if i < 2 { yl.slice0(i) } else if with_unmatched { imag.as_ref().unwrap().mean.slice0(i - 2) } else { yl.slice0(i) };
            anchor.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(src.data());
        }
        let y = random_tensor(&mut rng, &[4, 3, 2]);
        let w = TuckerWeights::new(vec![
            DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)),
        ]);
        let pr = random_params(&mut rng, 1, &[3, 2]);
        let x = if with_unmatched { xh } else { DMatrix::from_fn(4, 1, |i, _| xl[(i, 0)]) };
        (ResidualProblem { x, y, anchor, unmatched, imag }, w, pr)
    }

    fn flat(prob: &ResidualProblem, w0: &TuckerWeights, p0: &TgpParams, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mask = crate::hogp::TgpMask::ALL;
        let mut pos = 0;
        let mut w = w0.clone();
        for f in &mut w.factors {
            for v in f.iter_mut() {
                *v = theta[pos];
                pos += 1;
            }
        }
        let mut p = p0.clone();
        p.unpack(&mask, theta, &mut pos);
        let st = prob.state(&w, &p)?;
        let (g, gw) = prob.grads(&w, &p, &st)?;
        let mut out = Vec::new();
        for f in &gw {
            out.extend(f.iter());
        }
        g.pack(&p, &mask, &mut out);
        Ok((st.nll, out))
    }

    #[test]
    fn gradients_pass_audit() {
        for (seed, unmatched) in [(1, false), (2, true), (3, true)] {
            let (prob, w, p) = problem(seed, unmatched);
            let mut theta = Vec::new();
            for f in &w.factors {
                theta.extend(f.iter());
            }
            p.pack(&crate::hogp::TgpMask::ALL, &mut theta);
            let err = grad_audit(|t| flat(&prob, &w, &p, t), &theta, 1e-6).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
