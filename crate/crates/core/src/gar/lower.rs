//! Independent latent components feeding one fidelity level, and the
//! low-rank posterior of that level at inputs with no low-fidelity twin.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hogp::{KronDiagTerm, TgpPosterior};
use crate::tensalg::{sym_eig, tucker_apply, DenseTensor, TuckerWeights};

/// One TGP posterior plus the accumulated map into the level's output space.
#[derive(Clone, Debug)]
pub(crate) struct Component {
    pub post: TgpPosterior,
    pub map: TuckerWeights,
}

/// The process of one level as a sum of independent transformed components.
#[derive(Clone, Debug)]
pub(crate) struct LowerBlock {
    pub comps: Vec<Component>,
    /// Prior mean of the level (per entry).
    pub offset: DenseTensor,
}

impl LowerBlock {
    pub fn new(post: TgpPosterior, offset: DenseTensor) -> Self {
        let map = TuckerWeights::identity(&post.output_shape());
        Self { comps: vec![Component { post, map }], offset }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        self.offset.shape().to_vec()
    }

    /// Moves the block one level up: every map and the offset pass through `w`.
    pub fn push_through(&self, w: &TuckerWeights) -> Result<Self> {
        let comps = self
            .comps
            .iter()
            .map(|c| Ok(Component { post: c.post.clone(), map: w.compose(&c.map)? }))
            .collect::<Result<_>>()?;
        Ok(Self { comps, offset: tucker_apply(&self.offset, w, 0)? })
    }

    /// Adds a residual component living directly in this level's space.
    pub fn add_component(&mut self, post: TgpPosterior) {
        let map = TuckerWeights::identity(&post.output_shape());
        self.comps.push(Component { post, map });
    }

    /// Latent posterior mean at each row of `xs`, offset excluded.
    pub fn mean(&self, xs: &DMatrix<f64>) -> Result<DenseTensor> {
        let mut shape = vec![xs.nrows()];
        shape.extend(self.out_shape());
        let mut out = DenseTensor::zeros(&shape);
        for c in &self.comps {
            out = out.add(&tucker_apply(&c.post.mean(xs)?, &c.map, 1)?)?;
        }
        Ok(out)
    }

    /// Posterior mean of the noisy level process at the rows of `xh`, offset excluded.
    pub fn noisy_mean(&self, xh: &DMatrix<f64>) -> Result<DenseTensor> {
        let mut shape = vec![xh.nrows()];
        shape.extend(self.out_shape());
        let mut out = DenseTensor::zeros(&shape);
        for c in &self.comps {
            out = out.add(&tucker_apply(&c.post.noisy_mean(xh)?, &c.map, 1)?)?;
        }
        Ok(out)
    }

    /// Latent covariance terms at one input, already mapped to this level.
    pub fn cov_terms(&self, row: &DMatrix<f64>) -> Result<Vec<KronDiagTerm>> {
        self.comps.iter().map(|c| c.post.latent_cov(row)?.transform(&c.map)).collect()
    }

    /// `(⊗ map_m U_m)` for component `s`: level entries by component eigen-index.
    fn basis(&self, s: usize) -> DMatrix<f64> {
        let c = &self.comps[s];
        let factors = c
            .post
            .fac
            .output_eigs()
            .iter()
            .zip(&c.map.factors)
            .map(|(e, a)| a * &e.vectors)
            .collect();
        TuckerWeights::new(factors).kron()
    }

    /// Low-rank posterior of the noisy level process at `xh`.
    ///
    /// Fails with `TooLarge` when the factor would exceed `max_entries`.
    pub fn imaginary(&self, xh: &DMatrix<f64>, max_entries: usize) -> Result<ImaginaryPrior> {
        let n = xh.nrows();
        let out_shape = self.out_shape();
        let d: usize = out_shape.iter().product();
        if n == 0 {
            let mut shape = vec![0, 0];
            shape.extend(out_shape.iter());
            return Ok(ImaginaryPrior {
                xh: xh.clone(),
                mean: DenseTensor::zeros(&shape[1..]),
                cols: DenseTensor::zeros(&shape),
                whiten: Vec::new(),
                bases: Vec::new(),
            });
        }
        let mut blocks = Vec::with_capacity(self.comps.len());
        let mut scale = 0.0f64;
        for c in &self.comps {
            let per_j = c
                .post
                .noisy_cov_blocks(xh)?
                .iter()
                .map(sym_eig)
                .collect::<Result<Vec<_>>>()?;
            for e in &per_j {
                scale = scale.max(e.values.amax());
            }
            blocks.push(per_j);
        }
        let cut = 1e-12 * scale.max(f64::MIN_POSITIVE);
        let mut whiten = Vec::new();
        let mut col_data = Vec::new();
        let mut bases = Vec::with_capacity(self.comps.len());
        for (s, per_j) in blocks.iter().enumerate() {
            let b = self.basis(s);
            for (j, e) in per_j.iter().enumerate() {
                for q in 0..e.dim() {
                    let lam = e.values[q];
                    if lam <= cut {
                        continue;
                    }
                    if (whiten.len() + 1) * n * d > max_entries {
                        return Err(Error::TooLarge(format!(
                            "imaginary factor beyond {max_entries} entries ({n} inputs, {d} outputs)"
                        )));
                    }
                    let root = lam.sqrt();
                    let v = e.vectors.column(q);
                    for p in 0..n {
                        for r in 0..d {
                            col_data.push(b[(r, j)] * v[p] * root);
                        }
                    }
                    whiten.push(Whitened { comp: s, j, w: v.into_owned() / root });
                }
            }
            bases.push(b);
        }
        let mut shape = vec![whiten.len(), n];
        shape.extend(out_shape);
        Ok(ImaginaryPrior {
            xh: xh.clone(),
            mean: self.noisy_mean(xh)?,
            cols: DenseTensor::new(shape, col_data)?,
            whiten,
            bases,
        })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Whitened {
    pub comp: usize,
    pub j: usize,
    pub w: DVector<f64>,
}

/// Posterior of the noisy level process at `xh` written as `mean + L u`,
/// `u ~ N(0, I)`, with the columns of `L` stored as `cols[k, ..]`.
#[derive(Clone, Debug)]
pub(crate) struct ImaginaryPrior {
    pub xh: DMatrix<f64>,
    pub mean: DenseTensor,
    pub cols: DenseTensor,
    pub whiten: Vec<Whitened>,
    bases: Vec<DMatrix<f64>>,
}

impl ImaginaryPrior {
    pub fn rank(&self) -> usize {
        self.whiten.len()
    }

    /// `Cov(f(x*), u)` for the latent level field at one input: level entries by `k`.
    pub fn cross_factor(&self, lower: &LowerBlock, row: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cross: Vec<Vec<DVector<f64>>> = lower
            .comps
            .iter()
            .map(|c| c.post.cross_blocks(row, &self.xh))
            .collect::<Result<_>>()?;
        let d = self.bases.first().map(|b| b.nrows()).unwrap_or(0);
        let mut x = DMatrix::zeros(d, self.rank());
        for (a, wh) in self.whiten.iter().enumerate() {
            let coef = cross[wh.comp][wh.j].dot(&wh.w);
            x.column_mut(a).axpy(coef, &self.bases[wh.comp].column(wh.j), 0.0);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_tgp_cov, random_inputs, random_params, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn low_rank_factor_reproduces_noisy_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 2, &[2, 3]);
        let x = random_inputs(&mut rng, 5, 2);
        let y = random_tensor(&mut rng, &[5, 2, 3]);
        let post = TgpPosterior::new(&p, &x, &y).unwrap();
        let block = LowerBlock::new(post, DenseTensor::zeros(&[2, 3]));
        // one fresh input and one coincident with training row 1
        let mut xh = random_inputs(&mut rng, 2, 2);
        xh.row_mut(1).copy_from(&x.row(1));
        let imag = block.imaginary(&xh, usize::MAX).unwrap();
        let k = imag.rank();
        let l = DMatrix::from_fn(12, k, |r, c| imag.cols.data()[c * 12 + r]);
        let got = &l * l.transpose();

        let all = DMatrix::from_fn(7, 2, |i, j| if i < 5 { x[(i, j)] } else { xh[(i - 5, j)] });
        let full = dense_tgp_cov(&p, &all, &all).unwrap();
        // noisy process at xh shares noise with the training row it coincides with
        let noise = p.noise();
        let mut joint = full + DMatrix::identity(42, 42) * noise;
        for a in 0..6 {
            joint[(6 * 6 + a, 6 + a)] += noise;
            joint[(6 + a, 6 * 6 + a)] += noise;
        }
        let n_obs = 30;
        let s11 = joint.view((0, 0), (n_obs, n_obs)).into_owned();
        let s12 = joint.view((0, n_obs), (n_obs, 12)).into_owned();
        let s22 = joint.view((n_obs, n_obs), (12, 12)).into_owned();
        let want = s22 - s12.transpose() * s11.clone().lu().solve(&s12).unwrap();
        assert!((got - &want).amax() < 1e-8 * want.amax().max(1.0));
        let mean_want = s12.transpose() * s11.lu().solve(&y.vec()).unwrap();
        assert!((imag.mean.vec() - mean_want).amax() < 1e-8);
    }

    #[test]
    fn cross_factor_reproduces_posterior_cross_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 2, &[2, 3]);
        let x = random_inputs(&mut rng, 5, 2);
        let y = random_tensor(&mut rng, &[5, 2, 3]);
        let block = LowerBlock::new(TgpPosterior::new(&p, &x, &y).unwrap(), DenseTensor::zeros(&[2, 3]));
        let mut xh = random_inputs(&mut rng, 2, 2);
        xh.row_mut(1).copy_from(&x.row(1));
        let imag = block.imaginary(&xh, usize::MAX).unwrap();
        let k = imag.rank();
        let l = DMatrix::from_fn(12, k, |r, c| imag.cols.data()[c * 12 + r]);
        let xs = random_inputs(&mut rng, 1, 2);
        let got = imag.cross_factor(&block, &xs).unwrap() * l.transpose();

        let noise = p.noise();
        let sigma = dense_tgp_cov(&p, &x, &x).unwrap() + DMatrix::identity(30, 30) * noise;
        let mut s_xh = dense_tgp_cov(&p, &x, &xh).unwrap();
        for a in 0..6 {
            s_xh[(6 + a, 6 + a)] += noise;
        }
        let s_sh = dense_tgp_cov(&p, &xs, &xh).unwrap();
        let s_sx = dense_tgp_cov(&p, &xs, &x).unwrap();
        let want = s_sh - &s_sx * sigma.lu().solve(&s_xh).unwrap();
        assert!((got - &want).amax() < 1e-8 * want.amax().max(1.0));
    }

    #[test]
    fn size_guard_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng, 1, &[3]);
        let x = random_inputs(&mut rng, 4, 1);
        let y = random_tensor(&mut rng, &[4, 3]);
        let block = LowerBlock::new(TgpPosterior::new(&p, &x, &y).unwrap(), DenseTensor::zeros(&[3]));
        let xh = random_inputs(&mut rng, 3, 1);
        assert!(matches!(block.imaginary(&xh, 10), Err(Error::TooLarge(_))));
    }
}
