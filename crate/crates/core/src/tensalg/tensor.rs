use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense M-mode tensor stored in row-major order: the last mode varies
/// fastest, the first mode slowest.
///
/// With this layout the vectorization of `T x_1 A_1 ... x_M A_M` equals
/// `(A_1 ⊗ ... ⊗ A_M) vec(T)`, so Kronecker factors are always written in
/// mode order. Sample-indexed tensors put the sample index in mode 0, which
/// makes their covariance `K ⊗ S_1 ⊗ ... ⊗ S_M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} entries but {} were given",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for m in (0..shape.len()).rev() {
                idx[m] += 1;
                if idx[m] < shape[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }

    pub fn unvec(shape: &[usize], v: &DVector<f64>) -> Result<Self> {
        Self::new(shape.to_vec(), v.as_slice().to_vec())
    }

    /// Replace the shape without touching the data.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Size of the trailing modes after the first (one sample's field).
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Sub-tensor at index `i` of mode 0, with mode 0 removed.
    pub fn slice0(&self, i: usize) -> DenseTensor {
        let w = self.sample_len();
        DenseTensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * w..(i + 1) * w].to_vec(),
        }
    }

    /// Selects mode-0 slices (with repetition allowed).
    pub fn select0(&self, rows: &[usize]) -> DenseTensor {
        let w = self.sample_len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&self.data[r * w..(r + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        DenseTensor { shape, data }
    }

    /// Stacks equally shaped tensors along a new leading mode.
    pub fn stack0(items: &[DenseTensor]) -> Result<DenseTensor> {
        let Some(first) = items.first() else {
            return shape_err("cannot stack an empty list");
        };
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != first.shape {
                return shape_err(format!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(DenseTensor { shape, data })
    }

    /// Concatenates along mode 0.
    pub fn concat0(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
        if a.shape[1..] != b.shape[1..] {
            return shape_err(format!("concat: {:?} vs {:?}", a.shape, b.shape));
        }
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        let mut shape = a.shape.clone();
        shape[0] += b.shape[0];
        Ok(DenseTensor { shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return shape_err(format!("elementwise: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> DenseTensor {
        self.map(|x| x * s)
    }

    pub fn dot(&self, other: &DenseTensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn split(&self, mode: usize) -> (usize, usize, usize) {
        let pre = self.shape[..mode].iter().product();
        let post = self.shape[mode + 1..].iter().product();
        (pre, self.shape[mode], post)
    }

    /// Mode-`mode` product `T x_mode A`: entry `[.., j, ..] = Σ_k A[j,k] T[.., k, ..]`.
    pub fn mode_product(&self, mode: usize, a: &DMatrix<f64>) -> Result<DenseTensor> {
        if mode >= self.ndim() {
            return shape_err(format!("mode {} out of range for {:?}", mode, self.shape));
        }
        if a.ncols() != self.shape[mode] {
            return shape_err(format!(
                "mode {} has size {} but factor is {}x{}",
                mode,
                self.shape[mode],
                a.nrows(),
                a.ncols()
            ));
        }
        let (pre, dk, post) = self.split(mode);
        let rows = a.nrows();
        let mut shape = self.shape.clone();
        shape[mode] = rows;
        let mut out = vec![0.0; pre * rows * post];
        for p in 0..pre {
            let src = &self.data[p * dk * post..(p + 1) * dk * post];
            let dst = &mut out[p * rows * post..(p + 1) * rows * post];
            for j in 0..rows {
                let drow = &mut dst[j * post..(j + 1) * post];
                for k in 0..dk {
                    let w = a[(j, k)];
                    if w == 0.0 {
                        continue;
                    }
                    let srow = &src[k * post..(k + 1) * post];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += w * s;
                    }
                }
            }
        }
        Ok(DenseTensor { shape, data: out })
    }

    /// Mode product with the transpose of `a`.
    pub fn mode_product_t(&self, mode: usize, a: &DMatrix<f64>) -> Result<DenseTensor> {
        self.mode_product(mode, &a.transpose())
    }

    /// Scales mode-`mode` fibres by `w[k]` (product with `diag(w)`).
    pub fn mode_scale(&self, mode: usize, w: &[f64]) -> Result<DenseTensor> {
        if w.len() != self.shape[mode] {
            return shape_err("mode_scale length mismatch");
        }
        let (pre, dk, post) = self.split(mode);
        let mut out = self.data.clone();
        for p in 0..pre {
            for (k, wk) in w.iter().enumerate() {
                let base = (p * dk + k) * post;
                for v in &mut out[base..base + post] {
                    *v *= wk;
                }
            }
        }
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Mode-`mode` unfolding: row `k` holds every entry with index `k` in
    /// that mode, columns ordered by the remaining indices in row-major order.
    pub fn unfold(&self, mode: usize) -> DMatrix<f64> {
        let (pre, dk, post) = self.split(mode);
        DMatrix::from_fn(dk, pre * post, |k, c| {
            let p = c / post;
            let q = c % post;
            self.data[(p * dk + k) * post + q]
        })
    }
}

/// A Tucker operator: one factor matrix per mode, no core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuckerWeights {
    pub factors: Vec<DMatrix<f64>>,
}

impl TuckerWeights {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Self {
        Self { factors }
    }

    pub fn identity(sizes: &[usize]) -> Self {
        Self {
            factors: sizes.iter().map(|&d| DMatrix::identity(d, d)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        self.factors.iter().map(|w| w.nrows()).collect()
    }

    pub fn in_shape(&self) -> Vec<usize> {
        self.factors.iter().map(|w| w.ncols()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self {
            factors: self.factors.iter().map(|w| w.transpose()).collect(),
        }
    }

    /// Factorwise product `self ∘ inner` (apply `inner` first).
    pub fn compose(&self, inner: &TuckerWeights) -> Result<Self> {
        if self.len() != inner.len() {
            return shape_err("compose: factor counts differ");
        }
        let mut factors = Vec::with_capacity(self.len());
        for (a, b) in self.factors.iter().zip(&inner.factors) {
            if a.ncols() != b.nrows() {
                return shape_err("compose: inner dimensions differ");
            }
            factors.push(a * b);
        }
        Ok(Self { factors })
    }

    pub fn n_params(&self) -> usize {
        self.factors.iter().map(|w| w.len()).sum()
    }

    /// Dense Kronecker product of the factors (testing and small problems).
    pub fn kron(&self) -> DMatrix<f64> {
        self.factors
            .iter()
            .fold(DMatrix::identity(1, 1), |acc, w| kron(&acc, w))
    }
}

/// Applies factor `m` at tensor mode `m + mode_offset` for every factor.
pub fn tucker_apply(
    tensor: &DenseTensor,
    weights: &TuckerWeights,
    mode_offset: usize,
) -> Result<DenseTensor> {
    if weights.len() + mode_offset > tensor.ndim() {
        return Err(Error::Shape(format!(
            "{} factors at offset {} exceed {} modes",
            weights.len(),
            mode_offset,
            tensor.ndim()
        )));
    }
    let mut out = tensor.clone();
    for (m, w) in weights.factors.iter().enumerate() {
        out = out.mode_product(m + mode_offset, w)?;
    }
    Ok(out)
}

/// Applies every factor except `skip` (used for factor gradients).
pub(crate) fn tucker_apply_except(
    tensor: &DenseTensor,
    weights: &TuckerWeights,
    mode_offset: usize,
    skip: usize,
) -> Result<DenseTensor> {
    let mut out = tensor.clone();
    for (m, w) in weights.factors.iter().enumerate() {
        if m != skip {
            out = out.mode_product(m + mode_offset, w)?;
        }
    }
    Ok(out)
}

/// Gradient of `<G, X x W>` (factors at `mode_offset`) with respect to each factor.
pub(crate) fn tucker_factor_grads(
    upstream: &DenseTensor,
    input: &DenseTensor,
    weights: &TuckerWeights,
    mode_offset: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let mut grads = Vec::with_capacity(weights.len());
    for m in 0..weights.len() {
        let partial = tucker_apply_except(input, weights, mode_offset, m)?;
        grads.push(upstream.unfold(m + mode_offset) * partial.unfold(m + mode_offset).transpose());
    }
    Ok(grads)
}

/// Dense Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    })
}

/// Kronecker product of a list of matrices in order.
pub fn kron_all(mats: &[&DMatrix<f64>]) -> DMatrix<f64> {
    mats.iter()
        .fold(DMatrix::identity(1, 1), |acc, m| kron(&acc, m))
}
