//! Regular tensor-product grids and multilinear resampling.

use mfgar::tensalg::DenseTensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{PdeError, Result};

/// Closed interval split into `n` equally spaced nodes (endpoints included).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn node(&self, i: usize) -> f64 {
        if self.n == 1 {
            return self.lo;
        }
        // exact endpoints so nested grids share nodes bit for bit
        if i + 1 == self.n {
            return self.hi;
        }
        self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    /// Cell index and local coordinate in `[0, 1]` of `x`.
    fn locate(&self, x: f64) -> Result<(usize, f64)> {
        let tol = 1e-12 * (self.hi - self.lo).abs().max(1.0);
        if x < self.lo - tol || x > self.hi + tol || !x.is_finite() {
            return Err(PdeError::OutOfDomain(format!("{x} outside [{}, {}]", self.lo, self.hi)));
        }
        if self.n == 1 {
            return Ok((0, 0.0));
        }
        let s = ((x - self.lo) / (self.hi - self.lo) * (self.n - 1) as f64).clamp(0.0, (self.n - 1) as f64);
        let i = (s.floor() as usize).min(self.n - 2);
        Ok((i, s - i as f64))
    }
}

/// Tensor-product grid; field tensors are indexed by axis in this order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Self {
        Self { axes }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.n).collect()
    }
}

/// A solution field over a grid together with the input that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub input: Vec<f64>,
    pub grid: Grid,
    pub field: DenseTensor,
}

/// Multilinear interpolation of `field` (on `src`) at every node of `dst`.
pub fn resample(field: &DenseTensor, src: &Grid, dst: &Grid) -> Result<DenseTensor> {
    if field.shape() != src.shape().as_slice() {
        return Err(PdeError::Shape(format!("field {:?} on grid {:?}", field.shape(), src.shape())));
    }
    if src.axes.len() != dst.axes.len() {
        return Err(PdeError::Shape(format!("{}-d field resampled to a {}-d grid", src.axes.len(), dst.axes.len())));
    }
    let located: Vec<Vec<(usize, f64)>> = src
        .axes
        .iter()
        .zip(&dst.axes)
        .map(|(s, d)| d.nodes().into_iter().map(|x| s.locate(x)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let m = src.axes.len();
    let src_shape = src.shape();
    let mut corner = vec![0usize; m];
    Ok(DenseTensor::from_fn(&dst.shape(), |idx| {
        let mut acc = 0.0;
        for mask in 0..(1usize << m) {
            let mut w = 1.0;
            for a in 0..m {
                let (i, t) = located[a][idx[a]];
                let up = (mask >> a) & 1 == 1;
                w *= if up { t } else { 1.0 - t };
                corner[a] = if up { (i + 1).min(src_shape[a] - 1) } else { i };
            }
            if w != 0.0 {
                acc += w * field.get(&corner);
            }
        }
        acc
    }))
}

/// Linear interpolation from the nodes of `src` to those of `dst` as a
/// `dst.n × src.n` matrix. Tensor-product grids resample with one per axis.
pub fn interpolation_matrix(src: &Axis, dst: &Axis) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(dst.n, src.n);
    for (r, x) in dst.nodes().into_iter().enumerate() {
        let (i, t) = src.locate(x)?;
        m[(r, i)] += 1.0 - t;
        if t != 0.0 {
            m[(r, i + 1)] += t;
        }
    }
    Ok(m)
}

/// Bilinear upsampling of a 2-D field sample onto `target`.
pub fn upsample_bilinear(sample: &FieldSample, target: &Grid) -> Result<FieldSample> {
    if sample.grid.axes.len() != 2 {
        return Err(PdeError::Shape("bilinear upsampling needs a 2-d field".into()));
    }
    Ok(FieldSample {
        input: sample.input.clone(),
        grid: target.clone(),
        field: resample(&sample.field, &sample.grid, target)?,
    })
}
