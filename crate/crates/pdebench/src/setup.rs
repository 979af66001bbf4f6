use mfgar::tensalg::DenseTensor;
use serde::{Deserialize, Serialize};

use crate::grid::{Axis, FieldSample, Grid};
use crate::{burgers, heat, poisson, PdeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdeKind {
    Burgers,
    Poisson,
    Heat,
}

impl PdeKind {
    pub fn name(self) -> &'static str {
        match self {
            PdeKind::Burgers => "burgers",
            PdeKind::Poisson => "poisson",
            PdeKind::Heat => "heat",
        }
    }
}

/// Which published mesh pairing to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshVariant {
    /// 8×8 low / 32×32 high; fields recorded on the solver nodes.
    Main,
    /// Per-equation appendix meshes; fields resampled to the record grid.
    Appendix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    Low,
    High,
    /// Four times finer than `High`; used as ground truth for solver error.
    Reference,
}

/// A benchmark problem: equation, parameter box, meshes and output grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeSpec {
    pub kind: PdeKind,
    pub variant: MeshVariant,
    pub input_ranges: Vec<(f64, f64)>,
    /// Cells per axis.
    pub mesh_low: usize,
    pub mesh_high: usize,
    /// Nodes per axis of the output grid; `None` keeps solver nodes.
    pub record_grid: Option<Vec<usize>>,
}

impl PdeSpec {
    pub fn new(kind: PdeKind, variant: MeshVariant) -> Self {
        let input_ranges = match kind {
            PdeKind::Burgers => vec![(0.001, 0.1)],
            PdeKind::Poisson => vec![(0.1, 0.9); 5],
            PdeKind::Heat => vec![(0.0, 1.0), (-1.0, 0.0), (0.01, 0.1)],
        };
        let (mesh_low, mesh_high, record) = match (variant, kind) {
            (MeshVariant::Main, _) => (8, 32, None),
            (MeshVariant::Appendix, PdeKind::Burgers) => (16, 32, Some(128)),
            (MeshVariant::Appendix, PdeKind::Poisson) => (8, 16, Some(32)),
            (MeshVariant::Appendix, PdeKind::Heat) => (16, 32, Some(100)),
        };
        Self { kind, variant, input_ranges, mesh_low, mesh_high, record_grid: record.map(|n| vec![n, n]) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mesh_low < 2 || self.mesh_high <= self.mesh_low {
            return Err(PdeError::InvalidSpec(format!(
                "meshes {} / {}: high must be strictly finer than low",
                self.mesh_low, self.mesh_high
            )));
        }
        if self.input_ranges.len() != self.input_dim() || self.input_ranges.iter().any(|(a, b)| !(a <= b)) {
            return Err(PdeError::InvalidSpec(format!("bad input ranges {:?}", self.input_ranges)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            PdeKind::Burgers => 1,
            PdeKind::Poisson => 5,
            PdeKind::Heat => 3,
        }
    }

    pub fn mesh(&self, fidelity: Fidelity) -> usize {
        match fidelity {
            Fidelity::Low => self.mesh_low,
            Fidelity::High => self.mesh_high,
            Fidelity::Reference => 4 * self.mesh_high,
        }
    }

    /// `(lo, hi)` of each field axis: time then space, or `y` then `x`.
    pub fn domain(&self) -> [(f64, f64); 2] {
        match self.kind {
            PdeKind::Burgers => [(0.0, 3.0), (0.0, 1.0)],
            PdeKind::Poisson => [(0.0, 1.0), (0.0, 1.0)],
            PdeKind::Heat => [(0.0, 5.0), (0.0, 1.0)],
        }
    }

    pub fn native_grid(&self, fidelity: Fidelity) -> Grid {
        let n = self.mesh(fidelity) + 1;
        Grid::new(self.domain().iter().map(|&(lo, hi)| Axis::new(lo, hi, n)).collect())
    }

    pub fn output_grid(&self, fidelity: Fidelity) -> Grid {
        match &self.record_grid {
            Some(r) => Grid::new(self.domain().iter().zip(r).map(|(&(lo, hi), &n)| Axis::new(lo, hi, n)).collect()),
            None => self.native_grid(fidelity),
        }
    }

    /// Maps a point of the unit cube into the input box.
    pub fn scale_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.input_ranges).map(|(t, (a, b))| a + t * (b - a)).collect()
    }

    pub fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(PdeError::OutOfRange(format!("{} inputs, {} expected", input.len(), self.input_dim())));
        }
        for (i, (x, (a, b))) in input.iter().zip(&self.input_ranges).enumerate() {
            if !(x >= a && x <= b) {
                return Err(PdeError::OutOfRange(format!("input {i} = {x} outside [{a}, {b}]")));
            }
        }
        Ok(())
    }
}

/// Solves at one input and records the field on the problem's output grid.
pub fn solve(spec: &PdeSpec, input: &[f64], fidelity: Fidelity) -> Result<FieldSample> {
    spec.validate()?;
    spec.check_input(input)?;
    let n = spec.mesh(fidelity);
    let field = match spec.kind {
        PdeKind::Burgers => burgers::burgers_field(input[0], n)?,
        PdeKind::Poisson => poisson::poisson_field(&[input[0], input[1], input[2], input[3], input[4]], n)?,
        PdeKind::Heat => heat::heat_field(input[0], input[1], input[2], n)?,
    };
    let native = spec.native_grid(fidelity);
    let out_grid = spec.output_grid(fidelity);
    let mut field = if out_grid == native { field } else { crate::grid::resample(&field, &native, &out_grid)? };
    if spec.kind == PdeKind::Burgers && out_grid != native {
        // the initial row is known in closed form; interpolating it would blur it
        let xs = out_grid.axes[1].nodes();
        field = DenseTensor::from_fn(field.shape(), |i| if i[0] == 0 { burgers::initial_condition(xs[i[1]]) } else { field.get(i) });
    }
    Ok(FieldSample { input: input.to_vec(), grid: out_grid, field })
}

pub fn solve_burgers(viscosity: f64, spec: &PdeSpec, fidelity: Fidelity) -> Result<FieldSample> {
    kind_guard(spec, PdeKind::Burgers)?;
    solve(spec, &[viscosity], fidelity)
}

/// Values are `[left, right, bottom, top, center]`.
pub fn solve_poisson(values: [f64; 5], spec: &PdeSpec, fidelity: Fidelity) -> Result<FieldSample> {
    kind_guard(spec, PdeKind::Poisson)?;
    solve(spec, &values, fidelity)
}

pub fn solve_heat(flux_left: f64, flux_right: f64, conductivity: f64, spec: &PdeSpec, fidelity: Fidelity) -> Result<FieldSample> {
    kind_guard(spec, PdeKind::Heat)?;
    solve(spec, &[flux_left, flux_right, conductivity], fidelity)
}

fn kind_guard(spec: &PdeSpec, want: PdeKind) -> Result<()> {
    if spec.kind != want {
        return Err(PdeError::InvalidSpec(format!("{} solver given a {} spec", want.name(), spec.kind.name())));
    }
    Ok(())
}
