//! On-disk dataset layout (`mfgar-dataset/1`).
//!
//! A dataset directory holds:
//!
//! * `manifest.json`: format tag, generating config, per-part shapes and the
//!   low/high sample plan summary.
//! * `<part>_inputs.csv` for `low`, `high` and `test`: header `x0,x1,...`,
//!   one row per sample, values in shortest round-trip decimal form.
//! * `<part>_fields.bin`: the stacked fields (sample mode first). Layout, all
//!   little endian: magic `MFGF`, `u32` version (1), `u32` mode count `m`,
//!   `m` × `u64` mode sizes, then every `f64` value in row-major order.
//!
//! Writing is deterministic: the same dataset always gives the same bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use mfgar::gar::{FidelityLevel, MultiFidelityDataset, SubsetPlan};
use mfgar::tensalg::DenseTensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, GeneratedDataset};
use crate::{PdeError, Result};

pub const FORMAT: &str = "mfgar-dataset/1";
pub const MANIFEST: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"MFGF";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartInfo {
    pub name: String,
    pub n: usize,
    pub input_dim: usize,
    pub field_shape: Vec<usize>,
    pub inputs: String,
    pub fields: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub matched: usize,
    pub unmatched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: DatasetConfig,
    pub parts: Vec<PartInfo>,
    pub plan: PlanStats,
}

pub fn write_fields(path: &Path, t: &DenseTensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.shape().len() + 8 * t.data().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &s in t.shape() {
        buf.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_fields(path: &Path) -> Result<DenseTensor> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |m: &str| PdeError::Format(format!("{}: {m}", path.display()));
    let mut pos = 0usize;
    let mut take = |k: usize| -> Result<&[u8]> {
        let s = buf.get(pos..pos + k).ok_or_else(|| bad("truncated"))?;
        pos += k;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let m = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let shape: Vec<usize> =
        (0..m).map(|_| Ok(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize)).collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| Ok(f64::from_le_bytes(take(8)?.try_into().unwrap()))).collect::<Result<_>>()?;
    if pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(DenseTensor::new(shape, data)?)
}

pub fn write_inputs(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..x.ncols()).map(|j| format!("x{j}")))?;
    for i in 0..x.nrows() {
        w.write_record(x.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_inputs(path: &Path, cols: usize) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut vals = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(PdeError::Format(format!("{}: row {rows} has {} columns", path.display(), rec.len())));
        }
        for f in rec.iter() {
            vals.push(f.parse::<f64>().map_err(|e| PdeError::Format(format!("{}: {e}", path.display())))?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

fn part(dir: &Path, name: &str, x: &DMatrix<f64>, y: &DenseTensor) -> Result<PartInfo> {
    let info = PartInfo {
        name: name.into(),
        n: x.nrows(),
        input_dim: x.ncols(),
        field_shape: y.shape()[1..].to_vec(),
        inputs: format!("{name}_inputs.csv"),
        fields: format!("{name}_fields.bin"),
    };
    write_inputs(&dir.join(&info.inputs), x)?;
    write_fields(&dir.join(&info.fields), y)?;
    Ok(info)
}

/// Writes the dataset into `dir` (created if missing) and returns the manifest.
pub fn save_dataset(dir: &Path, ds: &GeneratedDataset) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let parts = vec![
        part(dir, "low", &ds.train.levels[0].x, &ds.train.levels[0].y)?,
        part(dir, "high", &ds.train.levels[1].x, &ds.train.levels[1].y)?,
        part(dir, "test", &ds.test_x, &ds.test_y)?,
    ];
    let manifest = Manifest {
        format: FORMAT.into(),
        config: ds.config.clone(),
        parts,
        plan: PlanStats { matched: ds.plan.matched.len(), unmatched: ds.plan.unmatched.len() },
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<GeneratedDataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(PdeError::Format(format!("unknown dataset format {:?}", manifest.format)));
    }
    let load = |name: &str| -> Result<(DMatrix<f64>, DenseTensor)> {
        let p = manifest
            .parts
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| PdeError::Format(format!("manifest has no {name} part")))?;
        let x = read_inputs(&dir.join(&p.inputs), p.input_dim)?;
        let y = read_fields(&dir.join(&p.fields))?;
        if x.nrows() != p.n || y.shape()[0] != p.n || y.shape()[1..] != p.field_shape[..] {
            return Err(PdeError::Format(format!("{name} part disagrees with the manifest")));
        }
        Ok((x, y))
    };
    let (xl, yl) = load("low")?;
    let (xh, yh) = load("high")?;
    let (test_x, test_y) = load("test")?;
    let train = MultiFidelityDataset::new(vec![FidelityLevel::new(xl, yl)?, FidelityLevel::new(xh, yh)?])?;
    let plan: SubsetPlan = mfgar::gar::build_subset_plan(&train, 0, None)?;
    Ok(GeneratedDataset { config: manifest.config, train, plan, test_x, test_y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Structure};
    use crate::setup::{MeshVariant, PdeKind, PdeSpec};

    fn small(structure: Structure) -> GeneratedDataset {
        let mut cfg = DatasetConfig::new(PdeSpec::new(PdeKind::Heat, MeshVariant::Main), 5, 3);
        cfg.n_test = 2;
        cfg.structure = structure;
        cfg.seed = 4;
        generate(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small(Structure::Nonsubset);
        let m = save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(m.plan, PlanStats { matched: 0, unmatched: 3 });
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn rewriting_gives_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_dataset(a.path(), &small(Structure::Subset)).unwrap();
        save_dataset(b.path(), &small(Structure::Subset)).unwrap();
        for f in ["manifest.json", "low_inputs.csv", "low_fields.bin", "high_fields.bin", "test_inputs.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn field_header_is_as_documented() {
        let dir = tempfile::tempdir().unwrap();
        let t = DenseTensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let p = dir.path().join("f.bin");
        write_fields(&p, &t).unwrap();
        let b = fs::read(&p).unwrap();
        let mut want = b"MFGF".to_vec();
        want.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.5f64.to_le_bytes());
        want.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        fs::write(&p, b"MFGF\x02\0\0\0").unwrap();
        assert!(matches!(read_fields(&p), Err(PdeError::Format(_))));
        fs::write(&p, b"MFGF\x01\0\0\0\x01\0\0\0").unwrap();
        assert!(matches!(read_fields(&p), Err(PdeError::Format(_))));
    }
}
