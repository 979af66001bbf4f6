//! Sobol low-discrepancy points with Joe–Kuo direction numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{PdeError, Result};

const BITS: usize = 32;

/// `(a, m_1..m_s)` for dimensions 2.. (new-joe-kuo-6.21201).
const TABLE: [(u32, &[u32]); 7] = [
    (0, &[1]),
    (1, &[1, 3]),
    (1, &[1, 3, 1]),
    (2, &[1, 1, 1]),
    (1, &[1, 1, 3, 3]),
    (4, &[1, 3, 5, 13]),
    (2, &[1, 1, 5, 5, 17]),
];

pub const MAX_DIMS: usize = TABLE.len() + 1;

fn directions(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (i, x) in v.iter_mut().enumerate() {
            *x = 1 << (31 - i);
        }
        return v;
    }
    let (a, m) = TABLE[dim - 1];
    let s = m.len();
    for i in 0..s {
        v[i] = m[i] << (31 - i);
    }
    for i in s..BITS {
        v[i] = v[i - s] ^ (v[i - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                v[i] ^= v[i - k];
            }
        }
    }
    v
}

/// Options for [`sobol_points`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SobolConfig {
    /// Drop the all-zero first point. Off by default: the full sequence is kept.
    pub skip_origin: bool,
    /// `0` gives the standard sequence; other values apply a seeded digital shift.
    pub shift_seed: u64,
}

impl Default for SobolConfig {
    fn default() -> Self {
        Self { skip_origin: false, shift_seed: 0 }
    }
}

/// `n × dims` points in `[0, 1)`, Gray-code order, row per point.
pub fn sobol_points(n: usize, dims: usize, config: SobolConfig) -> Result<Vec<Vec<f64>>> {
    if dims == 0 || dims > MAX_DIMS {
        return Err(PdeError::Unsupported(format!("sobol dimension {dims}, supported 1..={MAX_DIMS}")));
    }
    let start = usize::from(config.skip_origin);
    if (n + start) as u64 > 1u64 << BITS {
        return Err(PdeError::Unsupported(format!("{n} sobol points exceed the 2^32 period")));
    }
    let v: Vec<[u32; BITS]> = (0..dims).map(directions).collect();
    let shift: Vec<u32> = if config.shift_seed == 0 {
        vec![0; dims]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.shift_seed);
        (0..dims).map(|_| rng.random()).collect()
    };
    let mut x = vec![0u32; dims];
    let mut out = Vec::with_capacity(n);
    let scale = 1.0 / (1u64 << BITS) as f64;
    for i in 0..n + start {
        if i > 0 {
            let c = (i - 1).trailing_ones() as usize;
            for d in 0..dims {
                x[d] ^= v[d][c];
            }
        }
        if i >= start {
            out.push(x.iter().zip(&shift).map(|(&xi, &s)| (xi ^ s) as f64 * scale).collect());
        }
    }
    Ok(out)
}
