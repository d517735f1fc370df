//! Multiresolution hashed feature grid.
//!
//! Each level is a vertex-centred grid with corner `i` at `i / r`. Coarse
//! levels whose `(r+1)³` corners fit in the table are stored densely; finer
//! levels hash corner coordinates into a table of exactly `T` entries.
//! Queries trilinearly interpolate the eight surrounding corners per level
//! and concatenate the levels.

use rand::Rng;

use crate::diff::{CustomOp, ParamArray, Real, Tape, Var};
use crate::error::{Error, Result};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub levels: usize,
    pub channels_per_level: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub table_size: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            channels_per_level: 2,
            base_resolution: 16,
            max_resolution: 256,
            table_size: 1 << 15,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels_per_level == 0 {
            return Err(Error::Usage("grid needs at least one level and one channel".into()));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::Usage(format!(
                "hash table size {} is not a power of two",
                self.table_size
            )));
        }
        if self.base_resolution == 0 || self.max_resolution < self.base_resolution {
            return Err(Error::Usage(format!(
                "grid resolutions {}..{} are not non-decreasing",
                self.base_resolution, self.max_resolution
            )));
        }
        Ok(())
    }

    pub fn growth_factor(&self) -> f64 {
        if self.levels < 2 {
            return 1.0;
        }
        let (lo, hi) = (self.base_resolution as f64, self.max_resolution as f64);
        ((hi.ln() - lo.ln()) / (self.levels - 1) as f64).exp()
    }

    /// `floor(N_min · b^level)`; a tiny tolerance keeps exact powers from
    /// rounding down.
    pub fn level_resolution(&self, level: usize) -> Result<usize> {
        if level >= self.levels {
            return Err(Error::Domain(format!(
                "level {level} out of range for {} levels",
                self.levels
            )));
        }
        if level + 1 == self.levels && self.levels > 1 {
            return Ok(self.max_resolution);
        }
        let r = self.base_resolution as f64 * self.growth_factor().powi(level as i32);
        Ok((r * (1.0 + 1e-12)).floor() as usize)
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.channels_per_level
    }
}

/// `(x·π₁ ⊕ y·π₂ ⊕ z·π₃) mod T` with wrapping 32-bit arithmetic.
pub fn hash_index(coord: [u32; 3], table_size: u32) -> u32 {
    debug_assert!(table_size.is_power_of_two());
    let h = coord[0].wrapping_mul(PRIMES[0]) ^ coord[1].wrapping_mul(PRIMES[1]) ^ coord[2].wrapping_mul(PRIMES[2]);
    h & (table_size - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    Dense,
    Hashed,
}

#[derive(Debug, Clone)]
pub struct FeatureGrid<T> {
    pub config: GridConfig,
    pub tables: Vec<ParamArray<T>>,
    resolutions: Vec<usize>,
    storage: Vec<Storage>,
}

/// Per-query interpolation stencil: eight (entry, weight) pairs per level.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub entries: Vec<u32>,
    pub weights: Vec<f64>,
}

impl<T: Real> FeatureGrid<T> {
    /// Grid with entries drawn uniformly from `[−1e-4, 1e-4]`.
    pub fn new(config: GridConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut grid = Self::zeros(config)?;
        for table in &mut grid.tables {
            table
                .values
                .iter_mut()
                .for_each(|v| *v = T::lit(rng.gen_range(-1e-4..=1e-4)));
        }
        Ok(grid)
    }

    pub fn zeros(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let resolutions = (0..config.levels)
            .map(|l| config.level_resolution(l))
            .collect::<Result<Vec<_>>>()?;
        let storage = resolutions
            .iter()
            .map(|&r| {
                if (r + 1).pow(3) <= config.table_size {
                    Storage::Dense
                } else {
                    Storage::Hashed
                }
            })
            .collect();
        Self::with_storage(config, resolutions, storage)
    }

    fn with_storage(config: GridConfig, resolutions: Vec<usize>, storage: Vec<Storage>) -> Result<Self> {
        let tables = resolutions
            .iter()
            .zip(&storage)
            .enumerate()
            .map(|(l, (&r, s))| {
                let entries = match s {
                    Storage::Dense => (r + 1).pow(3),
                    Storage::Hashed => config.table_size,
                };
                ParamArray::zeros(format!("grid.level{l}"), &[entries, config.channels_per_level])
            })
            .collect();
        Ok(Self {
            config,
            tables,
            resolutions,
            storage,
        })
    }

    /// Same layout but every level hashed into a table of `table_size`.
    pub fn force_hashed(config: GridConfig) -> Result<Self> {
        let dense = Self::zeros(config.clone())?;
        let storage = vec![Storage::Hashed; config.levels];
        Self::with_storage(config, dense.resolutions, storage)
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn storage(&self) -> &[Storage] {
        &self.storage
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    #[cfg(test)]
    fn entry(&self, level: usize, c: [u32; 3]) -> u32 {
        let r = self.resolutions[level] as u32;
        match self.storage[level] {
            Storage::Dense => c[0] + c[1] * (r + 1) + c[2] * (r + 1) * (r + 1),
            Storage::Hashed => hash_index(c, self.config.table_size as u32),
        }
    }

    /// Corner entries and trilinear weights for a point in the unit cube.
    pub fn stencil(&self, x: [f64; 3]) -> Result<Stencil> {
        let mut st = Stencil {
            entries: Vec::with_capacity(8 * self.config.levels),
            weights: Vec::with_capacity(8 * self.config.levels),
        };
        self.stencil_into(x, &mut st)?;
        Ok(st)
    }

    fn stencil_into(&self, x: [f64; 3], st: &mut Stencil) -> Result<()> {
        if !x.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!("grid query {x:?} outside the unit cube")));
        }
        let mask = self.config.table_size as u32 - 1;
        for level in 0..self.config.levels {
            let r = self.resolutions[level];
            let dense = self.storage[level] == Storage::Dense;
            // Per axis: the index term and weight of the lower and upper corner.
            let mut idx = [[0u32; 2]; 3];
            let mut wt = [[0.0f64; 2]; 3];
            let mut stride = 1u32;
            for a in 0..3 {
                let p = x[a] * r as f64;
                let c = (p as usize).min(r - 1) as u32;
                let f = p - c as f64;
                wt[a] = [1.0 - f, f];
                idx[a] = if dense {
                    [c * stride, (c + 1) * stride]
                } else {
                    [c.wrapping_mul(PRIMES[a]), (c + 1).wrapping_mul(PRIMES[a])]
                };
                stride *= r as u32 + 1;
            }
            for corner in 0..8 {
                let (i, j, k) = (corner & 1, corner >> 1 & 1, corner >> 2 & 1);
                st.entries.push(if dense {
                    idx[0][i] + idx[1][j] + idx[2][k]
                } else {
                    (idx[0][i] ^ idx[1][j] ^ idx[2][k]) & mask
                });
                st.weights.push(wt[0][i] * wt[1][j] * wt[2][k]);
            }
            debug_assert!({
                let ws = &st.weights[st.weights.len() - 8..];
                ws.iter().all(|&w| w >= 0.0) && (ws.iter().sum::<f64>() - 1.0).abs() < 1e-9
            });
        }
        Ok(())
    }

    /// Concatenated per-level features at `x` (no gradient recording).
    pub fn query(&self, x: [f64; 3]) -> Result<Vec<T>> {
        let st = self.stencil(x)?;
        Ok(self.gather(&st))
    }

    fn gather(&self, st: &Stencil) -> Vec<T> {
        let ch = self.config.channels_per_level;
        let mut out = vec![T::zero(); self.output_dim()];
        for level in 0..self.config.levels {
            let table = &self.tables[level].values;
            for k in 0..8 {
                let e = st.entries[level * 8 + k] as usize;
                let w = T::lit(st.weights[level * 8 + k]);
                for c in 0..ch {
                    out[level * ch + c] += w * table[e * ch + c];
                }
            }
        }
        out
    }

    /// Batched query recorded on `tape`: one `rows × (L·C)` value whose
    /// adjoint scatters the trilinear weights back into the tables.
    pub fn query_tape<'p>(&'p self, tape: &mut Tape<'p, T>, xs: &[[f64; 3]]) -> Result<Var> {
        let levels = self.config.levels;
        let ch = self.config.channels_per_level;
        let dim = self.output_dim();
        let mut st = Stencil {
            entries: Vec::with_capacity(xs.len() * 8 * levels),
            weights: Vec::with_capacity(xs.len() * 8 * levels),
        };
        for &x in xs {
            self.stencil_into(x, &mut st)?;
        }
        let weights: Vec<T> = st.weights.iter().map(|&w| T::lit(w)).collect();
        let mut out = vec![T::zero(); xs.len() * dim];
        for (row, o) in out.chunks_exact_mut(dim.max(1)).enumerate() {
            for level in 0..levels {
                let table = &self.tables[level].values;
                let base = (row * levels + level) * 8;
                for k in 0..8 {
                    let e = st.entries[base + k] as usize;
                    let w = weights[base + k];
                    for c in 0..ch {
                        o[level * ch + c] += w * table[e * ch + c];
                    }
                }
            }
        }
        let inputs: Vec<Var> = self.tables.iter().map(|t| tape.param(t)).collect();
        let op = GridGather {
            levels,
            channels: ch,
            entries: st.entries,
            weights,
        };
        tape.custom(&inputs, out, xs.len(), dim, Box::new(op))
    }
}

struct GridGather<T> {
    levels: usize,
    channels: usize,
    entries: Vec<u32>,
    weights: Vec<T>,
}

impl<T: Real> CustomOp<T> for GridGather<T> {
    fn name(&self) -> &'static str {
        "grid_gather"
    }

    fn backward(&self, _inputs: &[&[T]], _output: &[T], grad_out: &[T], grad_inputs: &mut [Option<Vec<T>>]) {
        let (levels, ch) = (self.levels, self.channels);
        let dim = levels * ch;
        let rows = grad_out.len() / dim.max(1);
        for (level, slot) in grad_inputs.iter_mut().enumerate() {
            let Some(gt) = slot else { continue };
            for row in 0..rows {
                let g = &grad_out[row * dim + level * ch..row * dim + (level + 1) * ch];
                let base = (row * levels + level) * 8;
                for k in 0..8 {
                    let e = self.entries[base + k] as usize;
                    let w = self.weights[base + k];
                    for c in 0..ch {
                        gt[e * ch + c] += w * g[c];
                    }
                }
            }
        }
    }
}
