//! The feature grid plus every network that reads it.
//!
//! Main network: spatial MLP → (SH feature vectors, bottleneck) → SH feature
//! encoding `e_lm = f_lm · Y_lm(d)` → concatenation with the bottleneck →
//! directional MLP → sigmoid RGB. The pilot network is a small MLP over the
//! per-sample feature and a degree-2 SH direction encoding, used only while
//! standard rendering bootstraps the geometry.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::diff::{Activation, ParamArray, ParamKey, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, GridConfig};
use crate::nn::{ForwardMode, HiddenActivation, Mlp, MlpSpec};
use crate::sh::{basis_count, eval_sh_into, ShBasisValues};

pub const DENSITY_CLAMP: (f64, f64) = (-15.0, 15.0);
pub const PILOT_SH_DEGREE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct BundleConfig {
    pub activation: HiddenActivation,
    /// 0 for the linear mapper, 1 for one hidden layer.
    pub density_layers: usize,
    pub density_width: usize,
    pub spatial_layers: usize,
    pub directional_layers: usize,
    pub width: usize,
    pub sh_degree: usize,
    pub sh_features: usize,
    pub bottleneck: usize,
    pub pilot_layers: usize,
    pub pilot_width: usize,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            activation: HiddenActivation::Gelu,
            density_layers: 0,
            density_width: 64,
            spatial_layers: 2,
            directional_layers: 4,
            width: 256,
            sh_degree: 4,
            sh_features: 4,
            bottleneck: 256,
            pilot_layers: 2,
            pilot_width: 64,
        }
    }
}

impl BundleConfig {
    pub fn sh_dim(&self) -> usize {
        basis_count(self.sh_degree) * self.sh_features
    }

    pub fn spatial_output_dim(&self) -> usize {
        self.sh_dim() + self.bottleneck
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return Err(Error::Unsupported(format!("SH degree {}", self.sh_degree)));
        }
        if self.density_layers > 1 {
            return Err(Error::Usage("density mapper has at most one hidden layer".into()));
        }
        if self.spatial_layers == 0 || self.directional_layers == 0 || self.width == 0 || self.pilot_width == 0 {
            return Err(Error::Usage("MLP layers and widths must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Grid,
    Density,
    Spatial,
    Directional,
    Pilot,
}

impl ParamGroup {
    pub fn is_main_network(self) -> bool {
        matches!(self, ParamGroup::Spatial | ParamGroup::Directional)
    }
}

#[derive(Debug, Clone)]
pub struct NetworkBundle<T> {
    pub config: BundleConfig,
    pub density_mapper: Mlp<T>,
    pub spatial: Mlp<T>,
    pub directional: Mlp<T>,
    pub pilot: Mlp<T>,
}

/// Rows passed through each network since construction.
#[derive(Debug, Default)]
pub struct EvalCounters {
    main_rows: AtomicU64,
    pilot_rows: AtomicU64,
}

impl EvalCounters {
    pub fn main_rows(&self) -> u64 {
        self.main_rows.load(Ordering::Relaxed)
    }

    pub fn pilot_rows(&self) -> u64 {
        self.pilot_rows.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.main_rows.store(0, Ordering::Relaxed);
        self.pilot_rows.store(0, Ordering::Relaxed);
    }
}

impl Clone for EvalCounters {
    fn clone(&self) -> Self {
        Self {
            main_rows: AtomicU64::new(self.main_rows()),
            pilot_rows: AtomicU64::new(self.pilot_rows()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub grid: FeatureGrid<T>,
    pub bundle: NetworkBundle<T>,
    pub counters: EvalCounters,
    groups: Vec<ParamGroup>,
}

/// The `(degree+1)²` SH feature vectors of one ray, each of dimension `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShFeatureSet {
    pub k: usize,
    pub features: Vec<Vec<f64>>,
}

/// `e_lm = f_lm · Y_lm(d)`, concatenated in `(l, m)` order.
pub fn sh_feature_encode(sh: &ShBasisValues, feats: &ShFeatureSet) -> Result<Vec<f64>> {
    if feats.features.len() != sh.values.len() || feats.features.iter().any(|f| f.len() != feats.k) {
        return Err(Error::Shape(format!(
            "{} SH feature vectors of dim {} for {} basis values",
            feats.features.len(),
            feats.k,
            sh.values.len()
        )));
    }
    Ok(feats
        .features
        .iter()
        .zip(&sh.values)
        .flat_map(|(f, y)| f.iter().map(move |v| v * y))
        .collect())
}

/// Per-row SH basis values each repeated `k` times, as the constant factor
/// of the encoding.
fn sh_factor<T: Real>(dirs: &[[f64; 3]], degree: usize, k: usize) -> Vec<T> {
    let n = basis_count(degree);
    let mut y = vec![0.0; n];
    let mut out = Vec::with_capacity(dirs.len() * n * k);
    for d in dirs {
        eval_sh_into(degree, *d, &mut y);
        for v in &y {
            out.extend(std::iter::repeat_n(T::lit(*v), k));
        }
    }
    out
}

fn sh_values<T: Real>(dirs: &[[f64; 3]], degree: usize) -> Vec<T> {
    sh_factor(dirs, degree, 1)
}

impl<T: Real> Model<T> {
    pub fn new(grid_config: GridConfig, config: BundleConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let grid = FeatureGrid::new(grid_config, rng)?;
        let feat = grid.output_dim();
        let act = config.activation;
        let density_mapper = Mlp::new(
            "density",
            feat,
            MlpSpec {
                layers: config.density_layers,
                width: config.density_width,
                activation: act,
                output_dim: 1,
            },
            rng,
        )?;
        let spatial = Mlp::new(
            "spatial",
            feat,
            MlpSpec {
                layers: config.spatial_layers,
                width: config.width,
                activation: act,
                output_dim: config.spatial_output_dim(),
            },
            rng,
        )?;
        let directional = Mlp::new(
            "directional",
            config.spatial_output_dim(),
            MlpSpec {
                layers: config.directional_layers,
                width: config.width,
                activation: act,
                output_dim: 3,
            },
            rng,
        )?;
        let pilot = Mlp::new(
            "pilot",
            feat + basis_count(PILOT_SH_DEGREE),
            MlpSpec {
                layers: config.pilot_layers,
                width: config.pilot_width,
                activation: act,
                output_dim: 3,
            },
            rng,
        )?;
        let mut model = Self {
            grid,
            bundle: NetworkBundle {
                config,
                density_mapper,
                spatial,
                directional,
                pilot,
            },
            counters: EvalCounters::default(),
            groups: Vec::new(),
        };
        model.assign_keys();
        Ok(model)
    }

    fn assign_keys(&mut self) {
        let mut groups = Vec::new();
        let b = &mut self.bundle;
        let all = self
            .grid
            .tables
            .iter_mut()
            .map(|p| (p, ParamGroup::Grid))
            .chain(b.density_mapper.params_mut().map(|p| (p, ParamGroup::Density)))
            .chain(b.spatial.params_mut().map(|p| (p, ParamGroup::Spatial)))
            .chain(b.directional.params_mut().map(|p| (p, ParamGroup::Directional)))
            .chain(b.pilot.params_mut().map(|p| (p, ParamGroup::Pilot)));
        for (i, (p, g)) in all.enumerate() {
            p.key = ParamKey(i);
            groups.push(g);
        }
        self.groups = groups;
    }

    /// Every parameter in key order.
    pub fn params(&self) -> Vec<&ParamArray<T>> {
        let b = &self.bundle;
        self.grid
            .tables
            .iter()
            .chain(b.density_mapper.params())
            .chain(b.spatial.params())
            .chain(b.directional.params())
            .chain(b.pilot.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamArray<T>> {
        let b = &mut self.bundle;
        self.grid
            .tables
            .iter_mut()
            .chain(b.density_mapper.params_mut())
            .chain(b.spatial.params_mut())
            .chain(b.directional.params_mut())
            .chain(b.pilot.params_mut())
            .collect()
    }

    pub fn group(&self, key: ParamKey) -> ParamGroup {
        self.groups[key.0]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.grid.output_dim()
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(ParamArray::zero_grad);
    }

    /// Densities `exp(clamp(mapper(feat), −15, 15))` for each feature row.
    pub fn density_from_features<'p>(&'p self, tape: &mut Tape<'p, T>, feats: Var) -> Result<Var> {
        let raw = self.bundle.density_mapper.forward(tape, feats, ForwardMode::Normal)?;
        let (lo, hi) = DENSITY_CLAMP;
        Ok(tape.activate(raw, Activation::TruncExp { lo, hi }))
    }

    /// Untaped densities at unit-cube positions, evaluated in blocks.
    pub fn densities_at(&self, xs: &[[f64; 3]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(xs.len());
        for block in xs.chunks(16_384) {
            let mut tape = Tape::new();
            let f = self.grid.query_tape(&mut tape, block)?;
            let s = self.density_from_features(&mut tape, f)?;
            out.extend(tape.value(s).iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }

    /// Main network on `feats` rows with one direction per row; returns
    /// `rows × 3` colours (sigmoid) or, in linear mode, raw outputs.
    pub fn main_net_forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        feats: Var,
        dirs: &[[f64; 3]],
        mode: ForwardMode,
    ) -> Result<Var> {
        if dirs.len() != feats.rows() {
            return Err(Error::Shape(format!(
                "{} directions for {} feature rows",
                dirs.len(),
                feats.rows()
            )));
        }
        let b = &self.bundle;
        let c = &b.config;
        self.counters
            .main_rows
            .fetch_add(feats.rows() as u64, Ordering::Relaxed);
        let h = b.spatial.forward(tape, feats, mode)?;
        let sh_feats = tape.slice_cols(h, 0, c.sh_dim())?;
        let bottleneck = tape.slice_cols(h, c.sh_dim(), c.bottleneck)?;
        let encoded = tape.mul_const(sh_feats, sh_factor(dirs, c.sh_degree, c.sh_features))?;
        let x = tape.concat(encoded, bottleneck)?;
        let logits = b.directional.forward(tape, x, mode)?;
        Ok(match mode {
            ForwardMode::Normal => tape.sigmoid(logits),
            ForwardMode::Linear => logits,
        })
    }

    /// Pilot network on per-sample features; returns `rows × 3` colours.
    pub fn pilot_forward<'p>(&'p self, tape: &mut Tape<'p, T>, feats: Var, dirs: &[[f64; 3]]) -> Result<Var> {
        if dirs.len() != feats.rows() {
            return Err(Error::Shape(format!(
                "{} directions for {} feature rows",
                dirs.len(),
                feats.rows()
            )));
        }
        self.counters
            .pilot_rows
            .fetch_add(feats.rows() as u64, Ordering::Relaxed);
        let n = basis_count(PILOT_SH_DEGREE);
        let enc = tape.constant(sh_values(dirs, PILOT_SH_DEGREE), dirs.len(), n)?;
        let x = tape.concat(feats, enc)?;
        let logits = self.bundle.pilot.forward(tape, x, ForwardMode::Normal)?;
        Ok(tape.sigmoid(logits))
    }

    /// Single-feature convenience wrapper around [`Model::main_net_forward`].
    pub fn eval_main(&self, feat: &[T], d: [f64; 3]) -> Result<[T; 3]> {
        let mut tape = Tape::new();
        let f = tape.constant(feat.to_vec(), 1, feat.len())?;
        let c = self.main_net_forward(&mut tape, f, &[d], ForwardMode::Normal)?;
        let v = tape.value(c);
        Ok([v[0], v[1], v[2]])
    }

    pub fn eval_pilot(&self, feat: &[T], d: [f64; 3]) -> Result<[T; 3]> {
        let mut tape = Tape::new();
        let f = tape.constant(feat.to_vec(), 1, feat.len())?;
        let c = self.pilot_forward(&mut tape, f, &[d])?;
        let v = tape.value(c);
        Ok([v[0], v[1], v[2]])
    }

    /// Density for a single feature vector.
    pub fn density_from_feature(&self, feat: &[T]) -> Result<T> {
        let mut tape = Tape::new();
        let f = tape.constant(feat.to_vec(), 1, feat.len())?;
        let s = self.density_from_features(&mut tape, f)?;
        Ok(tape.value(s)[0])
    }
}
