//! Plain-text run configuration: `key = value` lines, `#` comments.
//!
//! Every key has a default; unknown or repeated keys are errors that cite
//! the offending line.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::model::BundleConfig;
use crate::nn::HiddenActivation;
use crate::render::RenderMode;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub bundle: BundleConfig,
    pub train: TrainConfig,
    pub background: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            bundle: BundleConfig::default(),
            train: TrainConfig::default(),
            background: [1.0; 3],
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("invalid value {v:?}: {e}"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse::<f64>(s.trim())).collect()
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_activation(v: &str) -> std::result::Result<HiddenActivation, String> {
    match v {
        "gelu" => Ok(HiddenActivation::Gelu),
        "relu" => Ok(HiddenActivation::Relu),
        _ => Err(format!("unknown activation {v:?} (expected gelu or relu)")),
    }
}

impl RunConfig {
    /// Small networks and grid sized for single-core training on the
    /// analytic toy scenes.
    pub fn toy() -> Self {
        let mut c = Self {
            grid: GridConfig {
                levels: 8,
                channels_per_level: 2,
                base_resolution: 8,
                max_resolution: 128,
                table_size: 1 << 15,
            },
            bundle: BundleConfig {
                density_layers: 0,
                spatial_layers: 1,
                directional_layers: 1,
                width: 32,
                sh_degree: 2,
                sh_features: 2,
                bottleneck: 8,
                pilot_layers: 2,
                pilot_width: 32,
                ..BundleConfig::default()
            },
            ..Self::default()
        };
        c.train.occupancy_resolution = 64;
        c
    }

    /// Every key with its current value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (g, b, t) = (&self.grid, &self.bundle, &self.train);
        vec![
            ("mode", t.mode.name().to_string()),
            ("steps", t.steps.to_string()),
            ("pilot_steps", t.pilot_steps.to_string()),
            ("train_main_during_pilot", t.train_main_during_pilot.to_string()),
            ("batch", t.batch.to_string()),
            ("lr", t.lr.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps", t.eps.to_string()),
            ("lr_warmup", t.lr_warmup.to_string()),
            ("lr_milestones", list(&t.lr_milestones)),
            ("lr_factor", t.lr_factor.to_string()),
            ("seed", t.seed.to_string()),
            ("samples_per_ray", t.samples_per_ray.to_string()),
            ("background", list(&self.background)),
            ("activation", b.activation.name().to_string()),
            ("grid_levels", g.levels.to_string()),
            ("grid_channels", g.channels_per_level.to_string()),
            ("grid_base_resolution", g.base_resolution.to_string()),
            ("grid_max_resolution", g.max_resolution.to_string()),
            ("grid_log2_table_size", g.table_size.trailing_zeros().to_string()),
            ("density_layers", b.density_layers.to_string()),
            ("density_width", b.density_width.to_string()),
            ("spatial_layers", b.spatial_layers.to_string()),
            ("directional_layers", b.directional_layers.to_string()),
            ("mlp_width", b.width.to_string()),
            ("sh_degree", b.sh_degree.to_string()),
            ("sh_features", b.sh_features.to_string()),
            ("bottleneck", b.bottleneck.to_string()),
            ("pilot_layers", b.pilot_layers.to_string()),
            ("pilot_width", b.pilot_width.to_string()),
            ("occupancy_resolution", t.occupancy_resolution.to_string()),
            ("occupancy_interval", t.occupancy_interval.to_string()),
            ("occupancy_warmup", t.occupancy_warmup.to_string()),
            ("occupancy_decay", t.occupancy_decay.to_string()),
            ("occupancy_threshold", t.occupancy_threshold.to_string()),
            ("log_every", t.log_every.to_string()),
            ("chunk_rays", t.chunk_rays.to_string()),
            ("divergence_factor", t.divergence_factor.to_string()),
            ("divergence_patience", t.divergence_patience.to_string()),
        ]
    }

    /// Sets one key; the error text does not include the line number.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (g, b, t) = (&mut self.grid, &mut self.bundle, &mut self.train);
        match key {
            "mode" => t.mode = RenderMode::parse(v).map_err(|e| e.to_string())?,
            "steps" => t.steps = parse(v)?,
            "pilot_steps" => t.pilot_steps = parse(v)?,
            "train_main_during_pilot" => t.train_main_during_pilot = parse(v)?,
            "batch" => t.batch = parse(v)?,
            "lr" => t.lr = parse(v)?,
            "beta1" => t.beta1 = parse(v)?,
            "beta2" => t.beta2 = parse(v)?,
            "eps" => t.eps = parse(v)?,
            "lr_warmup" => t.lr_warmup = parse(v)?,
            "lr_milestones" => t.lr_milestones = parse_list(v)?,
            "lr_factor" => t.lr_factor = parse(v)?,
            "seed" => t.seed = parse(v)?,
            "samples_per_ray" => t.samples_per_ray = parse(v)?,
            "background" => {
                let c = parse_list(v)?;
                self.background = c
                    .try_into()
                    .map_err(|_| format!("background needs three comma-separated values, got {v:?}"))?;
            }
            "activation" => b.activation = parse_activation(v)?,
            "grid_levels" => g.levels = parse(v)?,
            "grid_channels" => g.channels_per_level = parse(v)?,
            "grid_base_resolution" => g.base_resolution = parse(v)?,
            "grid_max_resolution" => g.max_resolution = parse(v)?,
            "grid_log2_table_size" => {
                let bits: u32 = parse(v)?;
                if bits > 30 {
                    return Err(format!("grid_log2_table_size {bits} exceeds 30"));
                }
                g.table_size = 1 << bits;
            }
            "density_layers" => b.density_layers = parse(v)?,
            "density_width" => b.density_width = parse(v)?,
            "spatial_layers" => b.spatial_layers = parse(v)?,
            "directional_layers" => b.directional_layers = parse(v)?,
            "mlp_width" => b.width = parse(v)?,
            "sh_degree" => b.sh_degree = parse(v)?,
            "sh_features" => b.sh_features = parse(v)?,
            "bottleneck" => b.bottleneck = parse(v)?,
            "pilot_layers" => b.pilot_layers = parse(v)?,
            "pilot_width" => b.pilot_width = parse(v)?,
            "occupancy_resolution" => t.occupancy_resolution = parse(v)?,
            "occupancy_interval" => t.occupancy_interval = parse(v)?,
            "occupancy_warmup" => t.occupancy_warmup = parse(v)?,
            "occupancy_decay" => t.occupancy_decay = parse(v)?,
            "occupancy_threshold" => t.occupancy_threshold = parse(v)?,
            "log_every" => t.log_every = parse(v)?,
            "chunk_rays" => t.chunk_rays = parse(v)?,
            "divergence_factor" => t.divergence_factor = parse(v)?,
            "divergence_patience" => t.divergence_patience = parse(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected `key = value`, got {content:?}"),
                });
            };
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            self.set(key, value.trim()).map_err(|msg| Error::Config { line, msg })?;
            seen.push(key.to_string());
        }
        Ok(())
    }

    /// Parses a configuration on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.bundle.validate()?;
        self.train.validate()?;
        if self.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Usage(format!("background {:?} outside [0, 1]", self.background)));
        }
        Ok(())
    }

    /// The fully resolved configuration in the input format.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }
}
