//! Training-step timing for the mode and network-size comparison.

use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::render::{render_image, RenderMode};
use crate::scene::SceneDataset;
use crate::train::Trainer;

/// Hidden-layer count and width, written `LxW`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpSize {
    pub layers: usize,
    pub width: usize,
}

impl MlpSize {
    pub fn parse(s: &str) -> Result<Self> {
        let (l, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Usage(format!("mlp size {s:?} is not of the form LxW")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Usage(format!("mlp size {s:?} is not of the form LxW")))
        };
        let size = Self {
            layers: parse(l)?,
            width: parse(w)?,
        };
        if size.layers < 2 || size.width == 0 {
            return Err(Error::Usage(format!(
                "mlp size {s:?} needs at least 2 layers and width 1"
            )));
        }
        Ok(size)
    }

    /// Splits the hidden layers between the spatial and directional
    /// networks: one third (at least one) spatial, the rest directional.
    pub fn split(self) -> (usize, usize) {
        let spatial = (self.layers / 3).max(1);
        (spatial, self.layers - spatial)
    }

    pub fn label(self) -> String {
        format!("{}x{}", self.layers, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: RenderMode,
    pub mlp: MlpSize,
    pub step_seconds: f64,
    pub nn_evals_per_ray: f64,
    pub samples_per_ray: f64,
    pub renders_per_second: f64,
}

pub const BENCH_CSV_HEADER: &str = "mode,mlp,step_seconds,nn_evals_per_ray,samples_per_ray,renders_per_second";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.4},{:.4},{:.4}",
            self.mode.name(),
            self.mlp.label(),
            self.step_seconds,
            self.nn_evals_per_ray,
            self.samples_per_ray,
            self.renders_per_second
        )
    }
}

/// Times `steps` training steps per (mode, size) after one untimed step.
/// The pilot phase is skipped and every voxel stays occupied, so all modes
/// see the same samples per ray.
pub fn bench(
    ds: &SceneDataset,
    base: &RunConfig,
    modes: &[RenderMode],
    sizes: &[MlpSize],
    steps: usize,
) -> Result<Vec<BenchRow>> {
    if steps == 0 {
        return Err(Error::Usage("bench needs at least one timed step".into()));
    }
    let mut rows = Vec::new();
    for &mlp in sizes {
        for &mode in modes {
            if mode == RenderMode::Pilot {
                return Err(Error::Usage("bench modes are standard and vfr".into()));
            }
            let mut cfg = base.clone();
            let (spatial, directional) = mlp.split();
            cfg.bundle.spatial_layers = spatial;
            cfg.bundle.directional_layers = directional;
            cfg.bundle.width = mlp.width;
            cfg.train.mode = mode;
            cfg.train.pilot_steps = 0;
            cfg.train.steps = steps + 1;
            cfg.train.occupancy_warmup = steps + 1;
            cfg.validate()?;
            let mut trainer = Trainer::new(ds, cfg.grid, cfg.bundle, cfg.train.clone())?;
            trainer.step()?;
            let (mut evals, mut samples) = (0.0, 0.0);
            let start = Instant::now();
            for _ in 0..steps {
                let r = trainer.step()?;
                evals += r.nn_evals_per_ray;
                samples += r.samples_per_ray;
            }
            let step_seconds = start.elapsed().as_secs_f64() / steps as f64;
            let cam = ds.camera(&ds.train[0]);
            let start = Instant::now();
            render_image(&trainer.model, &cam, mode, &trainer.sampler(), &trainer.opts)?;
            let render = start.elapsed().as_secs_f64();
            rows.push(BenchRow {
                mode,
                mlp,
                step_seconds,
                nn_evals_per_ray: evals / steps as f64,
                samples_per_ray: samples / steps as f64,
                renders_per_second: 1.0 / render.max(1e-12),
            });
        }
    }
    Ok(rows)
}

/// Markdown table of `rows`.
pub fn markdown(rows: &[BenchRow]) -> String {
    let mut s =
        String::from("| mode | mlp | step time (s) | NN forwards / ray | renders / s |\n|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {:.4} | {:.2} | {:.3} |\n",
            r.mode.name(),
            r.mlp.label(),
            r.step_seconds,
            r.nn_evals_per_ray,
            r.renders_per_second
        ));
    }
    s
}
