//! The optimisation loop: pilot phase, handoff to the main network,
//! occupancy maintenance, divergence detection and metric logging.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diff::{Gradients, ParamKey, Real, Tape};
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::metrics::{image_psnr, psnr, ssim};
use crate::model::{BundleConfig, Model, ParamGroup};
use crate::optim::{Adam, AdamConfig, Schedule};
use crate::render::{render_image, render_on_tape, sample_ray, RenderMode, RenderOptions, SamplerSettings};
use crate::sampling::{generate_rays, OccupancyGrid, Ray, SampleBatch, Vec3};
use crate::scene::{Frame, SceneDataset, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub pilot_steps: usize,
    /// Rays per step.
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Mode after the pilot phase: `vfr` or `standard`.
    pub mode: RenderMode,
    pub seed: u64,
    pub samples_per_ray: usize,
    pub lr_warmup: usize,
    pub lr_milestones: Vec<f64>,
    pub lr_factor: f64,
    pub occupancy_resolution: usize,
    pub occupancy_interval: usize,
    pub occupancy_warmup: usize,
    pub occupancy_decay: f64,
    pub occupancy_threshold: f64,
    /// Also train the main network while the pilot renders.
    pub train_main_during_pilot: bool,
    pub log_every: usize,
    /// Rays per tape; fixed so results do not depend on the thread count.
    pub chunk_rays: usize,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            pilot_steps: 300,
            batch: 1024,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            mode: RenderMode::Vfr,
            seed: 0,
            samples_per_ray: 64,
            lr_warmup: 100,
            lr_milestones: vec![0.5, 0.75, 0.9],
            lr_factor: 0.33,
            occupancy_resolution: 128,
            occupancy_interval: 16,
            occupancy_warmup: 256,
            occupancy_decay: 0.95,
            occupancy_threshold: 0.01,
            train_main_during_pilot: false,
            log_every: 100,
            chunk_rays: 256,
            divergence_factor: 10.0,
            divergence_patience: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Usage(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.pilot_steps >= self.steps {
            return fail(format!(
                "pilot_steps ({}) must be below steps ({})",
                self.pilot_steps, self.steps
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.mode == RenderMode::Pilot {
            return fail("training mode must be vfr or standard".into());
        }
        for (name, v) in [
            ("batch", self.batch),
            ("samples_per_ray", self.samples_per_ray),
            ("occupancy_resolution", self.occupancy_resolution),
            ("occupancy_interval", self.occupancy_interval),
            ("log_every", self.log_every),
            ("chunk_rays", self.chunk_rays),
            ("divergence_patience", self.divergence_patience),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr: self.lr,
            steps: self.steps,
            warmup: self.lr_warmup,
            milestones: self.lr_milestones.clone(),
            factor: self.lr_factor,
        }
    }

    /// Render mode used at `step`.
    pub fn phase(&self, step: usize) -> RenderMode {
        if step < self.pilot_steps {
            RenderMode::Pilot
        } else {
            self.mode
        }
    }

    /// Whether parameters of `group` are optimised at `step`.
    pub fn trains(&self, group: ParamGroup, step: usize) -> bool {
        let pilot = step < self.pilot_steps;
        match group {
            ParamGroup::Grid | ParamGroup::Density => true,
            ParamGroup::Pilot => pilot,
            ParamGroup::Spatial | ParamGroup::Directional => !pilot || self.train_main_during_pilot,
        }
    }
}

/// Update history of one parameter group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupUpdates {
    pub count: usize,
    pub first: Option<usize>,
    pub last: Option<usize>,
}

impl GroupUpdates {
    fn record(&mut self, step: usize) {
        self.count += 1;
        self.first.get_or_insert(step);
        self.last = Some(step);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateCounters {
    pub grid: GroupUpdates,
    pub density: GroupUpdates,
    pub spatial: GroupUpdates,
    pub directional: GroupUpdates,
    pub pilot: GroupUpdates,
}

impl UpdateCounters {
    pub fn get(&self, g: ParamGroup) -> &GroupUpdates {
        match g {
            ParamGroup::Grid => &self.grid,
            ParamGroup::Density => &self.density,
            ParamGroup::Spatial => &self.spatial,
            ParamGroup::Directional => &self.directional,
            ParamGroup::Pilot => &self.pilot,
        }
    }

    fn get_mut(&mut self, g: ParamGroup) -> &mut GroupUpdates {
        match g {
            ParamGroup::Grid => &mut self.grid,
            ParamGroup::Density => &mut self.density,
            ParamGroup::Spatial => &mut self.spatial,
            ParamGroup::Directional => &mut self.directional,
            ParamGroup::Pilot => &mut self.pilot,
        }
    }
}

pub const METRICS_HEADER: &str = "step,loss,psnr_train,psnr_eval,lr,nn_evals_per_ray";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub psnr_train: f64,
    pub psnr_eval: f64,
    pub lr: f64,
    pub nn_evals_per_ray: f64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.8e},{:.6},{:.6},{:.8e},{:.6}",
            self.step, self.loss, self.psnr_train, self.psnr_eval, self.lr, self.nn_evals_per_ray
        )
    }
}

/// Outcome of a single optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub phase: RenderMode,
    pub loss: f64,
    pub lr: f64,
    pub nn_evals_per_ray: f64,
    /// Samples per ray left after occupancy filtering.
    pub samples_per_ray: f64,
    pub updated: Vec<ParamGroup>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed steps.
    pub step: usize,
    pub adam: Adam,
    pub occupancy: OccupancyGrid,
    pub log: Vec<MetricRow>,
    pub rng: ChaCha8Rng,
    pub updates: UpdateCounters,
    pub initial_loss: Option<f64>,
    pub steps_above_limit: usize,
}

/// Every training pixel as a ray plus its target colour.
#[derive(Debug, Clone)]
struct PixelSet {
    rays: Vec<Ray>,
    targets: Vec<f32>,
}

fn all_pixels(ds: &SceneDataset, frames: &[Frame]) -> Result<PixelSet> {
    let pixels: Vec<(usize, usize)> = (0..ds.height)
        .flat_map(|j| (0..ds.width).map(move |i| (i, j)))
        .collect();
    let mut rays = Vec::with_capacity(frames.len() * pixels.len());
    let mut targets = Vec::with_capacity(frames.len() * pixels.len() * 3);
    for f in frames {
        rays.extend(generate_rays(&ds.camera(f), &pixels)?);
        targets.extend_from_slice(&f.image);
    }
    Ok(PixelSet { rays, targets })
}

/// Seed stream for parameter initialisation, distinct from the sampling stream.
fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub state: TrainState,
    pub opts: RenderOptions,
    dataset: &'d SceneDataset,
    pixels: PixelSet,
    schedule: Schedule,
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d SceneDataset, grid: GridConfig, bundle: BundleConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.train.is_empty() {
            return Err(Error::Usage("dataset has no training views".into()));
        }
        let model = Model::new(grid, bundle, &mut init_rng(config.seed))?;
        Self::from_model(dataset, model, config)
    }

    pub fn from_model(dataset: &'d SceneDataset, model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let pixels = all_pixels(dataset, &dataset.train)?;
        let adam = Adam::new(
            AdamConfig {
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.eps,
            },
            &model.params(),
        );
        let occupancy = OccupancyGrid::new(
            config.occupancy_resolution,
            dataset.aabb,
            config.occupancy_decay,
            config.occupancy_threshold,
        );
        let state = TrainState {
            step: 0,
            adam,
            occupancy,
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            updates: UpdateCounters::default(),
            initial_loss: None,
            steps_above_limit: 0,
        };
        Ok(Self {
            schedule: config.schedule(),
            opts: RenderOptions::new(dataset.aabb, dataset.background),
            config,
            model,
            state,
            dataset,
            pixels,
        })
    }

    pub fn dataset(&self) -> &SceneDataset {
        self.dataset
    }

    fn maintain_occupancy(&mut self, step: usize) -> Result<()> {
        let c = &self.config;
        if step < c.occupancy_warmup {
            self.state.occupancy.mark_all();
            return Ok(());
        }
        if !(step - c.occupancy_warmup).is_multiple_of(c.occupancy_interval) {
            return Ok(());
        }
        let model = &self.model;
        let aabb = self.dataset.aabb;
        self.state.occupancy.update(
            |pts: &[Vec3]| {
                let unit: Vec<Vec3> = pts.iter().map(|p| aabb.to_unit(*p)).collect();
                model.densities_at(&unit)
            },
            &mut self.state.rng,
        )
    }

    /// Runs one step: sample a ray batch, render it in the current phase,
    /// back-propagate the photometric MSE and apply Adam to the groups that
    /// train in this phase.
    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.state.step;
        if step >= self.config.steps {
            return Err(Error::Usage(format!(
                "training already finished {} steps",
                self.config.steps
            )));
        }
        self.maintain_occupancy(step)?;
        let phase = self.config.phase(step);
        let lr = self.schedule.lr_at(step);

        let n_pix = self.pixels.rays.len();
        let batch = self.config.batch;
        let sampler = SamplerSettings {
            aabb: self.dataset.aabb,
            samples_per_ray: self.config.samples_per_ray,
            occupancy: Some(&self.state.occupancy),
        };
        let rng = &mut self.state.rng;
        let picks: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n_pix)).collect();
        let batches: Vec<SampleBatch> = picks
            .iter()
            .map(|&i| sample_ray(&self.pixels.rays[i], &sampler, true, rng))
            .collect();
        let samples: usize = batches.iter().map(SampleBatch::len).sum();

        let model = &self.model;
        let opts = &self.opts;
        let pixels = &self.pixels;
        let chunk = self.config.chunk_rays;
        // With `train_main_during_pilot` the batch is also rendered in the
        // final mode and both photometric losses are summed.
        let second = (phase == RenderMode::Pilot && self.config.train_main_during_pilot).then_some(self.config.mode);
        let results: Vec<Result<(Gradients<f32>, f64, usize)>> = picks
            .par_chunks(chunk)
            .zip(batches.par_chunks(chunk))
            .map(|(idx, b)| {
                let dirs: Vec<Vec3> = idx.iter().map(|&i| pixels.rays[i].dir).collect();
                let target: Vec<f32> = idx
                    .iter()
                    .flat_map(|&i| pixels.targets[i * 3..i * 3 + 3].iter().copied())
                    .collect();
                let mut tape = Tape::new();
                let (out, mut evals) = render_on_tape(&mut tape, model, b, &dirs, phase, opts)?;
                let mut mse = tape.mse(out.color, target.clone())?;
                if let Some(mode) = second {
                    let (main, e) = render_on_tape(&mut tape, model, b, &dirs, mode, opts)?;
                    let m = tape.mse(main.color, target)?;
                    mse = tape.add(mse, m)?;
                    evals.extend(e);
                }
                let loss = tape.scale(mse, f32::lit(idx.len() as f64 / batch as f64));
                let value = tape.value(loss)[0].as_f64();
                let grads = tape.backward(loss, &[1.0])?;
                Ok((grads, value, evals.iter().sum()))
            })
            .collect();
        let mut sets = Vec::with_capacity(results.len());
        let mut loss = 0.0;
        let mut evals = 0usize;
        for r in results {
            let (g, l, e) = r?;
            sets.push(g);
            loss += l;
            evals += e;
        }
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at step {step}")));
        }
        let grads = Gradients::merge_ordered(sets);

        let allow: Vec<bool> = (0..self.model.params().len())
            .map(|k| self.config.trains(self.model.group(ParamKey(k)), step))
            .collect();
        let updated_keys = self
            .state
            .adam
            .step(self.model.params_mut(), &grads, lr, |p| allow[p.key.0])?;
        let mut updated: Vec<ParamGroup> = Vec::new();
        for k in updated_keys {
            let g = self.model.group(ParamKey(k));
            if !updated.contains(&g) {
                updated.push(g);
                self.state.updates.get_mut(g).record(step);
            }
        }

        self.check_divergence(step, loss)?;
        self.state.step += 1;
        Ok(StepReport {
            step,
            phase,
            loss,
            lr,
            nn_evals_per_ray: evals as f64 / batch as f64,
            samples_per_ray: samples as f64 / batch as f64,
            updated,
        })
    }

    fn check_divergence(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.state.initial_loss.get_or_insert(loss);
        if loss > self.config.divergence_factor * initial {
            self.state.steps_above_limit += 1;
        } else {
            self.state.steps_above_limit = 0;
        }
        if self.state.steps_above_limit >= self.config.divergence_patience {
            return Err(Error::Divergence(format!(
                "loss {loss:.4e} at step {step} has exceeded {}x the initial loss {initial:.4e} for {} consecutive steps",
                self.config.divergence_factor, self.state.steps_above_limit
            )));
        }
        Ok(())
    }

    /// Mode the model should be rendered in after the steps done so far.
    pub fn current_mode(&self) -> RenderMode {
        if self.state.step == 0 {
            return self.config.phase(0);
        }
        self.config.phase(self.state.step - 1)
    }

    pub fn sampler(&self) -> SamplerSettings<'_> {
        SamplerSettings {
            aabb: self.dataset.aabb,
            samples_per_ray: self.config.samples_per_ray,
            occupancy: Some(&self.state.occupancy),
        }
    }

    /// PSNR on the first held-out view (test, else val, else train).
    pub fn eval_psnr(&self) -> Result<f64> {
        let ds = self.dataset;
        let frame = ds
            .test
            .first()
            .or(ds.val.first())
            .or(ds.train.first())
            .expect("dataset has frames");
        let img = render_image(
            &self.model,
            &ds.camera(frame),
            self.current_mode(),
            &self.sampler(),
            &self.opts,
        )?;
        image_psnr(&img.rgb, &frame.image)
    }

    fn log_row(&self, report: &StepReport) -> Result<MetricRow> {
        Ok(MetricRow {
            step: report.step + 1,
            loss: report.loss,
            psnr_train: psnr(report.loss)?,
            psnr_eval: self.eval_psnr()?,
            lr: report.lr,
            nn_evals_per_ray: report.nn_evals_per_ray,
        })
    }

    /// Trains to completion, appending a metrics row every `log_every` steps
    /// and after the final step.
    pub fn run(&mut self, mut metrics: Option<&mut dyn Write>, mut progress: impl FnMut(&StepReport)) -> Result<()> {
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::Usage(format!("writing metrics: {e}")))?;
        }
        while self.state.step < self.config.steps {
            let report = self.step()?;
            progress(&report);
            let done = self.state.step;
            if done.is_multiple_of(self.config.log_every) || done == self.config.steps {
                let row = self.log_row(&report)?;
                if let Some(w) = metrics.as_deref_mut() {
                    writeln!(w, "{}", row.csv())
                        .and_then(|_| w.flush())
                        .map_err(|e| Error::Usage(format!("writing metrics: {e}")))?;
                }
                self.state.log.push(row);
            }
        }
        Ok(())
    }
}

/// Per-view quality of a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mean_evals: f64,
}

/// Renders every frame of `split` and scores it against the stored image.
pub fn evaluate(
    model: &Model<f32>,
    ds: &SceneDataset,
    split: Split,
    mode: RenderMode,
    sampler: &SamplerSettings<'_>,
) -> Result<Vec<ViewMetrics>> {
    let opts = RenderOptions::new(ds.aabb, ds.background);
    ds.split(split)
        .iter()
        .enumerate()
        .map(|(index, f)| {
            let img = render_image(model, &ds.camera(f), mode, sampler, &opts)?;
            Ok(ViewMetrics {
                index,
                psnr: image_psnr(&img.rgb, &f.image)?,
                ssim: ssim(&img.rgb, &f.image, ds.width, ds.height)?,
                mean_evals: img.mean_evals(),
            })
        })
        .collect()
}

/// Writes `rows` to `path` as CSV; used by tests and the CLI.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
