#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfr::diff::{relative_error, ParamKey, Tape};
use vfr::grid::GridConfig;
use vfr::model::{BundleConfig, Model, ParamGroup};
use vfr::render::{render_on_tape, sample_ray, RenderMode, RenderOptions, SamplerSettings};
use vfr::sampling::{normalize, Aabb, Ray, SampleBatch, Vec3};

pub fn small_grid() -> GridConfig {
    GridConfig {
        levels: 3,
        channels_per_level: 2,
        base_resolution: 4,
        max_resolution: 16,
        table_size: 1 << 10,
    }
}

pub fn small_bundle() -> BundleConfig {
    BundleConfig {
        density_layers: 1,
        density_width: 8,
        spatial_layers: 1,
        directional_layers: 2,
        width: 12,
        sh_degree: 2,
        sh_features: 2,
        bottleneck: 6,
        pilot_layers: 2,
        pilot_width: 8,
        ..BundleConfig::default()
    }
}

/// Model with grid features large enough that densities and colours vary
/// visibly across the box.
pub fn small_model(seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::<f64>::new(small_grid(), small_bundle(), &mut rng).unwrap();
    for t in &mut m.grid.tables {
        t.values.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    m
}

pub fn random_dir(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Rays from random points outside the unit box aimed near its centre.
pub fn random_rays(rng: &mut impl Rng, n: usize) -> Vec<Ray> {
    (0..n)
        .map(|_| {
            let o = random_dir(rng).map(|v| v * 1.5);
            let target = [0, 1, 2].map(|_| rng.gen_range(-0.2..0.2));
            let dir = normalize([target[0] - o[0], target[1] - o[1], target[2] - o[2]]);
            Ray {
                origin: o,
                dir,
                t_near: 0.0,
                t_far: f64::INFINITY,
            }
        })
        .collect()
}

pub fn sample_rays(rays: &[Ray], n: usize, rng: &mut impl Rng) -> Vec<SampleBatch> {
    let s = SamplerSettings {
        aabb: Aabb::cube(0.5),
        samples_per_ray: n,
        occupancy: None,
    };
    rays.iter().map(|r| sample_ray(r, &s, true, rng)).collect()
}

pub struct PixelProblem {
    pub batches: Vec<SampleBatch>,
    pub dirs: Vec<Vec3>,
    pub target: Vec<f64>,
    pub mode: RenderMode,
    pub opts: RenderOptions,
}

impl PixelProblem {
    pub fn new(seed: u64, rays: usize, samples: usize, mode: RenderMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_rays(&mut rng, rays);
        let batches = sample_rays(&r, samples, &mut rng);
        let target = (0..rays * 3).map(|_| rng.gen::<f64>()).collect();
        Self {
            batches,
            dirs: r.iter().map(|r| r.dir).collect(),
            target,
            mode,
            opts: RenderOptions::new(Aabb::cube(0.5), [1.0, 1.0, 1.0]),
        }
    }

    pub fn loss(&self, model: &Model<f64>) -> f64 {
        let mut tape = Tape::new();
        let (out, _) = render_on_tape(&mut tape, model, &self.batches, &self.dirs, self.mode, &self.opts).unwrap();
        let l = tape.mse(out.color, self.target.clone()).unwrap();
        tape.value(l)[0]
    }

    pub fn gradients(&self, model: &Model<f64>) -> vfr::diff::Gradients<f64> {
        let mut tape = Tape::new();
        let (out, _) = render_on_tape(&mut tape, model, &self.batches, &self.dirs, self.mode, &self.opts).unwrap();
        let l = tape.mse(out.color, self.target.clone()).unwrap();
        tape.backward(l, &[1.0]).unwrap()
    }
}

/// Central difference of `loss` with respect to one parameter entry.
pub fn fd_param(model: &mut Model<f64>, key: ParamKey, i: usize, h: f64, loss: impl Fn(&Model<f64>) -> f64) -> f64 {
    let orig = model.params()[key.0].values[i];
    model.params_mut()[key.0].values[i] = orig + h;
    let plus = loss(model);
    model.params_mut()[key.0].values[i] = orig - h;
    let minus = loss(model);
    model.params_mut()[key.0].values[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Probes every parameter group of `model` and returns the worst relative
/// error between taped and finite-difference gradients.
pub fn worst_error(problem: &PixelProblem, seed: u64, probes_per_group: usize) -> (f64, usize) {
    let mut model = small_model(seed);
    let grads = problem.gradients(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let groups = [
        ParamGroup::Grid,
        ParamGroup::Density,
        ParamGroup::Spatial,
        ParamGroup::Directional,
        ParamGroup::Pilot,
    ];
    for group in groups {
        // Candidate coordinates with a gradient large enough to measure.
        let mut cands: Vec<(ParamKey, usize)> = Vec::new();
        for p in model.params() {
            if model.group(p.key) != group {
                continue;
            }
            if let Some(g) = grads.get(p.key) {
                cands.extend(
                    g.iter()
                        .enumerate()
                        .filter(|(_, v)| v.abs() > 1e-6)
                        .map(|(i, _)| (p.key, i)),
                );
            }
        }
        for _ in 0..probes_per_group.min(cands.len()) {
            let (key, i) = cands.swap_remove(rng.gen_range(0..cands.len()));
            let analytic = grads.get(key).unwrap()[i];
            let numeric = fd_param(&mut model, key, i, 1e-4, |m| problem.loss(m));
            let err = relative_error(analytic, numeric);
            assert!(err.is_finite());
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Analytic sphere rendered at 16×16 from a handful of views.
pub fn tiny_dataset() -> vfr::scene::SceneDataset {
    let spec = vfr::scene::ToySpec {
        views: 4,
        val_views: 1,
        test_views: 1,
        resolution: 16,
        quadrature: 256,
        ..vfr::scene::ToySpec::default()
    };
    vfr::scene::generate_toy_dataset(&vfr::scene::AnalyticScene::toy_sphere(0.2), &spec).unwrap()
}

/// Toy preset shrunk so a step takes milliseconds.
pub fn tiny_config(steps: usize, pilot_steps: usize) -> vfr::config::RunConfig {
    let mut c = vfr::config::RunConfig::toy();
    c.grid.levels = 4;
    c.grid.max_resolution = 32;
    c.grid.table_size = 1 << 10;
    c.bundle.width = 8;
    c.bundle.pilot_width = 8;
    c.train.steps = steps;
    c.train.pilot_steps = pilot_steps;
    c.train.batch = 64;
    c.train.chunk_rays = 16;
    c.train.samples_per_ray = 16;
    c.train.occupancy_resolution = 8;
    c.train.occupancy_warmup = 4;
    c.train.occupancy_interval = 2;
    c.train.log_every = 4;
    c
}
