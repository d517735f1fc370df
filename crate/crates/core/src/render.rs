//! Discrete volume rendering.
//!
//! Weights follow alpha compositing: `α_i = 1 − exp(−σ_i δ_i)`,
//! `T_i = Π_{j<i} (1 − α_j)`, `w_i = T_i α_i`.
//!
//! * **standard**: the main network runs on every sample and the colours are
//!   blended, `C = Σ w_i NN(F(x_i), d) + (1 − Σw)·bg`.
//! * **vfr**: the features are blended first and the network runs once per
//!   ray, `C = NN(Σ w_i F(x_i), d)·Σw + (1 − Σw)·bg`.
//! * **pilot**: standard rendering through the small pilot network.

use rayon::prelude::*;

use crate::diff::{CustomOp, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ForwardMode;
use crate::sampling::{
    generate_rays, intersect_aabb, sample_stratified, Aabb, Camera, OccupancyGrid, Ray, SampleBatch, Vec3,
};

/// Marching stops once transmittance falls below this (inference only).
pub const EARLY_STOP_TRANSMITTANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RenderMode {
    Standard,
    Vfr,
    Pilot,
}

impl RenderMode {
    pub fn name(self) -> &'static str {
        match self {
            RenderMode::Standard => "standard",
            RenderMode::Vfr => "vfr",
            RenderMode::Pilot => "pilot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(RenderMode::Standard),
            "vfr" => Ok(RenderMode::Vfr),
            "pilot" => Ok(RenderMode::Pilot),
            other => Err(Error::Usage(format!("unknown render mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: [f64; 3],
    pub opacity: f64,
    /// `Σ w_i F(x_i)`, vfr mode only.
    pub rendered_feature: Option<Vec<f64>>,
    pub nn_eval_count: usize,
}

/// Per-sample weights and the residual transmittance of one ray.
pub fn compute_weights<T: Real>(sigma: &[T], delta: &[T]) -> Result<(Vec<T>, T)> {
    if sigma.len() != delta.len() {
        return Err(Error::Shape(format!(
            "{} densities for {} step sizes",
            sigma.len(),
            delta.len()
        )));
    }
    let mut w = Vec::with_capacity(sigma.len());
    let mut trans = T::one();
    for (s, d) in sigma.iter().zip(delta) {
        let survive = (-*s * *d).exp();
        w.push(trans * (T::one() - survive));
        trans *= survive;
    }
    Ok((w, trans))
}

/// Ray segments `offsets[r]..offsets[r+1]` within a flat sample list.
fn segments(offsets: &[usize]) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
    offsets.windows(2).enumerate().map(|(r, w)| (r, w[0]..w[1]))
}

struct VolumeWeights<T> {
    offsets: Vec<usize>,
    deltas: Vec<T>,
}

impl<T: Real> CustomOp<T> for VolumeWeights<T> {
    fn name(&self) -> &'static str {
        "volume_weights"
    }

    // dL/dσ_k = δ_k (g_k T_{k+1} − Σ_{i>k} g_i w_i)
    fn backward(&self, inputs: &[&[T]], output: &[T], g: &[T], gin: &mut [Option<Vec<T>>]) {
        let Some(ds) = gin[0].as_mut() else { return };
        let sigma = inputs[0];
        for (_, seg) in segments(&self.offsets) {
            let mut trans = T::one();
            let mut next_t = Vec::with_capacity(seg.len());
            for k in seg.clone() {
                trans *= (-sigma[k] * self.deltas[k]).exp();
                next_t.push(trans);
            }
            let mut tail = T::zero();
            for (j, k) in seg.clone().enumerate().rev() {
                ds[k] += self.deltas[k] * (g[k] * next_t[j] - tail);
                tail += g[k] * output[k];
            }
        }
    }
}

/// Weights for every ray segment of a `S×1` density column.
pub fn volume_weights_tape<'p, T: Real>(
    tape: &mut Tape<'p, T>,
    sigma: Var,
    deltas: &[T],
    offsets: &[usize],
) -> Result<Var> {
    let s = tape.value(sigma);
    let mut w = vec![T::zero(); s.len()];
    for (_, seg) in segments(offsets) {
        let (ws, _) = compute_weights(&s[seg.clone()], &deltas[seg.clone()])?;
        w[seg].copy_from_slice(&ws);
    }
    let op = VolumeWeights {
        offsets: offsets.to_vec(),
        deltas: deltas.to_vec(),
    };
    tape.custom(&[sigma], w, sigma.rows(), 1, Box::new(op))
}

struct SegmentWeightedSum {
    offsets: Vec<usize>,
    cols: usize,
}

impl<T: Real> CustomOp<T> for SegmentWeightedSum {
    fn name(&self) -> &'static str {
        "segment_weighted_sum"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], g: &[T], gin: &mut [Option<Vec<T>>]) {
        let (w, x) = (inputs[0], inputs[1]);
        let c = self.cols;
        let (gw, gx) = gin.split_at_mut(1);
        for (r, seg) in segments(&self.offsets) {
            let gr = &g[r * c..(r + 1) * c];
            for i in seg {
                if let Some(gw) = gw[0].as_mut() {
                    gw[i] += (0..c).fold(T::zero(), |acc, j| acc + gr[j] * x[i * c + j]);
                }
                if let Some(gx) = gx[0].as_mut() {
                    for j in 0..c {
                        gx[i * c + j] += w[i] * gr[j];
                    }
                }
            }
        }
    }
}

/// `out[r] = Σ_{i ∈ ray r} w_i · x_i` for `S×1` weights and `S×C` rows,
/// summed in sample order.
pub fn segment_weighted_sum<'p, T: Real>(tape: &mut Tape<'p, T>, w: Var, x: Var, offsets: &[usize]) -> Result<Var> {
    if w.cols() != 1 || w.rows() != x.rows() {
        return Err(Error::Shape(format!(
            "weights {}×{} for {} sample rows",
            w.rows(),
            w.cols(),
            x.rows()
        )));
    }
    let c = x.cols();
    let rays = offsets.len() - 1;
    let (wv, xv) = (tape.value(w), tape.value(x));
    let mut out = vec![T::zero(); rays * c];
    for (r, seg) in segments(offsets) {
        for i in seg {
            for j in 0..c {
                out[r * c + j] += wv[i] * xv[i * c + j];
            }
        }
    }
    let op = SegmentWeightedSum {
        offsets: offsets.to_vec(),
        cols: c,
    };
    tape.custom(&[w, x], out, rays, c, Box::new(op))
}

struct SegmentSum {
    offsets: Vec<usize>,
}

impl<T: Real> CustomOp<T> for SegmentSum {
    fn name(&self) -> &'static str {
        "segment_sum"
    }

    fn backward(&self, _inputs: &[&[T]], _output: &[T], g: &[T], gin: &mut [Option<Vec<T>>]) {
        let Some(gw) = gin[0].as_mut() else { return };
        for (r, seg) in segments(&self.offsets) {
            for i in seg {
                gw[i] += g[r];
            }
        }
    }
}

fn segment_sum<'p, T: Real>(tape: &mut Tape<'p, T>, w: Var, offsets: &[usize]) -> Result<Var> {
    let wv = tape.value(w);
    let out = segments(offsets)
        .map(|(_, seg)| wv[seg].iter().fold(T::zero(), |a, v| a + *v))
        .collect::<Vec<_>>();
    let rays = out.len();
    tape.custom(
        &[w],
        out,
        rays,
        1,
        Box::new(SegmentSum {
            offsets: offsets.to_vec(),
        }),
    )
}

/// `fg·opacity + (1 − opacity)·bg` when `scale_foreground`, otherwise
/// `fg + (1 − opacity)·bg` (foreground already weighted).
struct Background<T> {
    bg: [T; 3],
    scale_foreground: bool,
}

impl<T: Real> CustomOp<T> for Background<T> {
    fn name(&self) -> &'static str {
        "background"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], g: &[T], gin: &mut [Option<Vec<T>>]) {
        let (fg, op) = (inputs[0], inputs[1]);
        let (gf, go) = gin.split_at_mut(1);
        for r in 0..op.len() {
            for c in 0..3 {
                let gi = g[r * 3 + c];
                if let Some(gf) = gf[0].as_mut() {
                    gf[r * 3 + c] += if self.scale_foreground { gi * op[r] } else { gi };
                }
                if let Some(go) = go[0].as_mut() {
                    let d = if self.scale_foreground {
                        fg[r * 3 + c] - self.bg[c]
                    } else {
                        -self.bg[c]
                    };
                    go[r] += gi * d;
                }
            }
        }
    }
}

fn composite_background<'p, T: Real>(
    tape: &mut Tape<'p, T>,
    fg: Var,
    opacity: Var,
    bg: [f64; 3],
    scale_foreground: bool,
) -> Result<Var> {
    let bg = bg.map(T::lit);
    let (f, o) = (tape.value(fg), tape.value(opacity));
    let mut out = Vec::with_capacity(f.len());
    for r in 0..o.len() {
        for c in 0..3 {
            let fg_c = if scale_foreground {
                f[r * 3 + c] * o[r]
            } else {
                f[r * 3 + c]
            };
            out.push(fg_c + (T::one() - o[r]) * bg[c]);
        }
    }
    let rows = o.len();
    let op = Background { bg, scale_foreground };
    tape.custom(&[fg, opacity], out, rows, 3, Box::new(op))
}

/// Options shared by every rendering path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub aabb: Aabb,
    pub background: [f64; 3],
    /// Linear test fixture: linear networks and raw weighted sums without
    /// background compositing.
    pub linear_test: bool,
}

impl RenderOptions {
    pub fn new(aabb: Aabb, background: [f64; 3]) -> Self {
        Self {
            aabb,
            background,
            linear_test: false,
        }
    }
}

/// Result of rendering a set of rays on one tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeRender {
    /// `rays × 3` pixel colours.
    pub color: Var,
    /// `rays × 1` opacities `Σ w_i`.
    pub opacity: Var,
    /// `samples × 1` compositing weights.
    pub weights: Var,
    /// `rays × D` integrated features (vfr only).
    pub rendered_feature: Option<Var>,
}

/// Renders several rays (already sampled, with unit view directions) on a
/// shared tape. Returns the tape handles and the per-ray count of network
/// evaluations.
pub fn render_on_tape<'p, T: Real>(
    tape: &mut Tape<'p, T>,
    model: &'p Model<T>,
    batches: &[SampleBatch],
    dirs: &[Vec3],
    mode: RenderMode,
    opts: &RenderOptions,
) -> Result<(TapeRender, Vec<usize>)> {
    if batches.len() != dirs.len() {
        return Err(Error::Shape(format!(
            "{} sample batches for {} directions",
            batches.len(),
            dirs.len()
        )));
    }
    let mut offsets = Vec::with_capacity(batches.len() + 1);
    offsets.push(0);
    let mut unit = Vec::new();
    let mut deltas = Vec::new();
    let mut sample_dirs = Vec::new();
    for (b, d) in batches.iter().zip(dirs) {
        unit.extend(b.positions.iter().map(|p| opts.aabb.to_unit(*p)));
        deltas.extend(b.deltas.iter().map(|v| T::lit(*v)));
        sample_dirs.extend(std::iter::repeat_n(*d, b.len()));
        offsets.push(unit.len());
    }
    let forward = if opts.linear_test {
        ForwardMode::Linear
    } else {
        ForwardMode::Normal
    };
    let feats = model.grid.query_tape(tape, &unit)?;
    let sigma = model.density_from_features(tape, feats)?;
    let weights = volume_weights_tape(tape, sigma, &deltas, &offsets)?;
    let opacity = segment_sum(tape, weights, &offsets)?;
    let (color, rendered, evals) = match mode {
        RenderMode::Vfr => {
            let rendered = segment_weighted_sum(tape, weights, feats, &offsets)?;
            let fg = model.main_net_forward(tape, rendered, dirs, forward)?;
            let color = if opts.linear_test {
                fg
            } else {
                composite_background(tape, fg, opacity, opts.background, true)?
            };
            (color, Some(rendered), vec![1; batches.len()])
        }
        RenderMode::Standard | RenderMode::Pilot => {
            let rgb = if mode == RenderMode::Standard {
                model.main_net_forward(tape, feats, &sample_dirs, forward)?
            } else {
                model.pilot_forward(tape, feats, &sample_dirs)?
            };
            let acc = segment_weighted_sum(tape, weights, rgb, &offsets)?;
            let color = if opts.linear_test {
                acc
            } else {
                composite_background(tape, acc, opacity, opts.background, false)?
            };
            (color, None, batches.iter().map(SampleBatch::len).collect())
        }
    };
    Ok((
        TapeRender {
            color,
            opacity,
            weights,
            rendered_feature: rendered,
        },
        evals,
    ))
}

/// Renders rays without keeping gradients.
pub fn render_rays<T: Real>(
    model: &Model<T>,
    batches: &[SampleBatch],
    dirs: &[Vec3],
    mode: RenderMode,
    opts: &RenderOptions,
) -> Result<Vec<RenderOutput>> {
    let mut tape = Tape::new();
    let (out, evals) = render_on_tape(&mut tape, model, batches, dirs, mode, opts)?;
    let color = tape.value(out.color);
    let opacity = tape.value(out.opacity);
    let dim = model.feature_dim();
    Ok((0..batches.len())
        .map(|r| RenderOutput {
            rgb: [0, 1, 2].map(|c| color[r * 3 + c].as_f64()),
            opacity: opacity[r].as_f64(),
            rendered_feature: out.rendered_feature.map(|f| {
                tape.value(f)[r * dim..(r + 1) * dim]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect()
            }),
            nn_eval_count: evals[r],
        })
        .collect())
}

fn single<T: Real>(
    model: &Model<T>,
    batch: &SampleBatch,
    d: Vec3,
    mode: RenderMode,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    render_rays(model, std::slice::from_ref(batch), &[d], mode, opts).map(|mut v| v.remove(0))
}

pub fn render_standard<T: Real>(
    model: &Model<T>,
    batch: &SampleBatch,
    d: Vec3,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    single(model, batch, d, RenderMode::Standard, opts)
}

pub fn render_vfr<T: Real>(
    model: &Model<T>,
    batch: &SampleBatch,
    d: Vec3,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    single(model, batch, d, RenderMode::Vfr, opts)
}

/// Standard rendering through the pilot network; only legal while
/// `step < pilot_steps`.
pub fn render_pilot<T: Real>(
    model: &Model<T>,
    batch: &SampleBatch,
    d: Vec3,
    opts: &RenderOptions,
    step: usize,
    pilot_steps: usize,
) -> Result<RenderOutput> {
    if step >= pilot_steps {
        return Err(Error::Usage(format!(
            "pilot rendering at step {step} after the {pilot_steps}-step pilot phase"
        )));
    }
    single(model, batch, d, RenderMode::Pilot, opts)
}

/// Closed-form density and colour fields that can be rendered directly.
pub trait RadianceField {
    fn density(&self, p: Vec3) -> f64;
    fn color(&self, p: Vec3, d: Vec3) -> [f64; 3];
}

/// Standard rendering with densities and colours taken from `field`
/// instead of the learned networks.
pub fn render_field(field: &impl RadianceField, ray: &Ray, batch: &SampleBatch, background: [f64; 3]) -> RenderOutput {
    let sigma: Vec<f64> = batch.positions.iter().map(|p| field.density(*p)).collect();
    let (w, _) = compute_weights(&sigma, &batch.deltas).expect("batch arrays have equal length");
    let mut rgb = [0.0; 3];
    for (wi, p) in w.iter().zip(&batch.positions) {
        let c = field.color(*p, ray.dir);
        for k in 0..3 {
            rgb[k] += wi * c[k];
        }
    }
    let opacity: f64 = w.iter().sum();
    for k in 0..3 {
        rgb[k] += (1.0 - opacity) * background[k];
    }
    RenderOutput {
        rgb,
        opacity,
        rendered_feature: None,
        nn_eval_count: batch.len(),
    }
}

/// Everything needed to sample rays for a trained model.
#[derive(Debug, Clone, Copy)]
pub struct SamplerSettings<'a> {
    pub aabb: Aabb,
    pub samples_per_ray: usize,
    pub occupancy: Option<&'a OccupancyGrid>,
}

/// Midpoint samples inside the scene box, filtered by occupancy.
pub fn sample_ray(ray: &Ray, s: &SamplerSettings<'_>, jitter: bool, rng: &mut impl rand::Rng) -> SampleBatch {
    let Some((t0, t1)) = intersect_aabb(ray, &s.aabb) else {
        return SampleBatch::default();
    };
    let clipped = Ray {
        t_near: t0,
        t_far: t1,
        ..*ray
    };
    let batch = sample_stratified(&clipped, s.samples_per_ray, jitter, rng);
    match s.occupancy {
        Some(occ) => occ.filter_occupied(&batch),
        None => batch,
    }
}

/// Drops the samples after transmittance first falls below
/// [`EARLY_STOP_TRANSMITTANCE`].
pub fn early_terminate<T: Real>(model: &Model<T>, batch: &mut SampleBatch, aabb: &Aabb) -> Result<()> {
    if batch.is_empty() {
        return Ok(());
    }
    let unit: Vec<Vec3> = batch.positions.iter().map(|p| aabb.to_unit(*p)).collect();
    let sigma = model.densities_at(&unit)?;
    let mut trans = 1.0;
    let mut keep = batch.len();
    for (i, (s, d)) in sigma.iter().zip(&batch.deltas).enumerate() {
        trans *= (-s * d).exp();
        if trans < EARLY_STOP_TRANSMITTANCE {
            keep = i + 1;
            break;
        }
    }
    batch.truncate(keep);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub rgb: Vec<f32>,
    /// Network evaluations per pixel.
    pub nn_evals: Vec<u32>,
}

impl RenderedImage {
    pub fn total_evals(&self) -> u64 {
        self.nn_evals.iter().map(|&v| v as u64).sum()
    }

    pub fn mean_evals(&self) -> f64 {
        self.total_evals() as f64 / self.nn_evals.len().max(1) as f64
    }

    /// Histogram of per-pixel evaluation counts, indexed by count.
    pub fn eval_histogram(&self) -> Vec<u64> {
        let max = self.nn_evals.iter().copied().max().unwrap_or(0) as usize;
        let mut h = vec![0u64; max + 1];
        for &v in &self.nn_evals {
            h[v as usize] += 1;
        }
        h
    }
}

const IMAGE_CHUNK: usize = 256;

/// Renders a full image (midpoint samples, occupancy skipping, early
/// termination). Chunks of rays render in parallel; results are
/// independent of the thread count.
pub fn render_image<T: Real>(
    model: &Model<T>,
    camera: &Camera,
    mode: RenderMode,
    sampler: &SamplerSettings<'_>,
    opts: &RenderOptions,
) -> Result<RenderedImage> {
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<(usize, usize)> = (0..h).flat_map(|j| (0..w).map(move |i| (i, j))).collect();
    let rays = generate_rays(camera, &pixels)?;
    let chunks: Vec<Result<Vec<RenderOutput>>> = rays
        .par_chunks(IMAGE_CHUNK)
        .map(|chunk| {
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let mut batches = Vec::with_capacity(chunk.len());
            for ray in chunk {
                let mut b = sample_ray(ray, sampler, false, &mut rng);
                early_terminate(model, &mut b, &sampler.aabb)?;
                batches.push(b);
            }
            let dirs: Vec<Vec3> = chunk.iter().map(|r| r.dir).collect();
            render_rays(model, &batches, &dirs, mode, opts)
        })
        .collect();
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut nn_evals = Vec::with_capacity(w * h);
    for chunk in chunks {
        for out in chunk? {
            rgb.extend(out.rgb.iter().map(|&v| v as f32));
            nn_evals.push(out.nn_eval_count as u32);
        }
    }
    Ok(RenderedImage {
        width: w,
        height: h,
        rgb,
        nn_evals,
    })
}
