//! Datasets: NeRF-synthetic loading, PNG I/O, analytic toy scenes and the
//! quadrature oracle that renders their ground truth.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::RadianceField;
use crate::sampling::{dot, generate_rays, norm, normalize, Aabb, Camera, Ray, Vec3};

/// An 8-bit image decoded to `[0, 1]`, interleaved, 3 or 4 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn png_read(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, format!("png decode: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!(
                "unsupported {:?}-bit png; only 8-bit RGB/RGBA is accepted",
                info.bit_depth as u8
            ),
        ));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported png colour type {other:?}; expected RGB or RGBA"),
            ))
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "png too large"))?;
    let mut buf = vec![0u8; size];
    let out = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, format!("png decode: {e}")))?;
    let (w, h) = (out.width as usize, out.height as usize);
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf[..out.line_size * h].chunks(out.line_size) {
        data.extend(row[..w * channels].iter().map(|b| *b as f32 / 255.0));
    }
    Ok(Image {
        width: w,
        height: h,
        channels,
        data,
    })
}

/// Maps `[0, 1]` to a byte with round-to-nearest; out-of-range values clamp.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize(rgb: &mut [f32]) {
    rgb.iter_mut().for_each(|v| *v = to_byte(*v) as f32 / 255.0);
}

/// Writes an interleaved RGB image as an 8-bit PNG.
pub fn png_write(path: &Path, width: usize, height: usize, rgb: &[f32]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "{} values for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = rgb.iter().map(|v| to_byte(*v)).collect();
    let fail = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::format(path, format!("png encode: {other}")),
    };
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(&bytes).map_err(fail)?;
    writer.finish().map_err(fail)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown split {s:?} (expected train, val or test)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub file_path: String,
    /// Camera-to-world, row-major, camera looking down −z.
    pub pose: [[f64; 4]; 4],
    /// Interleaved RGB in `[0, 1]`.
    pub image: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub camera_angle_x: f64,
    pub width: usize,
    pub height: usize,
    pub aabb: Aabb,
    pub background: [f64; 3],
    pub train: Vec<Frame>,
    pub val: Vec<Frame>,
    pub test: Vec<Frame>,
}

impl SceneDataset {
    pub fn split(&self, s: Split) -> &[Frame] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.camera_angle_x).tan()
    }

    pub fn camera(&self, frame: &Frame) -> Camera {
        Camera::from_fov_x(frame.pose, self.width, self.height, self.camera_angle_x)
    }
}

/// Scene box used when `transforms_*.json` has no `scene_aabb` field.
pub const DEFAULT_AABB_HALF: f64 = 1.5;

#[derive(Debug, Deserialize, Serialize)]
struct TransformsFile {
    camera_angle_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_aabb: Option<[[f64; 3]; 2]>,
    frames: Option<Vec<FrameEntry>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct FrameEntry {
    file_path: Option<String>,
    transform_matrix: Option<[[f64; 4]; 4]>,
}

fn det3(m: &[[f64; 4]; 4]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn image_path(dir: &Path, file_path: &str) -> PathBuf {
    let p = dir.join(file_path);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

/// Loads `transforms_{train,val,test}.json` and their images from `dir`,
/// compositing any alpha channel onto `background`.
pub fn load_nerf_synthetic(dir: &Path, background: [f64; 3]) -> Result<SceneDataset> {
    let mut angle: Option<f64> = None;
    let mut aabb: Option<Aabb> = None;
    let mut dims: Option<(usize, usize)> = None;
    let mut splits: Vec<Vec<Frame>> = Vec::new();
    for split in Split::ALL {
        let json = dir.join(format!("transforms_{}.json", split.name()));
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let parsed: TransformsFile =
            serde_json::from_str(&text).map_err(|e| Error::format(&json, format!("malformed JSON: {e}")))?;
        let a = parsed
            .camera_angle_x
            .ok_or_else(|| Error::format(&json, "missing camera_angle_x"))?;
        if !(a > 0.0 && a < std::f64::consts::PI) {
            return Err(Error::format(&json, format!("camera_angle_x {a} out of range")));
        }
        match angle {
            Some(prev) if (prev - a).abs() > 1e-12 => {
                return Err(Error::format(&json, "camera_angle_x differs between splits"))
            }
            _ => angle = Some(a),
        }
        if let Some([lo, hi]) = parsed.scene_aabb {
            let b = Aabb { min: lo, max: hi };
            if !b.is_valid() {
                return Err(Error::format(&json, format!("invalid scene_aabb {lo:?} {hi:?}")));
            }
            aabb.get_or_insert(b);
        }
        let entries = parsed.frames.ok_or_else(|| Error::format(&json, "missing frames"))?;
        let mut frames = Vec::with_capacity(entries.len());
        for (i, entry) in entries.into_iter().enumerate() {
            let file_path = entry
                .file_path
                .ok_or_else(|| Error::format(&json, format!("frames[{i}]: missing file_path")))?;
            let pose = entry
                .transform_matrix
                .ok_or_else(|| Error::format(&json, format!("frames[{i}] ({file_path}): missing transform_matrix")))?;
            let det = det3(&pose);
            if !det.is_finite() || det.abs() < 1e-9 || pose.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::format(
                    &json,
                    format!("frames[{i}] ({file_path}): transform_matrix is not invertible"),
                ));
            }
            let path = image_path(dir, &file_path);
            let img = png_read(&path)?;
            match dims {
                Some(d) if d != (img.width, img.height) => {
                    return Err(Error::format(
                        &path,
                        format!(
                            "image is {}x{}, expected {}x{} like the other frames",
                            img.width, img.height, d.0, d.1
                        ),
                    ))
                }
                _ => dims = Some((img.width, img.height)),
            }
            frames.push(Frame {
                file_path,
                pose,
                image: composite(&img, background),
            });
        }
        splits.push(frames);
    }
    let (width, height) = dims.unwrap_or((0, 0));
    let mut splits = splits.into_iter();
    let ds = SceneDataset {
        camera_angle_x: angle.unwrap_or(0.0),
        width,
        height,
        aabb: aabb.unwrap_or(Aabb::cube(DEFAULT_AABB_HALF)),
        background,
        train: splits.next().unwrap_or_default(),
        val: splits.next().unwrap_or_default(),
        test: splits.next().unwrap_or_default(),
    };
    if ds.train.is_empty() {
        return Err(Error::format(dir.join("transforms_train.json"), "no training frames"));
    }
    Ok(ds)
}

fn composite(img: &Image, bg: [f64; 3]) -> Vec<f32> {
    if img.channels == 3 {
        return img.data.clone();
    }
    let bg = bg.map(|v| v as f32);
    img.data
        .chunks(4)
        .flat_map(|px| {
            let a = px[3];
            [0, 1, 2].map(|c| px[c] * a + bg[c] * (1.0 - a))
        })
        .collect()
}

/// Writes the dataset in the NeRF-synthetic layout; images become RGB PNGs
/// at `<dir>/<file_path>.png`.
pub fn save_dataset(ds: &SceneDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        let frames = ds.split(split);
        let file = TransformsFile {
            camera_angle_x: Some(ds.camera_angle_x),
            scene_aabb: Some([ds.aabb.min, ds.aabb.max]),
            frames: Some(
                frames
                    .iter()
                    .map(|f| FrameEntry {
                        file_path: Some(f.file_path.clone()),
                        transform_matrix: Some(f.pose),
                    })
                    .collect(),
            ),
        };
        for f in frames {
            let path = image_path(dir, &f.file_path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            png_write(&path, ds.width, ds.height, &f.image)?;
        }
        let json = dir.join(format!("transforms_{}.json", split.name()));
        let text = serde_json::to_string_pretty(&file).expect("transforms serialise");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    }
    Ok(())
}

/// Support of an analytic density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Constant density inside a ball at the origin.
    Sphere { radius: f64, sigma: f64 },
    /// `sigma · exp(−|p|² / 2s²)`, truncated to the scene box.
    Blob { scale: f64, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shading {
    Constant([f64; 3]),
    /// Position-varying albedo lit by a fixed directional light, plus a
    /// view-dependent lobe of SH degree 2 scaled by `specular`.
    Lambertian {
        specular: f64,
    },
    /// Smooth position- and mildly direction-dependent colour.
    Smooth,
}

/// A scene with closed-form density and colour inside `[-0.5, 0.5]³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticScene {
    pub shape: Shape,
    pub shading: Shading,
}

pub const TOY_HALF_EXTENT: f64 = 0.5;

impl AnalyticScene {
    /// The default toy scene: σ = 40 ball of radius 0.3.
    pub fn toy_sphere(specular: f64) -> Self {
        Self {
            shape: Shape::Sphere {
                radius: 0.3,
                sigma: 40.0,
            },
            shading: Shading::Lambertian { specular },
        }
    }

    /// Smooth Gaussian density with smooth colours.
    pub fn blob() -> Self {
        Self {
            shape: Shape::Blob {
                scale: 0.15,
                sigma: 30.0,
            },
            shading: Shading::Smooth,
        }
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::cube(TOY_HALF_EXTENT)
    }

    /// Parameter interval of the ray over which the density can be
    /// non-zero; the oracle integrates over exactly this interval.
    pub fn support(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (t0, t1) = slab(ray, &self.aabb())?;
        match self.shape {
            Shape::Sphere { radius, .. } => {
                // |o + t d|² = r² with |d| = 1.
                let b = dot(ray.origin, ray.dir);
                let c = dot(ray.origin, ray.origin) - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let (a0, a1) = ((-b - s).max(t0), (-b + s).min(t1));
                (a1 > a0).then_some((a0, a1))
            }
            Shape::Blob { .. } => Some((t0, t1)),
        }
    }
}

/// Slab test written independently of the sampler's.
fn slab(ray: &Ray, b: &Aabb) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (ray.t_near.max(0.0), ray.t_far);
    for k in 0..3 {
        let inv = 1.0 / ray.dir[k];
        let a = (b.min[k] - ray.origin[k]) * inv;
        let c = (b.max[k] - ray.origin[k]) * inv;
        lo = lo.max(a.min(c));
        hi = hi.min(a.max(c));
    }
    (hi > lo).then_some((lo, hi))
}

const LIGHT: Vec3 = [0.5773502691896258, 0.5773502691896258, 0.5773502691896258];

impl RadianceField for AnalyticScene {
    fn density(&self, p: Vec3) -> f64 {
        if !self.aabb().contains(p, 0.0) {
            return 0.0;
        }
        let r2 = dot(p, p);
        match self.shape {
            Shape::Sphere { radius, sigma } => {
                if r2 <= radius * radius {
                    sigma
                } else {
                    0.0
                }
            }
            Shape::Blob { scale, sigma } => sigma * (-r2 / (2.0 * scale * scale)).exp(),
        }
    }

    fn color(&self, p: Vec3, d: Vec3) -> [f64; 3] {
        let c = match self.shading {
            Shading::Constant(c) => c,
            Shading::Lambertian { specular } => {
                let u = p.map(|v| v / 0.3);
                let albedo = [0.5 + 0.3 * u[0], 0.45 + 0.3 * u[1], 0.4 + 0.3 * u[2]];
                let r = norm(p);
                let n_dot_l = if r > 1e-12 { dot(p, LIGHT) / r } else { 0.0 };
                let shade = 0.35 + 0.65 * n_dot_l.max(0.0);
                let lobe = 0.5 * (1.0 - dot(d, LIGHT));
                albedo.map(|a| a * shade + specular * lobe * lobe)
            }
            Shading::Smooth => [
                0.5 + 0.35 * (4.0 * p[0] + 1.0).sin() + 0.1 * d[2],
                0.5 + 0.35 * (4.0 * p[1] + 2.0).sin() + 0.1 * d[0],
                0.5 + 0.35 * (4.0 * p[2] + 3.0).sin() + 0.1 * d[1],
            ],
        };
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Midpoint-rule evaluation of the volume rendering integral with `n`
/// samples over the scene's support; residual transmittance blends in the
/// background. Shares no code with the renderer's compositing.
pub fn oracle_render(scene: &AnalyticScene, ray: &Ray, n: usize, background: [f64; 3]) -> [f64; 3] {
    assert!(n >= 2, "oracle needs at least two samples");
    let Some((t0, t1)) = scene.support(ray) else {
        return background;
    };
    let dt = (t1 - t0) / n as f64;
    let mut tau = 0.0;
    let mut rgb = [0.0; 3];
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * dt;
        let p = ray.at(t);
        let s = scene.density(p);
        if s > 0.0 {
            let trans = (-(tau + 0.5 * s * dt)).exp();
            let c = scene.color(p, ray.dir);
            for k in 0..3 {
                rgb[k] += dt * trans * s * c[k];
            }
            tau += s * dt;
        }
    }
    let residual = (-tau).exp();
    for k in 0..3 {
        rgb[k] += residual * background[k];
    }
    rgb
}

/// Camera-to-world pose at `eye` looking at the origin, +z world up.
pub fn look_at(eye: Vec3) -> [[f64; 4]; 4] {
    let forward = normalize(eye.map(|v| -v));
    let up_hint = if forward[2].abs() > 0.999 {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let right = normalize(cross(forward, up_hint));
    let up = cross(right, forward);
    let back = forward.map(|v| -v);
    let mut m = [[0.0; 4]; 4];
    for r in 0..3 {
        m[r] = [right[r], up[r], back[r], eye[r]];
    }
    m[3][3] = 1.0;
    m
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// `n` points on a sphere of `radius` along a Fibonacci spiral, rotated by
/// `azimuth` about the z axis.
pub fn fibonacci_sphere(n: usize, radius: f64, azimuth: f64) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * golden + azimuth;
            [radius * r * phi.cos(), radius * r * phi.sin(), radius * z]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub views: usize,
    pub val_views: usize,
    pub test_views: usize,
    pub resolution: usize,
    pub camera_radius: f64,
    pub camera_angle_x: f64,
    pub quadrature: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            views: 32,
            val_views: 4,
            test_views: 8,
            resolution: 64,
            camera_radius: 1.5,
            camera_angle_x: 0.69,
            quadrature: 4096,
            seed: 0,
        }
    }
}

pub fn render_oracle_image(scene: &AnalyticScene, camera: &Camera, n: usize, background: [f64; 3]) -> Result<Vec<f32>> {
    let pixels: Vec<(usize, usize)> = (0..camera.height)
        .flat_map(|j| (0..camera.width).map(move |i| (i, j)))
        .collect();
    let rays = generate_rays(camera, &pixels)?;
    Ok(rays
        .par_iter()
        .flat_map_iter(|r| oracle_render(scene, r, n, background).map(|v| v as f32))
        .collect())
}

/// Renders `scene` from Fibonacci-spiral cameras with the oracle; images are
/// quantised to 8 bits so that saving and reloading is lossless. The seed
/// only rotates the camera spiral.
pub fn generate_toy_dataset(scene: &AnalyticScene, spec: &ToySpec) -> Result<SceneDataset> {
    if spec.views == 0 {
        return Err(Error::Usage("toy dataset needs at least one view".into()));
    }
    let background = [1.0; 3];
    let azimuth = ChaCha8Rng::seed_from_u64(spec.seed).gen_range(0.0..std::f64::consts::TAU);
    let split = |name: &str, count: usize, offset: f64| -> Result<Vec<Frame>> {
        fibonacci_sphere(count, spec.camera_radius, azimuth + offset)
            .into_iter()
            .enumerate()
            .map(|(i, eye)| {
                let pose = look_at(eye);
                let cam = Camera::from_fov_x(pose, spec.resolution, spec.resolution, spec.camera_angle_x);
                let mut image = render_oracle_image(scene, &cam, spec.quadrature, background)?;
                quantize(&mut image);
                Ok(Frame {
                    file_path: format!("./{name}/r_{i}"),
                    pose,
                    image,
                })
            })
            .collect()
    };
    Ok(SceneDataset {
        camera_angle_x: spec.camera_angle_x,
        width: spec.resolution,
        height: spec.resolution,
        aabb: scene.aabb(),
        background,
        train: split("train", spec.views, 0.0)?,
        val: split("val", spec.val_views, 1.1)?,
        test: split("test", spec.test_views, 2.3)?,
    })
}
