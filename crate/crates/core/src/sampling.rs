//! Rays, scene bounds, stratified sampling and the occupancy grid.

use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|a| self.min[a] < self.max[a])
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.max[a] - self.min[a]).product()
    }

    /// Maps a world point into the unit cube, clamping rounding spill.
    pub fn to_unit(&self, p: Vec3) -> Vec3 {
        let mut u = [0.0; 3];
        for a in 0..3 {
            u[a] = ((p[a] - self.min[a]) / (self.max[a] - self.min[a])).clamp(0.0, 1.0);
        }
        u
    }

    pub fn contains(&self, p: Vec3, eps: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - eps && p[a] <= self.max[a] + eps)
    }
}

/// Pinhole camera in the NeRF synthetic convention: camera-to-world pose,
/// camera looks down −z with +y up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub c2w: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Camera {
    pub fn from_fov_x(c2w: [[f64; 4]; 4], width: usize, height: usize, camera_angle_x: f64) -> Self {
        Self {
            c2w,
            width,
            height,
            focal: 0.5 * width as f64 / (0.5 * camera_angle_x).tan(),
        }
    }

    fn rotation_det(&self) -> f64 {
        let m = &self.c2w;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Rays through the centres of the given `(column, row)` pixels.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    if !(camera.focal > 0.0 && camera.focal.is_finite()) {
        return Err(Error::Domain(format!("focal length {} is not positive", camera.focal)));
    }
    let det = camera.rotation_det();
    if !det.is_finite() || det.abs() < 1e-9 || camera.c2w.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("degenerate camera pose (rotation det {det})")));
    }
    let m = &camera.c2w;
    let origin = [m[0][3], m[1][3], m[2][3]];
    let (cx, cy) = (0.5 * camera.width as f64, 0.5 * camera.height as f64);
    Ok(pixels
        .iter()
        .map(|&(i, j)| {
            let local = [
                (i as f64 + 0.5 - cx) / camera.focal,
                -(j as f64 + 0.5 - cy) / camera.focal,
                -1.0,
            ];
            let world = [
                dot(m[0][..3].try_into().unwrap(), local),
                dot(m[1][..3].try_into().unwrap(), local),
                dot(m[2][..3].try_into().unwrap(), local),
            ];
            Ray {
                origin,
                dir: normalize(world),
                t_near: 0.0,
                t_far: f64::INFINITY,
            }
        })
        .collect())
}

/// Slab intersection clipped to `t ≥ 0`; `None` on a miss.
pub fn intersect_aabb(ray: &Ray, b: &Aabb) -> Option<(f64, f64)> {
    let mut t0: f64 = 0.0;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.dir[a]);
        if d == 0.0 {
            if o < b.min[a] || o > b.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut lo, mut hi) = ((b.min[a] - o) * inv, (b.max[a] - o) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t0 < t1).then_some((t0, t1))
}

/// Samples along one ray: midpoints `t`, step sizes, world positions, and
/// (once evaluated) densities and compositing weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBatch {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub densities: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.t.truncate(n);
        self.deltas.truncate(n);
        self.positions.truncate(n);
        self.densities.truncate(n);
        self.weights.truncate(n);
    }
}

/// `n` equal bins over `[t_near, t_far]`, one sample per bin at the bin
/// midpoint or uniformly inside it when `jitter` is set.
pub fn sample_stratified(ray: &Ray, n: usize, jitter: bool, rng: &mut impl Rng) -> SampleBatch {
    assert!(n >= 1, "need at least one sample per ray");
    let width = (ray.t_far - ray.t_near) / n as f64;
    let mut batch = SampleBatch {
        t: Vec::with_capacity(n),
        deltas: Vec::with_capacity(n),
        positions: Vec::with_capacity(n),
        ..Default::default()
    };
    for i in 0..n {
        let lo = ray.t_near + i as f64 * width;
        let u = if jitter { rng.gen::<f64>() } else { 0.5 };
        let t = lo + u * width;
        batch.t.push(t);
        batch.deltas.push(width);
        batch.positions.push(ray.at(t));
    }
    batch
}

/// Coarse voxel occupancy over the scene box.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub aabb: Aabb,
    pub density_ema: Vec<f32>,
    pub bits: Vec<bool>,
    pub decay: f64,
    pub threshold: f64,
}

impl OccupancyGrid {
    /// All voxels start occupied with a zero running density.
    pub fn new(resolution: usize, aabb: Aabb, decay: f64, threshold: f64) -> Self {
        let n = resolution.pow(3);
        Self {
            resolution,
            aabb,
            density_ema: vec![0.0; n],
            bits: vec![true; n],
            decay,
            threshold,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.bits.len()
    }

    pub fn voxel_index(&self, p: Vec3) -> Option<usize> {
        if !self.aabb.contains(p, 1e-9) {
            return None;
        }
        let u = self.aabb.to_unit(p);
        let r = self.resolution;
        let c = u.map(|v| ((v * r as f64) as usize).min(r - 1));
        Some(c[0] + r * (c[1] + r * c[2]))
    }

    pub fn is_occupied(&self, p: Vec3) -> bool {
        self.voxel_index(p).is_some_and(|i| self.bits[i])
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.voxel_count() as f64
    }

    pub fn mark_all(&mut self) {
        self.bits.iter_mut().for_each(|b| *b = true);
    }

    pub fn refresh_bits(&mut self) {
        let thr = self.threshold;
        for (b, e) in self.bits.iter_mut().zip(&self.density_ema) {
            *b = *e as f64 > thr;
        }
    }

    /// Retains the samples whose voxel is occupied; values are untouched.
    pub fn filter_occupied(&self, batch: &SampleBatch) -> SampleBatch {
        let mut out = SampleBatch::default();
        for i in 0..batch.len() {
            if self.is_occupied(batch.positions[i]) {
                out.t.push(batch.t[i]);
                out.deltas.push(batch.deltas[i]);
                out.positions.push(batch.positions[i]);
                if let Some(d) = batch.densities.get(i) {
                    out.densities.push(*d);
                }
                if let Some(w) = batch.weights.get(i) {
                    out.weights.push(*w);
                }
            }
        }
        out
    }

    /// World-space point drawn uniformly inside every voxel, in voxel order.
    pub fn random_voxel_points(&self, rng: &mut impl Rng) -> Vec<Vec3> {
        let r = self.resolution;
        let size: Vec<f64> = (0..3)
            .map(|a| (self.aabb.max[a] - self.aabb.min[a]) / r as f64)
            .collect();
        let mut pts = Vec::with_capacity(self.voxel_count());
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    let c = [x, y, z];
                    let mut p = [0.0; 3];
                    for a in 0..3 {
                        p[a] = self.aabb.min[a] + (c[a] as f64 + rng.gen::<f64>()) * size[a];
                    }
                    pts.push(p);
                }
            }
        }
        pts
    }

    /// `ema ← max(ema·decay, σ(random point in voxel))`, then
    /// `bit ← ema > threshold`, for every voxel.
    pub fn update<F>(&mut self, density_fn: F, rng: &mut impl Rng) -> Result<()>
    where
        F: Fn(&[Vec3]) -> Result<Vec<f64>>,
    {
        let pts = self.random_voxel_points(rng);
        let sigma = density_fn(&pts)?;
        if sigma.len() != pts.len() {
            return Err(Error::Shape(format!(
                "density function returned {} values for {} points",
                sigma.len(),
                pts.len()
            )));
        }
        let decay = self.decay;
        for (e, s) in self.density_ema.iter_mut().zip(&sigma) {
            *e = ((*e as f64) * decay).max(*s) as f32;
        }
        self.refresh_bits();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const IDENTITY: [[f64; 4]; 4] = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];

    #[test]
    fn centre_ray_of_identity_camera_looks_down_minus_z() {
        let cam = Camera {
            c2w: IDENTITY,
            width: 4,
            height: 4,
            focal: 3.0,
        };
        // Even sizes have no centre pixel; use an odd image.
        let cam = Camera {
            width: 5,
            height: 5,
            ..cam
        };
        let r = generate_rays(&cam, &[(2, 2)]).unwrap()[0];
        assert_eq!(r.origin, [0.0; 3]);
        assert!((r.dir[2] + 1.0).abs() < 1e-15 && r.dir[0].abs() < 1e-15 && r.dir[1].abs() < 1e-15);
    }

    #[test]
    fn corner_pixel_angle_matches_pinhole_geometry() {
        let cam = Camera::from_fov_x(IDENTITY, 64, 48, 0.8);
        let r = generate_rays(&cam, &[(0, 0)]).unwrap()[0];
        let dx: f64 = 32.0 - 0.5;
        let dy: f64 = 24.0 - 0.5;
        let expected = ((dx * dx + dy * dy).sqrt() / cam.focal).atan();
        let angle = (-r.dir[2]).acos();
        assert!((angle - expected).abs() < 1e-12);
        assert!(r.dir[0] < 0.0 && r.dir[1] > 0.0);
    }

    #[test]
    fn degenerate_pose_and_focal_rejected() {
        let mut c2w = IDENTITY;
        c2w[2] = [0.0; 4];
        let cam = Camera {
            c2w,
            width: 2,
            height: 2,
            focal: 1.0,
        };
        assert!(generate_rays(&cam, &[(0, 0)]).is_err());
        let cam = Camera {
            c2w: IDENTITY,
            width: 2,
            height: 2,
            focal: 0.0,
        };
        assert!(generate_rays(&cam, &[(0, 0)]).is_err());
    }

    #[test]
    fn aabb_axis_cases() {
        let b = Aabb::cube(0.5);
        let r = Ray {
            origin: [0.0, 0.0, -2.0],
            dir: [0.0, 0.0, 1.0],
            t_near: 0.0,
            t_far: f64::INFINITY,
        };
        assert_eq!(intersect_aabb(&r, &b), Some((1.5, 2.5)));
        let miss = Ray {
            origin: [0.0, 5.0, 0.0],
            dir: [1.0, 0.0, 0.0],
            ..r
        };
        assert_eq!(intersect_aabb(&miss, &b), None);
        let inside = Ray {
            origin: [0.0; 3],
            dir: [1.0, 0.0, 0.0],
            ..r
        };
        assert_eq!(intersect_aabb(&inside, &b), Some((0.0, 0.5)));
        let behind = Ray {
            origin: [0.0, 0.0, 2.0],
            dir: [0.0, 0.0, 1.0],
            ..r
        };
        assert_eq!(intersect_aabb(&behind, &b), None);
    }

    #[test]
    fn stratified_midpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Ray {
            origin: [0.0; 3],
            dir: [1.0, 0.0, 0.0],
            t_near: 0.0,
            t_far: 1.0,
        };
        let b = sample_stratified(&r, 4, false, &mut rng);
        assert_eq!(b.t, vec![0.125, 0.375, 0.625, 0.875]);
        let one = sample_stratified(
            &Ray {
                t_near: 2.0,
                t_far: 3.0,
                ..r
            },
            1,
            false,
            &mut rng,
        );
        assert_eq!(one.t, vec![2.5]);
        assert_eq!(one.deltas, vec![1.0]);
    }

    fn grid() -> OccupancyGrid {
        OccupancyGrid::new(8, Aabb::cube(0.5), 0.95, 0.01)
    }

    #[test]
    fn filter_all_set_and_all_clear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Ray {
            origin: [-0.5, 0.1, 0.2],
            dir: [1.0, 0.0, 0.0],
            t_near: 0.0,
            t_far: 1.0,
        };
        let b = sample_stratified(&r, 16, true, &mut rng);
        let mut g = grid();
        assert_eq!(g.filter_occupied(&b), b);
        g.bits.iter_mut().for_each(|b| *b = false);
        assert!(g.filter_occupied(&b).is_empty());
    }

    #[test]
    fn occupancy_update_constant_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = grid();
        for _ in 0..3 {
            g.update(|p| Ok(vec![0.0; p.len()]), &mut rng).unwrap();
        }
        assert_eq!(g.occupied_fraction(), 0.0);
        g.update(|p| Ok(vec![1e6; p.len()]), &mut rng).unwrap();
        assert_eq!(g.occupied_fraction(), 1.0);
    }

    #[test]
    fn occupancy_matches_analytic_sphere_outside_boundary_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = OccupancyGrid::new(32, Aabb::cube(0.5), 0.95, 0.01);
        let radius = 0.3;
        g.update(
            |p| Ok(p.iter().map(|x| if norm(*x) < radius { 40.0 } else { 0.0 }).collect()),
            &mut rng,
        )
        .unwrap();
        let voxel: f64 = 1.0 / 32.0;
        let band = voxel * 3f64.sqrt();
        let r = g.resolution;
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    let c = [x, y, z].map(|v| -0.5 + (v as f64 + 0.5) * voxel);
                    let d = norm(c) - radius;
                    if d.abs() > band {
                        assert_eq!(g.bits[x + r * (y + r * z)], d < 0.0);
                    }
                }
            }
        }
    }
}
