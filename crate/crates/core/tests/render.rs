mod common;

use common::{random_dir, random_rays, sample_rays, small_model};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfr::render::{
    compute_weights, render_image, render_rays, render_standard, render_vfr, RenderMode, RenderOptions, SamplerSettings,
};
use vfr::sampling::{Aabb, Camera, OccupancyGrid, SampleBatch};
use vfr::scene::look_at;

fn opts() -> RenderOptions {
    RenderOptions::new(Aabb::cube(0.5), [1.0, 1.0, 1.0])
}

proptest! {
    #[test]
    fn weights_conserve_mass(pairs in prop::collection::vec((0.0f64..50.0, 0.0f64..0.2), 0..64)) {
        let (sigma, delta): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (w, t_final) = compute_weights(&sigma, &delta).unwrap();
        let sum: f64 = w.iter().sum();
        prop_assert!((sum + t_final - 1.0).abs() < 1e-6);
        let optical: f64 = sigma.iter().zip(&delta).map(|(s, d)| s * d).sum();
        prop_assert!((sum - (1.0 - (-optical).exp())).abs() < 1e-6);
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn weight_arrays_of_different_length_are_rejected() {
    assert!(compute_weights(&[1.0, 2.0], &[0.1]).is_err());
}

#[test]
fn linear_networks_make_both_renderers_agree() {
    let mut o = opts();
    o.linear_test = true;
    for seed in 0..10 {
        let model = small_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let rays = random_rays(&mut rng, 5);
        let batches = sample_rays(&rays, 32, &mut rng);
        let dirs: Vec<_> = rays.iter().map(|r| r.dir).collect();
        let std = render_rays(&model, &batches, &dirs, RenderMode::Standard, &o).unwrap();
        let vfr = render_rays(&model, &batches, &dirs, RenderMode::Vfr, &o).unwrap();
        for (a, b) in std.iter().zip(&vfr) {
            for c in 0..3 {
                let scale = a.rgb[c].abs().max(b.rgb[c].abs()).max(1e-12);
                assert!((a.rgb[c] - b.rgb[c]).abs() / scale < 1e-6, "{:?} vs {:?}", a.rgb, b.rgb);
            }
        }
    }
}

#[test]
fn empty_batch_renders_background() {
    let model = small_model(1);
    let o = RenderOptions::new(Aabb::cube(0.5), [0.2, 0.4, 0.6]);
    let empty = SampleBatch::default();
    for out in [
        render_standard(&model, &empty, [0.0, 0.0, 1.0], &o).unwrap(),
        render_vfr(&model, &empty, [0.0, 0.0, 1.0], &o).unwrap(),
    ] {
        assert_eq!(out.rgb, [0.2, 0.4, 0.6]);
        assert_eq!(out.opacity, 0.0);
    }
    let vfr = render_vfr(&model, &empty, [0.0, 0.0, 1.0], &o).unwrap();
    assert!(vfr.rendered_feature.unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn one_opaque_sample_makes_vfr_match_standard() {
    let mut model = small_model(2);
    // A large density bias saturates the first sample's weight.
    let last = model.bundle.density_mapper.biases.len() - 1;
    model.bundle.density_mapper.biases[last].values[0] = 14.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for ray in random_rays(&mut rng, 8) {
        let batch = &sample_rays(&[ray], 16, &mut rng)[0];
        let s = render_standard(&model, batch, ray.dir, &opts()).unwrap();
        let v = render_vfr(&model, batch, ray.dir, &opts()).unwrap();
        assert!(s.opacity > 0.999_999);
        for c in 0..3 {
            assert!((s.rgb[c] - v.rgb[c]).abs() < 1e-3, "{:?} vs {:?}", s.rgb, v.rgb);
        }
    }
}

#[test]
fn eval_counts_per_ray() {
    let model = small_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rays = random_rays(&mut rng, 6);
    let batches = sample_rays(&rays, 20, &mut rng);
    let dirs: Vec<_> = rays.iter().map(|r| r.dir).collect();
    model.counters.reset();
    let std = render_rays(&model, &batches, &dirs, RenderMode::Standard, &opts()).unwrap();
    let retained: usize = batches.iter().map(SampleBatch::len).sum();
    assert_eq!(model.counters.main_rows(), retained as u64);
    for (out, b) in std.iter().zip(&batches) {
        assert_eq!(out.nn_eval_count, b.len());
    }
    model.counters.reset();
    let vfr = render_rays(&model, &batches, &dirs, RenderMode::Vfr, &opts()).unwrap();
    assert_eq!(model.counters.main_rows(), 6);
    assert!(vfr.iter().all(|o| o.nn_eval_count == 1));
}

#[test]
fn colours_stay_inside_the_unit_cube() {
    let model = small_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dim = model.feature_dim();
    for _ in 0..1000 {
        let f: Vec<f64> = (0..dim).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let d = random_dir(&mut rng);
        for c in model.eval_main(&f, d).unwrap() {
            assert!(c > 0.0 && c < 1.0);
        }
    }
}

fn small_camera(width: usize, height: usize) -> Camera {
    Camera::from_fov_x(look_at([0.3, -1.2, 0.8]), width, height, 0.8)
}

#[test]
fn one_pixel_image_equals_a_single_render() {
    let model = small_model(8);
    let cam = small_camera(1, 1);
    let s = SamplerSettings {
        aabb: Aabb::cube(0.5),
        samples_per_ray: 32,
        occupancy: None,
    };
    let img = render_image(&model, &cam, RenderMode::Vfr, &s, &opts()).unwrap();
    let ray = vfr::sampling::generate_rays(&cam, &[(0, 0)]).unwrap()[0];
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut batch = vfr::render::sample_ray(&ray, &s, false, &mut rng);
    vfr::render::early_terminate(&model, &mut batch, &s.aabb).unwrap();
    let direct = render_vfr(&model, &batch, ray.dir, &opts()).unwrap();
    for c in 0..3 {
        assert_eq!(img.rgb[c], direct.rgb[c] as f32);
    }
}

#[test]
fn image_eval_counts() {
    let model = small_model(9);
    let cam = small_camera(12, 10);
    let s = SamplerSettings {
        aabb: Aabb::cube(0.5),
        samples_per_ray: 24,
        occupancy: None,
    };
    let vfr = render_image(&model, &cam, RenderMode::Vfr, &s, &opts()).unwrap();
    assert_eq!(vfr.total_evals(), 120);
    let std = render_image(&model, &cam, RenderMode::Standard, &s, &opts()).unwrap();
    let mean = std.mean_evals();
    assert!((1.0..=24.0).contains(&mean), "{mean}");
    assert_eq!(std.eval_histogram().iter().sum::<u64>(), 120);
}

#[test]
fn sphere_occupancy_retains_the_volume_fraction() {
    let aabb = Aabb::cube(0.5);
    let mut occ = OccupancyGrid::new(32, aabb, 0.95, 0.01);
    let radius = 0.35f64;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    occ.update(
        |pts| {
            Ok(pts
                .iter()
                .map(|p| {
                    if p.iter().map(|v| v * v).sum::<f64>() < radius * radius {
                        50.0
                    } else {
                        0.0
                    }
                })
                .collect())
        },
        &mut rng,
    )
    .unwrap();
    let s = SamplerSettings {
        aabb,
        samples_per_ray: 64,
        occupancy: None,
    };
    let (mut kept, mut inside, mut total) = (0usize, 0usize, 0usize);
    for ray in random_rays(&mut rng, 400) {
        let b = vfr::render::sample_ray(&ray, &s, true, &mut rng);
        total += b.len();
        kept += occ.filter_occupied(&b).len();
        inside += b
            .positions
            .iter()
            .filter(|p| p.iter().map(|v| v * v).sum::<f64>() < radius * radius)
            .count();
    }
    let ratio = kept as f64 / inside as f64;
    assert!(total > kept);
    assert!((0.9..1.1).contains(&ratio), "retained {kept} vs {inside} inside");
}
