mod common;

use common::*;
use lgsplat_core::rasterizer::{render, RenderSettings};
use lgsplat_core::{DistortedCamera, Gaussian, GaussianSet};
use nalgebra::{UnitQuaternion, Vector3};

#[test]
fn tiled_matches_reference() {
    for seed in 0..8 {
        let gap = renderer_gap(seed, 200, 64, 48);
        assert!(gap < 1e-4, "seed {seed}: {gap}");
    }
}

#[test]
fn alpha_is_a_probability() {
    let set = random_scene(3, 150, 1);
    let out = render(&set, &small_camera(48, 40), &RenderSettings::default()).unwrap();
    assert!(out.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
    for p in 0..out.alpha.len() {
        if out.alpha[p] < 1e-4 {
            assert!(!out.valid[p]);
        }
        if out.valid[p] {
            assert!((out.normal[p].norm() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn empty_set_renders_background() {
    let set = GaussianSet::new(0, vec![]);
    let settings = RenderSettings {
        background: [0.2, 0.3, 0.4],
    };
    let out = render(&set, &small_camera(20, 20), &settings).unwrap();
    assert!(out.alpha.iter().all(|a| *a == 0.0));
    for px in out.color.data.chunks(3) {
        assert_eq!(px, &[0.2, 0.3, 0.4]);
    }
}

#[test]
fn thread_count_does_not_change_the_image() {
    let set = random_scene(9, 300, 2);
    let cam = small_camera(64, 64);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| render(&set, &cam, &RenderSettings::default()).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.color.data, b.color.data);
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.alpha, b.alpha);
}

/// Dense, flat, nearly opaque Gaussians tiling the plane through `origin`
/// spanned by `e1`, `e2`.
fn gaussian_plane(origin: Vector3<f64>, e1: Vector3<f64>, e2: Vector3<f64>, half: i32, step: f64) -> GaussianSet {
    let normal = e1.cross(&e2).normalize();
    let rot = UnitQuaternion::face_towards(&normal, &e1);
    let q = [rot.w, rot.i, rot.j, rot.k];
    let mut gs = Vec::new();
    for i in -half..=half {
        for j in -half..=half {
            let p = origin + e1 * (i as f64 * step) + e2 * (j as f64 * step);
            let mut g = Gaussian::isotropic(p, step, 0.99, [0.5; 3]);
            g.rotation = q;
            // face_towards maps local z onto the normal
            g.log_scale = Vector3::new(step.ln(), step.ln(), (1e-4f64).ln());
            gs.push(g);
        }
    }
    GaussianSet::new(0, gs)
}

#[test]
fn plane_of_gaussians_renders_plane_depth() {
    let cam = DistortedCamera::pinhole(80.0, 80.0, 24.0, 20.0, 48, 40).look_at(
        Vector3::new(1.0, -3.0, 10.0),
        Vector3::zeros(),
        Vector3::z(),
    );
    let set = gaussian_plane(Vector3::zeros(), Vector3::x(), Vector3::y(), 100, 0.1);
    let out = render(&set, &cam, &RenderSettings::default()).unwrap();
    let center = cam.center();
    let mut checked = 0;
    for p in 0..out.depth.len() {
        if out.alpha[p] <= 0.99 {
            continue;
        }
        let uv = [(p % cam.width) as f64 + 0.5, (p / cam.width) as f64 + 0.5];
        let ray_cam = lgsplat_core::camera::pixel_ray(&cam, uv).unwrap();
        let ray = cam.rotation.transpose() * ray_cam;
        let truth = -center.z / ray.z * ray_cam.z;
        assert!(((out.depth[p] - truth) / truth).abs() < 0.01, "pixel {p}: {} vs {truth}", out.depth[p]);
        checked += 1;
    }
    assert!(checked > out.depth.len() / 2, "only {checked} opaque pixels");
}
