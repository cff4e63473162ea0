use lgsplat_core::camera::{distort, project, undistort};
use lgsplat_core::densify::{densify_pass, split, DensifyConfig};
use lgsplat_core::eval::psnr;
use lgsplat_core::io::{gaussians_from_ply_bytes, gaussians_to_ply_bytes};
use lgsplat_core::losses::{depth_loss, l1_loss, ssim, DepthLossMode};
use lgsplat_core::spatial::KdTree;
use lgsplat_core::trainer::{adam_step, AdamState};
use lgsplat_core::{DistortedCamera, Gaussian, GaussianSet, Image, LidarCloud, RadialUnits};
use nalgebra::Vector3;
use proptest::prelude::*;

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn camera() -> impl Strategy<Value = DistortedCamera> {
    (40.0..120.0f64, 0.0..0.08f64, 0.0..0.01f64).prop_map(|(f, k1, k2)| {
        let mut cam = DistortedCamera::pinhole(f, f * 1.1, 48.0, 36.0, 96, 72);
        cam.k1 = k1;
        cam.k2 = k2;
        cam.radial_units = RadialUnits::Normalized;
        cam
    })
}

fn gaussian() -> impl Strategy<Value = Gaussian> {
    (
        vec3(20.0),
        prop::array::uniform4(-1.0..1.0f64),
        vec3(3.0),
        -6.0..6.0f64,
        prop::collection::vec(prop::array::uniform3(-2.0..2.0f64), 4),
    )
        .prop_filter("quaternion away from zero", |(_, q, ..)| q.iter().map(|v| v * v).sum::<f64>() > 0.01)
        .prop_map(|(p, q, ls, o, sh)| Gaussian::new(p, q, ls, o, sh))
}

fn image(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..1.0f64, w * h * 3).prop_map(move |d| Image::from_data(w, h, 3, d).unwrap())
}

/// A bumpy ground patch so that normals vary.
fn terrain() -> impl Strategy<Value = LidarCloud> {
    (prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 40..120), 0.0..0.4f64).prop_map(|(xy, amp)| {
        let pts = xy
            .into_iter()
            .map(|(x, y)| Vector3::new(x, y, amp * (0.7 * x).sin() * (0.5 * y).cos()))
            .collect();
        LidarCloud::new(pts, None).unwrap()
    })
}

proptest! {
    #[test]
    fn undistort_inverts_distort(cam in camera(), u in 0.0..96.0f64, v in 0.0..72.0f64) {
        let ideal = undistort(&cam, [u, v]).unwrap();
        let back = distort(&cam, ideal);
        prop_assert!((back[0] - u).abs() < 1e-6 && (back[1] - v).abs() < 1e-6);
    }

    #[test]
    fn zero_distortion_is_pinhole(f in 10.0..200.0f64, p in vec3(5.0), z in 0.5..50.0f64) {
        let cam = DistortedCamera::pinhole(f, f, 32.0, 24.0, 64, 48);
        let q = Vector3::new(p.x, p.y, z);
        let px = project(&cam, &q).unwrap();
        prop_assert_eq!(px.u, q.x / q.z * f + 32.0);
        prop_assert_eq!(px.v, q.y / q.z * f + 24.0);
        prop_assert_eq!(px.depth, z);
    }

    #[test]
    fn kd_tree_agrees_with_brute_force(
        pts in prop::collection::vec(vec3(10.0), 1..200),
        q in vec3(12.0),
    ) {
        let tree = KdTree::build(&pts).unwrap();
        let (i, d) = tree.nearest(&pts, &q);
        let best = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
        prop_assert!((d - best).abs() < 1e-12);
        prop_assert!(((pts[i] - q).norm() - best).abs() < 1e-12);
        let first = pts.iter().position(|p| (p - q).norm() == best).unwrap();
        prop_assert_eq!(i, first);
    }

    #[test]
    fn splits_stay_in_the_tangent_plane(
        cloud in terrain(),
        gs in prop::collection::vec(gaussian(), 1..20),
    ) {
        let set = GaussianSet::new(1, gs);
        let idx: Vec<usize> = (0..set.len()).collect();
        let (out, origin, records) = split(&set, &idx, &cloud, &DensifyConfig::default());
        prop_assert_eq!(out.len(), 2 * set.len());
        prop_assert!(origin.iter().all(|o| o.is_none()));
        for r in &records {
            let n = r.normal.unwrap();
            if !r.degenerate {
                prop_assert!(r.direction.dot(&n).abs() <= 1e-9);
            }
            prop_assert!((r.direction.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn densify_pass_leaves_only_admissible_gaussians(
        cloud in terrain(),
        gs in prop::collection::vec(gaussian(), 1..40),
        grads in prop::collection::vec(0.0..1e-3f64, 40),
        sigma in 0.2..5.0f64,
    ) {
        let mut set = GaussianSet::new(1, gs);
        for i in 0..set.len() {
            set.grad_accum[i] = grads[i];
            set.weight_accum[i] = 1.0;
        }
        let cfg = DensifyConfig { sigma, ..Default::default() };
        match densify_pass(&set, &cloud, &cfg) {
            Ok(o) => {
                prop_assert_eq!(o.origin.len(), o.set.len());
                for g in &o.set.gaussians {
                    prop_assert!(cloud.nearest(&g.position).unwrap().1 <= sigma);
                    prop_assert!(g.opacity() >= cfg.epsilon);
                }
                prop_assert!(o.set.grad_accum.iter().all(|v| *v == 0.0));
            }
            Err(e) => prop_assert!(matches!(e, lgsplat_core::Error::EmptySet)),
        }
    }

    #[test]
    fn ply_save_load_save_is_byte_identical(gs in prop::collection::vec(gaussian(), 0..30)) {
        let set = GaussianSet::new(1, gs);
        let bytes = gaussians_to_ply_bytes(&set).unwrap();
        let back = gaussians_from_ply_bytes(&bytes).unwrap();
        prop_assert_eq!(back.len(), set.len());
        for (a, b) in set.gaussians.iter().zip(&back.gaussians) {
            prop_assert!((a.position - b.position).norm() <= 1e-5 * (1.0 + a.position.norm()));
            prop_assert!((a.logit_opacity - b.logit_opacity).abs() <= 1e-6 * (1.0 + a.logit_opacity.abs()));
        }
        prop_assert_eq!(gaussians_to_ply_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn psnr_falls_as_the_error_grows(img in image(12, 12), a in 0.01..0.2f64, b in 0.01..0.2f64) {
        prop_assume!((a - b).abs() > 1e-6);
        let shift = |s: f64| Image::from_data(12, 12, 3, img.data.iter().map(|v| v + s).collect()).unwrap();
        let (pa, pb) = (psnr(&shift(a), &img).unwrap(), psnr(&shift(b), &img).unwrap());
        prop_assert_eq!(a < b, pa > pb);
        prop_assert_eq!(psnr(&img, &shift(a)).unwrap(), pa);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in image(14, 13), b in image(14, 13)) {
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_equality(
        a in image(8, 8),
        b in image(8, 8),
        d in prop::collection::vec(0.5..40.0f64, 64),
        t in prop::collection::vec(0.5..40.0f64, 64),
        mask in prop::collection::vec(any::<bool>(), 64),
    ) {
        prop_assert!(l1_loss(&a, &b).unwrap().value >= 0.0);
        prop_assert_eq!(l1_loss(&a, &a).unwrap().value, 0.0);
        let dl = depth_loss(&d, &t, &mask, DepthLossMode::L1).unwrap();
        let n = mask.iter().filter(|m| **m).count();
        let direct: f64 = (0..64).filter(|&i| mask[i]).map(|i| (d[i] - t[i]).abs()).sum::<f64>() / n.max(1) as f64;
        prop_assert!((dl.value - direct).abs() < 1e-12);
        prop_assert_eq!(depth_loss(&d, &d, &mask, DepthLossMode::L1).unwrap().value, 0.0);
        for i in 0..64 {
            if !mask[i] {
                prop_assert_eq!(dl.grad[i], 0.0);
            }
        }
    }

    #[test]
    fn first_adam_step_moves_by_the_learning_rate(
        g in prop::collection::vec(-1e3..1e3f64, 1..20),
        lr in 1e-5..1e-1f64,
    ) {
        let mut p = vec![0.0; g.len()];
        let mut s = AdamState::new(g.len());
        adam_step(&mut p, &g, &mut s, &vec![lr; g.len()]).unwrap();
        for (x, gi) in p.iter().zip(&g) {
            if gi.abs() > 1e-9 {
                prop_assert!((x + lr * gi.signum()).abs() < 1e-9 * lr.max(1.0));
            } else {
                prop_assert!(x.abs() <= lr);
            }
        }
    }
}
