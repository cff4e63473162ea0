//! Shared fixtures for the integration tests (also pulled into the
//! acceptance harness by path).
#![allow(dead_code)]

use lgsplat_core::losses::{total_loss, LossBreakdown, LossOptions, LossTargets, LossWeights};
use lgsplat_core::rasterizer::{layout, render, render_backward, BufferGrads, RenderOutput, RenderSettings};
use lgsplat_core::{DepthNormalMaps, DistortedCamera, Gaussian, GaussianSet, Image, RadialUnits};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera at the origin looking down +z with mild normalized distortion.
pub fn small_camera(w: usize, h: usize) -> DistortedCamera {
    let mut cam = DistortedCamera::pinhole(0.9 * w as f64, 0.9 * w as f64, w as f64 / 2.0, h as f64 / 2.0, w, h);
    cam.k1 = 0.02;
    cam.k2 = 0.001;
    cam.radial_units = RadialUnits::Normalized;
    cam
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let q = UnitQuaternion::from_scaled_axis(axis.normalize() * rng.random_range(0.0..3.0));
    [q.w, q.i, q.j, q.k]
}

/// Up to `n` anisotropic Gaussians spread over the view of
/// [`small_camera`], with well-separated depths and distinct axis scales.
/// Depth grows with the index so sort order is stable under small steps.
pub fn gradient_scene(seed: u64, n: usize, sh_degree: usize) -> GaussianSet {
    let mut rng = rng(seed);
    let sh_count = lgsplat_core::sh::coeff_count(sh_degree);
    let mut gs = Vec::new();
    for i in 0..n {
        let depth = 4.0 + 0.37 * i as f64 + rng.random_range(0.0..0.1);
        let x = rng.random_range(-0.45..0.45) * depth;
        let y = rng.random_range(-0.35..0.35) * depth;
        let base = rng.random_range(-2.9f64..-2.2);
        let log_scale = Vector3::new(base, base + 0.35, base + 0.7);
        let opacity: f64 = rng.random_range(0.25..0.7);
        let mut sh = vec![[0.0; 3]; sh_count];
        sh[0] = [rng.random_range(0.2..1.4), rng.random_range(0.2..1.4), rng.random_range(0.2..1.4)];
        for c in sh.iter_mut().skip(1) {
            *c = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
        }
        gs.push(Gaussian {
            position: Vector3::new(x, y, depth),
            rotation: random_quat(&mut rng),
            log_scale: log_scale + Vector3::repeat(depth.ln()),
            logit_opacity: (opacity / (1.0 - opacity)).ln(),
            sh,
        });
    }
    GaussianSet::new(sh_degree, gs)
}

/// `n` random Gaussians in front of the camera, for renderer comparisons.
pub fn random_scene(seed: u64, n: usize, sh_degree: usize) -> GaussianSet {
    let mut rng = rng(seed);
    let sh_count = lgsplat_core::sh::coeff_count(sh_degree);
    let gs = (0..n)
        .map(|_| {
            let depth = rng.random_range(2.0..12.0);
            let sh = (0..sh_count)
                .map(|k| {
                    let s = if k == 0 { 1.5 } else { 0.3 };
                    [rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)]
                })
                .collect();
            Gaussian::new(
                Vector3::new(
                    rng.random_range(-0.6..0.6) * depth,
                    rng.random_range(-0.5..0.5) * depth,
                    depth,
                ),
                random_quat(&mut rng),
                Vector3::new(
                    rng.random_range(-3.5..-1.0),
                    rng.random_range(-3.5..-1.0),
                    rng.random_range(-3.5..-1.0),
                ),
                rng.random_range(-3.0..3.0),
                sh,
            )
        })
        .collect();
    GaussianSet::new(sh_degree, gs)
}

/// Copy of `set` with parameter `slot` (see `layout`) of Gaussian `i`
/// shifted by `h`. Quaternions are not renormalized.
pub fn perturbed(set: &GaussianSet, i: usize, slot: usize, h: f64) -> GaussianSet {
    let mut s = set.clone();
    let g = &mut s.gaussians[i];
    match slot {
        0..=2 => g.position[slot] += h,
        3..=6 => g.rotation[slot - 3] += h,
        7..=9 => g.log_scale[slot - 7] += h,
        layout::OPACITY => g.logit_opacity += h,
        _ => {
            let k = slot - layout::SH;
            g.sh[k / 3][k % 3] += h;
        }
    }
    s
}

/// Random upstream weights on every render buffer.
pub fn random_buffer_weights(seed: u64, w: usize, h: usize) -> BufferGrads {
    let mut rng = rng(seed);
    let mut g = BufferGrads::zeros(w, h);
    g.color.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    g.depth.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
    g.normal
        .iter_mut()
        .for_each(|v| *v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    g.alpha.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    g
}

/// `Σ weights · buffers`; depth and normal only count on valid pixels, as
/// in the renderer's backward pass.
pub fn buffer_functional(out: &RenderOutput, g: &BufferGrads) -> f64 {
    let mut s = 0.0;
    for (a, b) in out.color.data.iter().zip(&g.color) {
        s += a * b;
    }
    for p in 0..out.depth.len() {
        s += out.alpha[p] * g.alpha[p];
        if out.valid[p] {
            s += out.depth[p] * g.depth[p] + out.normal[p].dot(&g.normal[p]);
        }
    }
    s
}

/// The gradient tolerance: `|a − n| ≤ abs + rel · max(|a|, |n|)`.
pub fn close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    (analytic - numeric).abs() <= abs + rel * analytic.abs().max(numeric.abs())
}

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_REL: f64 = 2e-3;
pub const GRAD_ABS: f64 = 1e-6;

/// A mismatch found by [`check_render_gradients`].
#[derive(Debug)]
pub struct Mismatch {
    pub gaussian: usize,
    pub slot: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose numeric gradient exceeds the absolute tolerance.
    pub nontrivial: usize,
    pub mismatches: Vec<Mismatch>,
}

/// Central differences of `f` at every parameter of every Gaussian,
/// compared against `analytic` (flat, `layout` order).
pub fn compare_all(set: &GaussianSet, analytic: &[f64], f: impl Fn(&GaussianSet) -> f64) -> GradCheck {
    let stride = layout::stride(set.sh_count());
    let mut out = GradCheck::default();
    for i in 0..set.len() {
        for slot in 0..stride {
            let plus = f(&perturbed(set, i, slot, FD_STEP));
            let minus = f(&perturbed(set, i, slot, -FD_STEP));
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[i * stride + slot];
            out.checked += 1;
            if numeric.abs() > GRAD_ABS {
                out.nontrivial += 1;
            }
            if !close(a, numeric, GRAD_REL, GRAD_ABS) {
                out.mismatches.push(Mismatch {
                    gaussian: i,
                    slot,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    out
}

/// Rasterizer gradients of a random linear functional of all render
/// buffers, checked against central differences.
pub fn check_render_gradients(seed: u64, n: usize, sh_degree: usize) -> GradCheck {
    let cam = small_camera(32, 32);
    let set = gradient_scene(seed, n, sh_degree);
    let settings = RenderSettings {
        background: [0.1, 0.2, 0.3],
    };
    let weights = random_buffer_weights(seed ^ 0x5eed, 32, 32);
    let out = render(&set, &cam, &settings).unwrap();
    let grads = render_backward(&set, &cam, &out, &weights).unwrap();
    compare_all(&set, &grads.params, |s| buffer_functional(&render(s, &cam, &settings).unwrap(), &weights))
}

/// Synthetic targets far from any render so the L1 kinks stay out of
/// reach of the finite-difference step.
pub fn loss_targets(seed: u64, w: usize, h: usize) -> (Image, DepthNormalMaps) {
    let mut rng = rng(seed);
    let mut img = Image::new(w, h, 3);
    img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    let mut maps = DepthNormalMaps::invalid(w, h);
    for p in 0..w * h {
        if rng.random_range(0.0..1.0) < 0.8 {
            maps.valid[p] = true;
            maps.depth[p] = rng.random_range(20.0..30.0);
            maps.normal[p] =
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0).normalize();
            maps.sample_uv[p] = [(p % w) as f64 + 0.5, (p / w) as f64 + 0.5];
        }
    }
    (img, maps)
}

/// Loss components checked by [`check_loss_gradients`].
pub const LOSS_COMPONENTS: [&str; 5] = ["l1", "dssim", "depth", "normal", "scale"];

fn component_value(b: &LossBreakdown, component: &str) -> f64 {
    match component {
        "l1" => b.l1,
        "dssim" => b.dssim,
        "depth" => b.depth,
        "normal" => b.normal,
        "scale" => b.scale,
        "total" => b.total,
        other => panic!("unknown loss component {other}"),
    }
}

/// Weights under which the objective is `photometric + component`; the
/// photometric part is plain L1 except for D-SSIM itself.
fn weights_with(component: &str) -> LossWeights {
    let base = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        lambda: 0.0,
    };
    match component {
        "l1" => base,
        "dssim" => LossWeights { lambda: 1.0, ..base },
        "depth" => LossWeights { alpha: 1.0, ..base },
        "normal" => LossWeights { beta: 1.0, ..base },
        "scale" => LossWeights { gamma: 1.0, ..base },
        "total" => LossWeights::default(),
        other => panic!("unknown loss component {other}"),
    }
}

fn analytic_loss_grad(
    set: &GaussianSet,
    cam: &DistortedCamera,
    targets: &LossTargets<'_>,
    weights: &LossWeights,
) -> Vec<f64> {
    let out = render(set, cam, &RenderSettings::default()).unwrap();
    let loss = total_loss(&out, targets, set, weights, &LossOptions::default()).unwrap();
    let mut grads = render_backward(set, cam, &out, &loss.buffer_grads).unwrap();
    lgsplat_core::losses::add_scale_grad(&mut grads, &loss.log_scale_grad);
    grads.params
}

/// Gradient of one loss component (or `"total"`) through the rasterizer,
/// against central differences of that component's value. Depth, normal
/// and scale terms are isolated by subtracting the L1-only gradient.
pub fn check_loss_gradients(seed: u64, n: usize, component: &str) -> GradCheck {
    let cam = small_camera(32, 32);
    let set = gradient_scene(seed, n, 1);
    let (img, maps) = loss_targets(seed + 1, 32, 32);
    let targets = LossTargets {
        image: &img,
        lidar: Some(&maps),
    };
    let weights = weights_with(component);
    let mut analytic = analytic_loss_grad(&set, &cam, &targets, &weights);
    if matches!(component, "depth" | "normal" | "scale") {
        let base = analytic_loss_grad(&set, &cam, &targets, &weights_with("l1"));
        for (a, b) in analytic.iter_mut().zip(base) {
            *a -= b;
        }
    }
    let value = |s: &GaussianSet| {
        let out = render(s, &cam, &RenderSettings::default()).unwrap();
        let b = total_loss(&out, &targets, s, &weights, &LossOptions::default()).unwrap().breakdown;
        component_value(&b, component)
    };
    compare_all(&set, &analytic, value)
}

/// Fraction of `project_jacobian` entries matching central differences of
/// `project` at random in-view points.
pub fn check_projection_jacobian(seed: u64, points: usize) -> (usize, usize) {
    let mut rng = rng(seed);
    let cam = small_camera(32, 32);
    let mut ok = 0;
    let mut total = 0;
    for _ in 0..points {
        let z = rng.random_range(2.0..10.0);
        let p = Vector3::new(rng.random_range(-0.4..0.4) * z, rng.random_range(-0.4..0.4) * z, z);
        let j = lgsplat_core::camera::project_jacobian(&cam, &p).unwrap();
        for c in 0..3 {
            let mut plus = p;
            let mut minus = p;
            plus[c] += FD_STEP;
            minus[c] -= FD_STEP;
            let a = lgsplat_core::camera::project(&cam, &plus).unwrap();
            let b = lgsplat_core::camera::project(&cam, &minus).unwrap();
            let num = [(a.u - b.u) / (2.0 * FD_STEP), (a.v - b.v) / (2.0 * FD_STEP)];
            for r in 0..2 {
                total += 1;
                if close(j[(r, c)], num[r], GRAD_REL, GRAD_ABS) {
                    ok += 1;
                }
            }
        }
    }
    (ok, total)
}

/// Largest per-channel difference between the tiled renderer and the
/// reference renderer on a random `n`-Gaussian scene.
pub fn renderer_gap(seed: u64, n: usize, w: usize, h: usize) -> f64 {
    let set = random_scene(seed, n, (seed % 4) as usize);
    let cam = small_camera(w, h);
    let settings = RenderSettings {
        background: [0.1, 0.4, 0.7],
    };
    let fast = render(&set, &cam, &settings).unwrap();
    let slow = lgsplat_core::rasterizer::reference_render(&set, &cam, &settings).unwrap();
    fast.color
        .data
        .iter()
        .zip(&slow.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
