//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use lgsplat_core::align::{correspondences_from_points, pose_error, refine_pose};
use lgsplat_core::camera::{distort, project, undistort};
use lgsplat_core::densify::{initialize_from_lidar, DensifyConfig};
use lgsplat_core::eval::{depth_mae, lidar_rmse, RmseDirection};
use lgsplat_core::io::load_ply_gaussians;
use lgsplat_core::lidar_maps::{densify_maps, splat_sparse};
use lgsplat_core::losses::LossWeights;
use lgsplat_core::rasterizer::{render, RenderSettings};
use lgsplat_core::testbed::{downsample_cloud, make_scene, perturb_camera, visible_features, SceneSpec, SyntheticScene};
use lgsplat_core::trainer::{split_views, train, CheckpointPolicy, TrainConfig, TrainOutput, View};
use lgsplat_core::{DistortedCamera, GaussianSet, LidarCloud};
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;
/// Hole-filling window of the LiDAR maps at testbed resolution.
const MAPS_WINDOW: usize = 5;
/// Split threshold calibrated for 96×72 testbed images.
const TAU_POS: f64 = 2e-3;
const SWEEP_ITERATIONS: usize = 600;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scene() -> &'static SyntheticScene {
    static SCENE: OnceLock<SyntheticScene> = OnceLock::new();
    SCENE.get_or_init(|| make_scene(&SceneSpec::standard(SEED)).unwrap())
}

fn views(cloud: &LidarCloud, cameras: &[DistortedCamera], idx: &[usize], maps: bool) -> Vec<View> {
    let s = scene();
    idx.iter()
        .map(|&i| View {
            camera: cameras[i].clone(),
            image: s.images[i].clone(),
            maps: maps.then(|| densify_maps(&splat_sparse(cloud, &cameras[i]), &cameras[i], MAPS_WINDOW)),
        })
        .collect()
}

fn sweep_config(sigma: f64) -> TrainConfig {
    TrainConfig {
        iterations: SWEEP_ITERATIONS,
        seed: 7,
        densify_start: 100,
        densify_stop: Some(450),
        densify: DensifyConfig {
            sigma,
            tau_pos: TAU_POS,
            ..Default::default()
        },
        val_interval: SWEEP_ITERATIONS,
        ..Default::default()
    }
}

/// Trains on the standard scene's training views with `cameras` standing in
/// for the poses the pipeline believes.
fn run(cloud: &LidarCloud, cameras: &[DistortedCamera], cfg: &TrainConfig, policy: &CheckpointPolicy) -> TrainOutput {
    let (tr, va, _) = split_views(cameras.len(), SEED);
    let init = initialize_from_lidar(cloud, 0).unwrap();
    train(&init, cloud, &views(cloud, cameras, &tr, true), &views(cloud, cameras, &va, false), cfg, policy).unwrap()
}

/// Mean depth MAE against ray-cast ground truth over the validation views,
/// rendered from the true poses.
fn validation_depth_mae(set: &GaussianSet) -> f64 {
    let s = scene();
    let (_, va, _) = split_views(s.cameras.len(), SEED);
    let mut sum = 0.0;
    for &i in &va {
        let out = render(set, &s.cameras[i], &RenderSettings::default()).unwrap();
        sum += depth_mae(&out.depth, &out.valid, &s.truth[i].depth, &s.truth[i].valid)
            .unwrap()
            .expect("overlap with ground truth");
    }
    sum / va.len() as f64
}

/// The σ = 1 run of the threshold sweep, logged with checkpoints after
/// every densification pass.
struct LoggedRun {
    out: TrainOutput,
    _dir: tempfile::TempDir,
}

fn sigma_run(sigma: f64) -> TrainOutput {
    let s = scene();
    run(&s.cloud, &s.cameras, &sweep_config(sigma), &CheckpointPolicy::default())
}

fn logged_run() -> &'static LoggedRun {
    static RUN: OnceLock<LoggedRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let s = scene();
        let dir = tempfile::tempdir().unwrap();
        let policy = CheckpointPolicy {
            dir: Some(dir.path().to_path_buf()),
            after_densify: true,
            interval: 0,
        };
        LoggedRun {
            out: run(&s.cloud, &s.cameras, &sweep_config(1.0), &policy),
            _dir: dir,
        }
    })
}

fn gradient_fidelity() -> Outcome {
    let mut checks = vec![
        ("render sh0", check_render_gradients(0, 20, 0)),
        ("render sh1", check_render_gradients(1, 12, 1)),
        ("render sh3", check_render_gradients(2, 6, 3)),
    ];
    for (k, c) in LOSS_COMPONENTS.into_iter().enumerate() {
        checks.push((c, check_loss_gradients(30 + k as u64, 10, c)));
    }
    let mut total = 0;
    for (name, c) in &checks {
        total += c.checked;
        if let Some(m) = c.mismatches.first() {
            return Err(format!("{name}: {} mismatches, first {m:?}", c.mismatches.len()));
        }
    }
    let (ok, n) = check_projection_jacobian(5, 500);
    ensure(ok == n, format!("{total} parameter gradients, projection Jacobian {ok}/{n}"))
}

fn renderer_equivalence() -> Outcome {
    let worst = (0..50).map(|seed| renderer_gap(seed, 200, 64, 48)).fold(0.0, f64::max);
    ensure(worst < 1e-4, format!("max difference {worst:.2e} over 50 scenes"))
}

fn densify_predicate() -> Outcome {
    let run = logged_run();
    let cfg = sweep_config(1.0).densify;
    let events = &run.out.densify_events;
    if events.is_empty() {
        return Err("no densification passes".into());
    }
    for e in events {
        if e.max_distance > cfg.sigma || e.min_opacity < cfg.epsilon {
            return Err(format!("iteration {}: distance {} opacity {}", e.iteration, e.max_distance, e.min_opacity));
        }
    }
    let mut worst: f64 = 0.0;
    for c in &run.out.checkpoints {
        let set = load_ply_gaussians(&c.path).unwrap();
        let rmse = lidar_rmse(&set, &scene().cloud, RmseDirection::GaussianToLidar).unwrap();
        worst = worst.max(rmse).max(c.lidar_rmse);
    }
    ensure(
        worst <= cfg.sigma && run.out.checkpoints.len() == events.len() + 1,
        format!("{} passes, {} checkpoints, max lidar_rmse {worst:.4}", events.len(), run.out.checkpoints.len()),
    )
}

fn split_orthogonality() -> Outcome {
    let mut n = 0;
    let mut worst: f64 = 0.0;
    for e in &logged_run().out.densify_events {
        for r in e.splits.iter().filter(|r| !r.degenerate) {
            worst = worst.max(r.direction.dot(&r.normal.expect("non-degenerate split has a normal")).abs());
            n += 1;
        }
    }
    ensure(n > 0 && worst <= 1e-9, format!("{n} splits, max |d·n| {worst:.2e}"))
}

fn threshold_sweep() -> Outcome {
    let mut counts = Vec::new();
    for sigma in [20.0, 10.0, 2.0] {
        counts.push(sigma_run(sigma).set.len());
    }
    counts.push(logged_run().out.set.len());
    ensure(counts.windows(2).all(|w| w[1] <= w[0]), format!("counts {counts:?} for σ = 20, 10, 2, 1"))
}

fn density_sweep() -> Outcome {
    let s = scene();
    let mut rmse = Vec::new();
    for fraction in [0.1, 0.25, 0.5, 0.75, 1.0] {
        let cloud = downsample_cloud(&s.cloud, fraction, 3).unwrap();
        let out = run(&cloud, &s.cameras, &sweep_config(1.0), &CheckpointPolicy::default());
        rmse.push(lidar_rmse(&out.set, &s.cloud, RmseDirection::GaussianToLidar).unwrap());
    }
    let shown: Vec<String> = rmse.iter().map(|r| format!("{r:.4}")).collect();
    ensure(rmse.windows(2).all(|w| w[1] <= w[0]), format!("lidar_rmse [{}] for 10..100%", shown.join(", ")))
}

fn geometric_ablation() -> Outcome {
    let s = scene();
    let mae = |weights: LossWeights| {
        let cfg = TrainConfig {
            weights,
            ..sweep_config(1.0)
        };
        validation_depth_mae(&run(&s.cloud, &s.cameras, &cfg, &CheckpointPolicy::default()).set)
    };
    let full = mae(LossWeights::default());
    let none = mae(LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        ..Default::default()
    });
    ensure(full < none, format!("depth MAE {full:.4} m with geometric losses, {none:.4} m without"))
}

/// Rotates the camera about its own vertical axis so the image shifts by
/// about `px` pixels.
fn pan(cam: &DistortedCamera, px: f64) -> DistortedCamera {
    let r = Rotation3::from_axis_angle(&Vector3::y_axis(), (px / cam.fx).atan());
    let mut out = cam.clone();
    out.rotation = r.matrix() * cam.rotation;
    out.translation = r * cam.translation;
    out
}

fn alignment() -> Outcome {
    let s = scene();
    let mut worst: (f64, f64) = (0.0, 0.0);
    for view in 0..s.cameras.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(view as u64);
        let features = visible_features(s, view, 120, 0.0, &mut rng).unwrap();
        let corr = correspondences_from_points(&s.cloud, &features);
        let start = perturb_camera(&s.cameras[view], 5.0, 2.0, &mut rng);
        let r = refine_pose(&start, &corr).map_err(|e| format!("view {view}: {e}"))?;
        let (rot, trans) = pose_error(&r.camera, &s.cameras[view]);
        worst = (worst.0.max(rot), worst.1.max(trans));
    }
    if worst.0 > 1e-4 || worst.1 > 1e-4 {
        return Err(format!("exact matches: pose error {:.2e} rad / {:.2e} m", worst.0, worst.1));
    }
    let mut rms = Vec::new();
    for seed in 0..20u64 {
        let view = (seed as usize * 7) % s.cameras.len();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let features = visible_features(s, view, 150, 0.5, &mut rng).unwrap();
        let corr = correspondences_from_points(&s.cloud, &features);
        let start = perturb_camera(&s.cameras[view], rng.random_range(0.5..5.0), rng.random_range(0.2..2.0), &mut rng);
        rms.push(refine_pose(&start, &corr).map_err(|e| format!("seed {seed}: {e}"))?.rms);
    }
    let (lo, hi) = rms.iter().fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(*r), b.max(*r)));
    if lo < 0.3 || hi > 0.7 {
        return Err(format!("0.5 px noise: RMS range [{lo:.3}, {hi:.3}]"));
    }
    let cfg = sweep_config(1.0);
    let aligned = validation_depth_mae(&run(&s.cloud, &s.cameras, &cfg, &CheckpointPolicy::default()).set);
    let shifted: Vec<DistortedCamera> = s.cameras.iter().map(|c| pan(c, 5.0)).collect();
    let misaligned = validation_depth_mae(&run(&s.cloud, &shifted, &cfg, &CheckpointPolicy::default()).set);
    ensure(
        misaligned > aligned,
        format!(
            "exact {:.1e} rad / {:.1e} m, noisy RMS [{lo:.3}, {hi:.3}] px, depth MAE {aligned:.4} aligned vs {misaligned:.4} at 5 px",
            worst.0, worst.1
        ),
    )
}

fn camera_model() -> Outcome {
    let cam = &scene().cameras[0];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let uv = [rng.random_range(0.0..cam.width as f64), rng.random_range(0.0..cam.height as f64)];
        let back = distort(cam, undistort(cam, uv).map_err(|e| e.to_string())?);
        worst = worst.max((back[0] - uv[0]).abs().max((back[1] - uv[1]).abs()));
    }
    let mut pinhole = DistortedCamera::pinhole(64.0, 60.0, 48.0, 36.0, 96, 72);
    pinhole.radial_units = cam.radial_units;
    let mut exact = true;
    for x in -20..=20 {
        for y in -15..=15 {
            for z in [1.0, 2.0, 8.0, 32.0] {
                let pc = Vector3::new(x as f64, y as f64, z);
                let px = project(&pinhole, &pc).unwrap();
                exact &= px.u == pc.x / pc.z * 64.0 + 48.0 && px.v == pc.y / pc.z * 60.0 + 36.0;
            }
            let ideal = [x as f64 + 48.0, y as f64 + 36.0];
            exact &= distort(&pinhole, ideal) == ideal && undistort(&pinhole, ideal).unwrap() == ideal;
        }
    }
    ensure(worst < 1e-6 && exact, format!("round trip {worst:.2e} px over 10^4 points, pinhole exact: {exact}"))
}

fn lgsplat(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lgsplat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    lgsplat(&["synth", "--out", s(&data), "--preset", "single_plane", "--width", "48", "--height", "36"])?;
    let mut runs = Vec::new();
    for threads in ["1", "2", "4"] {
        let out = dir.path().join(format!("run{threads}"));
        lgsplat(&[
            "--threads", threads, "train", "--data", s(&data), "--out", s(&out), "--iterations", "60", "--seed", "3",
            "--densify-start", "10", "--densify-interval", "10", "--checkpoint-interval", "20",
            "--checkpoint-after-densify", "true",
        ])?;
        runs.push(tree(&out));
    }
    let files = runs[0].len();
    ensure(
        files > 3 && runs.iter().all(|r| *r == runs[0]),
        format!("{files} log and checkpoint files identical for 1, 2 and 4 threads"),
    )
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("run");
    let metrics = dir.path().join("metrics.json");
    lgsplat(&["synth", "--out", s(&data), "--preset", "standard"])?;
    lgsplat(&["align", "--data", s(&data)])?;
    let window = MAPS_WINDOW.to_string();
    let tau = TAU_POS.to_string();
    lgsplat(&[
        "train", "--data", s(&data), "--cameras", "cameras_aligned", "--out", s(&model), "--iterations", "3000",
        "--maps-window", &window, "--tau-pos", &tau,
    ])?;
    lgsplat(&[
        "eval", "--data", s(&data), "--cameras", "cameras_aligned", "--model", s(&model.join("point_cloud.ply")),
        "--out", s(&metrics), "--split", "val",
    ])?;
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    let psnr = m["mean_psnr"].as_f64().unwrap();
    let rmse = m["lidar_rmse"].as_f64().unwrap();
    ensure(
        psnr > 25.0 && rmse < DensifyConfig::default().sigma,
        format!("val PSNR {psnr:.2} dB, lidar_rmse {rmse:.4} m, {} Gaussians", m["gaussian_count"]),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient fidelity", gradient_fidelity),
        ("rasterizer oracle equivalence", renderer_equivalence),
        ("densification predicate invariant", densify_predicate),
        ("split orthogonal to LiDAR normal", split_orthogonality),
        ("threshold sweep trend", threshold_sweep),
        ("density sweep trend", density_sweep),
        ("geometric loss ablation", geometric_ablation),
        ("alignment recovery", alignment),
        ("camera model", camera_model),
        ("determinism across threads", determinism),
        ("end to end", end_to_end),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.0} s)", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} ({secs:.0} s)", k + 1);
            }
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
