//! The optimization loop: render a training view, evaluate the combined
//! loss, backpropagate, take an Adam step and periodically run LiDAR-guided
//! densification.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densify::{densify_pass, DensifyConfig, SplitRecord};
use crate::error::{Error, Result};
use crate::eval::{lidar_rmse, psnr, RmseDirection};
use crate::io::save_ply_gaussians;
use crate::losses::{add_scale_grad, total_loss, LossOptions, LossTargets, LossWeights};
use crate::rasterizer::{accumulate_densify_stats, layout, render, render_backward, RenderSettings};
use crate::scene::{DepthNormalMaps, DistortedCamera, GaussianSet, Image, LidarCloud, MIN_SCALE};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

/// Base learning rates; position rates are multiplied by the scene extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub sh: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            sh: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub densify: DensifyConfig,
    pub densify_start: usize,
    /// Last iteration at which densification may run; `None` means half of
    /// `iterations`.
    pub densify_stop: Option<usize>,
    pub weights: LossWeights,
    pub loss: LossOptions,
    pub lr: LearningRates,
    /// Scene extent used to scale position learning rates; `None` derives it
    /// from the training cameras.
    pub extent: Option<f64>,
    pub seed: u64,
    pub val_interval: usize,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            densify: DensifyConfig::default(),
            densify_start: 500,
            densify_stop: None,
            weights: LossWeights::default(),
            loss: LossOptions::default(),
            lr: LearningRates::default(),
            extent: None,
            seed: 0,
            val_interval: 100,
            background: [0.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn stop(&self) -> usize {
        self.densify_stop.unwrap_or(self.iterations / 2)
    }

    pub fn validate(&self) -> Result<()> {
        self.densify.validate()?;
        let w = &self.weights;
        for (name, v) in [("alpha", w.alpha), ("beta", w.beta), ("gamma", w.gamma), ("lambda", w.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("loss weight {name} must be finite and non-negative")));
            }
        }
        if w.lambda > 1.0 {
            return Err(Error::InvalidInput("lambda must lie in [0, 1]".into()));
        }
        let lr = &self.lr;
        for v in [lr.position_init, lr.position_final, lr.sh, lr.opacity, lr.scale, lr.rotation] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput("learning rates must be finite and non-negative".into()));
            }
        }
        if self.val_interval == 0 {
            return Err(Error::InvalidInput("val_interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// A training or validation view.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: DistortedCamera,
    pub image: Image,
    /// LiDAR-derived depth/normal targets.
    pub maps: Option<DepthNormalMaps>,
}

/// Seeded 70/15/15 train/validation/test split of `n` view indices; each
/// part is non-empty when `n ≥ 3`. Each part is sorted.
pub fn split_views(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let part = if n >= 3 { ((0.15 * n as f64).round() as usize).max(1) } else { 0 };
    let (n_val, n_train) = (part, n - 2 * part);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}

/// Adam moments for a flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Binary form: magic, step, length, then `m` and `v` as little-endian
    /// f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"LGSADAM1".to_vec();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for x in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::InvalidInput("malformed optimizer state".into());
        if bytes.len() < 24 || &bytes[..8] != b"LGSADAM1" {
            return Err(bad());
        }
        let step = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if bytes.len() != 24 + 16 * n {
            return Err(bad());
        }
        let vals: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(AdamState {
            m: vals[..n].to_vec(),
            v: vals[n..].to_vec(),
            step,
        })
    }
}

/// One Adam update with per-parameter learning rates.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lrs: &[f64]) -> Result<()> {
    let n = params.len();
    if grads.len() != n || lrs.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} rates, {} moments",
            n,
            grads.len(),
            lrs.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lrs[i] * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Flattens the set's parameters in [`layout`] order.
pub fn pack_params(set: &GaussianSet) -> Vec<f64> {
    let stride = layout::stride(set.sh_count());
    let mut out = Vec::with_capacity(stride * set.len());
    for g in &set.gaussians {
        out.extend(g.position.iter());
        out.extend(g.rotation.iter());
        out.extend(g.log_scale.iter());
        out.push(g.logit_opacity);
        out.extend(g.sh.iter().flatten());
    }
    out
}

/// Writes flat parameters back, renormalizing quaternions and clamping
/// scales.
pub fn unpack_params(set: &mut GaussianSet, params: &[f64]) {
    let stride = layout::stride(set.sh_count());
    for (g, p) in set.gaussians.iter_mut().zip(params.chunks_exact(stride)) {
        g.position = nalgebra::Vector3::new(p[0], p[1], p[2]);
        g.rotation = [p[3], p[4], p[5], p[6]];
        g.normalize_rotation();
        g.log_scale = nalgebra::Vector3::new(p[7], p[8], p[9]).map(|s| s.max(MIN_SCALE.ln()));
        g.logit_opacity = p[10];
        for (k, c) in g.sh.iter_mut().enumerate() {
            *c = [p[11 + 3 * k], p[12 + 3 * k], p[13 + 3 * k]];
        }
    }
}

fn position_lr(cfg: &TrainConfig, extent: f64, iteration: usize) -> f64 {
    let (a, b) = (cfg.lr.position_init * extent, cfg.lr.position_final * extent);
    let n = cfg.iterations.max(1) as f64;
    let t = (iteration as f64 / n).clamp(0.0, 1.0);
    if a <= 0.0 || b <= 0.0 {
        return a * (1.0 - t) + b * t;
    }
    (a.ln() * (1.0 - t) + b.ln() * t).exp()
}

fn learning_rates(cfg: &TrainConfig, sh_count: usize, count: usize, pos_lr: f64) -> Vec<f64> {
    let stride = layout::stride(sh_count);
    let mut one = vec![0.0; stride];
    one[layout::POSITION..layout::POSITION + 3].fill(pos_lr);
    one[layout::ROTATION..layout::ROTATION + 4].fill(cfg.lr.rotation);
    one[layout::LOG_SCALE..layout::LOG_SCALE + 3].fill(cfg.lr.scale);
    one[layout::OPACITY] = cfg.lr.opacity;
    one[layout::SH..layout::SH + 3].fill(cfg.lr.sh);
    one[layout::SH + 3..].fill(cfg.lr.sh / 20.0);
    one.repeat(count)
}

/// 1.1 × the largest camera distance from the mean camera center.
pub fn camera_extent(cams: &[DistortedCamera]) -> f64 {
    if cams.is_empty() {
        return 1.0;
    }
    let centers: Vec<_> = cams.iter().map(|c| c.center()).collect();
    let mean = centers.iter().sum::<nalgebra::Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub l1: f64,
    pub dssim: f64,
    pub depth: f64,
    pub normal: f64,
    pub scale: f64,
    pub total: f64,
    pub count: usize,
    pub val_psnr: Option<f64>,
}

/// What happened in one densification pass.
#[derive(Clone, Debug)]
pub struct DensifyEvent {
    pub iteration: usize,
    pub splits: Vec<SplitRecord>,
    pub pruned: usize,
    pub count: usize,
    /// Largest nearest-LiDAR distance and smallest opacity after the pass.
    pub max_distance: f64,
    pub min_opacity: f64,
}

#[derive(Clone, Debug)]
pub struct CheckpointRecord {
    pub iteration: usize,
    pub path: PathBuf,
    pub lidar_rmse: f64,
}

/// Where and how often to write checkpoints. A final checkpoint is always
/// written when a directory is given.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    /// Write after every densification pass as well.
    pub after_densify: bool,
    /// Write every `interval` iterations (0 disables).
    pub interval: usize,
}

pub struct TrainOutput {
    pub set: GaussianSet,
    pub adam: AdamState,
    pub log: Vec<LogRow>,
    pub densify_events: Vec<DensifyEvent>,
    pub checkpoints: Vec<CheckpointRecord>,
}

fn checkpoint(
    dir: &Path,
    iteration: usize,
    set: &GaussianSet,
    adam: &AdamState,
    cloud: &LidarCloud,
) -> Result<CheckpointRecord> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("checkpoint_{iteration:06}.ply"));
    save_ply_gaussians(set, &path)?;
    let state_path = path.with_extension("adam");
    fs::write(&state_path, adam.to_bytes()).map_err(|e| Error::io(&state_path, e))?;
    let rmse = if cloud.is_empty() || set.is_empty() {
        0.0
    } else {
        lidar_rmse(set, cloud, RmseDirection::GaussianToLidar)?
    };
    Ok(CheckpointRecord {
        iteration,
        path,
        lidar_rmse: rmse,
    })
}

/// Mean PSNR of the set rendered into each view.
pub fn mean_psnr(set: &GaussianSet, views: &[View], background: [f64; 3]) -> Result<Option<f64>> {
    if views.is_empty() {
        return Ok(None);
    }
    let settings = RenderSettings { background };
    let mut sum = 0.0;
    for v in views {
        let out = render(set, &v.camera, &settings)?;
        sum += psnr(&out.color, &v.image)?;
    }
    Ok(Some(sum / views.len() as f64))
}

/// Runs the full optimization.
pub fn train(
    initial: &GaussianSet,
    cloud: &LidarCloud,
    train_views: &[View],
    val_views: &[View],
    cfg: &TrainConfig,
    policy: &CheckpointPolicy,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut set = initial.clone();
    set.reset_accumulators();
    let mut adam = AdamState::new(pack_params(&set).len());
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut events = Vec::new();
    let mut checkpoints = Vec::new();
    if cfg.iterations == 0 {
        if let Some(dir) = &policy.dir {
            checkpoints.push(checkpoint(dir, 0, &set, &adam, cloud)?);
        }
        return Ok(TrainOutput {
            set,
            adam,
            log,
            densify_events: events,
            checkpoints,
        });
    }
    if train_views.is_empty() {
        return Err(Error::InvalidInput("no training views".into()));
    }
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let extent = cfg
        .extent
        .unwrap_or_else(|| camera_extent(&train_views.iter().map(|v| v.camera.clone()).collect::<Vec<_>>()));
    let settings = RenderSettings {
        background: cfg.background,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let stop = cfg.stop();

    for it in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..train_views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let view = &train_views[order.pop().expect("non-empty order")];
        let out = render(&set, &view.camera, &settings)?;
        let targets = LossTargets {
            image: &view.image,
            lidar: view.maps.as_ref(),
        };
        let loss = total_loss(&out, &targets, &set, &cfg.weights, &cfg.loss)?;
        let b = loss.breakdown;
        for (component, v) in [
            ("l1", b.l1),
            ("dssim", b.dssim),
            ("depth", b.depth),
            ("normal", b.normal),
            ("scale", b.scale),
            ("total", b.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    component,
                });
            }
        }
        let mut grads = render_backward(&set, &view.camera, &out, &loss.buffer_grads)?;
        add_scale_grad(&mut grads, &loss.log_scale_grad);
        if it < stop {
            accumulate_densify_stats(&mut set, &grads);
        }
        let mut params = pack_params(&set);
        let lrs = learning_rates(cfg, set.sh_count(), set.len(), position_lr(cfg, extent, it));
        adam_step(&mut params, &grads.params, &mut adam, &lrs)?;
        unpack_params(&mut set, &params);

        let done = it + 1;
        let mut densified = false;
        if done >= cfg.densify_start && done <= stop && done % cfg.densify.interval == 0 {
            let outcome = densify_pass(&set, cloud, &cfg.densify)?;
            adam = remap_adam(&adam, &outcome.origin, layout::stride(set.sh_count()));
            set = outcome.set;
            let (max_distance, min_opacity) = set.gaussians.iter().fold((0.0f64, 1.0f64), |(d, o), g| {
                let dist = cloud.nearest(&g.position).map_or(f64::INFINITY, |(_, d)| d);
                (d.max(dist), o.min(g.opacity()))
            });
            log::debug!(
                "iteration {done}: densify split {} pruned {} -> {} Gaussians",
                outcome.splits.len(),
                outcome.pruned,
                set.len()
            );
            events.push(DensifyEvent {
                iteration: done,
                splits: outcome.splits,
                pruned: outcome.pruned,
                count: set.len(),
                max_distance,
                min_opacity,
            });
            densified = true;
        }

        let val_psnr = if done % cfg.val_interval == 0 || done == cfg.iterations {
            mean_psnr(&set, val_views, cfg.background)?
        } else {
            None
        };
        if let Some(p) = val_psnr {
            log::info!("iteration {done}: loss {:.5} count {} val PSNR {p:.3}", b.total, set.len());
        }
        log.push(LogRow {
            iteration: done,
            l1: b.l1,
            dssim: b.dssim,
            depth: b.depth,
            normal: b.normal,
            scale: b.scale,
            total: b.total,
            count: set.len(),
            val_psnr,
        });

        if let Some(dir) = &policy.dir {
            let periodic = policy.interval > 0 && done % policy.interval == 0;
            if (densified && policy.after_densify) || periodic || done == cfg.iterations {
                checkpoints.push(checkpoint(dir, done, &set, &adam, cloud)?);
            }
        }
    }
    Ok(TrainOutput {
        set,
        adam,
        log,
        densify_events: events,
        checkpoints,
    })
}

/// Carries Adam moments over to the densified set; split children start
/// from zero.
fn remap_adam(adam: &AdamState, origin: &[Option<usize>], stride: usize) -> AdamState {
    let mut out = AdamState::new(origin.len() * stride);
    out.step = adam.step;
    for (i, o) in origin.iter().enumerate() {
        if let Some(j) = o {
            out.m[i * stride..(i + 1) * stride].copy_from_slice(&adam.m[j * stride..(j + 1) * stride]);
            out.v[i * stride..(i + 1) * stride].copy_from_slice(&adam.v[j * stride..(j + 1) * stride]);
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Writes the log as CSV with a header row.
pub fn write_log_csv(log: &[LogRow], path: &Path) -> Result<()> {
    let mut text = String::from("iteration,L1,DSSIM,depth,normal,scale,total,count,val_psnr\n");
    for r in log {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.l1,
            r.dssim,
            r.depth,
            r.normal,
            r.scale,
            r.total,
            r.count,
            fmt_opt(r.val_psnr)
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
