//! LiDAR-to-image alignment: match image features to projected LiDAR points
//! and refine the camera pose by Levenberg-Marquardt on the distorted
//! reprojection error. Intrinsics and distortion stay fixed.

use std::path::Path;

use nalgebra::{Matrix6, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::{camera_point_jacobian, project, project_camera_point, project_cloud};
use crate::error::{Error, Result};
use crate::scene::{DistortedCamera, LidarCloud};

const MAX_ITERATIONS: usize = 100;
const STEP_TOL: f64 = 1e-10;
const INITIAL_DAMPING: f64 = 1e-3;
const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub feature_uv: [f64; 2],
    pub lidar_point: Vector3<f64>,
    pub weight: f64,
}

/// A feature observation as stored in the features CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub image_id: usize,
    pub u: f64,
    pub v: f64,
    #[serde(default)]
    pub x: Option<f64>,
    #[serde(default)]
    pub y: Option<f64>,
    #[serde(default)]
    pub z: Option<f64>,
}

impl Feature {
    pub fn point(&self) -> Option<Vector3<f64>> {
        Some(Vector3::new(self.x?, self.y?, self.z?))
    }
}

pub fn read_features(path: &Path) -> Result<Vec<Feature>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_features(path: &Path, features: &[Feature]) -> Result<()> {
    let err = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut writer = csv::Writer::from_path(path).map_err(err)?;
    for f in features {
        writer.serialize(f).map_err(err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Matches each feature to the projected LiDAR point within `radius` pixels
/// that minimizes pixel distance times camera-frame depth. Features with no
/// candidate are dropped. `_voxel_size` is accepted for interface
/// compatibility; candidates are gathered directly in pixel space.
pub fn find_correspondences(
    cloud: &LidarCloud,
    cam: &DistortedCamera,
    features: &[[f64; 2]],
    _voxel_size: f64,
    radius: f64,
) -> Vec<Correspondence> {
    let (w, h) = (cam.width, cam.height);
    let mut bins: Vec<Vec<(usize, f64, f64, f64)>> = vec![Vec::new(); w * h];
    for (i, px) in project_cloud(cam, cloud) {
        bins[px.v as usize * w + px.u as usize].push((i, px.u, px.v, px.depth));
    }
    let reach = radius.ceil() as isize;
    features
        .iter()
        .filter_map(|f| {
            let (fx, fy) = (f[0].floor() as isize, f[1].floor() as isize);
            let mut best: Option<(f64, usize)> = None;
            for y in (fy - reach).max(0)..=(fy + reach).min(h as isize - 1) {
                for x in (fx - reach).max(0)..=(fx + reach).min(w as isize - 1) {
                    for &(i, u, v, depth) in &bins[y as usize * w + x as usize] {
                        let d = ((u - f[0]).powi(2) + (v - f[1]).powi(2)).sqrt();
                        if d > radius {
                            continue;
                        }
                        let score = d * depth;
                        if best.is_none_or(|(s, j)| score < s || (score == s && i < j)) {
                            best = Some((score, i));
                        }
                    }
                }
            }
            best.map(|(_, i)| Correspondence {
                feature_uv: *f,
                lidar_point: cloud.points[i],
                weight: 1.0,
            })
        })
        .collect()
}

/// Pairs features that carry a known 3D location with the LiDAR point
/// nearest to it.
pub fn correspondences_from_points(cloud: &LidarCloud, features: &[Feature]) -> Vec<Correspondence> {
    features
        .iter()
        .filter_map(|f| {
            let (i, _) = cloud.nearest(&f.point()?)?;
            Some(Correspondence {
                feature_uv: [f.u, f.v],
                lidar_point: cloud.points[i],
                weight: 1.0,
            })
        })
        .collect()
}

/// Outcome of [`refine_pose`]. RMS values are per residual component:
/// `sqrt(Σ w‖r‖² / (2 Σ w))`, in pixels.
#[derive(Clone, Debug)]
pub struct PoseRefinement {
    pub camera: DistortedCamera,
    pub initial_rms: f64,
    pub rms: f64,
    pub iterations: usize,
}

/// Weighted squared error, or `None` if any point falls behind the camera.
fn cost(cam: &DistortedCamera, corr: &[Correspondence]) -> Option<f64> {
    let mut sum = 0.0;
    for c in corr {
        let px = project(cam, &c.lidar_point)?;
        sum += c.weight * ((px.u - c.feature_uv[0]).powi(2) + (px.v - c.feature_uv[1]).powi(2));
    }
    Some(sum)
}

fn rms(cost: f64, corr: &[Correspondence]) -> f64 {
    let wsum: f64 = corr.iter().map(|c| c.weight).sum();
    (cost / (2.0 * wsum)).sqrt()
}

/// Gauss-Newton system `(JᵀWJ, JᵀWr)` in the left-perturbation
/// parameterization `R ← exp(ω)·R`, `t ← t + δt`.
fn normal_equations(cam: &DistortedCamera, corr: &[Correspondence]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    for c in corr {
        let rp = cam.rotation * c.lidar_point;
        let pc = rp + cam.translation;
        let pc_arr = [pc.x, pc.y, pc.z];
        let [u, v] = project_camera_point(cam, &pc_arr);
        let jp = camera_point_jacobian(cam, &pc_arr);
        let r = [u - c.feature_uv[0], v - c.feature_uv[1]];
        for row in 0..2 {
            let jrow = Vector3::new(jp[row][0], jp[row][1], jp[row][2]);
            // ∂p_cam/∂ω = -[Rp]×, so ∂r/∂ω = jrow·(-[Rp]×) = (Rp × jrow)ᵀ
            let dw = rp.cross(&jrow);
            let g = Vector6::new(dw.x, dw.y, dw.z, jrow.x, jrow.y, jrow.z);
            jtj += g * g.transpose() * c.weight;
            jtr += g * (r[row] * c.weight);
        }
    }
    (jtj, jtr)
}

fn apply_step(cam: &DistortedCamera, step: &Vector6<f64>) -> DistortedCamera {
    let mut out = cam.clone();
    let dr = Rotation3::new(Vector3::new(step[0], step[1], step[2]));
    out.rotation = dr.matrix() * cam.rotation;
    out.translation = cam.translation + Vector3::new(step[3], step[4], step[5]);
    out
}

/// Levenberg-Marquardt over the 6-DoF pose minimizing
/// `Σ w‖project(cam, l) − x‖²`. Only steps that lower the cost are
/// accepted, so the returned error never exceeds the initial one.
pub fn refine_pose(cam: &DistortedCamera, corr: &[Correspondence]) -> Result<PoseRefinement> {
    if corr.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 correspondences, got {}",
            corr.len()
        )));
    }
    if corr.iter().any(|c| !(c.weight >= 0.0) || !c.weight.is_finite()) {
        return Err(Error::InvalidInput("correspondence weights must be finite and non-negative".into()));
    }
    let mut current = cam.clone();
    let mut current_cost = cost(&current, corr).ok_or_else(|| {
        Error::Degenerate("a correspondence lies behind the initial camera".into())
    })?;
    let initial_cost = current_cost;

    let (jtj0, jtr0) = normal_equations(&current, corr);
    let eig = jtj0.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= RANK_TOL * hi {
        return Err(Error::Degenerate(
            "rank-deficient normal equations (correspondences are collinear or coincident)".into(),
        ));
    }

    let mut damping = INITIAL_DAMPING;
    let mut iterations = 0;
    let (mut jtj, mut jtr) = (jtj0, jtr0);
    while iterations < MAX_ITERATIONS && current_cost > 0.0 {
        iterations += 1;
        let mut a = jtj;
        for i in 0..6 {
            a[(i, i)] += damping * jtj[(i, i)];
        }
        let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
            damping *= 10.0;
            continue;
        };
        let candidate = apply_step(&current, &step);
        match cost(&candidate, corr) {
            Some(c) if c < current_cost => {
                current = candidate;
                current_cost = c;
                damping = (damping / 10.0).max(1e-15);
                if step.norm() < STEP_TOL {
                    break;
                }
                (jtj, jtr) = normal_equations(&current, corr);
            }
            _ => {
                if step.norm() < STEP_TOL {
                    break;
                }
                damping *= 10.0;
            }
        }
    }
    Ok(PoseRefinement {
        camera: current,
        initial_rms: rms(initial_cost, corr),
        rms: rms(current_cost, corr),
        iterations,
    })
}

/// Correspondence search and pose refinement alternated `rounds` times, so
/// that matches found from a rough initial pose are re-gathered after each
/// refinement.
pub fn align_camera(
    cloud: &LidarCloud,
    cam: &DistortedCamera,
    features: &[[f64; 2]],
    radius: f64,
    rounds: usize,
) -> Result<PoseRefinement> {
    let mut current = cam.clone();
    let mut initial_rms = None;
    let mut last = None;
    for _ in 0..rounds.max(1) {
        let corr = find_correspondences(cloud, &current, features, 0.0, radius);
        let r = refine_pose(&current, &corr)?;
        initial_rms.get_or_insert(r.initial_rms);
        current = r.camera.clone();
        last = Some(r);
    }
    let mut r = last.expect("at least one round");
    r.initial_rms = initial_rms.unwrap_or(r.initial_rms);
    Ok(r)
}

/// One row of an alignment report.
#[derive(Debug)]
pub struct AlignmentRow {
    pub camera: usize,
    pub outcome: Result<PoseRefinement>,
}

/// Refines every camera independently from its correspondences; failures
/// are reported per camera without aborting the batch.
pub fn alignment_report(cams: &[DistortedCamera], correspondences: &[Vec<Correspondence>]) -> Vec<AlignmentRow> {
    cams.iter()
        .zip(correspondences)
        .enumerate()
        .map(|(i, (cam, corr))| AlignmentRow {
            camera: i,
            outcome: refine_pose(cam, corr),
        })
        .collect()
}

/// Rotation angle (radians) between two camera orientations and the
/// distance between their translations.
pub fn pose_error(a: &DistortedCamera, b: &DistortedCamera) -> (f64, f64) {
    let rel = a.rotation * b.rotation.transpose();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near zero; the skew part recovers small angles
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let angle = (skew.norm() / 2.0).atan2(cos);
    (angle, (a.translation - b.translation).norm())
}
