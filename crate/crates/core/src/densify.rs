//! LiDAR-guided adaptive density control.
//!
//! Gaussians that drift more than `sigma` from the nearest LiDAR point or
//! fade below `epsilon` opacity are pruned. Gaussians whose view-averaged
//! NDC positional gradient exceeds `tau_pos` are split in two along their
//! long axis projected into the local LiDAR tangent plane.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Gaussian, GaussianSet, LidarCloud};
use crate::spatial::project_to_tangent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub sigma: f64,
    pub epsilon: f64,
    pub tau_pos: f64,
    pub interval: usize,
    pub split_offset: f64,
    pub scale_shrink: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            sigma: 1.0,
            epsilon: 0.005,
            tau_pos: 0.0002,
            interval: 50,
            split_offset: 0.5,
            scale_shrink: 1.6,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma", self.sigma),
            ("epsilon", self.epsilon),
            ("tau_pos", self.tau_pos),
            ("split_offset", self.split_offset),
            ("scale_shrink", self.scale_shrink),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("densify {name} must be positive, got {v}")));
            }
        }
        if self.interval < 1 {
            return Err(Error::InvalidInput("densify interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// One split event: the parent's index in the set it was split from, the
/// unit displacement direction of the children, the LiDAR normal it was
/// projected against and whether the fallback (unprojected) axis was used.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitRecord {
    pub parent: usize,
    pub direction: Vector3<f64>,
    pub normal: Option<Vector3<f64>>,
    pub degenerate: bool,
}

/// Result of [`densify_pass`]. `origin[i]` is the index in the input set
/// that Gaussian `i` was carried over from, or `None` for a split child.
#[derive(Clone, Debug)]
pub struct DensifyOutcome {
    pub set: GaussianSet,
    pub origin: Vec<Option<usize>>,
    pub splits: Vec<SplitRecord>,
    pub pruned: usize,
}

fn violates(g: &Gaussian, cloud: &LidarCloud, cfg: &DensifyConfig) -> bool {
    let far = cloud.nearest(&g.position).map_or(true, |(_, d)| d > cfg.sigma);
    far || g.opacity() < cfg.epsilon
}

fn keep_mask(set: &GaussianSet, keep: &[bool]) -> GaussianSet {
    let pick = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(x, _)| *x)
            .collect()
    };
    GaussianSet {
        sh_degree: set.sh_degree,
        gaussians: set
            .gaussians
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(g, _)| g.clone())
            .collect(),
        grad_accum: pick(&set.grad_accum),
        weight_accum: pick(&set.weight_accum),
    }
}

/// Removes Gaussians farther than `sigma` from the cloud or with opacity
/// below `epsilon`; returns the survivors and the removed indices.
pub fn prune(set: &GaussianSet, cloud: &LidarCloud, cfg: &DensifyConfig) -> (GaussianSet, Vec<usize>) {
    let keep: Vec<bool> = set.gaussians.iter().map(|g| !violates(g, cloud, cfg)).collect();
    let removed = keep
        .iter()
        .enumerate()
        .filter(|(_, &k)| !k)
        .map(|(i, _)| i)
        .collect();
    (keep_mask(set, &keep), removed)
}

/// Indices whose weighted mean NDC-gradient norm exceeds `tau_pos`.
pub fn select_split(set: &GaussianSet, cfg: &DensifyConfig) -> Vec<usize> {
    (0..set.len())
        .filter(|&i| set.weight_accum[i] > 0.0 && set.grad_accum[i] / set.weight_accum[i] > cfg.tau_pos)
        .collect()
}

/// The rotation-frame axis of the largest scale; ties go to the lowest axis.
pub fn long_axis(g: &Gaussian) -> Vector3<f64> {
    let mut r = 0;
    for k in 1..3 {
        if g.log_scale[k] > g.log_scale[r] {
            r = k;
        }
    }
    g.rotation_matrix().column(r).normalize()
}

/// Replaces each selected Gaussian by two children displaced along the
/// tangent-projected long axis. Unselected Gaussians keep their order and
/// come first; children follow in selection order.
pub fn split(
    set: &GaussianSet,
    indices: &[usize],
    cloud: &LidarCloud,
    cfg: &DensifyConfig,
) -> (GaussianSet, Vec<Option<usize>>, Vec<SplitRecord>) {
    let mut selected = vec![false; set.len()];
    for &i in indices {
        selected[i] = true;
    }
    let mut gaussians = Vec::with_capacity(set.len() + indices.len());
    let mut origin = Vec::with_capacity(set.len() + indices.len());
    let mut grad_accum = Vec::new();
    let mut weight_accum = Vec::new();
    for (i, g) in set.gaussians.iter().enumerate() {
        if !selected[i] {
            gaussians.push(g.clone());
            origin.push(Some(i));
            grad_accum.push(set.grad_accum[i]);
            weight_accum.push(set.weight_accum[i]);
        }
    }
    let mut records = Vec::with_capacity(indices.len());
    let mut seen = vec![false; set.len()];
    for &i in indices {
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        let parent = &set.gaussians[i];
        let axis = long_axis(parent);
        let normal = cloud.nearest(&parent.position).map(|(j, _)| cloud.normals[j]);
        let projected = normal.map(|n| project_to_tangent(&axis, &n));
        let (direction, degenerate) = match projected {
            Some(p) if p.norm() >= 1e-9 * axis.norm() => (p.normalize(), false),
            _ => {
                log::debug!("split of Gaussian {i}: tangent projection degenerate, using long axis");
                (axis, true)
            }
        };
        let s_max = parent.scales().max();
        let offset = direction * (cfg.split_offset * s_max);
        let shrink = cfg.scale_shrink.ln();
        for sign in [1.0, -1.0] {
            let mut child = parent.clone();
            child.position = parent.position + offset * sign;
            child.log_scale = parent.log_scale.map(|s| (s - shrink).max(crate::scene::MIN_SCALE.ln()));
            gaussians.push(child);
            origin.push(None);
            grad_accum.push(0.0);
            weight_accum.push(0.0);
        }
        records.push(SplitRecord {
            parent: i,
            direction,
            normal,
            degenerate,
        });
    }
    let out = GaussianSet {
        sh_degree: set.sh_degree,
        gaussians,
        grad_accum,
        weight_accum,
    };
    (out, origin, records)
}

/// Split, then prune, then reset the accumulators.
pub fn densify_pass(set: &GaussianSet, cloud: &LidarCloud, cfg: &DensifyConfig) -> Result<DensifyOutcome> {
    let selected = select_split(set, cfg);
    let (grown, origin, splits) = split(set, &selected, cloud, cfg);
    let (mut pruned_set, removed) = prune(&grown, cloud, cfg);
    if pruned_set.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut removed_mask = vec![false; grown.len()];
    for &r in &removed {
        removed_mask[r] = true;
    }
    let origin = origin
        .into_iter()
        .zip(removed_mask)
        .filter(|(_, r)| !r)
        .map(|(o, _)| o)
        .collect();
    pruned_set.reset_accumulators();
    Ok(DensifyOutcome {
        set: pruned_set,
        origin,
        splits,
        pruned: removed.len(),
    })
}

/// One gray, isotropic Gaussian per LiDAR point with scale equal to the mean
/// distance to its three nearest neighbors and opacity 0.1.
pub fn initialize_from_lidar(cloud: &LidarCloud, sh_degree: usize) -> Result<GaussianSet> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot initialize from an empty LiDAR cloud".into()));
    }
    let k = crate::sh::coeff_count(sh_degree);
    let gaussians = cloud
        .points
        .iter()
        .map(|p| {
            let nn = cloud.knn(p, 4);
            let dists: Vec<f64> = nn.iter().skip(1).map(|&(_, d)| d).filter(|d| *d > 0.0).collect();
            let scale = if dists.is_empty() {
                0.1
            } else {
                dists.iter().sum::<f64>() / dists.len() as f64
            };
            let mut g = Gaussian::isotropic(*p, scale, 0.1, [0.5; 3]);
            g.sh.resize(k, [0.0; 3]);
            g
        })
        .collect();
    Ok(GaussianSet::new(sh_degree, gaussians))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn flat_cloud() -> LidarCloud {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push(Vector3::new(i as f64, j as f64, 0.0));
            }
        }
        let n = vec![Vector3::z(); pts.len()];
        LidarCloud::new(pts, Some(n)).unwrap()
    }

    fn gaussian_at(p: Vector3<f64>, scales: [f64; 3], opacity: f64) -> Gaussian {
        let mut g = Gaussian::isotropic(p, 1.0, opacity, [0.5; 3]);
        g.log_scale = Vector3::from(scales.map(f64::ln));
        g
    }

    #[test]
    fn prune_far_and_faint() {
        let cloud = flat_cloud();
        let cfg = DensifyConfig {
            sigma: 2.0,
            ..Default::default()
        };
        let set = GaussianSet::new(
            0,
            vec![
                gaussian_at(Vector3::new(3.0, 3.0, 3.0), [1.0; 3], 0.9),
                gaussian_at(Vector3::new(3.0, 3.0, 0.0), [1.0; 3], 0.9),
                gaussian_at(Vector3::new(4.0, 3.0, 0.0), [1.0; 3], 0.001),
            ],
        );
        let (kept, removed) = prune(&set, &cloud, &cfg);
        assert_eq!(removed, vec![0, 2]);
        assert_eq!(kept.gaussians, vec![set.gaussians[1].clone()]);
        assert_eq!(kept.grad_accum.len(), 1);
    }

    #[test]
    fn select_split_ratio() {
        let mut set = GaussianSet::new(0, vec![gaussian_at(Vector3::zeros(), [1.0; 3], 0.5); 3]);
        set.weight_accum = vec![0.0, 10.0, 10.0];
        set.grad_accum = vec![5.0, 10.0 * 0.0003, 10.0 * 0.0001];
        assert_eq!(select_split(&set, &DensifyConfig::default()), vec![1]);
    }

    #[test]
    fn long_axis_cases() {
        let g = gaussian_at(Vector3::zeros(), [3.0, 1.0, 1.0], 0.5);
        assert!((long_axis(&g) - Vector3::x()).norm() < 1e-15);
        let mut r = g.clone();
        let h = std::f64::consts::FRAC_PI_4;
        r.rotation = [h.cos(), 0.0, 0.0, h.sin()];
        assert!((long_axis(&r) - Vector3::y()).norm() < 1e-12);
        let iso = gaussian_at(Vector3::zeros(), [1.0; 3], 0.5);
        assert_eq!(long_axis(&iso), Vector3::x());
    }

    #[test]
    fn split_projects_onto_tangent_plane() {
        let cloud = flat_cloud();
        let mut g = gaussian_at(Vector3::new(5.0, 5.0, 0.0), [2.0, 0.5, 0.5], 0.8);
        // rotate the long x axis 45 degrees about -y so it points along (1,0,1)/sqrt2
        let h = -std::f64::consts::FRAC_PI_8;
        g.rotation = [h.cos(), 0.0, h.sin(), 0.0];
        assert!((long_axis(&g) - Vector3::new(FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2)).norm() < 1e-12);
        let set = GaussianSet::new(0, vec![g.clone()]);
        let (out, origin, rec) = split(&set, &[0], &cloud, &DensifyConfig::default());
        assert_eq!(out.len(), 2);
        assert_eq!(origin, vec![None, None]);
        assert!(!rec[0].degenerate);
        assert!((rec[0].direction - Vector3::x()).norm() < 1e-12);
        assert!((out.gaussians[0].position - Vector3::new(6.0, 5.0, 0.0)).norm() < 1e-12);
        assert!((out.gaussians[1].position - Vector3::new(4.0, 5.0, 0.0)).norm() < 1e-12);
        assert!((out.gaussians[0].scales().x - 2.0 / 1.6).abs() < 1e-12);
        assert_eq!(out.gaussians[0].rotation, g.rotation);
    }

    #[test]
    fn split_parallel_axis_falls_back() {
        let cloud = flat_cloud();
        let g = gaussian_at(Vector3::new(5.0, 5.0, 0.0), [0.5, 0.5, 2.0], 0.8);
        let set = GaussianSet::new(0, vec![g]);
        let (out, _, rec) = split(&set, &[0], &cloud, &DensifyConfig::default());
        assert!(rec[0].degenerate);
        assert!((out.gaussians[0].position - Vector3::new(5.0, 5.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn no_op_pass_only_resets() {
        let cloud = flat_cloud();
        let mut set = GaussianSet::new(0, vec![gaussian_at(Vector3::new(1.0, 1.0, 0.1), [0.2; 3], 0.5)]);
        set.grad_accum = vec![1e-6];
        set.weight_accum = vec![1.0];
        let out = densify_pass(&set, &cloud, &DensifyConfig::default()).unwrap();
        assert_eq!(out.set.gaussians, set.gaussians);
        assert_eq!(out.set.grad_accum, vec![0.0]);
        assert_eq!(out.origin, vec![Some(0)]);
    }

    #[test]
    fn pruning_everything_is_an_error() {
        let cloud = flat_cloud();
        let set = GaussianSet::new(0, vec![gaussian_at(Vector3::new(1.0, 1.0, 50.0), [0.2; 3], 0.5)]);
        assert!(matches!(
            densify_pass(&set, &cloud, &DensifyConfig::default()),
            Err(Error::EmptySet)
        ));
    }

    #[test]
    fn initialization_uses_neighbor_spacing() {
        let set = initialize_from_lidar(&flat_cloud(), 1).unwrap();
        assert_eq!(set.len(), 100);
        assert_eq!(set.gaussians[55].sh.len(), 4);
        assert!((set.gaussians[55].scales().x - 1.0).abs() < 1e-12);
        assert!((set.gaussians[0].opacity() - 0.1).abs() < 1e-12);
    }
}
