//! Core scene types: Gaussians, the LiDAR cloud, cameras, images and
//! LiDAR-derived depth/normal maps.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logit, quat_to_mat, sigmoid};
use crate::spatial::{self, KdTree};

/// Smallest admissible scale, meters. Anything below is clamped.
pub const MIN_SCALE: f64 = 1e-8;

/// One anisotropic 3D Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub logit_opacity: f64,
    /// Spherical-harmonic coefficients, one RGB triple per basis function.
    pub sh: Vec<[f64; 3]>,
}

impl Gaussian {
    /// Builds a Gaussian, clamping degenerate scales to [`MIN_SCALE`] and
    /// normalizing the quaternion.
    pub fn new(
        position: Vector3<f64>,
        rotation: [f64; 4],
        log_scale: Vector3<f64>,
        logit_opacity: f64,
        sh: Vec<[f64; 3]>,
    ) -> Self {
        let mut g = Gaussian {
            position,
            rotation,
            log_scale: log_scale.map(|s| s.max(MIN_SCALE.ln())),
            logit_opacity,
            sh,
        };
        g.normalize_rotation();
        g
    }

    /// Isotropic Gaussian with degree-0 color `rgb` (in [0,1]).
    pub fn isotropic(position: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        let dc = rgb.map(|c| (c - 0.5) / crate::sh::SH_C0);
        Gaussian::new(
            position,
            [1.0, 0.0, 0.0, 0.0],
            Vector3::repeat(scale.ln()),
            logit(opacity),
            vec![dc],
        )
    }

    /// Recovers rotation and log-scales from a symmetric positive-definite
    /// covariance matrix.
    pub fn from_covariance(
        position: Vector3<f64>,
        cov: &Matrix3<f64>,
        logit_opacity: f64,
        sh: Vec<[f64; 3]>,
    ) -> Self {
        let eig = SymmetricEigen::new(*cov);
        let mut rot = eig.eigenvectors;
        if rot.determinant() < 0.0 {
            rot.set_column(2, &(-rot.column(2)));
        }
        let q = nalgebra::UnitQuaternion::from_matrix(&rot);
        let log_scale = eig.eigenvalues.map(|l| 0.5 * l.max(MIN_SCALE * MIN_SCALE).ln());
        Gaussian::new(
            position,
            [q.w, q.i, q.j, q.k],
            log_scale,
            logit_opacity,
            sh,
        )
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            for v in self.rotation.iter_mut() {
                *v /= n;
            }
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let m = quat_to_mat(&self.rotation);
        Matrix3::from_fn(|r, c| m[r][c])
    }

    /// `R · diag(s²) · Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.log_scale.map(|s| (2.0 * s).exp()));
        let c = r * s2 * r.transpose();
        (c + c.transpose()) * 0.5
    }

    pub fn is_finite(&self) -> std::result::Result<(), &'static str> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err("position");
        }
        if !self.rotation.iter().all(|v| v.is_finite()) {
            return Err("rotation");
        }
        if !self.log_scale.iter().all(|v| v.is_finite()) {
            return Err("log_scale");
        }
        if !self.logit_opacity.is_finite() {
            return Err("logit_opacity");
        }
        if !self.sh.iter().flatten().all(|v| v.is_finite()) {
            return Err("sh");
        }
        Ok(())
    }
}

/// Convenience free function mirroring [`Gaussian::covariance`].
pub fn covariance(g: &Gaussian) -> Matrix3<f64> {
    g.covariance()
}

/// The optimizable scene plus the densification accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub gaussians: Vec<Gaussian>,
    pub grad_accum: Vec<f64>,
    pub weight_accum: Vec<f64>,
}

impl GaussianSet {
    pub fn new(sh_degree: usize, gaussians: Vec<Gaussian>) -> Self {
        let n = gaussians.len();
        GaussianSet {
            sh_degree,
            gaussians,
            grad_accum: vec![0.0; n],
            weight_accum: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn reset_accumulators(&mut self) {
        let n = self.gaussians.len();
        self.grad_accum.clear();
        self.grad_accum.resize(n, 0.0);
        self.weight_accum.clear();
        self.weight_accum.resize(n, 0.0);
    }

    /// Number of SH coefficients per channel for this set's degree.
    pub fn sh_count(&self) -> usize {
        (self.sh_degree + 1) * (self.sh_degree + 1)
    }

    pub fn validate(&self) -> Result<()> {
        for (index, g) in self.gaussians.iter().enumerate() {
            g.is_finite()
                .map_err(|field| Error::NonFiniteGaussian { index, field })?;
            if g.sh.len() != self.sh_count() {
                return Err(Error::ShapeMismatch(format!(
                    "Gaussian {index} has {} SH coefficients, expected {}",
                    g.sh.len(),
                    self.sh_count()
                )));
            }
        }
        Ok(())
    }
}

/// A static LiDAR point cloud with per-point normals and a spatial index.
#[derive(Clone, Debug)]
pub struct LidarCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    index: Option<KdTree>,
}

impl LidarCloud {
    /// Default neighbor count for normal estimation.
    pub const NORMAL_K: usize = 16;

    /// Builds the index and, when `normals` is `None`, estimates normals by
    /// PCA over the `k` nearest neighbors (clamped to the point count).
    pub fn new(points: Vec<Vector3<f64>>, normals: Option<Vec<Vector3<f64>>>) -> Result<Self> {
        Self::with_k(points, normals, Self::NORMAL_K)
    }

    pub fn with_k(
        points: Vec<Vector3<f64>>,
        normals: Option<Vec<Vector3<f64>>>,
        k: usize,
    ) -> Result<Self> {
        if points.is_empty() {
            return Ok(LidarCloud {
                points,
                normals: Vec::new(),
                index: None,
            });
        }
        let index = KdTree::build(&points)?;
        let normals = match normals {
            Some(n) => {
                if n.len() != points.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} normals for {} points",
                        n.len(),
                        points.len()
                    )));
                }
                n.into_iter()
                    .map(|v| {
                        let len = v.norm();
                        if len > 0.0 {
                            v / len
                        } else {
                            Vector3::z()
                        }
                    })
                    .collect()
            }
            None => {
                let k = k.min(points.len()).max(1);
                if points.len() >= 3 {
                    spatial::estimate_normals_with_index(&points, &index, k.max(3), Vector3::z())?
                } else {
                    vec![Vector3::z(); points.len()]
                }
            }
        };
        Ok(LidarCloud {
            points,
            normals,
            index: Some(index),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self) -> Option<&KdTree> {
        self.index.as_ref()
    }

    /// Nearest LiDAR point to `q`: `(index, distance)`, or `None` for an
    /// empty cloud.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        self.index.as_ref().map(|t| t.nearest(&self.points, q))
    }

    /// The `k` nearest LiDAR points to `q`, sorted by distance.
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        self.index.as_ref().map_or_else(Vec::new, |t| t.knn(&self.points, q, k))
    }
}

/// How the radial distance in the distortion polynomial is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadialUnits {
    /// Offset from the principal point in pixels.
    #[default]
    Pixels,
    /// Offset divided by the focal lengths.
    Normalized,
}

/// Pinhole intrinsics with two radial distortion coefficients and a pose
/// mapping world points to camera coordinates, `p_cam = R·p + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortedCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub radial_units: RadialUnits,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    k1: f64,
    k2: f64,
    width: usize,
    height: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
    #[serde(default, skip_serializing_if = "is_pixels")]
    radial_units: RadialUnits,
}

fn is_pixels(u: &RadialUnits) -> bool {
    *u == RadialUnits::Pixels
}

impl DistortedCamera {
    /// Distortion-free camera at the origin looking down +z.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        DistortedCamera {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width,
            height,
            radial_units: RadialUnits::Pixels,
        }
    }

    /// Camera at `eye` looking at `target`; image `v` axis points roughly
    /// opposite to `up`.
    pub fn look_at(mut self, eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-12 {
            x = z.cross(&Vector3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        self.translation = -(r * eye);
        self.rotation = r;
        self
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        if (rtr - Matrix3::identity()).abs().max() > 1e-9
            || (self.rotation.determinant() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidInput("camera rotation is not orthonormal".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be at least 1x1".into()));
        }
        let finite = [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2]
            .iter()
            .chain(self.rotation.iter())
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("camera has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let r = self.rotation;
        let j = CameraJson {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            k1: self.k1,
            k2: self.k2,
            width: self.width,
            height: self.height,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
            radial_units: self.radial_units,
        };
        serde_json::to_string_pretty(&j).expect("camera serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let j: CameraJson = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let cam = DistortedCamera {
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            k1: j.k1,
            k2: j.k2,
            rotation: Matrix3::from_row_slice(&j.rotation),
            translation: Vector3::from_column_slice(&j.translation),
            width: j.width,
            height: j.height,
            radial_units: j.radial_units,
        };
        cam.validate().map_err(|e| e.to_string())?;
        Ok(cam)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|message| Error::CameraFile {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Row-major float image with 1 or 3 channels, values nominally in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite values".into()));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Per-pixel depth (camera z, meters) and camera-frame unit normals.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthNormalMaps {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub normal: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
    /// Sub-pixel image location the depth was measured at; the pixel center
    /// for filled pixels.
    pub sample_uv: Vec<[f64; 2]>,
}

impl DepthNormalMaps {
    pub fn invalid(width: usize, height: usize) -> Self {
        let n = width * height;
        DepthNormalMaps {
            width,
            height,
            depth: vec![0.0; n],
            normal: vec![Vector3::zeros(); n],
            valid: vec![false; n],
            sample_uv: vec![[0.0; 2]; n],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn z_rot(angle: f64) -> [f64; 4] {
        [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()]
    }

    #[test]
    fn unit_isotropic_covariance_is_identity() {
        let g = Gaussian::new(Vector3::zeros(), [1.0, 0.0, 0.0, 0.0], Vector3::zeros(), 0.0, vec![[0.0; 3]]);
        assert!((g.covariance() - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn axis_scaling_squares() {
        let g = Gaussian::new(
            Vector3::zeros(),
            [1.0, 0.0, 0.0, 0.0],
            Vector3::new(2f64.ln(), 0.0, 0.0),
            0.0,
            vec![[0.0; 3]],
        );
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((g.covariance() - expected).abs().max() < 1e-12);
    }

    #[test]
    fn rotated_covariance_matches_direct_product() {
        let g = Gaussian::new(
            Vector3::zeros(),
            z_rot(FRAC_PI_2),
            Vector3::new(2f64.ln(), 0.0, 0.0),
            0.0,
            vec![[0.0; 3]],
        );
        // oracle: explicit rotation matrix product
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let direct = r * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * r.transpose();
        assert!((g.covariance() - direct).abs().max() < 1e-12);
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((g.covariance() - expected).abs().max() < 1e-12);
    }

    #[test]
    fn degenerate_scales_are_clamped() {
        let g = Gaussian::new(
            Vector3::zeros(),
            [1.0, 0.0, 0.0, 0.0],
            Vector3::new(-100.0, 0.0, 0.0),
            0.0,
            vec![[0.0; 3]],
        );
        assert!(g.scales().x >= MIN_SCALE * 0.999_999);
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = DistortedCamera::pinhole(100.0, 110.0, 50.0, 40.0, 100, 80).look_at(
            Vector3::new(3.0, -4.0, 10.0),
            Vector3::zeros(),
            Vector3::z(),
        );
        let back = DistortedCamera::from_json(&cam.to_json()).unwrap();
        assert_eq!(cam, back);
        assert!(cam.validate().is_ok());
    }

    #[test]
    fn camera_json_rejects_bad_rotation() {
        let mut cam = DistortedCamera::pinhole(100.0, 100.0, 50.0, 40.0, 100, 80);
        cam.rotation[(0, 0)] = 2.0;
        assert!(DistortedCamera::from_json(&cam.to_json()).is_err());
    }

    #[test]
    fn look_at_centers_target() {
        let cam = DistortedCamera::pinhole(100.0, 100.0, 50.0, 40.0, 100, 80).look_at(
            Vector3::new(5.0, 2.0, 9.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::z(),
        );
        let p = cam.rotation * Vector3::new(1.0, 1.0, 0.0) + cam.translation;
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        assert!((cam.center() - Vector3::new(5.0, 2.0, 9.0)).norm() < 1e-12);
    }
}
