//! Projection through the radially distorted pinhole camera.
//!
//! The ideal pinhole pixel `(u', v')` is pushed away from (or toward) the
//! principal point by the factor `1 + k1·r² + k2·r⁴`, where `r` is the ideal
//! offset from the principal point in the camera's [`RadialUnits`].
//! [`undistort`] inverts that mapping by fixed-point iteration.

use nalgebra::{Matrix2x3, Vector3};

use crate::error::{Error, Result};
use crate::math::Scalar;
use crate::scene::{DistortedCamera, LidarCloud, RadialUnits};

/// Points at or closer than this camera-frame depth are treated as behind
/// the camera.
pub const NEAR_DEPTH: f64 = 1e-9;

const UNDISTORT_MAX_ITERS: usize = 50;
const UNDISTORT_TOL: f64 = 1e-10;

/// Continuous pixel location plus camera-frame depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[inline]
fn radial_sq<T: Scalar>(cam: &DistortedCamera, a: T, b: T) -> T {
    match cam.radial_units {
        RadialUnits::Pixels => a * a + b * b,
        RadialUnits::Normalized => {
            let (x, y) = (a / cam.fx, b / cam.fy);
            x * x + y * y
        }
    }
}

#[inline]
fn radial_factor<T: Scalar>(cam: &DistortedCamera, r2: T) -> T {
    r2 * cam.k1 + r2 * r2 * cam.k2 + 1.0
}

/// Maps an ideal pixel to its distorted location.
pub fn distort(cam: &DistortedCamera, ideal: [f64; 2]) -> [f64; 2] {
    let (a, b) = (ideal[0] - cam.cx, ideal[1] - cam.cy);
    let f = radial_factor(cam, radial_sq(cam, a, b));
    [cam.cx + a * f, cam.cy + b * f]
}

/// Distorted pixel of a camera-frame point (no behind-camera check).
#[inline]
pub(crate) fn project_camera_point<T: Scalar>(cam: &DistortedCamera, pc: &[T; 3]) -> [T; 2] {
    let a = pc[0] / pc[2] * cam.fx;
    let b = pc[1] / pc[2] * cam.fy;
    let f = radial_factor(cam, radial_sq(cam, a, b));
    [a * f + cam.cx, b * f + cam.cy]
}

/// `∂(u, v)/∂p_cam` of [`project_camera_point`], including distortion.
pub(crate) fn camera_point_jacobian<T: Scalar>(cam: &DistortedCamera, pc: &[T; 3]) -> [[T; 3]; 2] {
    let inv_z = T::cst(1.0) / pc[2];
    let a = pc[0] * inv_z * cam.fx;
    let b = pc[1] * inv_z * cam.fy;
    // pinhole part, rows d a / d p and d b / d p
    let zero = T::cst(0.0);
    let pa = [inv_z * cam.fx, zero, -(a * inv_z)];
    let pb = [zero, inv_z * cam.fy, -(b * inv_z)];
    let r2 = radial_sq(cam, a, b);
    let f = radial_factor(cam, r2);
    let df = r2 * (2.0 * cam.k2) + cam.k1;
    let (dra, drb) = match cam.radial_units {
        RadialUnits::Pixels => (a * 2.0, b * 2.0),
        RadialUnits::Normalized => (a * (2.0 / (cam.fx * cam.fx)), b * (2.0 / (cam.fy * cam.fy))),
    };
    // D = f·I + f'·[a; b]·[dr²/da, dr²/db]
    let d00 = f + a * df * dra;
    let d01 = a * df * drb;
    let d10 = b * df * dra;
    let d11 = f + b * df * drb;
    let mut j = [[zero; 3]; 2];
    for c in 0..3 {
        j[0][c] = d00 * pa[c] + d01 * pb[c];
        j[1][c] = d10 * pa[c] + d11 * pb[c];
    }
    j
}

/// Projects a world point to distorted pixel coordinates, or `None` when it
/// lies at or behind the camera plane. The result may fall outside the image.
pub fn project(cam: &DistortedCamera, p_world: &Vector3<f64>) -> Option<PixelCoord> {
    let pc = cam.rotation * p_world + cam.translation;
    if pc.z <= NEAR_DEPTH {
        return None;
    }
    let [u, v] = project_camera_point(cam, &[pc.x, pc.y, pc.z]);
    Some(PixelCoord { u, v, depth: pc.z })
}

/// Inverts the distortion: finds the ideal pixel whose distorted image is
/// `distorted`.
pub fn undistort(cam: &DistortedCamera, distorted: [f64; 2]) -> Result<[f64; 2]> {
    let (qa, qb) = (distorted[0] - cam.cx, distorted[1] - cam.cy);
    let (mut a, mut b) = (qa, qb);
    for _ in 0..UNDISTORT_MAX_ITERS {
        let f = radial_factor(cam, radial_sq(cam, a, b));
        let (na, nb) = (qa / f, qb / f);
        let step = ((na - a).powi(2) + (nb - b).powi(2)).sqrt();
        a = na;
        b = nb;
        if step < UNDISTORT_TOL {
            return Ok([cam.cx + a, cam.cy + b]);
        }
    }
    let back = distort(cam, [cam.cx + a, cam.cy + b]);
    let residual = ((back[0] - distorted[0]).powi(2) + (back[1] - distorted[1]).powi(2)).sqrt();
    Err(Error::UndistortDiverged {
        iterations: UNDISTORT_MAX_ITERS,
        residual,
    })
}

/// Camera-frame unit ray through a distorted pixel.
pub fn pixel_ray(cam: &DistortedCamera, distorted: [f64; 2]) -> Result<Vector3<f64>> {
    let [u, v] = undistort(cam, distorted)?;
    Ok(Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0).normalize())
}

/// Analytic `∂(u, v)/∂p_world`.
pub fn project_jacobian(cam: &DistortedCamera, p_world: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
    let pc = cam.rotation * p_world + cam.translation;
    if pc.z <= NEAR_DEPTH {
        return Err(Error::BehindCamera);
    }
    let j = camera_point_jacobian(cam, &[pc.x, pc.y, pc.z]);
    let jc = Matrix2x3::from_fn(|r, c| j[r][c]);
    Ok(jc * cam.rotation)
}

/// Every cloud point in front of the camera that lands inside the image,
/// in cloud order.
pub fn project_cloud(cam: &DistortedCamera, cloud: &LidarCloud) -> Vec<(usize, PixelCoord)> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let px = project(cam, p)?;
            (px.u >= 0.0 && px.u < w && px.v >= 0.0 && px.v < h).then_some((i, px))
        })
        .collect()
}
