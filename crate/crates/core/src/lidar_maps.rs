//! LiDAR-derived depth and normal maps for a camera view: a z-buffered
//! sparse splat of the projected cloud, then a windowed plane fit in
//! disparity space to fill the holes.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::{project_cloud, undistort};
use crate::scene::{DepthNormalMaps, DistortedCamera, LidarCloud};

pub const DEFAULT_WINDOW: usize = 21;

/// Relative depth slack of the footprint visibility test.
pub const VISIBILITY_SLACK: f64 = 0.03;

const MAX_FOOTPRINT_PX: f64 = 8.0;

/// Writes each visible LiDAR point's depth and camera-frame normal into the
/// pixel it lands in; the nearest point wins collisions.
///
/// Depth is read off the point's tangent plane along the ray through the
/// pixel center. Each point also covers a disk of the size of its local
/// sample spacing in a second z-buffer, and samples lying behind a nearer
/// surface's disk are dropped.
pub fn splat_sparse(cloud: &LidarCloud, cam: &DistortedCamera) -> DepthNormalMaps {
    let (w, h) = (cam.width, cam.height);
    let mut maps = DepthNormalMaps::invalid(w, h);
    if cloud.is_empty() {
        return maps;
    }
    // camera-frame rays through pixel centers, scaled to unit depth
    let rays: Vec<Option<Vector3<f64>>> = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let c = [(p % w) as f64 + 0.5, (p / w) as f64 + 0.5];
            undistort(cam, c)
                .ok()
                .map(|[u, v]| Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0))
        })
        .collect();
    let projected = project_cloud(cam, cloud);
    let samples: Vec<Sample> = projected
        .par_iter()
        .map(|&(i, px)| {
            let pc = cam.rotation * cloud.points[i] + cam.translation;
            let mut n = cam.rotation * cloud.normals[i];
            if n.dot(&pc) > 0.0 {
                n = -n;
            }
            let nn = cloud.knn(&cloud.points[i], 4);
            let d: Vec<f64> = nn.iter().skip(1).map(|&(_, d)| d).filter(|d| *d > 0.0).collect();
            let spacing = if d.is_empty() { 0.0 } else { d.iter().sum::<f64>() / d.len() as f64 };
            Sample {
                u: px.u,
                v: px.v,
                depth: px.depth,
                point: pc,
                normal: n,
                radius: (cam.fx.max(cam.fy) * spacing / px.depth).min(MAX_FOOTPRINT_PX),
            }
        })
        .collect();

    let mut cover = vec![f64::INFINITY; w * h];
    for s in &samples {
        let r = s.radius.max(0.5);
        let (x0, x1) = ((s.u - r).floor().max(0.0) as usize, ((s.u + r).floor() as usize).min(w - 1));
        let (y0, y1) = ((s.v - r).floor().max(0.0) as usize, ((s.v + r).floor() as usize).min(h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - s.u, y as f64 + 0.5 - s.v);
                let inside = (x as f64 <= s.u && s.u < x as f64 + 1.0 && y as f64 <= s.v && s.v < y as f64 + 1.0)
                    || dx * dx + dy * dy <= s.radius * s.radius;
                if !inside {
                    continue;
                }
                let p = y * w + x;
                let d = s.plane_depth(rays[p].as_ref());
                if d < cover[p] {
                    cover[p] = d;
                }
            }
        }
    }

    for s in &samples {
        let (x, y) = (s.u.floor() as usize, s.v.floor() as usize);
        let p = y * w + x;
        let d = s.plane_depth(rays[p].as_ref());
        if d > cover[p] * (1.0 + VISIBILITY_SLACK) {
            continue;
        }
        if maps.valid[p] && maps.depth[p] <= d {
            continue;
        }
        maps.depth[p] = d;
        maps.normal[p] = s.normal;
        maps.valid[p] = true;
        maps.sample_uv[p] = [x as f64 + 0.5, y as f64 + 0.5];
    }
    maps
}

struct Sample {
    u: f64,
    v: f64,
    depth: f64,
    point: Vector3<f64>,
    normal: Vector3<f64>,
    radius: f64,
}

impl Sample {
    /// Depth where the ray meets the tangent plane, or the point's own depth
    /// when the ray grazes the plane.
    fn plane_depth(&self, ray: Option<&Vector3<f64>>) -> f64 {
        let Some(r) = ray else { return self.depth };
        let denom = self.normal.dot(r);
        if denom.abs() < 0.1 * r.norm() {
            return self.depth;
        }
        let t = self.normal.dot(&self.point) / denom;
        if t > 0.5 * self.depth && t < 2.0 * self.depth {
            t
        } else {
            self.depth
        }
    }
}

/// Fills invalid pixels that see at least three valid pixels inside a
/// `window`×`window` neighborhood with the least-squares disparity plane
/// through them. Valid pixels pass through unchanged.
pub fn densify_maps(sparse: &DepthNormalMaps, cam: &DistortedCamera, window: usize) -> DepthNormalMaps {
    let (w, h) = (sparse.width, sparse.height);
    let half = (window / 2) as isize;
    // ideal (undistorted) sample locations, where disparity is affine on planes
    let ideal: Vec<Option<[f64; 2]>> = (0..w * h)
        .map(|p| {
            if sparse.valid[p] {
                undistort(cam, sparse.sample_uv[p]).ok()
            } else {
                None
            }
        })
        .collect();

    let rows: Vec<Vec<Option<(f64, Vector3<f64>)>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    if sparse.valid[y * w + x] {
                        return None;
                    }
                    let center = [x as f64 + 0.5, y as f64 + 0.5];
                    let target = undistort(cam, center).ok()?;
                    fit_pixel(sparse, &ideal, cam, x as isize, y as isize, half, target)
                })
                .collect()
        })
        .collect();

    let mut out = sparse.clone();
    for (y, row) in rows.into_iter().enumerate() {
        for (x, fill) in row.into_iter().enumerate() {
            if let Some((depth, normal)) = fill {
                let p = y * w + x;
                out.depth[p] = depth;
                out.normal[p] = normal;
                out.valid[p] = true;
                out.sample_uv[p] = [x as f64 + 0.5, y as f64 + 0.5];
            }
        }
    }
    out
}

fn fit_pixel(
    sparse: &DepthNormalMaps,
    ideal: &[Option<[f64; 2]>],
    cam: &DistortedCamera,
    x: isize,
    y: isize,
    half: isize,
    target: [f64; 2],
) -> Option<(f64, Vector3<f64>)> {
    let (w, h) = (sparse.width as isize, sparse.height as isize);
    let mut m = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    let mut count = 0usize;
    for yy in (y - half).max(0)..=(y + half).min(h - 1) {
        for xx in (x - half).max(0)..=(x + half).min(w - 1) {
            let p = (yy * w + xx) as usize;
            let Some(uv) = ideal[p] else { continue };
            // coordinates relative to the target keep the system well scaled
            let row = Vector3::new(uv[0] - target[0], uv[1] - target[1], 1.0);
            m += row * row.transpose();
            rhs += row / sparse.depth[p];
            count += 1;
        }
    }
    if count < 3 {
        return None;
    }
    let scale = m.trace();
    if m.determinant().abs() <= 1e-12 * scale * scale * scale {
        return None;
    }
    let coef = m.lu().solve(&rhs)?;
    let disparity = coef.z;
    if !(disparity > 0.0) || !disparity.is_finite() {
        return None;
    }
    let (a, b) = (coef.x, coef.y);
    let c_abs = disparity - a * target[0] - b * target[1];
    let n = Vector3::new(a * cam.fx, b * cam.fy, a * cam.cx + b * cam.cy + c_abs);
    let len = n.norm();
    if !(len > 0.0) {
        return None;
    }
    // the plane satisfies n·P = 1 > 0, so -n faces the camera
    Some((1.0 / disparity, -n / len))
}
