//! Synthetic scenes with exact ground truth: textured planar primitives,
//! a simulated LiDAR sampling of their surfaces, distorted cameras on
//! oblique rings, and reference images/depths from analytic ray casting
//! (never from the splatting rasterizer).

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::Feature;
use crate::camera::{pixel_ray, project};
use crate::error::{Error, Result};
use crate::scene::{DepthNormalMaps, DistortedCamera, Image, LidarCloud, RadialUnits};

/// Albedo pattern: checkerboard modulation times a linear gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    /// Checker cell size in meters (face-local coordinates).
    pub cell: f64,
    /// Relative brightness difference between checker cells.
    pub contrast: f64,
    /// World direction of the gradient and its slope per meter.
    pub gradient_axis: [f64; 3],
    pub gradient: f64,
}

impl Texture {
    pub fn plain(base: [f64; 3]) -> Self {
        Texture {
            base,
            cell: 1.0,
            contrast: 0.0,
            gradient_axis: [1.0, 0.0, 0.0],
            gradient: 0.0,
        }
    }

    fn color(&self, local: [f64; 2], world: &Vector3<f64>) -> [f64; 3] {
        let parity = ((local[0] / self.cell).floor() + (local[1] / self.cell).floor()) as i64;
        let check = if parity.rem_euclid(2) == 0 {
            1.0 + self.contrast / 2.0
        } else {
            1.0 - self.contrast / 2.0
        };
        let grad = 1.0 + self.gradient * Vector3::from(self.gradient_axis).dot(world);
        self.base.map(|c| (c * check * grad).clamp(0.0, 1.0))
    }
}

/// One textured primitive of a scene description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Horizontal rectangle at height `z`.
    Plane {
        min: [f64; 2],
        max: [f64; 2],
        z: f64,
        texture: Texture,
    },
    /// Axis-aligned box standing on `z = base`; top and four sides.
    Box {
        center: [f64; 2],
        size: [f64; 3],
        base: f64,
        texture: Texture,
    },
    /// Wedge over `[min, max]` rising linearly along +x from 0 to `height`.
    Ramp {
        min: [f64; 2],
        max: [f64; 2],
        height: f64,
        base: f64,
        texture: Texture,
    },
}

impl Primitive {
    fn texture(&self) -> &Texture {
        match self {
            Primitive::Plane { texture, .. } | Primitive::Box { texture, .. } | Primitive::Ramp { texture, .. } => {
                texture
            }
        }
    }

    /// Whether `p` is strictly inside the solid or on its hidden base.
    fn hides(&self, p: &Vector3<f64>) -> bool {
        const TOL: f64 = 1e-9;
        match self {
            Primitive::Plane { .. } => false,
            Primitive::Box {
                center, size, base, ..
            } => {
                (p.x - center[0]).abs() < size[0] / 2.0 - TOL
                    && (p.y - center[1]).abs() < size[1] / 2.0 - TOL
                    && p.z > base - TOL
                    && p.z < base + size[2] - TOL
            }
            Primitive::Ramp {
                min,
                max,
                height,
                base,
            ..
            } => {
                let top = base + height * (p.x - min[0]) / (max[0] - min[0]);
                p.x > min[0] + TOL
                    && p.x < max[0] - TOL
                    && p.y > min[1] + TOL
                    && p.y < max[1] - TOL
                    && p.z > base - TOL
                    && p.z < top - TOL
            }
        }
    }

    fn faces(&self, owner: usize) -> Vec<Face> {
        let v = Vector3::new;
        match self {
            Primitive::Plane { min, max, z, .. } => vec![Face::quad(
                owner,
                v(min[0], min[1], *z),
                v(max[0] - min[0], 0.0, 0.0),
                v(0.0, max[1] - min[1], 0.0),
            )],
            Primitive::Box {
                center, size, base, ..
            } => {
                let (hx, hy, h) = (size[0] / 2.0, size[1] / 2.0, size[2]);
                let (x0, x1, y0, y1) = (center[0] - hx, center[0] + hx, center[1] - hy, center[1] + hy);
                let (z0, z1) = (*base, base + h);
                vec![
                    Face::quad(owner, v(x0, y0, z1), v(2.0 * hx, 0.0, 0.0), v(0.0, 2.0 * hy, 0.0)),
                    Face::quad(owner, v(x0, y0, z0), v(2.0 * hx, 0.0, 0.0), v(0.0, 0.0, h)),
                    Face::quad(owner, v(x0, y1, z0), v(2.0 * hx, 0.0, 0.0), v(0.0, 0.0, h)),
                    Face::quad(owner, v(x0, y0, z0), v(0.0, 2.0 * hy, 0.0), v(0.0, 0.0, h)),
                    Face::quad(owner, v(x1, y0, z0), v(0.0, 2.0 * hy, 0.0), v(0.0, 0.0, h)),
                ]
            }
            Primitive::Ramp {
                min,
                max,
                height,
                base,
                ..
            } => {
                let (dx, dy) = (max[0] - min[0], max[1] - min[1]);
                let z0 = *base;
                vec![
                    Face::quad(owner, v(min[0], min[1], z0), v(dx, 0.0, *height), v(0.0, dy, 0.0)),
                    Face::quad(owner, v(max[0], min[1], z0), v(0.0, dy, 0.0), v(0.0, 0.0, *height)),
                    Face::triangle(owner, v(min[0], min[1], z0), v(dx, 0.0, 0.0), v(dx, 0.0, *height)),
                    Face::triangle(owner, v(min[0], max[1], z0), v(dx, 0.0, 0.0), v(dx, 0.0, *height)),
                ]
            }
        }
    }
}

/// A planar parallelogram or triangle `origin + a·e1 + b·e2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Face {
    pub owner: usize,
    pub origin: Vector3<f64>,
    pub e1: Vector3<f64>,
    pub e2: Vector3<f64>,
    pub triangle: bool,
    pub normal: Vector3<f64>,
}

impl Face {
    fn quad(owner: usize, origin: Vector3<f64>, e1: Vector3<f64>, e2: Vector3<f64>) -> Self {
        Face {
            owner,
            origin,
            e1,
            e2,
            triangle: false,
            normal: e1.cross(&e2).normalize(),
        }
    }

    fn triangle(owner: usize, origin: Vector3<f64>, e1: Vector3<f64>, e2: Vector3<f64>) -> Self {
        Face {
            triangle: true,
            ..Face::quad(owner, origin, e1, e2)
        }
    }

    pub fn area(&self) -> f64 {
        let a = self.e1.cross(&self.e2).norm();
        if self.triangle {
            a / 2.0
        } else {
            a
        }
    }

    fn inside(&self, a: f64, b: f64) -> bool {
        if self.triangle {
            a >= 0.0 && b >= 0.0 && a + b <= 1.0
        } else {
            (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)
        }
    }

    /// Ray parameter `t` and face coordinates `(a, b)` of the hit, if any.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, [f64; 2])> {
        // solve origin + t·dir = o + a·e1 + b·e2
        let m = Matrix3::from_columns(&[self.e1, self.e2, -dir]);
        let x = m.lu().solve(&(origin - self.origin))?;
        let (a, b, t) = (x.x, x.y, x.z);
        (t > 1e-9 && self.inside(a, b)).then_some((t, [a, b]))
    }

    fn local(&self, ab: [f64; 2]) -> [f64; 2] {
        [ab[0] * self.e1.norm(), ab[1] * self.e2.norm()]
    }
}

/// Camera ring: `count` cameras evenly spaced on a circle of `radius` at
/// `height`, all looking at the scene target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    pub height: f64,
    pub radius: f64,
    pub count: usize,
    /// Azimuth of the first camera, degrees.
    #[serde(default)]
    pub phase_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub rings: Vec<Ring>,
    pub target: [f64; 3],
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    pub k1: f64,
    pub k2: f64,
    pub radial_units: RadialUnits,
}

impl CameraRig {
    pub fn cameras(&self) -> Vec<DistortedCamera> {
        let fx = self.width as f64 / 2.0 / (self.fov_deg.to_radians() / 2.0).tan();
        let target = Vector3::from(self.target);
        let mut out = Vec::new();
        for ring in &self.rings {
            for i in 0..ring.count {
                let phi = ring.phase_deg.to_radians() + std::f64::consts::TAU * i as f64 / ring.count as f64;
                let eye = Vector3::new(ring.radius * phi.cos(), ring.radius * phi.sin(), ring.height);
                let mut cam = DistortedCamera::pinhole(
                    fx,
                    fx,
                    self.width as f64 / 2.0,
                    self.height as f64 / 2.0,
                    self.width,
                    self.height,
                )
                .look_at(eye, target, Vector3::z());
                cam.k1 = self.k1;
                cam.k2 = self.k2;
                cam.radial_units = self.radial_units;
                out.push(cam);
            }
        }
        out
    }
}

/// Full description of a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// LiDAR points per square meter of surface.
    pub lidar_density: f64,
    /// Standard deviation of the LiDAR noise along the surface normal, m.
    pub range_noise: f64,
    pub rig: CameraRig,
    /// Supersampling factor per axis for reference images.
    pub supersample: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// 20×20 m ground, a 5×5×8 m box and a ramp, 24 cameras on two oblique
    /// rings at 15 m and 25 m.
    pub fn standard(seed: u64) -> Self {
        let ground = Texture {
            base: [0.55, 0.5, 0.4],
            cell: 2.0,
            contrast: 0.35,
            gradient_axis: [1.0, 0.5, 0.0],
            gradient: 0.02,
        };
        let block = Texture {
            base: [0.35, 0.45, 0.7],
            cell: 1.5,
            contrast: 0.3,
            gradient_axis: [0.0, 0.0, 1.0],
            gradient: 0.04,
        };
        let ramp = Texture {
            base: [0.7, 0.35, 0.3],
            cell: 1.5,
            contrast: 0.3,
            gradient_axis: [0.0, 1.0, 0.0],
            gradient: 0.03,
        };
        SceneSpec {
            primitives: vec![
                Primitive::Plane {
                    min: [-10.0, -10.0],
                    max: [10.0, 10.0],
                    z: 0.0,
                    texture: ground,
                },
                Primitive::Box {
                    center: [-4.0, -3.0],
                    size: [5.0, 5.0, 8.0],
                    base: 0.0,
                    texture: block,
                },
                Primitive::Ramp {
                    min: [2.0, 1.0],
                    max: [8.0, 7.0],
                    height: 3.0,
                    base: 0.0,
                    texture: ramp,
                },
            ],
            lidar_density: 8.0,
            range_noise: 0.0,
            rig: CameraRig {
                rings: vec![
                    Ring {
                        height: 15.0,
                        radius: 22.0,
                        count: 12,
                        phase_deg: 0.0,
                    },
                    Ring {
                        height: 25.0,
                        radius: 14.0,
                        count: 12,
                        phase_deg: 15.0,
                    },
                ],
                target: [0.0, 0.0, 1.0],
                width: 96,
                height: 72,
                fov_deg: 65.0,
                k1: 0.05,
                k2: 0.005,
                radial_units: RadialUnits::Normalized,
            },
            supersample: 3,
            seed,
        }
    }

    /// A single textured 10×10 m plane seen by a ring of cameras.
    pub fn single_plane(seed: u64) -> Self {
        let mut s = SceneSpec::standard(seed);
        s.primitives = vec![Primitive::Plane {
            min: [-5.0, -5.0],
            max: [5.0, 5.0],
            z: 0.0,
            texture: Texture {
                base: [0.6, 0.5, 0.4],
                cell: 2.0,
                contrast: 0.3,
                gradient_axis: [1.0, 0.0, 0.0],
                gradient: 0.03,
            },
        }];
        s.rig.rings = vec![Ring {
            height: 10.0,
            radius: 8.0,
            count: 8,
            phase_deg: 0.0,
        }];
        s.rig.target = [0.0, 0.0, 0.0];
        s
    }
}

/// A generated scene and all its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub faces: Vec<Face>,
    pub cloud: LidarCloud,
    pub cameras: Vec<DistortedCamera>,
    pub images: Vec<Image>,
    /// Ray-cast depth and camera-frame normals at pixel centers.
    pub truth: Vec<DepthNormalMaps>,
}

/// Nearest surface hit along a world ray: `(t, face index, face coords)`.
pub fn cast_ray(faces: &[Face], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize, [f64; 2])> {
    let mut best: Option<(f64, usize, [f64; 2])> = None;
    for (i, f) in faces.iter().enumerate() {
        if let Some((t, ab)) = f.intersect(origin, dir) {
            if best.is_none_or(|(bt, _, _)| t < bt) {
                best = Some((t, i, ab));
            }
        }
    }
    best
}

fn shade(spec: &SceneSpec, faces: &[Face], origin: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
    match cast_ray(faces, origin, dir) {
        Some((t, i, ab)) => {
            let f = &faces[i];
            spec.primitives[f.owner]
                .texture()
                .color(f.local(ab), &(origin + dir * t))
        }
        None => [0.0; 3],
    }
}

/// Reference color image (supersampled) and center-ray depth/normal maps.
pub fn render_ground_truth(spec: &SceneSpec, faces: &[Face], cam: &DistortedCamera) -> Result<(Image, DepthNormalMaps)> {
    let (w, h) = (cam.width, cam.height);
    let ss = spec.supersample.max(1);
    let origin = cam.center();
    let rt = cam.rotation.transpose();
    let rows: Vec<Result<Vec<([f64; 3], Option<(f64, Vector3<f64>)>)>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut acc = [0.0; 3];
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                            let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                            let dir = rt * pixel_ray(cam, [u, v])?;
                            let c = shade(spec, faces, &origin, &dir);
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                    }
                    let n = (ss * ss) as f64;
                    let ray_cam = pixel_ray(cam, [x as f64 + 0.5, y as f64 + 0.5])?;
                    let dir = rt * ray_cam;
                    let geo = cast_ray(faces, &origin, &dir).map(|(t, i, _)| {
                        let mut normal = cam.rotation * faces[i].normal;
                        if normal.dot(&ray_cam) > 0.0 {
                            normal = -normal;
                        }
                        (t * ray_cam.z, normal)
                    });
                    Ok((acc.map(|c| c / n), geo))
                })
                .collect()
        })
        .collect();
    let mut img = Image::new(w, h, 3);
    let mut maps = DepthNormalMaps::invalid(w, h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, geo)) in row?.into_iter().enumerate() {
            let p = y * w + x;
            img.data[3 * p..3 * p + 3].copy_from_slice(&c);
            if let Some((d, n)) = geo {
                maps.depth[p] = d;
                maps.normal[p] = n;
                maps.valid[p] = true;
                maps.sample_uv[p] = [x as f64 + 0.5, y as f64 + 0.5];
            }
        }
    }
    Ok((img, maps))
}

/// Uniform-by-area surface samples: a Poisson number of points per face,
/// dropping points hidden inside other solids, with optional noise along
/// the face normal.
pub fn sample_lidar(spec: &SceneSpec, faces: &[Face], rng: &mut ChaCha8Rng) -> Result<Vec<Vector3<f64>>> {
    let noise = if spec.range_noise > 0.0 {
        Some(Normal::new(0.0, spec.range_noise).map_err(|e| Error::InvalidInput(e.to_string()))?)
    } else {
        None
    };
    let mut points = Vec::new();
    for f in faces {
        let mean = f.area() * spec.lidar_density;
        let count = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|e| Error::InvalidInput(e.to_string()))?
                .sample(rng) as usize
        } else {
            0
        };
        for _ in 0..count {
            let (mut a, mut b): (f64, f64) = (rng.random(), rng.random());
            if f.triangle && a + b > 1.0 {
                a = 1.0 - a;
                b = 1.0 - b;
            }
            let mut p = f.origin + f.e1 * a + f.e2 * b;
            let hidden = spec
                .primitives
                .iter()
                .enumerate()
                .any(|(j, prim)| j != f.owner && prim.hides(&p));
            if hidden {
                continue;
            }
            if let Some(n) = &noise {
                p += f.normal * n.sample(rng);
            }
            points.push(p);
        }
    }
    Ok(points)
}

/// Builds the full synthetic scene.
pub fn make_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.primitives.is_empty() {
        return Err(Error::EmptyScene);
    }
    let faces: Vec<Face> = spec
        .primitives
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.faces(i))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let points = sample_lidar(spec, &faces, &mut rng)?;
    let cloud = LidarCloud::new(points, None)?;
    let cameras = spec.rig.cameras();
    let mut images = Vec::with_capacity(cameras.len());
    let mut truth = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        cam.validate()?;
        let (img, maps) = render_ground_truth(spec, &faces, cam)?;
        images.push(img);
        truth.push(maps);
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        faces,
        cloud,
        cameras,
        images,
        truth,
    })
}

/// Seeded uniform subsample of `⌈fraction·n⌉` points, in original order,
/// with normals re-estimated.
pub fn downsample_cloud(cloud: &LidarCloud, fraction: f64, seed: u64) -> Result<LidarCloud> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let n = cloud.len();
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    let points = idx.iter().map(|&i| cloud.points[i]).collect();
    LidarCloud::new(points, None)
}

/// Distance from `p` to the closest face of the scene.
pub fn surface_distance(faces: &[Face], p: &Vector3<f64>) -> f64 {
    faces
        .iter()
        .map(|f| {
            // closest point on the face by clamped barycentric search
            let m = Matrix3::from_columns(&[f.e1, f.e2, f.normal]);
            let x = m.lu().solve(&(p - f.origin)).unwrap_or_else(Vector3::zeros);
            let (a, b) = (x.x, x.y);
            if f.inside(a, b) {
                x.z.abs()
            } else {
                closest_on_edges(f, p)
            }
        })
        .fold(f64::INFINITY, f64::min)
}

fn closest_on_edges(f: &Face, p: &Vector3<f64>) -> f64 {
    let corners = if f.triangle {
        vec![f.origin, f.origin + f.e1, f.origin + f.e2]
    } else {
        vec![f.origin, f.origin + f.e1, f.origin + f.e1 + f.e2, f.origin + f.e2]
    };
    (0..corners.len())
        .map(|i| {
            let (a, b) = (corners[i], corners[(i + 1) % corners.len()]);
            let ab = b - a;
            let s = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            (a + ab * s - p).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Whether world point `p` is the first surface hit seen from `cam`.
pub fn is_visible(faces: &[Face], cam: &DistortedCamera, p: &Vector3<f64>) -> bool {
    let origin = cam.center();
    let d = p - origin;
    let dist = d.norm();
    match cast_ray(faces, &origin, &(d / dist)) {
        Some((t, _, _)) => t >= dist - 1e-6 * dist.max(1.0),
        None => true,
    }
}

/// Up to `count` visible LiDAR points of view `image_id` as features, with
/// Gaussian pixel noise of `noise_px` and the exact 3D location attached.
pub fn visible_features(
    scene: &SyntheticScene,
    image_id: usize,
    count: usize,
    noise_px: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Feature>> {
    let cam = &scene.cameras[image_id];
    let candidates: Vec<usize> = (0..scene.cloud.len())
        .filter(|&i| {
            let p = &scene.cloud.points[i];
            project(cam, p).is_some_and(|px| {
                px.u >= 0.0 && px.v >= 0.0 && px.u < cam.width as f64 && px.v < cam.height as f64
            }) && is_visible(&scene.faces, cam, p)
        })
        .collect();
    let take = count.min(candidates.len());
    let mut chosen = sample(rng, candidates.len(), take).into_vec();
    chosen.sort_unstable();
    let noise = Normal::new(0.0, noise_px.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(chosen
        .into_iter()
        .map(|c| {
            let p = scene.cloud.points[candidates[c]];
            let px = project(cam, &p).expect("candidate projects");
            let (du, dv) = if noise_px > 0.0 {
                (noise.sample(rng), noise.sample(rng))
            } else {
                (0.0, 0.0)
            };
            Feature {
                image_id,
                u: px.u + du,
                v: px.v + dv,
                x: Some(p.x),
                y: Some(p.y),
                z: Some(p.z),
            }
        })
        .collect())
}

/// Applies a rotation of `rot_deg` about a random axis (left-multiplied)
/// and a random translation of length `trans_m` to the pose.
pub fn perturb_camera(cam: &DistortedCamera, rot_deg: f64, trans_m: f64, rng: &mut ChaCha8Rng) -> DistortedCamera {
    let unit = |rng: &mut ChaCha8Rng| {
        let n = Normal::new(0.0, 1.0).unwrap();
        Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)).normalize()
    };
    let axis = unit(rng);
    let dir = unit(rng);
    let mut out = cam.clone();
    out.rotation = nalgebra::Rotation3::new(axis * rot_deg.to_radians()).matrix() * cam.rotation;
    out.translation = cam.translation + dir * trans_m;
    out
}
