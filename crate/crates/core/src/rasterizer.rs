//! Tiled, differentiable splatting of a [`GaussianSet`] through a
//! [`DistortedCamera`].
//!
//! Each Gaussian is projected to a 2D splat: its mean goes through the full
//! distorted projection, its covariance through the local Jacobian of that
//! projection (`J·R·Σ·Rᵀ·Jᵀ` plus a 0.3 px² floor). Splats are binned into
//! 16×16 tiles, depth-sorted per tile and alpha-composited front to back.
//!
//! The backward pass replays each pixel's compositing, walks it back to
//! front, and accumulates per-splat gradients per tile. Tiles are merged in
//! a fixed order so results do not depend on the worker count. Gradients of
//! the splat quantities with respect to the Gaussian parameters come from
//! forward-mode dual numbers over the projection.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{camera_point_jacobian, project_camera_point, NEAR_DEPTH};
use crate::error::{Error, Result};
use crate::math::{dot3, mat3_vec, quat_to_mat, Dual, Mat3, Scalar};
use crate::scene::{DistortedCamera, GaussianSet, Image};
use crate::sh;

pub const TILE_SIZE: usize = 16;
/// Compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Pixels with accumulated alpha below this have no depth or normal.
pub const ALPHA_VALID: f64 = 1e-4;
/// A splat covers a pixel when its effective alpha exceeds this.
pub const COVERAGE_ALPHA: f64 = 1.0 / 255.0;
/// Anti-aliasing floor added to the 2D covariance diagonal, px².
pub const COV2D_DILATION: f64 = 0.3;
/// Splat footprints extend to where their alpha falls below this.
const FOOTPRINT_ALPHA: f64 = 1e-9;
/// Means whose ideal projection lies beyond this many image sizes from the
/// image are culled.
const FRUSTUM_MARGIN: f64 = 0.5;

/// Number of differentiable geometric inputs per Gaussian:
/// position (3), quaternion (4), log-scale (3).
const GEOM_PARAMS: usize = 10;
type D10 = Dual<GEOM_PARAMS>;

#[derive(Clone, Copy, Debug, Default)]
pub struct RenderSettings {
    pub background: [f64; 3],
}

/// A Gaussian projected into the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian in the set.
    pub index: usize,
    pub mean2d: [f64; 2],
    /// Upper triangle `(xx, xy, yy)` of the 2D covariance, px².
    pub cov2d: [f64; 3],
    /// Upper triangle of the inverse covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub normal_cam: [f64; 3],
    color_clamped: [bool; 3],
    axis: usize,
    flip: f64,
    tile_rect: [usize; 4],
    min_power: f64,
}

impl Splat2D {
    /// Effective alpha at pixel-space point `(x, y)`.
    #[inline]
    pub fn alpha_at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.mean2d[0], y - self.mean2d[1]);
        let power = -0.5 * (self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy);
        self.opacity * power.exp()
    }

    /// [`Splat2D::alpha_at`], but exactly zero where the alpha would fall
    /// below the footprint threshold; the renderer and its backward pass
    /// both use this form.
    #[inline]
    fn footprint_alpha(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.mean2d[0], y - self.mean2d[1]);
        let power = -0.5 * (self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy);
        if power < self.min_power {
            0.0
        } else {
            self.opacity * power.exp()
        }
    }
}

/// Rendered buffers for one view.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Image,
    /// Expected (alpha-weighted mean) camera depth, 0 where invalid.
    pub depth: Vec<f64>,
    /// Composited camera-frame unit normal, zero where invalid.
    pub normal: Vec<Vector3<f64>>,
    pub alpha: Vec<f64>,
    /// Pixels with alpha ≥ [`ALPHA_VALID`] and a defined normal.
    pub valid: Vec<bool>,
    /// Per Gaussian: number of pixels where its effective alpha exceeds
    /// [`COVERAGE_ALPHA`].
    pub coverage: Vec<u32>,
    pub splats: Vec<Splat2D>,
    background: [f64; 3],
    tiles: Vec<Vec<u32>>,
    n_contrib: Vec<u32>,
    depth_accum: Vec<f64>,
    normal_accum: Vec<[f64; 3]>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

/// Upstream gradients of a scalar loss with respect to the render buffers.
#[derive(Clone, Debug)]
pub struct BufferGrads {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<Vector3<f64>>,
    pub alpha: Vec<f64>,
}

impl BufferGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        BufferGrads {
            color: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            normal: vec![Vector3::zeros(); n],
            alpha: vec![0.0; n],
        }
    }
}

/// Layout of one Gaussian's parameters in flat gradient / optimizer
/// buffers: position (3), rotation (4), log-scale (3), logit-opacity (1),
/// then SH coefficients (3 per basis function).
pub mod layout {
    pub const POSITION: usize = 0;
    pub const ROTATION: usize = 3;
    pub const LOG_SCALE: usize = 7;
    pub const OPACITY: usize = 10;
    pub const SH: usize = 11;

    pub fn stride(sh_count: usize) -> usize {
        SH + 3 * sh_count
    }
}

/// Per-Gaussian parameter gradients plus densification statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub stride: usize,
    /// `stride` values per Gaussian, see [`layout`].
    pub params: Vec<f64>,
    /// `‖∂L/∂µ_ndc‖` per Gaussian for this view (0 when not visible), where
    /// `L` is the part of the loss that reaches the color buffer.
    pub ndc_norm: Vec<f64>,
    /// Pixel coverage count per Gaussian for this view.
    pub coverage: Vec<u32>,
}

impl GaussianGrads {
    pub fn zeros(count: usize, sh_count: usize) -> Self {
        let stride = layout::stride(sh_count);
        GaussianGrads {
            stride,
            params: vec![0.0; stride * count],
            ndc_norm: vec![0.0; count],
            coverage: vec![0; count],
        }
    }

    pub fn of(&self, i: usize) -> &[f64] {
        &self.params[i * self.stride..(i + 1) * self.stride]
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        let g = self.of(i);
        Vector3::new(g[0], g[1], g[2])
    }
}

struct Projected<T> {
    mean: [T; 2],
    cov: [T; 3],
    depth: T,
    normal: [T; 3],
    color: [T; 3],
}

#[allow(clippy::too_many_arguments)]
fn project_generic<T: Scalar>(
    cam: &DistortedCamera,
    rot_cam: &Mat3<f64>,
    pos: &[T; 3],
    quat: &[T; 4],
    log_scale: &[T; 3],
    sh_coeffs: &[[f64; 3]],
    degree: usize,
    axis: usize,
    flip: f64,
) -> Projected<T> {
    let mut pc = mat3_vec(rot_cam, pos);
    for (k, v) in pc.iter_mut().enumerate() {
        *v = *v + cam.translation[k];
    }
    let mean = project_camera_point(cam, &pc);
    let j = camera_point_jacobian(cam, &pc);
    // M = J · R_cam
    let zero = T::cst(0.0);
    let mut m = [[zero; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            m[r][c] = j[r][0] * rot_cam[0][c] + j[r][1] * rot_cam[1][c] + j[r][2] * rot_cam[2][c];
        }
    }
    let rg = quat_to_mat(quat);
    let s2 = [
        (log_scale[0] * 2.0).exp(),
        (log_scale[1] * 2.0).exp(),
        (log_scale[2] * 2.0).exp(),
    ];
    // A = M · R_g (2x3); cov2d = A · diag(s²) · Aᵀ
    let mut a = [[zero; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            a[r][c] = m[r][0] * rg[0][c] + m[r][1] * rg[1][c] + m[r][2] * rg[2][c];
        }
    }
    let mut cov = [zero; 3];
    for k in 0..3 {
        cov[0] = cov[0] + a[0][k] * a[0][k] * s2[k];
        cov[1] = cov[1] + a[0][k] * a[1][k] * s2[k];
        cov[2] = cov[2] + a[1][k] * a[1][k] * s2[k];
    }
    cov[0] = cov[0] + COV2D_DILATION;
    cov[2] = cov[2] + COV2D_DILATION;

    let axis_world = [rg[0][axis], rg[1][axis], rg[2][axis]];
    let n = mat3_vec(rot_cam, &axis_world);
    let normal = [n[0] * flip, n[1] * flip, n[2] * flip];

    let basis: Vec<T> = if degree == 0 {
        vec![T::cst(sh::SH_C0)]
    } else {
        let center = cam.center();
        let d = [pos[0] - center.x, pos[1] - center.y, pos[2] - center.z];
        let len = dot3(&d, &d).sqrt();
        sh::basis(degree, &[d[0] / len, d[1] / len, d[2] / len])
    };
    let mut color = [T::cst(0.5); 3];
    for (k, y) in basis.iter().enumerate() {
        for (ch, c) in color.iter_mut().enumerate() {
            *c = *c + *y * sh_coeffs[k][ch];
        }
    }
    Projected {
        mean,
        cov,
        depth: pc[2],
        normal,
        color,
    }
}

fn rot_cam_array(cam: &DistortedCamera) -> Mat3<f64> {
    let r = cam.rotation;
    [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ]
}

fn smallest_axis(log_scale: &Vector3<f64>) -> usize {
    let mut axis = 0;
    for k in 1..3 {
        if log_scale[k] < log_scale[axis] {
            axis = k;
        }
    }
    axis
}

fn tiles_x(cam: &DistortedCamera) -> usize {
    cam.width.div_ceil(TILE_SIZE)
}

fn tiles_y(cam: &DistortedCamera) -> usize {
    cam.height.div_ceil(TILE_SIZE)
}

/// Projects every visible Gaussian. Culled Gaussians (behind the camera,
/// far outside the frustum, or with a footprint missing the image) are
/// omitted; the rest appear in set order.
pub fn project_splats(set: &GaussianSet, cam: &DistortedCamera) -> Result<Vec<Splat2D>> {
    set.validate()?;
    let rot_cam = rot_cam_array(cam);
    let (w, h) = (cam.width as f64, cam.height as f64);
    let (ntx, nty) = (tiles_x(cam), tiles_y(cam));
    let mut out = Vec::new();
    for (index, g) in set.gaussians.iter().enumerate() {
        let pc = cam.rotation * g.position + cam.translation;
        if pc.z <= NEAR_DEPTH {
            continue;
        }
        let iu = cam.fx * pc.x / pc.z + cam.cx;
        let iv = cam.fy * pc.y / pc.z + cam.cy;
        if iu < -FRUSTUM_MARGIN * w || iu > (1.0 + FRUSTUM_MARGIN) * w || iv < -FRUSTUM_MARGIN * h || iv > (1.0 + FRUSTUM_MARGIN) * h {
            continue;
        }
        let opacity = g.opacity();
        if opacity <= FOOTPRINT_ALPHA {
            continue;
        }
        let axis = smallest_axis(&g.log_scale);
        let rg = g.rotation_matrix();
        let n_cam = cam.rotation * rg.column(axis);
        let flip = if n_cam.dot(&pc) > 0.0 { -1.0 } else { 1.0 };
        let p = project_generic::<f64>(
            cam,
            &rot_cam,
            &[g.position.x, g.position.y, g.position.z],
            &g.rotation,
            &[g.log_scale.x, g.log_scale.y, g.log_scale.z],
            &g.sh,
            set.sh_degree,
            axis,
            flip,
        );
        let [a, b, c] = p.cov;
        let det = a * c - b * b;
        if !(det > 0.0) || !p.mean.iter().all(|v| v.is_finite()) {
            continue;
        }
        let conic = [c / det, -b / det, a / det];
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
        let radius = (2.0 * (opacity / FOOTPRINT_ALPHA).ln() * lambda_max).sqrt();
        let [mu, mv] = p.mean;
        let x0 = (mu - radius).floor().max(0.0);
        let x1 = (mu + radius).ceil().min(w);
        let y0 = (mv - radius).floor().max(0.0);
        let y1 = (mv + radius).ceil().min(h);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        let tile_rect = [
            (x0 as usize) / TILE_SIZE,
            ((x1 as usize).div_ceil(TILE_SIZE)).min(ntx),
            (y0 as usize) / TILE_SIZE,
            ((y1 as usize).div_ceil(TILE_SIZE)).min(nty),
        ];
        let mut color = p.color;
        let mut clamped = [false; 3];
        for ch in 0..3 {
            if color[ch] < 0.0 {
                color[ch] = 0.0;
                clamped[ch] = true;
            }
        }
        out.push(Splat2D {
            index,
            mean2d: p.mean,
            cov2d: p.cov,
            conic,
            depth: p.depth,
            color,
            opacity,
            normal_cam: p.normal,
            color_clamped: clamped,
            axis,
            flip,
            tile_rect,
            min_power: (FOOTPRINT_ALPHA / opacity).ln(),
        });
    }
    Ok(out)
}

fn bin_tiles(splats: &[Splat2D], cam: &DistortedCamera) -> Vec<Vec<u32>> {
    let ntx = tiles_x(cam);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); ntx * tiles_y(cam)];
    for (s, sp) in splats.iter().enumerate() {
        let [tx0, tx1, ty0, ty1] = sp.tile_rect;
        for ty in ty0..ty1 {
            for tx in tx0..tx1 {
                tiles[ty * ntx + tx].push(s as u32);
            }
        }
    }
    for list in tiles.iter_mut() {
        list.sort_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth.total_cmp(&sb.depth).then(sa.index.cmp(&sb.index))
        });
    }
    tiles
}

struct TileForward {
    color: Vec<[f64; 3]>,
    transmittance: Vec<f64>,
    depth_accum: Vec<f64>,
    normal_accum: Vec<[f64; 3]>,
    n_contrib: Vec<u32>,
    coverage: Vec<u32>,
}

fn tile_bounds(cam: &DistortedCamera, tile: usize) -> (usize, usize, usize, usize) {
    let ntx = tiles_x(cam);
    let (tx, ty) = (tile % ntx, tile / ntx);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0, (x0 + TILE_SIZE).min(cam.width), y0, (y0 + TILE_SIZE).min(cam.height))
}

fn forward_tile(cam: &DistortedCamera, tile: usize, list: &[u32], splats: &[Splat2D]) -> TileForward {
    let (x0, x1, y0, y1) = tile_bounds(cam, tile);
    let n = (x1 - x0) * (y1 - y0);
    let mut out = TileForward {
        color: vec![[0.0; 3]; n],
        transmittance: vec![1.0; n],
        depth_accum: vec![0.0; n],
        normal_accum: vec![[0.0; 3]; n],
        n_contrib: vec![0; n],
        coverage: vec![0; list.len()],
    };
    let mut p = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut z = 0.0;
            let mut nrm = [0.0; 3];
            let mut count = 0u32;
            for (local, &s) in list.iter().enumerate() {
                let sp = &splats[s as usize];
                let alpha = sp.footprint_alpha(px, py);
                count += 1;
                if alpha == 0.0 {
                    continue;
                }
                let w = alpha * t;
                for k in 0..3 {
                    c[k] += sp.color[k] * w;
                    nrm[k] += sp.normal_cam[k] * w;
                }
                z += sp.depth * w;
                if alpha > COVERAGE_ALPHA {
                    out.coverage[local] += 1;
                }
                t *= 1.0 - alpha;
                if t < TRANSMITTANCE_EPS {
                    break;
                }
            }
            out.color[p] = c;
            out.transmittance[p] = t;
            out.depth_accum[p] = z;
            out.normal_accum[p] = nrm;
            out.n_contrib[p] = count;
            p += 1;
        }
    }
    out
}

/// Renders color, expected depth, normal and alpha buffers.
pub fn render(set: &GaussianSet, cam: &DistortedCamera, settings: &RenderSettings) -> Result<RenderOutput> {
    let splats = project_splats(set, cam)?;
    let tiles = bin_tiles(&splats, cam);
    let results: Vec<TileForward> = (0..tiles.len())
        .into_par_iter()
        .map(|t| forward_tile(cam, t, &tiles[t], &splats))
        .collect();

    let (w, h) = (cam.width, cam.height);
    let npix = w * h;
    let mut color = Image::new(w, h, 3);
    let mut depth = vec![0.0; npix];
    let mut normal = vec![Vector3::zeros(); npix];
    let mut alpha = vec![0.0; npix];
    let mut valid = vec![false; npix];
    let mut n_contrib = vec![0u32; npix];
    let mut depth_accum = vec![0.0; npix];
    let mut normal_accum = vec![[0.0; 3]; npix];
    let mut coverage = vec![0u32; set.len()];
    let bg = settings.background;
    for (tile, res) in results.iter().enumerate() {
        let (x0, x1, y0, y1) = tile_bounds(cam, tile);
        let mut p = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * w + x;
                let t = res.transmittance[p];
                for k in 0..3 {
                    color.data[3 * i + k] = res.color[p][k] + t * bg[k];
                }
                let a = 1.0 - t;
                alpha[i] = a;
                n_contrib[i] = res.n_contrib[p];
                depth_accum[i] = res.depth_accum[p];
                normal_accum[i] = res.normal_accum[p];
                let s = Vector3::from(res.normal_accum[p]);
                let len = s.norm();
                if a >= ALPHA_VALID && len > 0.0 {
                    depth[i] = res.depth_accum[p] / a;
                    normal[i] = s / len;
                    valid[i] = true;
                }
                p += 1;
            }
        }
        for (local, &s) in tiles[tile].iter().enumerate() {
            coverage[splats[s as usize].index] += res.coverage[local];
        }
    }
    Ok(RenderOutput {
        color,
        depth,
        normal,
        alpha,
        valid,
        coverage,
        splats,
        background: bg,
        tiles,
        n_contrib,
        depth_accum,
        normal_accum,
    })
}

/// Gradient of the loss with respect to the per-splat 2D quantities.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    /// Mean gradient from the color buffer alone.
    color_mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    normal: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
            self.color_mean[k] += o.color_mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
            self.normal[k] += o.normal[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

// feature vector per splat: color (3), depth, normal (3), alpha
const NF: usize = 8;

fn backward_tile(
    cam: &DistortedCamera,
    tile: usize,
    out: &RenderOutput,
    grads: &BufferGrads,
    scratch: &mut Vec<(f64, f64)>,
) -> Vec<SplatGrad> {
    let list = &out.tiles[tile];
    let splats = &out.splats;
    let mut acc = vec![SplatGrad::default(); list.len()];
    let (x0, x1, y0, y1) = tile_bounds(cam, tile);
    let w = cam.width;
    let bg = out.background;
    for y in y0..y1 {
        for x in x0..x1 {
            let i = y * w + x;
            let n = out.n_contrib[i] as usize;
            if n == 0 {
                continue;
            }
            // upstream gradient on F = Σ f_k w_k
            let mut g = [0.0; NF];
            let a = out.alpha[i];
            for k in 0..3 {
                g[k] = grads.color[3 * i + k];
                g[7] -= grads.color[3 * i + k] * bg[k];
            }
            let g_bg = g[7];
            g[7] += grads.alpha[i];
            if out.valid[i] {
                let gd = grads.depth[i];
                g[3] = gd / a;
                g[7] -= gd * out.depth_accum[i] / (a * a);
                let s = Vector3::from(out.normal_accum[i]);
                let len = s.norm();
                let nn = s / len;
                let gn = grads.normal[i];
                let gs = (gn - nn * nn.dot(&gn)) / len;
                g[4] = gs.x;
                g[5] = gs.y;
                g[6] = gs.z;
            }
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            scratch.clear();
            let mut t = 1.0;
            for &s in &list[..n] {
                let alpha = splats[s as usize].footprint_alpha(px, py);
                scratch.push((alpha, t));
                t *= 1.0 - alpha;
            }
            let mut suffix = [0.0; NF];
            for local in (0..n).rev() {
                let (alpha, t) = scratch[local];
                if alpha == 0.0 {
                    continue;
                }
                let sp = &splats[list[local] as usize];
                let f = [
                    sp.color[0],
                    sp.color[1],
                    sp.color[2],
                    sp.depth,
                    sp.normal_cam[0],
                    sp.normal_cam[1],
                    sp.normal_cam[2],
                    1.0,
                ];
                let mut d_alpha = 0.0;
                for k in 0..NF {
                    d_alpha += g[k] * (f[k] - suffix[k]);
                }
                d_alpha *= t;
                let mut d_alpha_color = g_bg * (1.0 - suffix[7]);
                for k in 0..3 {
                    d_alpha_color += g[k] * (f[k] - suffix[k]);
                }
                d_alpha_color *= t;
                let wgt = alpha * t;
                let ag = &mut acc[local];
                for k in 0..3 {
                    ag.color[k] += g[k] * wgt;
                    ag.normal[k] += g[4 + k] * wgt;
                }
                ag.depth += g[3] * wgt;
                for k in 0..NF {
                    suffix[k] = alpha * f[k] + (1.0 - alpha) * suffix[k];
                }
                // alpha = opacity · exp(power)
                let gauss = alpha / sp.opacity;
                ag.opacity += d_alpha * gauss;
                let d_power = d_alpha * alpha;
                let (dx, dy) = (px - sp.mean2d[0], py - sp.mean2d[1]);
                let [qa, qb, qc] = sp.conic;
                ag.mean[0] += d_power * (qa * dx + qb * dy);
                ag.mean[1] += d_power * (qb * dx + qc * dy);
                let d_power_color = d_alpha_color * alpha;
                ag.color_mean[0] += d_power_color * (qa * dx + qb * dy);
                ag.color_mean[1] += d_power_color * (qb * dx + qc * dy);
                ag.conic[0] += d_power * (-0.5 * dx * dx);
                ag.conic[1] += d_power * (-dx * dy);
                ag.conic[2] += d_power * (-0.5 * dy * dy);
            }
        }
    }
    acc
}

/// Gradients of a scalar loss with respect to every Gaussian parameter,
/// given the loss gradients on the render buffers.
pub fn render_backward(
    set: &GaussianSet,
    cam: &DistortedCamera,
    out: &RenderOutput,
    grads: &BufferGrads,
) -> Result<GaussianGrads> {
    let (w, h) = (cam.width, cam.height);
    let npix = w * h;
    if out.width() != w || out.height() != h {
        return Err(Error::ShapeMismatch("render output does not match camera".into()));
    }
    if grads.color.len() != 3 * npix || grads.depth.len() != npix || grads.normal.len() != npix || grads.alpha.len() != npix {
        return Err(Error::ShapeMismatch(format!(
            "buffer gradients do not match a {w}x{h} image"
        )));
    }
    if out.coverage.len() != set.len() {
        return Err(Error::ShapeMismatch("render output was produced for a different set".into()));
    }
    let per_tile: Vec<Vec<SplatGrad>> = (0..out.tiles.len())
        .into_par_iter()
        .map_init(Vec::new, |scratch, t| backward_tile(cam, t, out, grads, scratch))
        .collect();
    let mut splat_grads = vec![SplatGrad::default(); out.splats.len()];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (local, g) in acc.iter().enumerate() {
            splat_grads[out.tiles[tile][local] as usize].add(g);
        }
    }

    let sh_count = set.sh_count();
    let mut result = GaussianGrads::zeros(set.len(), sh_count);
    result.coverage.copy_from_slice(&out.coverage);
    let rot_cam = rot_cam_array(cam);
    let center = cam.center();
    let stride = result.stride;
    for (sp, sg) in out.splats.iter().zip(&splat_grads) {
        let g = &set.gaussians[sp.index];
        let dst = &mut result.params[sp.index * stride..(sp.index + 1) * stride];

        // conic gradient -> covariance gradient: dL/dC = -Q·G·Q
        let [qa, qb, qc] = sp.conic;
        let (ga, gb, gc) = (sg.conic[0], 0.5 * sg.conic[1], sg.conic[2]);
        // (Q G Q) entries for symmetric Q = [[qa, qb], [qb, qc]], G = [[ga, gb], [gb, gc]]
        let qg = [[qa * ga + qb * gb, qa * gb + qb * gc], [qb * ga + qc * gb, qb * gb + qc * gc]];
        let m00 = qg[0][0] * qa + qg[0][1] * qb;
        let m01 = qg[0][0] * qb + qg[0][1] * qc;
        let m11 = qg[1][0] * qb + qg[1][1] * qc;
        let d_cov = [-m00, -2.0 * m01, -m11];

        let pos = [
            D10::variable(g.position.x, 0),
            D10::variable(g.position.y, 1),
            D10::variable(g.position.z, 2),
        ];
        let quat = [
            D10::variable(g.rotation[0], 3),
            D10::variable(g.rotation[1], 4),
            D10::variable(g.rotation[2], 5),
            D10::variable(g.rotation[3], 6),
        ];
        let ls = [
            D10::variable(g.log_scale.x, 7),
            D10::variable(g.log_scale.y, 8),
            D10::variable(g.log_scale.z, 9),
        ];
        let p = project_generic(cam, &rot_cam, &pos, &quat, &ls, &g.sh, set.sh_degree, sp.axis, sp.flip);

        let mut color_grad = sg.color;
        for ch in 0..3 {
            if sp.color_clamped[ch] {
                color_grad[ch] = 0.0;
            }
        }
        let mut geo = [0.0; GEOM_PARAMS];
        let mut push = |weight: f64, d: &D10| {
            if weight != 0.0 {
                for k in 0..GEOM_PARAMS {
                    geo[k] += weight * d.d[k];
                }
            }
        };
        push(sg.mean[0], &p.mean[0]);
        push(sg.mean[1], &p.mean[1]);
        for k in 0..3 {
            push(d_cov[k], &p.cov[k]);
            push(sg.normal[k], &p.normal[k]);
            push(color_grad[k], &p.color[k]);
        }
        push(sg.depth, &p.depth);
        dst[..GEOM_PARAMS].copy_from_slice(&geo);
        dst[layout::OPACITY] = sg.opacity * sp.opacity * (1.0 - sp.opacity);

        let basis: Vec<f64> = if set.sh_degree == 0 {
            vec![sh::SH_C0]
        } else {
            let d = g.position - center;
            let d = d / d.norm();
            sh::basis(set.sh_degree, &[d.x, d.y, d.z])
        };
        for (k, y) in basis.iter().enumerate() {
            for ch in 0..3 {
                dst[layout::SH + 3 * k + ch] = color_grad[ch] * y;
            }
        }

        let ndc_x = sg.color_mean[0] * 0.5 * w as f64;
        let ndc_y = sg.color_mean[1] * 0.5 * h as f64;
        result.ndc_norm[sp.index] = (ndc_x * ndc_x + ndc_y * ndc_y).sqrt();
    }
    Ok(result)
}

/// Adds one view's densification statistics: `grad_accum += m·‖∂L/∂µ_ndc‖`,
/// `weight_accum += m`.
pub fn accumulate_densify_stats(set: &mut GaussianSet, grads: &GaussianGrads) {
    for i in 0..set.len() {
        let m = grads.coverage[i] as f64;
        if m > 0.0 {
            set.grad_accum[i] += m * grads.ndc_norm[i];
            set.weight_accum[i] += m;
        }
    }
}

/// Slow reference renderer: evaluates every projected splat at every pixel,
/// sorts the full list by depth and composites without early termination.
/// Shares only the projection with [`render`]; used as a test oracle.
pub fn reference_render(set: &GaussianSet, cam: &DistortedCamera, settings: &RenderSettings) -> Result<Image> {
    let mut splats = project_splats(set, cam)?;
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let mut img = Image::new(cam.width, cam.height, 3);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for sp in &splats {
                let a = sp.alpha_at(px, py);
                for k in 0..3 {
                    c[k] += sp.color[k] * a * t;
                }
                t *= 1.0 - a;
            }
            for k in 0..3 {
                img.data[3 * (y * cam.width + x) + k] = c[k] + t * settings.background[k];
            }
        }
    }
    Ok(img)
}
