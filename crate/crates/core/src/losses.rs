//! Training objective: photometric L1 + D-SSIM and geometric depth, normal
//! and scale terms, each with its analytic gradient.
//!
//! All terms are means (over pixels, valid pixels or Gaussians) so the
//! weights stay meaningful across image resolutions.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::rasterizer::{layout, BufferGrads, GaussianGrads, RenderOutput};
use crate::scene::{DepthNormalMaps, GaussianSet, Image};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// A scalar loss value with its gradient over the differentiated input.
#[derive(Clone, Debug)]
pub struct LossGrad<G> {
    pub value: f64,
    pub grad: G,
}

fn check_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Mean absolute difference; gradient `sign(r − g)/N`.
pub fn l1_loss(rendered: &Image, gt: &Image) -> Result<LossGrad<Vec<f64>>> {
    check_shape(rendered, gt)?;
    let n = rendered.data.len() as f64;
    let mut sum = 0.0;
    let grad = rendered
        .data
        .iter()
        .zip(&gt.data)
        .map(|(r, g)| {
            let d = r - g;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossGrad { value: sum / n, grad })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable weighted sum over every full window ("valid" correlation).
fn filter_valid(src: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, wk) in win.iter().enumerate() {
                s += wk * src[y * w + x + k];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, wk) in win.iter().enumerate() {
                s += wk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters window-position values back onto
/// the source grid.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (k, wk) in win.iter().enumerate() {
                tmp[(y + k) * ow + x] += wk * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (k, wk) in win.iter().enumerate() {
                out[y * w + x + k] += wk * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

/// Mean SSIM over channels and full 11×11 Gaussian windows (σ = 1.5), plus
/// optionally the gradient of that mean with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let win = gaussian_window();
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let count = (ow * oh * a.channels) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.data.len()]);
    for c in 0..a.channels {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &win);
        let my = filter_valid(&y, w, h, &win);
        let exx = filter_valid(&xx, w, h, &win);
        let eyy = filter_valid(&yy, w, h, &win);
        let exy = filter_valid(&xy, w, h, &win);
        let n = mx.len();
        // per-window partials w.r.t. mx, E[x²], E[xy]
        let mut g_mx = vec![0.0; n];
        let mut g_exx = vec![0.0; n];
        let mut g_exy = vec![0.0; n];
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let sx = exx[i] - ux * ux;
            let sy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sx + sy + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                // s = a1 a2 / (b1 b2); direct partials
                let ds_da1 = a2 / (b1 * b2);
                let ds_da2 = a1 / (b1 * b2);
                let ds_db1 = -s / b1;
                let ds_db2 = -s / b2;
                // a1 = 2 ux uy; a2 = 2 (exy - ux uy); b1 = ux² + uy²; b2 = exx - ux² + eyy - uy²
                g_mx[i] = ds_da1 * 2.0 * uy + ds_da2 * (-2.0 * uy) + ds_db1 * 2.0 * ux + ds_db2 * (-2.0 * ux);
                g_exx[i] = ds_db2;
                g_exy[i] = ds_da2 * 2.0;
            }
        }
        if let Some(gr) = grad.as_mut() {
            let scale = 1.0 / count;
            let gm = filter_valid_adjoint(&g_mx, w, h, &win);
            let gxx = filter_valid_adjoint(&g_exx, w, h, &win);
            let gxy = filter_valid_adjoint(&g_exy, w, h, &win);
            for p in 0..w * h {
                gr[p * a.channels + c] = scale * (gm[p] + 2.0 * x[p] * gxx[p] + y[p] * gxy[p]);
            }
        }
    }
    Ok((total / count, grad))
}

/// Mean structural similarity of two same-shape images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// `(1 − SSIM)/2` with its gradient over `rendered`.
pub fn dssim_loss(rendered: &Image, gt: &Image) -> Result<LossGrad<Vec<f64>>> {
    let (s, g) = ssim_impl(rendered, gt, true)?;
    let grad = g.expect("gradient requested").into_iter().map(|v| -0.5 * v).collect();
    Ok(LossGrad {
        value: (1.0 - s) / 2.0,
        grad,
    })
}

/// Whether the depth loss also carries the `|1 − D̂·D̄|` term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthLossMode {
    /// Mean absolute depth difference.
    #[default]
    L1,
    /// L1 plus `|1 − D̂·D̄|` on the scalar depths.
    Literal,
}

/// Unit of the depth term inside [`total_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthScale {
    /// Depth loss divided by the view's mean LiDAR depth.
    #[default]
    Relative,
    /// Depth loss in meters.
    Meters,
}

/// How the geometric terms are normalized over pixels (and Gaussians).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over the valid pixels.
    Mean,
    /// Sum over the valid pixels, divided by the image's pixel count.
    #[default]
    ImageMean,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossOptions {
    pub depth_mode: DepthLossMode,
    pub depth_scale: DepthScale,
    pub reduction: Reduction,
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// Depth loss over pixels where `mask` is set.
pub fn depth_loss(rendered: &[f64], target: &[f64], mask: &[bool], mode: DepthLossMode) -> Result<LossGrad<Vec<f64>>> {
    check_len("depth buffers", rendered.len(), target.len())?;
    check_len("depth mask", rendered.len(), mask.len())?;
    let n = mask.iter().filter(|m| **m).count();
    let mut grad = vec![0.0; rendered.len()];
    if n == 0 {
        log::debug!("depth loss: no valid pixels");
        return Ok(LossGrad { value: 0.0, grad });
    }
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    for i in 0..rendered.len() {
        if !mask[i] {
            continue;
        }
        let d = rendered[i] - target[i];
        sum += d.abs();
        if d != 0.0 {
            grad[i] = d.signum() * inv;
        }
        if mode == DepthLossMode::Literal {
            let e = 1.0 - rendered[i] * target[i];
            sum += e.abs();
            if e != 0.0 {
                grad[i] += -e.signum() * target[i] * inv;
            }
        }
    }
    Ok(LossGrad { value: sum * inv, grad })
}

/// `‖N̂ − N̄‖₁ + |1 − N̂ᵀN̄|` averaged over masked pixels.
pub fn normal_loss(
    rendered: &[Vector3<f64>],
    target: &[Vector3<f64>],
    mask: &[bool],
) -> Result<LossGrad<Vec<Vector3<f64>>>> {
    check_len("normal buffers", rendered.len(), target.len())?;
    check_len("normal mask", rendered.len(), mask.len())?;
    let n = mask.iter().filter(|m| **m).count();
    let mut grad = vec![Vector3::zeros(); rendered.len()];
    if n == 0 {
        log::debug!("normal loss: no valid pixels");
        return Ok(LossGrad { value: 0.0, grad });
    }
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    for i in 0..rendered.len() {
        if !mask[i] {
            continue;
        }
        let (r, t) = (rendered[i], target[i]);
        let d = r - t;
        let e = 1.0 - r.dot(&t);
        sum += d.abs().sum() + e.abs();
        let sign_d = d.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
        let sign_e = if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 };
        grad[i] = (sign_d - t * sign_e) * inv;
    }
    Ok(LossGrad { value: sum * inv, grad })
}

/// Mean over Gaussians of the smallest scale; gradient over log-scales
/// (`3` per Gaussian), reaching only the smallest axis (lowest index on ties).
pub fn scale_loss(set: &GaussianSet) -> LossGrad<Vec<f64>> {
    let n = set.len();
    let mut grad = vec![0.0; 3 * n];
    if n == 0 {
        return LossGrad { value: 0.0, grad };
    }
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    for (i, g) in set.gaussians.iter().enumerate() {
        let mut axis = 0;
        for k in 1..3 {
            if g.log_scale[k] < g.log_scale[axis] {
                axis = k;
            }
        }
        let s = g.log_scale[axis].exp();
        sum += s;
        grad[3 * i + axis] = s * inv;
    }
    LossGrad { value: sum * inv, grad }
}

/// Weights of the combined objective
/// `(1−λ)·L1 + λ·D-SSIM + α·depth + β·normal + γ·scale`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 100.0,
            beta: 0.001,
            gamma: 0.001,
            lambda: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub dssim: f64,
    pub depth: f64,
    pub normal: f64,
    pub scale: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn photometric(&self, lambda: f64) -> f64 {
        (1.0 - lambda) * self.l1 + lambda * self.dssim
    }
}

/// Targets for one training view.
pub struct LossTargets<'a> {
    pub image: &'a Image,
    pub lidar: Option<&'a DepthNormalMaps>,
}

/// Total loss and its gradients: buffer gradients for the rasterizer's
/// backward pass and direct log-scale gradients from the scale term.
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub buffer_grads: BufferGrads,
    /// `3` per Gaussian; already multiplied by γ.
    pub log_scale_grad: Vec<f64>,
}

/// Evaluates the full objective on one rendered view.
pub fn total_loss(
    out: &RenderOutput,
    targets: &LossTargets<'_>,
    set: &GaussianSet,
    weights: &LossWeights,
    options: &LossOptions,
) -> Result<TotalLoss> {
    let (w, h) = (out.width(), out.height());
    let mut grads = BufferGrads::zeros(w, h);
    let mut b = LossBreakdown::default();
    let lam = weights.lambda;

    let l1 = l1_loss(&out.color, targets.image)?;
    b.l1 = l1.value;
    for (g, v) in grads.color.iter_mut().zip(&l1.grad) {
        *g += (1.0 - lam) * v;
    }
    if lam != 0.0 {
        let ds = dssim_loss(&out.color, targets.image)?;
        b.dssim = ds.value;
        for (g, v) in grads.color.iter_mut().zip(&ds.grad) {
            *g += lam * v;
        }
    }

    if let Some(maps) = targets.lidar {
        if maps.width != w || maps.height != h {
            return Err(Error::ShapeMismatch("LiDAR maps do not match the render".into()));
        }
        let mask: Vec<bool> = out.valid.iter().zip(&maps.valid).map(|(a, b)| *a && *b).collect();
        let valid = mask.iter().filter(|m| **m).count() as f64;
        let per_pixel = match options.reduction {
            Reduction::Mean => 1.0,
            Reduction::ImageMean => valid / mask.len() as f64,
            Reduction::Sum => valid,
        };
        if weights.alpha != 0.0 {
            let d = depth_loss(&out.depth, &maps.depth, &mask, options.depth_mode)?;
            let mut factor = per_pixel;
            if options.depth_scale == DepthScale::Relative {
                let (sum, n) = maps
                    .depth
                    .iter()
                    .zip(&maps.valid)
                    .filter(|(_, v)| **v)
                    .fold((0.0, 0usize), |(s, n), (d, _)| (s + d, n + 1));
                if n > 0 {
                    factor *= n as f64 / sum;
                }
            }
            b.depth = factor * d.value;
            for (g, v) in grads.depth.iter_mut().zip(&d.grad) {
                *g += weights.alpha * factor * v;
            }
        }
        if weights.beta != 0.0 {
            let nl = normal_loss(&out.normal, &maps.normal, &mask)?;
            b.normal = per_pixel * nl.value;
            for (g, v) in grads.normal.iter_mut().zip(&nl.grad) {
                *g += weights.beta * per_pixel * v;
            }
        }
    }

    let mut log_scale_grad = vec![0.0; 3 * set.len()];
    if weights.gamma != 0.0 {
        let s = scale_loss(set);
        let factor = match options.reduction {
            Reduction::Mean | Reduction::ImageMean => 1.0,
            Reduction::Sum => set.len() as f64,
        };
        b.scale = factor * s.value;
        for (g, v) in log_scale_grad.iter_mut().zip(&s.grad) {
            *g = weights.gamma * factor * v;
        }
    }
    b.total = b.photometric(lam) + weights.alpha * b.depth + weights.beta * b.normal + weights.gamma * b.scale;
    Ok(TotalLoss {
        breakdown: b,
        buffer_grads: grads,
        log_scale_grad,
    })
}

/// Folds the scale-loss gradient into rasterizer parameter gradients.
pub fn add_scale_grad(grads: &mut GaussianGrads, log_scale_grad: &[f64]) {
    let stride = grads.stride;
    for i in 0..log_scale_grad.len() / 3 {
        for k in 0..3 {
            grads.params[i * stride + layout::LOG_SCALE + k] += log_scale_grad[3 * i + k];
        }
    }
}
