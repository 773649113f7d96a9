//! MSE, PSNR and Gaussian-windowed SSIM.
//!
//! The SSIM core works on interleaved buffers of any [`Real`] type and can
//! return `d SSIM / d a`, which the fitting and inversion losses reuse.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hdr::{self, DegeneratePolicy, HdrImage, DEFAULT_LOG_EPS};
use crate::real::Real;

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl Dims {
    pub fn rgb(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            channels: 3,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    /// Side of the square Gaussian window; odd.
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range `L` of the inputs.
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            dynamic_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    /// The standard window, shrunk (with proportionally narrower sigma) to
    /// the largest odd size that fits a `width x height` image.
    pub fn fitted(width: usize, height: usize) -> Self {
        let std = Self::default();
        let side = width.min(height).max(1);
        if side >= std.window {
            return std;
        }
        let window = if side % 2 == 1 { side } else { side - 1 };
        Self {
            window,
            sigma: std.sigma * window as f64 / std.window as f64,
            ..std
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

fn check_pair<T>(a: &[T], b: &[T], dims: Dims) -> Result<()> {
    if a.len() != dims.len() || b.len() != dims.len() {
        return Err(Error::Dimension(format!(
            "buffers of {} and {} samples for {}x{}x{}",
            a.len(),
            b.len(),
            dims.width,
            dims.height,
            dims.channels
        )));
    }
    if dims.is_empty() {
        return Err(Error::Dimension("empty image".into()));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "mse of {} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(peak^2 / mse)`; exactly zero error maps to [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr<T: Real>(a: &[T], b: &[T], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Config(format!(
            "psnr peak must be positive, got {peak}"
        )));
    }
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// Separable "valid" Gaussian filter of one plane.
fn blur_valid<T: Real>(plane: &[T], w: usize, h: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut horiz = vec![T::zero(); ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = T::zero();
            for (i, kv) in k.iter().enumerate() {
                acc += *kv * row[x + i];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![T::zero(); ow * oh];
    for y in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let src = &horiz[(y + i) * ow..(y + i + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *kv * *s;
            }
        }
    }
    out
}

/// Transpose of [`blur_valid`].
fn blur_valid_adjoint<T: Real>(g: &[T], w: usize, h: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut horiz = vec![T::zero(); ow * h];
    for y in 0..oh {
        let src = &g[y * ow..(y + 1) * ow];
        for (i, kv) in k.iter().enumerate() {
            let dst = &mut horiz[(y + i) * ow..(y + i + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *kv * *s;
            }
        }
    }
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        let src = &horiz[y * ow..(y + 1) * ow];
        let row = &mut out[y * w..(y + 1) * w];
        for (x, s) in src.iter().enumerate() {
            for (i, kv) in k.iter().enumerate() {
                row[x + i] += *kv * *s;
            }
        }
    }
    out
}

fn ssim_core<T: Real>(
    a: &[T],
    b: &[T],
    dims: Dims,
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(T, Option<Vec<T>>)> {
    check_pair(a, b, dims)?;
    let Dims {
        width: w,
        height: h,
        channels,
    } = dims;
    if cfg.window == 0 || cfg.window.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "SSIM window must be odd, got {}",
            cfg.window
        )));
    }
    if w < cfg.window || h < cfg.window {
        return Err(Error::Dimension(format!(
            "{w}x{h} image is smaller than the {0}x{0} SSIM window",
            cfg.window
        )));
    }
    let k: Vec<T> = cfg.kernel().into_iter().map(T::lit).collect();
    let c1 = T::lit(cfg.c1());
    let c2 = T::lit(cfg.c2());
    let two = T::lit(2.0);
    let m = (w + 1 - cfg.window) * (h + 1 - cfg.window);
    let norm = T::lit((m * channels) as f64);

    let mut total = T::zero();
    let mut grad = want_grad.then(|| vec![T::zero(); a.len()]);
    for c in 0..channels {
        let pa: Vec<T> = a.iter().skip(c).step_by(channels).copied().collect();
        let pb: Vec<T> = b.iter().skip(c).step_by(channels).copied().collect();
        let sq = |p: &[T], q: &[T]| p.iter().zip(q).map(|(x, y)| *x * *y).collect::<Vec<T>>();
        let mu_a = blur_valid(&pa, w, h, &k);
        let mu_b = blur_valid(&pb, w, h, &k);
        let s_aa = blur_valid(&sq(&pa, &pa), w, h, &k);
        let s_bb = blur_valid(&sq(&pb, &pb), w, h, &k);
        let s_ab = blur_valid(&sq(&pa, &pb), w, h, &k);

        let (mut d_mu, mut d_aa, mut d_ab) = if want_grad {
            (vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        for p in 0..m {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let var_a = s_aa[p] - ma * ma;
            let var_b = s_bb[p] - mb * mb;
            let cov = s_ab[p] - ma * mb;
            let a1 = two * ma * mb + c1;
            let a2 = two * cov + c2;
            let b1 = ma * ma + mb * mb + c1;
            let b2 = var_a + var_b + c2;
            let den = b1 * b2;
            let s = a1 * a2 / den;
            total += s;
            if want_grad {
                let dn = two * mb * a2 - two * mb * a1;
                let dd = two * ma * b2 - two * ma * b1;
                d_mu[p] = (dn - s * dd) / den / norm;
                d_aa[p] = -s / b2 / norm;
                // written so that it cancels d_aa bit-exactly when a == b
                d_ab[p] = two * (a1 / b1) / b2 / norm;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu = blur_valid_adjoint(&d_mu, w, h, &k);
            let g_aa = blur_valid_adjoint(&d_aa, w, h, &k);
            let g_ab = blur_valid_adjoint(&d_ab, w, h, &k);
            for i in 0..w * h {
                g[i * channels + c] = g_mu[i] + two * pa[i] * g_aa[i] + pb[i] * g_ab[i];
            }
        }
    }
    Ok((total / norm, grad))
}

/// Mean local SSIM over the valid window positions, averaged over channels.
pub fn ssim<T: Real>(a: &[T], b: &[T], dims: Dims, cfg: &SsimConfig) -> Result<T> {
    Ok(ssim_core(a, b, dims, cfg, false)?.0)
}

/// SSIM together with its gradient with respect to `a`.
pub fn ssim_with_grad<T: Real>(
    a: &[T],
    b: &[T],
    dims: Dims,
    cfg: &SsimConfig,
) -> Result<(T, Vec<T>)> {
    let (v, g) = ssim_core(a, b, dims, cfg, true)?;
    Ok((v, g.expect("gradient requested")))
}

pub fn ssim_images(a: &HdrImage, b: &HdrImage, cfg: &SsimConfig) -> Result<f64> {
    a.check_same_dims(b)?;
    Ok(ssim(a.data(), b.data(), Dims::rgb(a.width(), a.height()), cfg)? as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub psnr_db: f64,
    pub mse: f64,
    pub ssim: f64,
}

impl MetricRow {
    /// Metrics on buffers already mapped into a unit range.
    pub fn compute(pred: &[f32], gt: &[f32], dims: Dims) -> Result<Self> {
        check_pair(pred, gt, dims)?;
        let mse = mse(pred, gt)?;
        Ok(Self {
            psnr_db: psnr_from_mse(mse, 1.0),
            mse,
            ssim: ssim(pred, gt, dims, &SsimConfig::fitted(dims.width, dims.height))? as f64,
        })
    }
}

/// Environment-map values in the ground truth's log-normalised space.
pub fn envmap_unit(pred: &HdrImage, gt: &HdrImage) -> Result<(Vec<f32>, Vec<f32>)> {
    pred.check_same_dims(gt)?;
    let (gt_norm, params) =
        hdr::log_normalize_with(gt, DEFAULT_LOG_EPS, DegeneratePolicy::Midpoint)?;
    Ok((
        hdr::normalize_with_params(pred, &params),
        gt_norm.into_data(),
    ))
}

pub fn clamp_unit(img: &HdrImage) -> Vec<f32> {
    img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

pub fn envmap_metrics(pred: &HdrImage, gt: &HdrImage) -> Result<MetricRow> {
    let (p, g) = envmap_unit(pred, gt)?;
    MetricRow::compute(&p, &g, Dims::rgb(gt.width(), gt.height()))
}

pub fn rendering_metrics(pred: &HdrImage, gt: &HdrImage) -> Result<MetricRow> {
    pred.check_same_dims(gt)?;
    MetricRow::compute(
        &clamp_unit(pred),
        &clamp_unit(gt),
        Dims::rgb(gt.width(), gt.height()),
    )
}

/// Environment-map and rendering metrics side by side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub envmap: MetricRow,
    pub rendering: MetricRow,
}

pub fn eval_report(
    pred_env: &HdrImage,
    gt_env: &HdrImage,
    pred_render: &HdrImage,
    gt_render: &HdrImage,
) -> Result<EvalReport> {
    Ok(EvalReport {
        envmap: envmap_metrics(pred_env, gt_env)?,
        rendering: rendering_metrics(pred_render, gt_render)?,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} | {:>12} {:>12} {:>9} | {:>12} {:>12} {:>9}",
            "", "env PSNR", "env MSE", "env SSIM", "render PSNR", "render MSE", "render SSIM"
        );
        let e = &self.envmap;
        let r = &self.rendering;
        let _ = writeln!(
            s,
            "{:<10} | {:>9.5} dB {:>12.5} {:>9.5} | {:>9.5} dB {:>12.5} {:>9.5}",
            "result", e.psnr_db, e.mse, e.ssim, r.psnr_db, r.mse, r.ssim
        );
        s
    }

    /// `side,metric,value` records, one per line after a header.
    pub fn to_records(&self) -> String {
        let mut s = String::from("side,metric,value\n");
        for (side, row) in [("envmap", &self.envmap), ("rendering", &self.rendering)] {
            let _ = writeln!(s, "{side},psnr_db,{}", row.psnr_db);
            let _ = writeln!(s, "{side},mse,{}", row.mse);
            let _ = writeln!(s, "{side},ssim,{}", row.ssim);
        }
        s
    }
}
