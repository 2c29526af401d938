//! Reconstruction quality metrics and the Charbonnier objective.

use crate::cassi::HsiCube;
use crate::tensor::{ops, Tensor, Var};
use crate::{Error, Result};

/// Returned by [`psnr`] for identical inputs; every finite result is also
/// clipped to it.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Gaussian SSIM window side.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_DATA_RANGE: f64 = 1.0;

pub const CHARBONNIER_EPS: f64 = 1e-3;

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &HsiCube, b: &HsiCube, peak: f64) -> Result<f64> {
    psnr_tensor(a.tensor(), b.tensor(), peak)
}

pub fn psnr_tensor(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("PSNR peak must be positive, got {peak}")));
    }
    a.expect_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::shape("PSNR of empty tensors"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean spectral angle in degrees over pixels with non-zero spectra in both
/// cubes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamReport {
    pub mean_degrees: f64,
    /// Pixels excluded because one of the two spectra was all zero.
    pub skipped: usize,
}

pub fn sam(a: &HsiCube, b: &HsiCube) -> Result<SamReport> {
    a.tensor().expect_same_shape(b.tensor())?;
    let c = a.bands();
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (sa, sb) in a.tensor().data().chunks(c).zip(b.tensor().data().chunks(c)) {
        let na = sa.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = sb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            skipped += 1;
            continue;
        }
        // 2 atan2(|u - v|, |u + v|) on unit vectors keeps full precision
        // near 0 and 180 degrees, where acos of the cosine does not.
        let (mut diff, mut sum) = (0.0, 0.0);
        for (x, y) in sa.iter().zip(sb) {
            let (u, v) = (x / na, y / nb);
            diff += (u - v) * (u - v);
            sum += (u + v) * (u + v);
        }
        total += (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees();
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric("every pixel has a zero spectrum".into()));
    }
    Ok(SamReport {
        mean_degrees: total / counted as f64,
        skipped,
    })
}

/// Normalised 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = taps.iter().enumerate().map(|(t, g)| g * plane[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = taps.iter().enumerate().map(|(t, g)| g * rows[(r + t) * wo + c]).sum();
        }
    }
    out
}

/// Mean structural similarity of two `h x w` planes (Gaussian window,
/// statistics over fully contained windows only).
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("SSIM planes do not match the stated extents"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * SSIM_DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_DATA_RANGE).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&prod(a, a), h, w, &taps);
    let e_bb = filter_valid(&prod(b, b), h, w, &taps);
    let e_ab = filter_valid(&prod(a, b), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// Band-averaged SSIM of two cubes.
pub fn ssim(a: &HsiCube, b: &HsiCube) -> Result<f64> {
    a.tensor().expect_same_shape(b.tensor())?;
    let (h, w, c) = a.dims();
    let mut total = 0.0;
    for n in 0..c {
        total += ssim_plane(&a.band(n), &b.band(n), h, w)?;
    }
    Ok(total / c as f64)
}

/// Mean of `sqrt((a - b)^2 + eps^2)`.
pub fn charbonnier(a: &HsiCube, b: &HsiCube, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("Charbonnier eps must be positive, got {eps}")));
    }
    a.tensor().expect_same_shape(b.tensor())?;
    let n = a.tensor().len() as f64;
    Ok(a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(x, y)| ((x - y) * (x - y) + eps * eps).sqrt())
        .sum::<f64>()
        / n)
}

/// Differentiable Charbonnier loss of `pred` against a fixed target.
pub fn charbonnier_var(pred: &Var, target: &Tensor, eps: f64) -> Result<Var> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("Charbonnier eps must be positive, got {eps}")));
    }
    let diff = ops::sub(pred, &Var::constant(target.clone()))?;
    ops::mean_all(&ops::sqrt(&ops::add_scalar(&ops::square(&diff)?, eps * eps)?)?)
}

/// One row of a metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub scene_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
}

impl MetricRow {
    pub fn evaluate(scene_id: impl Into<String>, estimate: &HsiCube, truth: &HsiCube) -> Result<Self> {
        Ok(Self {
            scene_id: scene_id.into(),
            psnr: psnr(estimate, truth, 1.0)?,
            ssim: ssim(estimate, truth)?,
            sam: sam(estimate, truth)?.mean_degrees,
        })
    }
}
