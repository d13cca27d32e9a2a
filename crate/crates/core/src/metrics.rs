//! Training objective and image-quality metrics for reconstructed cubes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cassi::HsiCube;
use crate::detection::DetLosses;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub const CHARBONNIER_EPS: f64 = 1e-3;
/// Reported PSNR for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

/// Scalar values of every objective term at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub recon: f64,
    pub reg: f64,
    pub cls: f64,
    pub ctr: f64,
    pub lambda: f64,
}

/// `L_total = L_reg + L_cls + L_ctr + lambda * L_recon`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, det: &DetLosses, recon: Var, lambda: f64) -> Result<(Var, LossReport)> {
    let a = tape.add(det.reg, det.cls)?;
    let d = tape.add(a, det.ctr)?;
    let weighted = tape.scale(recon, lambda);
    let total = tape.add(d, weighted)?;
    let item = |tape: &Tape<T>, v: Var| -> Result<f64> { Ok(tape.value(v).item()?.to_f64().unwrap_or(f64::NAN)) };
    let report = LossReport {
        total: item(tape, total)?,
        recon: item(tape, recon)?,
        reg: item(tape, det.reg)?,
        cls: item(tape, det.cls)?,
        ctr: item(tape, det.ctr)?,
        lambda,
    };
    Ok((total, report))
}

fn same_shape<T: Scalar>(op: &'static str, a: &HsiCube<T>, b: &HsiCube<T>) -> Result<()> {
    let (sa, sb) = ([a.height(), a.width(), a.bands()], [b.height(), b.width(), b.bands()]);
    if sa != sb {
        return Err(Error::mismatch(op, &sa, &sb));
    }
    Ok(())
}

fn f<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Mean of `sqrt((a - b)^2 + eps^2)` over all entries.
pub fn charbonnier<T: Scalar>(a: &HsiCube<T>, b: &HsiCube<T>, eps: f64) -> Result<f64> {
    same_shape("charbonnier", a, b)?;
    let n = a.data().len().max(1) as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f(x) - f(y);
            (d * d + eps * eps).sqrt()
        })
        .sum();
    Ok(sum / n)
}

/// Per-band PSNR averaged over bands; a band with zero error counts as
/// [`PSNR_CAP`].
pub fn psnr<T: Scalar>(pred: &HsiCube<T>, truth: &HsiCube<T>, peak: f64) -> Result<f64> {
    same_shape("psnr", pred, truth)?;
    let bands = pred.bands();
    let mut sq = vec![0.0; bands];
    for (i, (&x, &y)) in pred.data().iter().zip(truth.data()).enumerate() {
        let d = f(x) - f(y);
        sq[i % bands] += d * d;
    }
    let pixels = (pred.height() * pred.width()).max(1) as f64;
    let total: f64 = sq
        .iter()
        .map(|&s| {
            let mse = s / pixels;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
            }
        })
        .sum();
    Ok(total / bands as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    // separable 2-D window
    g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
}

/// SSIM of one band pair with an 11x11 Gaussian window (sigma 1.5) over
/// every fully contained window position; images smaller than the window
/// use the largest odd window that fits.
fn ssim_band(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let win = gaussian_window(size, SSIM_SIGMA);
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let g = win[i * size + j];
                    let (a, b) = (x[(r + i) * w + c + j], y[(r + i) * w + c + j]);
                    mx += g * a;
                    my += g * b;
                    sxx += g * (a * a);
                    syy += g * (b * b);
                    sxy += g * (a * b);
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            let num = (2.0 * (mx * my) + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
        }
    }
    total / (oh * ow) as f64
}

/// Band-averaged SSIM for data on a unit peak.
pub fn ssim<T: Scalar>(pred: &HsiCube<T>, truth: &HsiCube<T>) -> Result<f64> {
    same_shape("ssim", pred, truth)?;
    let (h, w, bands) = (pred.height(), pred.width(), pred.bands());
    if h == 0 || w == 0 {
        return Err(Error::shape("ssim", "empty image"));
    }
    let plane = |cube: &HsiCube<T>, b: usize| -> Vec<f64> { cube.data().iter().skip(b).step_by(bands).map(|&v| f(v)).collect() };
    let total: f64 = (0..bands).map(|b| ssim_band(&plane(pred, b), &plane(truth, b), h, w)).sum();
    Ok(total / bands as f64)
}

/// Mean spectral angle in degrees and the number of pixels left out because
/// one of the two spectra has zero norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamReport {
    pub degrees: f64,
    pub excluded: usize,
}

pub fn sam<T: Scalar>(pred: &HsiCube<T>, truth: &HsiCube<T>) -> Result<SamReport> {
    same_shape("sam", pred, truth)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for (a, b) in pred.data().chunks(pred.bands()).zip(truth.data().chunks(truth.bands())) {
        let na = a.iter().map(|&x| f(x) * f(x)).sum::<f64>().sqrt();
        let nb = b.iter().map(|&y| f(y) * f(y)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            excluded += 1;
            continue;
        }
        // 2 atan2(|u - v|, |u + v|) on unit vectors stays accurate near 0 and 180 degrees
        let (mut diff, mut sum) = (0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (u, v) = (f(x) / na, f(y) / nb);
            diff += (u - v) * (u - v);
            sum += (u + v) * (u + v);
        }
        total += (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees();
        counted += 1;
    }
    let degrees = if counted == 0 { 0.0 } else { total / counted as f64 };
    Ok(SamReport { degrees, excluded })
}

/// Reconstruction quality of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene: String,
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
}

impl MetricRow {
    pub fn compute<T: Scalar>(scene: impl Into<String>, pred: &HsiCube<T>, truth: &HsiCube<T>) -> Result<Self> {
        Ok(MetricRow {
            scene: scene.into(),
            psnr: psnr(pred, truth, 1.0)?,
            ssim: ssim(pred, truth)?,
            sam: sam(pred, truth)?.degrees,
        })
    }
}

impl fmt::Display for MetricRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.4}\t{:.5}\t{:.4}", self.scene, self.psnr, self.ssim, self.sam)
    }
}

#[cfg(test)]
#[path = "metrics_tests.rs"]
mod tests;
