//! Image quality metrics.

use crate::error::{Error, Result};

/// Mean squared error over all entries.
pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("mse over {} and {} values", a.len(), b.len())));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio for unit peak; `+∞` when `mse == 0`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn psnr(mse: f64) -> Result<f64> {
    if !(mse >= 0.0) {
        return Err(Error::Domain(format!("psnr of negative or NaN mse {mse}")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

pub fn image_psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    psnr(mse(a, b)?)
}

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian filter of one channel.
fn filter(img: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of interleaved RGB images with unit dynamic range, averaged
/// over channels.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height * 3 || b.len() != a.len() {
        return Err(Error::Shape(format!(
            "ssim expects {}x{}x3 images, got {} and {} values",
            width,
            height,
            a.len(),
            b.len()
        )));
    }
    if width < WINDOW || height < WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs images of at least {WINDOW}x{WINDOW}, got {width}x{height}"
        )));
    }
    let k = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.iter().skip(c).step_by(3).map(|v| *v as f64).collect();
        let y: Vec<f64> = b.iter().skip(c).step_by(3).map(|v| *v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter(&x, width, height, &k);
        let my = filter(&y, width, height, &k);
        let sxx = filter(&xx, width, height, &k);
        let syy = filter(&yy, width, height, &k);
        let sxy = filter(&xy, width, height, &k);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}
