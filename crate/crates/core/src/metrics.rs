//! Image quality metrics on the 0..255 scale and the bicubic baseline.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::sensor::MeasurementGrid;

pub const PEAK: f64 = 255.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Keys cubic convolution parameter.
pub const BICUBIC_A: f64 = -0.5;

fn same_dims(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims("mse", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(255² / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / m).log10()
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03 and dynamic range 255, over the valid region.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let win = gaussian_window();
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, h, w, &win);
    let my = filter_valid(&y, h, w, &win);
    let mxx = filter_valid(&prod(&x, &x), h, w, &win);
    let myy = filter_valid(&prod(&y, &y), h, w, &win);
    let mxy = filter_valid(&prod(&x, &y), h, w, &win);
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Keys cubic kernel.
pub fn cubic(t: f64) -> f64 {
    let a = BICUBIC_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        (((t - 5.0) * t + 8.0) * t - 4.0) * a
    } else {
        0.0
    }
}

/// First source tap and the four tap weights for output sample `i` of a
/// `factor`× upscale with half-pixel alignment.
pub fn bicubic_taps(i: usize, factor: usize) -> (isize, [f64; 4]) {
    let src = (i as f64 + 0.5) / factor as f64 - 0.5;
    let base = src.floor();
    let t = src - base;
    let w = [cubic(1.0 + t), cubic(t), cubic(1.0 - t), cubic(2.0 - t)];
    (base as isize - 1, w)
}

/// Separable bicubic upscaling with edge clamping.
pub fn bicubic_upscale_image(low: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(Error::Invalid("upscale factor must be positive".into()));
    }
    let (h, w) = low.dims();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let ow = w * factor;
    let mut rows = vec![0.0f64; h * ow];
    for x in 0..ow {
        let (first, wt) = bicubic_taps(x, factor);
        for y in 0..h {
            rows[y * ow + x] = (0..4)
                .map(|k| wt[k] * low.get(y, clamp(first + k as isize, w)) as f64)
                .sum();
        }
    }
    let oh = h * factor;
    let mut out = Image::filled(ow, oh, 0.0);
    for y in 0..oh {
        let (first, wt) = bicubic_taps(y, factor);
        for x in 0..ow {
            let v: f64 = (0..4)
                .map(|k| wt[k] * rows[clamp(first + k as isize, h) * ow + x])
                .sum();
            out.set(y, x, v as f32);
        }
    }
    Ok(out)
}

/// Bicubic estimate of the high-resolution image from sensor read-outs.
pub fn bicubic_upscale(low: &MeasurementGrid, factor: usize) -> Result<Image> {
    if factor != 2 {
        return Err(Error::Unsupported(format!(
            "sensor read-outs are upscaled by 2, not {factor}"
        )));
    }
    bicubic_upscale_image(&low.values, factor)
}
