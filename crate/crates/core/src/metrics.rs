//! Image quality metrics: PSNR and luminance SSIM.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), `C1 = 0.01^2`,
//! `C2 = 0.03^2`, evaluated on luminance at every valid window position (no
//! padding) and averaged.

use crate::error::{Error, Result};
use crate::render::RenderedImage;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn check_same(a: &RenderedImage, b: &RenderedImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::structural(format!(
            "resolution mismatch: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
}

/// Mean absolute difference over all channels.
pub fn l1(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn luminance(img: &RenderedImage) -> Vec<f64> {
    img.pixels()
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect()
}

/// Separable "valid" correlation with the window.
fn filter_valid(src: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = win.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (u, wu) in win.iter().enumerate() {
                s += wu * tmp[(y + u) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-sized map back to full size.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (u, wu) in win.iter().enumerate() {
                tmp[(y + u) * ow + x] += wu * v;
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

struct SsimStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn stats(x: &[f64], y: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> SsimStats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    SsimStats {
        mu_x: filter_valid(x, w, h, win),
        mu_y: filter_valid(y, w, h, win),
        exx: filter_valid(&xx, w, h, win),
        eyy: filter_valid(&yy, w, h, win),
        exy: filter_valid(&xy, w, h, win),
    }
}

fn check_ssim_size(a: &RenderedImage) -> Result<()> {
    if (a.width() as usize) < SSIM_WINDOW || (a.height() as usize) < SSIM_WINDOW {
        return Err(Error::structural(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

pub fn ssim(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    check_same(a, b)?;
    check_ssim_size(a)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    let win = gaussian_window();
    let s = stats(&luminance(a), &luminance(b), w, h, &win);
    let n = s.mu_x.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (s.mu_x[i], s.mu_y[i]);
        let vx = s.exx[i] - mx * mx;
        let vy = s.eyy[i] - my * my;
        let cxy = s.exy[i] - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / n as f64)
}

/// SSIM and its gradient with respect to every RGB value of `a`.
pub(crate) fn ssim_with_grad(a: &RenderedImage, b: &RenderedImage) -> Result<(f64, Vec<f64>)> {
    check_same(a, b)?;
    check_ssim_size(a)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    let win = gaussian_window();
    let x = luminance(a);
    let y = luminance(b);
    let s = stats(&x, &y, w, h, &win);
    let n = s.mu_x.len();
    let inv_n = 1.0 / n as f64;
    let mut d_mu = vec![0.0; n];
    let mut d_exx = vec![0.0; n];
    let mut d_exy = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (s.mu_x[i], s.mu_y[i]);
        let vx = s.exx[i] - mx * mx;
        let vy = s.eyy[i] - my * my;
        let cxy = s.exy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let num = a1 * a2;
        let den = b1 * b2;
        total += num / den;
        let dnum_mu = 2.0 * my * (a2 - a1);
        let dden_mu = 2.0 * mx * (b2 - b1);
        d_mu[i] = inv_n * (dnum_mu * den - num * dden_mu) / (den * den);
        d_exx[i] = -inv_n * num * b1 / (den * den);
        d_exy[i] = inv_n * 2.0 * a1 / den;
    }
    let g_mu = filter_valid_adjoint(&d_mu, w, h, &win);
    let g_xx = filter_valid_adjoint(&d_exx, w, h, &win);
    let g_xy = filter_valid_adjoint(&d_exy, w, h, &win);
    let mut grad = vec![0.0; 3 * w * h];
    for q in 0..w * h {
        let dl = g_mu[q] + 2.0 * x[q] * g_xx[q] + y[q] * g_xy[q];
        for c in 0..3 {
            grad[3 * q + c] = dl * LUMA[c];
        }
    }
    Ok((total * inv_n, grad))
}
