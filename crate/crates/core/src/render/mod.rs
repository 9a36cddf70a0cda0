//! Deterministic CPU splatting.
//!
//! Each primitive is projected to a 2D Gaussian (EWA-style local affine
//! approximation, no low-pass dilation), truncated at 3 sigma, and composited
//! front to back against an opaque black background. A fragment whose
//! compositing weight `alpha * T` does not exceed [`EPS_CONTRIB`] is dropped
//! entirely; the same threshold defines usage frequency, so a primitive with
//! zero usage contributes nothing to any counted view.

mod camera;
mod raster;

pub use camera::Camera;
pub(crate) use raster::{quat_to_mat, Tape};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::model::GaussianFrame;

/// One display quantum.
pub const EPS_CONTRIB: f64 = 1.0 / 255.0;

/// Row-major interleaved RGB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedImage {
    width: u32,
    height: u32,
    pixels: Vec<f64>,
}

impl RenderedImage {
    pub fn new(width: u32, height: u32, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != 3 * width as usize * height as usize {
            return Err(Error::structural(format!(
                "{} values for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite pixel value"));
        }
        Ok(RenderedImage {
            width,
            height,
            pixels,
        })
    }

    pub fn constant(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        RenderedImage::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * (width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        RenderedImage {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * (y * self.width + x) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// 8-bit PNG export for inspection.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::save_buffer(path, &bytes, self.width, self.height, image::ColorType::Rgb8)?;
        Ok(())
    }
}

/// Per-primitive count of (pixel, view) pairs with weight above
/// [`EPS_CONTRIB`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageFrequency {
    pub counts: Vec<u64>,
}

impl UsageFrequency {
    pub fn zeros(n: usize) -> Self {
        UsageFrequency { counts: vec![0; n] }
    }

    pub fn merge(&mut self, other: &UsageFrequency) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

fn check_frame(frame: &GaussianFrame) -> Result<()> {
    if frame.is_empty() {
        return Err(Error::validation("cannot render an empty frame"));
    }
    Ok(())
}

pub fn render(frame: &GaussianFrame, cam: &Camera) -> Result<RenderedImage> {
    check_frame(frame)?;
    let splats = raster::project(frame, cam)?;
    let out = raster::composite(&splats, cam, false, false);
    RenderedImage::new(cam.width(), cam.height(), out.image)
}

/// Renders every camera, in parallel when enabled.
pub fn render_views(frame: &GaussianFrame, cams: &[Camera]) -> Result<Vec<RenderedImage>> {
    check_frame(frame)?;
    exec::map(cams, |c| render(frame, c)).into_iter().collect()
}

pub fn render_with_usage(
    frame: &GaussianFrame,
    cams: &[Camera],
) -> Result<(Vec<RenderedImage>, UsageFrequency)> {
    check_frame(frame)?;
    if cams.is_empty() {
        return Err(Error::structural("render_with_usage needs at least one camera"));
    }
    let per_cam: Vec<Result<(RenderedImage, Vec<u64>)>> = exec::map(cams, |cam| {
        let splats = raster::project(frame, cam)?;
        let out = raster::composite(&splats, cam, false, true);
        let mut counts = vec![0u64; frame.len()];
        for (s, c) in splats.iter().zip(out.usage.unwrap_or_default()) {
            counts[s.index] += c;
        }
        Ok((RenderedImage::new(cam.width(), cam.height(), out.image)?, counts))
    });
    let mut usage = UsageFrequency::zeros(frame.len());
    let mut images = Vec::with_capacity(cams.len());
    for r in per_cam {
        let (img, counts) = r?;
        usage.merge(&UsageFrequency { counts });
        images.push(img);
    }
    Ok((images, usage))
}

/// Per-pixel residual transmittance after compositing.
pub fn transmittance(frame: &GaussianFrame, cam: &Camera) -> Result<Vec<f64>> {
    check_frame(frame)?;
    let splats = raster::project(frame, cam)?;
    Ok(raster::composite(&splats, cam, false, false).transmittance)
}

/// Hash of the discrete rasterization structure: depth order plus the set of
/// contributing fragments. Analytic gradients are exact only while this stays
/// fixed; finite-difference checks use it to discard coordinates whose
/// perturbation crosses a structural boundary.
pub fn activity_signature(frame: &GaussianFrame, cam: &Camera) -> Result<u64> {
    check_frame(frame)?;
    let splats = raster::project(frame, cam)?;
    Ok(raster::signature(&splats, cam))
}
