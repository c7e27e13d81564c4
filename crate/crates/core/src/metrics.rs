//! Image-quality metrics: PSNR and SSIM over [0, 1] float images.

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("image {0}x{1} is smaller than the {2}x{2} SSIM window")]
    TooSmall(u32, u32, u32),
}

/// PSNR cap for (near-)identical images, in dB.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: u32 = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// An RGB image as flat [0, 1] floats, the exchange type between the
/// renderer and the metrics.
#[derive(Debug, Clone)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<Vector3<f64>>,
}

impl FloatImage {
    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img
                .pixels()
                .map(|p| {
                    Vector3::new(
                        p.0[0] as f64 / 255.0,
                        p.0[1] as f64 / 255.0,
                        p.0[2] as f64 / 255.0,
                    )
                })
                .collect(),
        }
    }

    pub fn from_parts(width: u32, height: u32, data: Vec<Vector3<f64>>) -> Self {
        assert_eq!(data.len(), (width * height) as usize);
        Self {
            width,
            height,
            data,
        }
    }

    fn luminance(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|c| 0.299 * c.x + 0.587 * c.y + 0.114 * c.z)
            .collect()
    }
}

/// Per-frame and aggregate metrics of an evaluation run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FrameMetrics {
    pub frame_index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn from_frames(per_frame: Vec<FrameMetrics>) -> Self {
        let n = per_frame.len().max(1) as f64;
        let mean_psnr = per_frame.iter().map(|f| f.psnr).sum::<f64>() / n;
        let mean_ssim = per_frame.iter().map(|f| f.ssim).sum::<f64>() / n;
        Self {
            per_frame,
            mean_psnr,
            mean_ssim,
        }
    }
}

fn check_dims(a: &FloatImage, b: &FloatImage) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    Ok(())
}

/// 10 log10(1 / MSE) over all pixels and channels, capped at 99 dB.
pub fn psnr(a: &FloatImage, b: &FloatImage) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let n = (a.data.len() * 3) as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(pa, pb)| (pa - pb).norm_squared())
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean local SSIM on luminance with an 11x11 Gaussian window (sigma 1.5),
/// valid positions only.
pub fn ssim(a: &FloatImage, b: &FloatImage) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(a.width, a.height, SSIM_WINDOW));
    }
    let la = a.luminance();
    let lb = b.luminance();
    let kernel = gaussian_kernel();
    let w = a.width as usize;
    let h = a.height as usize;
    let half = (SSIM_WINDOW / 2) as usize;

    let mut total = 0.0;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..SSIM_WINDOW as usize {
                for kx in 0..SSIM_WINDOW as usize {
                    let wgt = kernel[ky * SSIM_WINDOW as usize + kx];
                    let va = la[(cy + ky - half) * w + (cx + kx - half)];
                    let vb = lb[(cy + ky - half) * w + (cx + kx - half)];
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as i32;
    let mut kernel = Vec::with_capacity((SSIM_WINDOW * SSIM_WINDOW) as usize);
    for y in -half..=half {
        for x in -half..=half {
            let r2 = (x * x + y * y) as f64;
            kernel.push((-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    kernel
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn constant(w: u32, h: u32, v: f64) -> FloatImage {
        FloatImage::from_parts(w, h, vec![Vector3::repeat(v); (w * h) as usize])
    }

    fn random_image(w: u32, h: u32, seed: u64) -> FloatImage {
        let mut rng = StdRng::seed_from_u64(seed);
        FloatImage::from_parts(
            w,
            h,
            (0..(w * h))
                .map(|_| {
                    Vector3::new(
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn psnr_identical_caps() {
        let img = random_image(16, 16, 1);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_closed_form_constants() {
        // MSE between constant 0 and 0.5 is 0.25: 10 log10(4) = 6.0206
        let a = constant(16, 16, 0.0);
        let b = constant(16, 16, 0.5);
        assert_relative_eq!(psnr(&a, &b).unwrap(), 6.0206, epsilon = 1e-4);
        // 0 vs 1: MSE 1 -> 0 dB.
        let c = constant(16, 16, 1.0);
        assert_relative_eq!(psnr(&a, &c).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn psnr_dimension_mismatch() {
        let a = constant(8, 8, 0.0);
        let b = constant(8, 9, 0.0);
        assert!(matches!(
            psnr(&a, &b),
            Err(MetricsError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = random_image(24, 24, 2);
        let mut rng = StdRng::seed_from_u64(3);
        let mut last = f64::INFINITY;
        for amplitude in [0.01, 0.05, 0.1, 0.3] {
            let noisy = FloatImage::from_parts(
                24,
                24,
                base.data
                    .iter()
                    .map(|c| {
                        c + Vector3::new(
                            rng.random_range(-amplitude..amplitude),
                            rng.random_range(-amplitude..amplitude),
                            rng.random_range(-amplitude..amplitude),
                        )
                    })
                    .collect(),
            );
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last, "psnr {p} not below {last} at amplitude {amplitude}");
            last = p;
        }
    }

    #[test]
    fn metric_symmetry() {
        let a = random_image(16, 16, 4);
        let b = random_image(16, 16, 5);
        assert_relative_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap(), epsilon = 1e-9);
        assert_relative_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn ssim_identical_is_one() {
        let img = random_image(16, 16, 6);
        assert_relative_eq!(ssim(&img, &img).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_constant_pair_is_one() {
        let a = constant(16, 16, 0.5);
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_negative_image_below_one() {
        let a = random_image(16, 16, 7);
        let neg = FloatImage::from_parts(
            16,
            16,
            a.data.iter().map(|c| Vector3::repeat(1.0) - c).collect(),
        );
        assert!(ssim(&a, &neg).unwrap() < 1.0);
    }

    #[test]
    fn ssim_too_small_rejected() {
        let a = constant(10, 16, 0.5);
        assert!(matches!(ssim(&a, &a), Err(MetricsError::TooSmall(..))));
    }
}
