//! Contrast-driven quadtree decomposition of RGB frames.
//!
//! A cell splits into four quadrants while its contrast exceeds the
//! threshold and both dimensions exceed the minimum cell size; leaf centers
//! are the candidate seeds for new splats.

use image::RgbImage;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum QuadtreeError {
    #[error("image is empty")]
    EmptyImage,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// How cell contrast is measured on the luminance plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ContrastMetric {
    /// max(L) - min(L) over the cell.
    #[default]
    Range,
    /// Standard deviation of L over the cell.
    StdDev,
}

/// One leaf of the decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadtreeLeaf {
    /// Top-left corner in pixels.
    pub origin: (u32, u32),
    /// Cell size (w, h) in pixels.
    pub size: (u32, u32),
    /// Contrast that stopped the split, in [0, 1].
    pub contrast: f64,
}

impl QuadtreeLeaf {
    /// Continuous center coordinate, origin + size/2.
    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (
            self.origin.0 as f64 + self.size.0 as f64 / 2.0,
            self.origin.1 as f64 + self.size.1 as f64 / 2.0,
        )
    }
}

/// Precomputed luminance plane in [0, 1].
pub struct LumaPlane {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl LumaPlane {
    pub fn from_rgb(image: &RgbImage) -> Self {
        let (width, height) = image.dimensions();
        let data = image
            .pixels()
            .map(|p| {
                (0.299 * p.0[0] as f32 + 0.587 * p.0[1] as f32 + 0.114 * p.0[2] as f32) / 255.0
            })
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }
}

/// Contrast of one cell of the luminance plane.
pub fn cell_contrast(
    luma: &LumaPlane,
    origin: (u32, u32),
    size: (u32, u32),
    metric: ContrastMetric,
) -> f64 {
    debug_assert!(origin.0 + size.0 <= luma.width && origin.1 + size.1 <= luma.height);
    match metric {
        ContrastMetric::Range => {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for y in origin.1..origin.1 + size.1 {
                for x in origin.0..origin.0 + size.0 {
                    let v = luma.get(x, y);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            (hi - lo).max(0.0) as f64
        }
        ContrastMetric::StdDev => {
            let n = (size.0 * size.1) as f64;
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for y in origin.1..origin.1 + size.1 {
                for x in origin.0..origin.0 + size.0 {
                    let v = luma.get(x, y) as f64;
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let mean = sum / n;
            (sum_sq / n - mean * mean).max(0.0).sqrt()
        }
    }
}

/// Convenience wrapper computing contrast straight from an RGB image.
pub fn cell_contrast_rgb(
    image: &RgbImage,
    origin: (u32, u32),
    size: (u32, u32),
    metric: ContrastMetric,
) -> f64 {
    cell_contrast(&LumaPlane::from_rgb(image), origin, size, metric)
}

/// Recursively decompose an image; leaves are returned in depth-first
/// order with quadrants visited NW, NE, SW, SE.
pub fn decompose(
    image: &RgbImage,
    threshold: f64,
    min_cell: u32,
) -> Result<Vec<QuadtreeLeaf>, QuadtreeError> {
    decompose_with_metric(image, threshold, min_cell, ContrastMetric::Range)
}

pub fn decompose_with_metric(
    image: &RgbImage,
    threshold: f64,
    min_cell: u32,
    metric: ContrastMetric,
) -> Result<Vec<QuadtreeLeaf>, QuadtreeError> {
    let (width, height) = image.dimensions();
    if width == 0 || height == 0 {
        return Err(QuadtreeError::EmptyImage);
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(QuadtreeError::InvalidParams(format!(
            "threshold {threshold} outside (0, 1]"
        )));
    }
    if min_cell < 2 {
        return Err(QuadtreeError::InvalidParams(format!(
            "min_cell {min_cell} must be at least 2"
        )));
    }
    let luma = LumaPlane::from_rgb(image);
    let mut leaves = Vec::new();
    subdivide(
        &luma,
        (0, 0),
        (width, height),
        threshold,
        min_cell,
        metric,
        &mut leaves,
    );
    Ok(leaves)
}

fn subdivide(
    luma: &LumaPlane,
    origin: (u32, u32),
    size: (u32, u32),
    threshold: f64,
    min_cell: u32,
    metric: ContrastMetric,
    out: &mut Vec<QuadtreeLeaf>,
) {
    let contrast = cell_contrast(luma, origin, size, metric);
    if contrast <= threshold || size.0 <= min_cell || size.1 <= min_cell {
        out.push(QuadtreeLeaf {
            origin,
            size,
            contrast,
        });
        return;
    }
    let (w0, h0) = (size.0 / 2, size.1 / 2);
    let (w1, h1) = (size.0 - w0, size.1 - h0);
    let (x, y) = origin;
    // NW, NE, SW, SE
    subdivide(luma, (x, y), (w0, h0), threshold, min_cell, metric, out);
    subdivide(luma, (x + w0, y), (w1, h0), threshold, min_cell, metric, out);
    subdivide(luma, (x, y + h0), (w0, h1), threshold, min_cell, metric, out);
    subdivide(
        luma,
        (x + w0, y + h0),
        (w1, h1),
        threshold,
        min_cell,
        metric,
        out,
    );
}

/// Draw leaf rectangle borders onto a copy of the image (debug overlay).
pub fn overlay_leaves(image: &RgbImage, leaves: &[QuadtreeLeaf]) -> RgbImage {
    let mut out = image.clone();
    let border = image::Rgb([0u8, 255, 0]);
    for leaf in leaves {
        let (x0, y0) = leaf.origin;
        let x1 = (x0 + leaf.size.0).saturating_sub(1);
        let y1 = (y0 + leaf.size.1).saturating_sub(1);
        for x in x0..=x1 {
            out.put_pixel(x, y0, border);
            out.put_pixel(x, y1, border);
        }
        for y in y0..=y1 {
            out.put_pixel(x0, y, border);
            out.put_pixel(x1, y, border);
        }
    }
    out
}
