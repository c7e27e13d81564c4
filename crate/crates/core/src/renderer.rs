//! Differentiable tile-based splatting.
//!
//! Forward: EWA projection of each Gaussian into a 2D splat, per-tile depth
//! sorting, and front-to-back alpha blending. Backward: exact vector-
//! Jacobian products through the blend, the 2D Gaussian, the perspective
//! Jacobian, and the covariance factorization, for all five parameter
//! groups.
//!
//! Reductions are deterministic: per-tile partial gradients are folded in
//! tile order, so identical inputs give bitwise-identical gradients
//! regardless of thread count.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::gaussians::{rotation_matrix_grad, GaussianMap};
use crate::geometry::{Intrinsics, Pose};
use crate::sh;

/// Contributions below this alpha are skipped (1/255).
const ALPHA_CUTOFF: f64 = 1.0 / 255.0;
/// Accumulation stops once transmittance falls below this.
const TRANSMITTANCE_FLOOR: f64 = 1e-4;
/// Low-pass regularization added to the diagonal of every 2D covariance.
const COV2D_LOWPASS: f64 = 0.3;

/// exp(x) for x in [-13, 0], the range of -quad/2 under the alpha cutoff.
/// Exponent-splitting with a degree-7 polynomial; relative error < 1e-8.
/// The weight function is defined by this approximation everywhere (forward,
/// backward, and the finite-difference oracles), so gradients stay exact for
/// the function actually rendered.
#[inline(always)]
pub(crate) fn exp_weight(x: f64) -> f64 {
    debug_assert!(x <= 1e-12);
    let y = x * std::f64::consts::LOG2_E;
    let n = y.round();
    let t = (y - n) * std::f64::consts::LN_2;
    let p = 1.0
        + t * (1.0
            + t * (0.5
                + t * (1.0 / 6.0
                    + t * (1.0 / 24.0
                        + t * (1.0 / 120.0 + t * (1.0 / 720.0 + t * (1.0 / 5040.0)))))));
    let scale = f64::from_bits((((n as i64) + 1023) << 52) as u64);
    p * scale
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum RenderError {
    #[error("forward state does not correspond to these inputs: {0}")]
    StateMismatch(String),
    #[error("gradient image has {got} pixels, expected {want}")]
    GradSizeMismatch { got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub tile_size: u32,
    pub background: Vector3<f64>,
    pub z_near: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile_size: 16,
            background: Vector3::zeros(),
            z_near: crate::geometry::Z_NEAR_DEFAULT,
        }
    }
}

/// A Gaussian projected into image space, with the quantities the backward
/// pass needs cached alongside.
#[derive(Debug, Clone)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    /// 2D covariance (xx, xy, yy), after low-pass regularization.
    pub cov: [f64; 3],
    /// Inverse covariance (xx, xy, yy).
    pub inv_cov: [f64; 3],
    /// Camera-frame z of the Gaussian center.
    pub depth: f64,
    /// Clamped display color in [0, 1].
    pub color: Vector3<f64>,
    pub alpha: f64,
    pub source_index: u32,
    // Cached for the backward pass.
    p_cam: Vector3<f64>,
    color_raw: Vector3<f64>,
    view_dir: Vector3<f64>,
    view_dist: f64,
    clamp_x_active: bool,
    clamp_y_active: bool,
    /// Pixel bounding box (x0, y0, x1, y1), inclusive, clipped to the frame.
    bbox: (u32, u32, u32, u32),
}

/// Forward output.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub width: u32,
    pub height: u32,
    pub color: Vec<Vector3<f64>>,
    pub final_transmittance: Vec<f64>,
    pub contributor_count: Vec<u32>,
}

impl Splat2D {
    /// Pixel bounding box (x0, y0, x1, y1), inclusive, clipped to the frame.
    pub fn pixel_bbox(&self) -> (u32, u32, u32, u32) {
        self.bbox
    }
}

impl RenderedFrame {
    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> Vector3<f64> {
        self.color[(y * self.width + x) as usize]
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width, self.height, |x, y| {
            let c = self.pixel(x, y);
            image::Rgb([
                (c.x.clamp(0.0, 1.0) * 255.0).round() as u8,
                (c.y.clamp(0.0, 1.0) * 255.0).round() as u8,
                (c.z.clamp(0.0, 1.0) * 255.0).round() as u8,
            ])
        })
    }
}

/// Compact per-splat record for the pixel loops (one cache line and a
/// half instead of the full projection cache).
#[derive(Debug, Clone, Copy)]
struct HotSplat {
    mean_x: f64,
    mean_y: f64,
    icov: [f64; 3],
    alpha: f64,
    color: [f64; 3],
    /// Quadratic-form value beyond which alpha * weight < 1/255.
    cutoff_quad: f64,
    bbox: (u32, u32, u32, u32),
}

impl HotSplat {
    fn of(splat: &Splat2D) -> Self {
        // alpha * exp(-q/2) < cutoff  <=>  q > 2 ln(alpha * 255)
        let cutoff_quad = if splat.alpha <= ALPHA_CUTOFF {
            -1.0
        } else {
            2.0 * (splat.alpha / ALPHA_CUTOFF).ln()
        };
        Self {
            mean_x: splat.mean.x,
            mean_y: splat.mean.y,
            icov: splat.inv_cov,
            alpha: splat.alpha,
            color: [splat.color.x, splat.color.y, splat.color.z],
            cutoff_quad,
            bbox: splat.bbox,
        }
    }

    /// Quadratic form at a pixel center; negative means "skip".
    #[inline(always)]
    fn quad(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean_x;
        let dy = py - self.mean_y;
        self.icov[0] * dx * dx + 2.0 * self.icov[1] * dx * dy + self.icov[2] * dy * dy
    }
}

/// One composited contribution recorded by the forward pass: which splat
/// (as a position in the tile's bin) hit which tile pixel with what weight.
#[derive(Debug, Clone, Copy)]
struct Contribution {
    local: u16,
    bin_pos: u32,
    weight: f64,
}

/// Everything the backward pass reuses from the forward pass, plus a
/// fingerprint of the inputs it was computed from.
pub struct RenderState {
    pub splats: Vec<Splat2D>,
    hot: Vec<HotSplat>,
    bins: Vec<Vec<u32>>,
    /// Per tile, the composited contributions in traversal order (empty
    /// when the forward pass did not record them).
    tile_entries: Vec<Vec<Contribution>>,
    tiles_x: u32,
    tiles_y: u32,
    options: RenderOptions,
    fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq)]
struct Fingerprint {
    map_revision: u64,
    map_len: usize,
    pose: [f64; 16],
    intrinsics: Intrinsics,
}

/// Per-Gaussian parameter gradients, index-aligned with the map.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    /// Gaussian-major: entry g * coeff_count + k.
    pub sh: Vec<Vector3<f64>>,
}

impl Gradients {
    fn zeros(n: usize, coeff_count: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            sh: vec![Vector3::zeros(); n * coeff_count],
        }
    }
}

/// Project one Gaussian into a 2D splat; `None` when culled (behind the
/// near plane, degenerate, or its 3-sigma box misses the frame).
pub fn project_gaussian(
    map: &GaussianMap,
    index: usize,
    inv_pose: &Pose,
    cam_center: Vector3<f64>,
    k: &Intrinsics,
    options: &RenderOptions,
) -> Option<Splat2D> {
    let g = map.get(index);
    let p_cam = inv_pose.transform(g.position);
    if !(p_cam.z > options.z_near) || !p_cam.iter().all(|v| v.is_finite()) {
        return None;
    }
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);

    let mean = Vector2::new(k.fx * x / z + k.cx, k.fy * y / z + k.cy);

    // Perspective Jacobian with the frustum clamp of the EWA approximation.
    let lim_x = 1.3 * (k.width as f64) / (2.0 * k.fx);
    let lim_y = 1.3 * (k.height as f64) / (2.0 * k.fy);
    let ratio_x = x / z;
    let ratio_y = y / z;
    let clamp_x_active = ratio_x.abs() <= lim_x;
    let clamp_y_active = ratio_y.abs() <= lim_y;
    let tx = ratio_x.clamp(-lim_x, lim_x);
    let ty = ratio_y.clamp(-lim_y, lim_y);
    let jac = nalgebra::Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * tx / z,
        0.0,
        k.fy / z,
        -k.fy * ty / z,
    );

    let w = inv_pose.rotation;
    let sigma = g.covariance();
    let sigma_cam = w * sigma * w.transpose();
    let cov2d_m = jac * sigma_cam * jac.transpose();
    let cov = [
        cov2d_m[(0, 0)] + COV2D_LOWPASS,
        cov2d_m[(0, 1)],
        cov2d_m[(1, 1)] + COV2D_LOWPASS,
    ];

    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let inv_det = 1.0 / det;
    let inv_cov = [cov[2] * inv_det, -cov[1] * inv_det, cov[0] * inv_det];

    // 3-sigma bounding box from the largest eigenvalue, clipped to frame.
    let mid = 0.5 * (cov[0] + cov[2]);
    let disc = (mid * mid - det).max(0.0).sqrt();
    let lambda_max = mid + disc;
    let radius = 3.0 * lambda_max.sqrt();
    let x0 = (mean.x - radius).floor();
    let x1 = (mean.x + radius).ceil();
    let y0 = (mean.y - radius).floor();
    let y1 = (mean.y + radius).ceil();
    if x1 < 0.0 || y1 < 0.0 || x0 >= k.width as f64 || y0 >= k.height as f64 {
        return None;
    }
    let bbox = (
        x0.max(0.0) as u32,
        y0.max(0.0) as u32,
        x1.min((k.width - 1) as f64) as u32,
        y1.min((k.height - 1) as f64) as u32,
    );

    let to_center = g.position - cam_center;
    let view_dist = to_center.norm();
    let view_dir = if view_dist > 1e-12 {
        to_center / view_dist
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };
    let color_raw =
        sh::eval(map.sh_degree(), &g.sh, view_dir) + Vector3::repeat(0.5);
    let color = color_raw.map(|c| c.clamp(0.0, 1.0));

    Some(Splat2D {
        mean,
        cov,
        inv_cov,
        depth: z,
        color,
        alpha: g.alpha(),
        source_index: index as u32,
        p_cam,
        color_raw,
        view_dir,
        view_dist,
        clamp_x_active,
        clamp_y_active,
        bbox,
    })
}

fn make_fingerprint(map: &GaussianMap, pose: &Pose, k: &Intrinsics) -> Fingerprint {
    Fingerprint {
        map_revision: map.revision(),
        map_len: map.len(),
        pose: pose.to_row_major(),
        intrinsics: *k,
    }
}

fn prepare(map: &GaussianMap, pose: &Pose, k: &Intrinsics, options: &RenderOptions) -> RenderState {
    let inv_pose = pose.inverse();
    let cam_center = pose.translation;
    let mut splats: Vec<Splat2D> = (0..map.len())
        .into_par_iter()
        .filter_map(|i| project_gaussian(map, i, &inv_pose, cam_center, k, options))
        .collect();
    // Global sort by depth with a stable source-index tie-break; per-tile
    // bins inherit the order, so binning is already depth-sorted and the
    // result does not depend on tile size.
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.source_index.cmp(&b.source_index))
    });

    let ts = options.tile_size.max(1);
    let tiles_x = k.width.div_ceil(ts);
    let tiles_y = k.height.div_ceil(ts);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (si, splat) in splats.iter().enumerate() {
        let (x0, y0, x1, y1) = splat.bbox;
        for tyy in (y0 / ts)..=(y1 / ts) {
            for txx in (x0 / ts)..=(x1 / ts) {
                bins[(tyy * tiles_x + txx) as usize].push(si as u32);
            }
        }
    }
    let hot = splats.iter().map(HotSplat::of).collect();
    RenderState {
        splats,
        hot,
        bins,
        tile_entries: Vec::new(),
        tiles_x,
        tiles_y,
        options: *options,
        fingerprint: make_fingerprint(map, pose, k),
    }
}

/// Render the map from a pose. Empty maps produce the background.
pub fn render(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    options: &RenderOptions,
) -> RenderedFrame {
    let mut state = prepare(map, pose, k, options);
    forward(&mut state, k, false)
}

/// Render and keep the projected state (including the recorded
/// contributions) for a matching backward pass.
pub fn render_with_state(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    options: &RenderOptions,
) -> (RenderedFrame, RenderState) {
    let mut state = prepare(map, pose, k, options);
    let frame = forward(&mut state, k, true);
    (frame, state)
}

struct TileRect {
    x0: u32,
    y0: u32,
    x1: u32, // exclusive
    y1: u32, // exclusive
}

fn tile_rect(state: &RenderState, tile: usize, k: &Intrinsics) -> TileRect {
    let ts = state.options.tile_size;
    let tx = tile as u32 % state.tiles_x;
    let ty = tile as u32 / state.tiles_x;
    TileRect {
        x0: tx * ts,
        y0: ty * ts,
        x1: ((tx + 1) * ts).min(k.width),
        y1: ((ty + 1) * ts).min(k.height),
    }
}

#[cfg(test)]
#[inline]
fn gaussian_weight(splat: &Splat2D, px: f64, py: f64) -> f64 {
    let dx = px - splat.mean.x;
    let dy = py - splat.mean.y;
    let quad = splat.inv_cov[0] * dx * dx
        + 2.0 * splat.inv_cov[1] * dx * dy
        + splat.inv_cov[2] * dy * dy;
    if quad < 0.0 {
        return 0.0;
    }
    exp_weight(-0.5 * quad)
}

fn forward(state: &mut RenderState, k: &Intrinsics, record: bool) -> RenderedFrame {
    let n_tiles = (state.tiles_x * state.tiles_y) as usize;
    let bg = state.options.background;

    struct TileOut {
        rect: TileRect,
        color: Vec<[f64; 3]>,
        transmittance: Vec<f64>,
        count: Vec<u32>,
        entries: Vec<Contribution>,
    }

    // Splat-major traversal: the outer loop walks the depth-sorted bin, the
    // inner loops visit exactly the pixels inside the splat's bounding box.
    // Per-pixel compositing order equals bin order, identical to a
    // pixel-major traversal.
    let mut tiles: Vec<TileOut> = (0..n_tiles)
        .into_par_iter()
        .map(|tile| {
            let rect = tile_rect(state, tile, k);
            let w = (rect.x1 - rect.x0) as usize;
            let h = (rect.y1 - rect.y0) as usize;
            let mut color = vec![[0.0f64; 3]; w * h];
            let mut transmittance = vec![1.0f64; w * h];
            let mut count = vec![0u32; w * h];
            let mut entries: Vec<Contribution> = if record {
                Vec::with_capacity(4 * w * h)
            } else {
                Vec::new()
            };
            let bin = &state.bins[tile];
            for (bin_pos, &si) in bin.iter().enumerate() {
                let splat = &state.hot[si as usize];
                let (bx0, by0, bx1, by1) = splat.bbox;
                let x0 = bx0.max(rect.x0);
                let x1 = bx1.min(rect.x1 - 1);
                let y0 = by0.max(rect.y0);
                let y1 = by1.min(rect.y1 - 1);
                if splat.cutoff_quad < 0.0 {
                    continue;
                }
                for py in y0..=y1 {
                    let cy = py as f64 + 0.5;
                    let row = ((py - rect.y0) as usize) * w;
                    // Solve quad(dx) <= cutoff along this row: a dx^2 +
                    // 2b dy dx + c dy^2 - cutoff <= 0. A one-pixel margin
                    // keeps the in-loop quad test authoritative.
                    let dy = cy - splat.mean_y;
                    let qa = splat.icov[0];
                    let qb = splat.icov[1] * dy;
                    let qc = splat.icov[2] * dy * dy - splat.cutoff_quad;
                    let disc = qb * qb - qa * qc;
                    if disc < 0.0 {
                        continue;
                    }
                    let sq = disc.sqrt() / qa;
                    let dx_mid = -qb / qa;
                    let row_lo = splat.mean_x + (dx_mid - sq) - 0.5;
                    let row_hi = splat.mean_x + (dx_mid + sq) - 0.5;
                    let x0 = x0.max(row_lo.floor().max(0.0) as u32);
                    let x1 = x1.min(row_hi.ceil().max(0.0) as u32);
                    for px in x0..=x1.min(rect.x1 - 1) {
                        let local = row + (px - rect.x0) as usize;
                        let t = transmittance[local];
                        if t < TRANSMITTANCE_FLOOR {
                            continue;
                        }
                        let quad = splat.quad(px as f64 + 0.5, cy);
                        if !(0.0..=splat.cutoff_quad).contains(&quad) {
                            continue;
                        }
                        let weight = exp_weight(-0.5 * quad);
                        let a = splat.alpha * weight;
                        if a < ALPHA_CUTOFF {
                            continue;
                        }
                        let at = a * t;
                        let acc = &mut color[local];
                        acc[0] += splat.color[0] * at;
                        acc[1] += splat.color[1] * at;
                        acc[2] += splat.color[2] * at;
                        transmittance[local] = t * (1.0 - a);
                        count[local] += 1;
                        if record {
                            entries.push(Contribution {
                                local: local as u16,
                                bin_pos: bin_pos as u32,
                                weight,
                            });
                        }
                    }
                }
            }
            TileOut {
                rect,
                color,
                transmittance,
                count,
                entries,
            }
        })
        .collect();

    let mut frame = RenderedFrame {
        width: k.width,
        height: k.height,
        color: vec![Vector3::zeros(); (k.width * k.height) as usize],
        final_transmittance: vec![1.0; (k.width * k.height) as usize],
        contributor_count: vec![0; (k.width * k.height) as usize],
    };
    state.tile_entries = Vec::with_capacity(if record { n_tiles } else { 0 });
    for tile in &mut tiles {
        let w = (tile.rect.x1 - tile.rect.x0) as usize;
        for py in tile.rect.y0..tile.rect.y1 {
            for px in tile.rect.x0..tile.rect.x1 {
                let local = ((py - tile.rect.y0) as usize) * w + (px - tile.rect.x0) as usize;
                let global = (py * k.width + px) as usize;
                let c = tile.color[local];
                frame.color[global] =
                    Vector3::new(c[0], c[1], c[2]) + bg * tile.transmittance[local];
                frame.final_transmittance[global] = tile.transmittance[local];
                frame.contributor_count[global] = tile.count[local];
            }
        }
        if record {
            state.tile_entries.push(std::mem::take(&mut tile.entries));
        }
    }
    frame
}

/// Per-splat accumulators gathered over pixels.
#[derive(Clone, Copy)]
struct SplatAccum {
    d_color: Vector3<f64>,
    d_alpha: f64,
    d_mean: Vector2<f64>,
    /// dL/d(inv_cov) as a symmetric 2x2 (xx, xy, yy); transformed to
    /// dL/d(cov) once per splat at finalization.
    d_inv_cov: [f64; 3],
}

impl SplatAccum {
    fn zero() -> Self {
        Self {
            d_color: Vector3::zeros(),
            d_alpha: 0.0,
            d_mean: Vector2::zeros(),
            d_inv_cov: [0.0; 3],
        }
    }

    fn add(&mut self, other: &SplatAccum) {
        self.d_color += other.d_color;
        self.d_alpha += other.d_alpha;
        self.d_mean += other.d_mean;
        for i in 0..3 {
            self.d_inv_cov[i] += other.d_inv_cov[i];
        }
    }
}

/// Exact gradients of `L = sum_pixels grad_image . rendered` with respect
/// to every Gaussian parameter. `state` must come from a forward pass over
/// the same map revision, pose and intrinsics.
pub fn render_backward(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    grad_image: &[Vector3<f64>],
    state: &RenderState,
) -> Result<Gradients, RenderError> {
    let expected = make_fingerprint(map, pose, k);
    if expected != state.fingerprint {
        return Err(RenderError::StateMismatch(
            "map revision, pose, or intrinsics changed since the forward pass".into(),
        ));
    }
    let want = (k.width * k.height) as usize;
    if grad_image.len() != want {
        return Err(RenderError::GradSizeMismatch {
            got: grad_image.len(),
            want,
        });
    }

    if state.tile_entries.len() != (state.tiles_x * state.tiles_y) as usize {
        return Err(RenderError::StateMismatch(
            "forward state carries no recorded contributions; use render_with_state".into(),
        ));
    }
    let n_tiles = (state.tiles_x * state.tiles_y) as usize;
    let bg = state.options.background;

    // Per-tile pass over the contributions recorded by the forward pass:
    // bucket them by pixel (stable, so per-pixel order stays front to
    // back), rebuild the prefix transmittances, then run the suffix
    // recurrence back to front:
    //   dC/da_i = T_i * (c_i - S_i)
    //   S_{i-1} = c_i a_i + (1 - a_i) S_i,   S_N = background
    let tile_grads: Vec<Vec<SplatAccum>> = (0..n_tiles)
        .into_par_iter()
        .map(|tile| {
            let rect = tile_rect(state, tile, k);
            let w = (rect.x1 - rect.x0) as usize;
            let h = (rect.y1 - rect.y0) as usize;
            let bin = &state.bins[tile];
            let entries = &state.tile_entries[tile];
            let mut accum = vec![SplatAccum::zero(); bin.len()];
            if entries.is_empty() {
                return accum;
            }

            // Counting sort by tile pixel, resolving the splat index and
            // its alpha during the scatter.
            struct Sorted {
                bin_pos: u32,
                weight: f64,
                a: f64,
            }
            let mut offsets = vec![0u32; w * h + 1];
            for e in entries {
                offsets[e.local as usize + 1] += 1;
            }
            for i in 0..w * h {
                offsets[i + 1] += offsets[i];
            }
            let mut sorted: Vec<Sorted> = Vec::with_capacity(entries.len());
            // Safety not needed: fill with placeholders then overwrite.
            sorted.resize_with(entries.len(), || Sorted {
                bin_pos: 0,
                weight: 0.0,
                a: 0.0,
            });
            let mut cursor = offsets.clone();
            for e in entries {
                let alpha = state.hot[bin[e.bin_pos as usize] as usize].alpha;
                let c = &mut cursor[e.local as usize];
                sorted[*c as usize] = Sorted {
                    bin_pos: e.bin_pos,
                    weight: e.weight,
                    a: alpha * e.weight,
                };
                *c += 1;
            }

            let mut t_chain: Vec<f64> = Vec::with_capacity(64);
            for local in 0..w * h {
                let (start, end) = (offsets[local] as usize, offsets[local + 1] as usize);
                if start == end {
                    continue;
                }
                let px = rect.x0 + (local % w) as u32;
                let py = rect.y0 + (local / w) as u32;
                let upstream = grad_image[(py * k.width + px) as usize];
                if upstream == Vector3::zeros() {
                    continue;
                }
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                let slice = &sorted[start..end];

                t_chain.clear();
                let mut t = 1.0f64;
                for e in slice {
                    t_chain.push(t);
                    t *= 1.0 - e.a;
                }

                let mut suffix = bg;
                for (e, &t_before) in slice.iter().zip(t_chain.iter()).rev() {
                    let splat = &state.hot[bin[e.bin_pos as usize] as usize];
                    let acc = &mut accum[e.bin_pos as usize];
                    let weight = e.weight;
                    let a = e.a;

                    let color = Vector3::new(splat.color[0], splat.color[1], splat.color[2]);
                    let dc_da = (color - suffix) * t_before;
                    let dl_da = upstream.dot(&dc_da);
                    acc.d_color += upstream * (a * t_before);
                    acc.d_alpha += dl_da * weight;
                    let dl_dweight = dl_da * splat.alpha;

                    // weight = exp(-0.5 d^T A d), d = pixel - mean
                    let dl_dsigma = -weight * dl_dweight;
                    let dx = cx - splat.mean_x;
                    let dy = cy - splat.mean_y;
                    let ad_x = splat.icov[0] * dx + splat.icov[1] * dy;
                    let ad_y = splat.icov[1] * dx + splat.icov[2] * dy;
                    // d(sigma)/d(mean) = -A d
                    acc.d_mean.x -= dl_dsigma * ad_x;
                    acc.d_mean.y -= dl_dsigma * ad_y;
                    // d(sigma)/dA = 0.5 d d^T, per full-matrix entry.
                    acc.d_inv_cov[0] += dl_dsigma * 0.5 * dx * dx;
                    acc.d_inv_cov[1] += dl_dsigma * 0.5 * dx * dy;
                    acc.d_inv_cov[2] += dl_dsigma * 0.5 * dy * dy;

                    suffix = color * a + suffix * (1.0 - a);
                }
            }
            accum
        })
        .collect();

    // Deterministic reduction: fold tiles in index order into per-splat
    // accumulators.
    let mut per_splat = vec![SplatAccum::zero(); state.splats.len()];
    for (tile, grads) in tile_grads.iter().enumerate() {
        let bin = &state.bins[tile];
        for (bin_pos, acc) in grads.iter().enumerate() {
            per_splat[bin[bin_pos] as usize].add(acc);
        }
    }

    // Per-splat finalization: chain image-space gradients to parameters.
    let inv_pose = pose.inverse();
    let coeff_count = map.coeff_count();
    let partials: Vec<(u32, SplatParamGrad)> = state
        .splats
        .par_iter()
        .zip(per_splat.par_iter())
        .map(|(splat, acc)| {
            (
                splat.source_index,
                finalize_splat(map, splat, acc, &inv_pose, k),
            )
        })
        .collect();

    let mut grads = Gradients::zeros(map.len(), coeff_count);
    for (source_index, p) in partials {
        let gi = source_index as usize;
        grads.position[gi] = p.position;
        grads.rotation[gi] = p.rotation;
        grads.log_scale[gi] = p.log_scale;
        grads.opacity_logit[gi] = p.opacity_logit;
        for (kidx, v) in p.sh.iter().enumerate() {
            grads.sh[gi * coeff_count + kidx] = *v;
        }
    }
    Ok(grads)
}

struct SplatParamGrad {
    position: Vector3<f64>,
    rotation: [f64; 4],
    log_scale: Vector3<f64>,
    opacity_logit: f64,
    sh: Vec<Vector3<f64>>,
}

fn finalize_splat(
    map: &GaussianMap,
    splat: &Splat2D,
    acc: &SplatAccum,
    inv_pose: &Pose,
    k: &Intrinsics,
) -> SplatParamGrad {
    let g = map.get(splat.source_index as usize);
    let degree = map.sh_degree();
    let coeff_count = map.coeff_count();
    let mut out = SplatParamGrad {
        position: Vector3::zeros(),
        rotation: [0.0; 4],
        log_scale: Vector3::zeros(),
        opacity_logit: 0.0,
        sh: vec![Vector3::zeros(); coeff_count],
    };

    // Opacity: alpha = sigmoid(logit).
    out.opacity_logit = acc.d_alpha * splat.alpha * (1.0 - splat.alpha);

    // Color: clamp gate, then SH coefficients and (degree >= 1) the view
    // direction, which feeds back into position.
    let gate = splat.color_raw.map(|c| if (0.0..=1.0).contains(&c) { 1.0 } else { 0.0 });
    let gated = acc.d_color.component_mul(&gate);
    let basis = sh::basis(degree, splat.view_dir);
    for kidx in 0..coeff_count {
        out.sh[kidx] = gated * basis[kidx];
    }
    let mut d_position = Vector3::zeros();
    if degree >= 1 {
        let basis_grads = sh::basis_dir_grad(degree, splat.view_dir);
        let mut d_dir = Vector3::zeros();
        for kidx in 0..coeff_count {
            d_dir += basis_grads[kidx] * gated.dot(&g.sh[kidx]);
        }
        // dir = v / |v|, v = position - camera center
        let proj = Matrix3::identity() - splat.view_dir * splat.view_dir.transpose();
        d_position += (proj * d_dir) / splat.view_dist;
    }

    // dL/d(inv_cov) -> dL/d(cov): d(X^-1) gives -A M A with A = X^-1.
    let a_m = Matrix2::new(
        splat.inv_cov[0],
        splat.inv_cov[1],
        splat.inv_cov[1],
        splat.inv_cov[2],
    );
    let m_a = Matrix2::new(
        acc.d_inv_cov[0],
        acc.d_inv_cov[1],
        acc.d_inv_cov[1],
        acc.d_inv_cov[2],
    );
    let d_cov2d = -(a_m * m_a * a_m);

    // Reconstruct the projection chain at this splat.
    let (x, y, z) = (splat.p_cam.x, splat.p_cam.y, splat.p_cam.z);
    let lim_x = 1.3 * (k.width as f64) / (2.0 * k.fx);
    let lim_y = 1.3 * (k.height as f64) / (2.0 * k.fy);
    let tx = (x / z).clamp(-lim_x, lim_x);
    let ty = (y / z).clamp(-lim_y, lim_y);
    let jac = nalgebra::Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * tx / z,
        0.0,
        k.fy / z,
        -k.fy * ty / z,
    );
    let w = inv_pose.rotation;
    let sigma = g.covariance();
    let sigma_cam = w * sigma * w.transpose();

    // cov2d = J sigma_cam J^T (+ const): chain into J and sigma_cam.
    let d_jac = (d_cov2d + d_cov2d.transpose()) * jac * sigma_cam;
    let d_sigma_cam = jac.transpose() * d_cov2d * jac;
    let d_sigma = w.transpose() * d_sigma_cam * w;

    // sigma = R D R^T with D = diag(exp(2 s)).
    let r = g.rotation_matrix();
    let s2 = g.log_scale.map(|v| (2.0 * v).exp());
    let d_mat = Matrix3::from_diagonal(&s2);
    let d_r = (d_sigma + d_sigma.transpose()) * r * d_mat;
    out.rotation = rotation_matrix_grad(&g.rotation, &d_r);
    let rt_ds_r = r.transpose() * d_sigma * r;
    out.log_scale = Vector3::new(
        rt_ds_r[(0, 0)] * 2.0 * s2.x,
        rt_ds_r[(1, 1)] * 2.0 * s2.y,
        rt_ds_r[(2, 2)] * 2.0 * s2.z,
    );

    // J entries depend on p_cam.
    let mut d_p_cam = Vector3::zeros();
    let gx = if splat.clamp_x_active { 1.0 } else { 0.0 };
    let gy = if splat.clamp_y_active { 1.0 } else { 0.0 };
    // J00 = fx/z, J02 = -fx*tx/z, J11 = fy/z, J12 = -fy*ty/z
    d_p_cam.x += d_jac[(0, 2)] * (-k.fx / z) * (gx / z);
    d_p_cam.y += d_jac[(1, 2)] * (-k.fy / z) * (gy / z);
    d_p_cam.z += d_jac[(0, 0)] * (-k.fx / (z * z));
    d_p_cam.z += d_jac[(1, 1)] * (-k.fy / (z * z));
    d_p_cam.z += d_jac[(0, 2)] * ((-k.fx / z) * (gx * (-x / (z * z))) + k.fx * tx / (z * z));
    d_p_cam.z += d_jac[(1, 2)] * ((-k.fy / z) * (gy * (-y / (z * z))) + k.fy * ty / (z * z));

    // Mean projection: u = (fx x / z + cx, fy y / z + cy).
    d_p_cam.x += acc.d_mean.x * k.fx / z;
    d_p_cam.y += acc.d_mean.y * k.fy / z;
    d_p_cam.z -= (acc.d_mean.x * k.fx * x + acc.d_mean.y * k.fy * y) / (z * z);

    // p_cam = W p + b.
    d_position += w.transpose() * d_p_cam;
    out.position = d_position;
    out
}
