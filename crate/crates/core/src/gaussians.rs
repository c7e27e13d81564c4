//! 3D Gaussian primitives and the voxel-weight-gated initialization that
//! keeps the map compact: a quadrant center seeds a new splat only when its
//! nearest voxel was first observed this frame.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::dataset::Frame;
#[cfg(test)]
use image::RgbImage;
use crate::geometry::{self, Intrinsics};
use crate::quadtree::QuadtreeLeaf;
use crate::sh;
use crate::tsdf::{TsdfVolume, VoxelQuery};

/// Hard bounds on exp(log_scale), in meters.
pub const SCALE_MIN: f64 = 1e-6;
pub const SCALE_MAX: f64 = 10.0;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One anisotropic Gaussian primitive. Rotation is a quaternion (w, x, y, z)
/// kept unit-norm between optimizer steps; scale and opacity live in log /
/// logit space so gradient steps cannot leave the valid manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub position: Vector3<f64>,
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// SH coefficients, coefficient-major: sh[k] is the RGB vector of
    /// basis function k.
    pub sh: Vec<Vector3<f64>>,
}

impl Gaussian3D {
    pub fn alpha(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    /// Sigma = R diag(s^2) R^T.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = self.scale();
        let d = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        r * d * r.transpose()
    }

    /// Renormalize the quaternion and clamp the scale bounds; called after
    /// every optimizer step.
    pub fn reproject_parameters(&mut self) {
        let norm = quat_norm(&self.rotation);
        if norm > 1e-12 {
            for c in &mut self.rotation {
                *c /= norm;
            }
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
        let (lo, hi) = (SCALE_MIN.ln(), SCALE_MAX.ln());
        self.log_scale = self.log_scale.map(|v| v.clamp(lo, hi));
    }
}

#[inline]
fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of a quaternion of any norm (normalized internally).
pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let norm = quat_norm(q);
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Chain an upstream dL/dR back to the raw (unnormalized) quaternion.
pub fn rotation_matrix_grad(q: &[f64; 4], dl_dr: &Matrix3<f64>) -> [f64; 4] {
    let norm = quat_norm(q);
    let qn = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    let (w, x, y, z) = (qn[0], qn[1], qn[2], qn[3]);

    let dr_dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dr_dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dr_dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dr_dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;

    let d_unit = [
        dl_dr.component_mul(&dr_dw).sum(),
        dl_dr.component_mul(&dr_dx).sum(),
        dl_dr.component_mul(&dr_dy).sum(),
        dl_dr.component_mul(&dr_dz).sum(),
    ];
    // d(q/|q|)/dq = (I - qn qn^T) / |q|
    let dot: f64 = (0..4).map(|i| d_unit[i] * qn[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (d_unit[i] - qn[i] * dot) / norm;
    }
    out
}

/// Adam moment buffers, index-aligned with the Gaussian array.
#[derive(Debug, Clone, Default)]
pub struct MomentBuffers {
    pub m_position: Vec<Vector3<f64>>,
    pub v_position: Vec<Vector3<f64>>,
    pub m_rotation: Vec<[f64; 4]>,
    pub v_rotation: Vec<[f64; 4]>,
    pub m_log_scale: Vec<Vector3<f64>>,
    pub v_log_scale: Vec<Vector3<f64>>,
    pub m_opacity: Vec<f64>,
    pub v_opacity: Vec<f64>,
    /// Gaussian-major: entry g * coeff_count + k.
    pub m_sh: Vec<Vector3<f64>>,
    pub v_sh: Vec<Vector3<f64>>,
}

impl MomentBuffers {
    fn push_zeroed(&mut self, coeff_count: usize) {
        self.m_position.push(Vector3::zeros());
        self.v_position.push(Vector3::zeros());
        self.m_rotation.push([0.0; 4]);
        self.v_rotation.push([0.0; 4]);
        self.m_log_scale.push(Vector3::zeros());
        self.v_log_scale.push(Vector3::zeros());
        self.m_opacity.push(0.0);
        self.v_opacity.push(0.0);
        for _ in 0..coeff_count {
            self.m_sh.push(Vector3::zeros());
            self.v_sh.push(Vector3::zeros());
        }
    }
}

/// Growable flat store of Gaussians plus optimizer state. Indices are
/// stable: splats are never deleted during a run.
#[derive(Debug, Clone, Default)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian3D>,
    sh_degree: usize,
    pub moments: MomentBuffers,
    /// Adam step counter (bias correction).
    pub step_count: u64,
    /// Bumped on every structural or parameter change; lets the renderer
    /// detect stale forward state.
    revision: u64,
}

impl GaussianMap {
    pub fn new(sh_degree: usize) -> Self {
        assert!(sh_degree <= sh::MAX_DEGREE);
        Self {
            sh_degree,
            ..Self::default()
        }
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn coeff_count(&self) -> usize {
        sh::coeff_count(self.sh_degree)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian3D] {
        &self.gaussians
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn get(&self, idx: usize) -> &Gaussian3D {
        &self.gaussians[idx]
    }

    /// Mutable access for the optimizer; bumps the revision.
    pub fn gaussians_mut(&mut self) -> &mut [Gaussian3D] {
        self.revision += 1;
        &mut self.gaussians
    }

    pub fn push(&mut self, g: Gaussian3D) {
        debug_assert_eq!(g.sh.len(), self.coeff_count());
        self.gaussians.push(g);
        self.moments.push_zeroed(self.coeff_count());
        self.revision += 1;
    }
}

/// Outcome counters for one initialization pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InitStats {
    pub appended: usize,
    pub skipped_invalid_depth: usize,
    pub skipped_visited: usize,
    pub skipped_unallocated: usize,
}

/// Seed new Gaussians from quadtree leaf centers. Must run after this
/// frame's TSDF integration so that "voxel weight == 1" identifies voxels
/// first observed this frame. Returns the per-outcome counts; `appended`
/// is the keyframe signal.
pub fn initialize_from_frame(
    map: &mut GaussianMap,
    leaves: &[QuadtreeLeaf],
    frame: &Frame,
    k: &Intrinsics,
    volume: &TsdfVolume,
) -> InitStats {
    let mut stats = InitStats::default();
    let coeff_count = map.coeff_count();
    for leaf in leaves {
        let (cu, cv) = leaf.center();
        let Some(depth) = frame.depth.sample(cu, cv) else {
            stats.skipped_invalid_depth += 1;
            continue;
        };
        let p_cam = match geometry::backproject(Vector2::new(cu, cv), depth, k) {
            Ok(p) => p,
            Err(_) => {
                stats.skipped_invalid_depth += 1;
                continue;
            }
        };
        let p_world = frame.pose.transform(p_cam);

        match volume.query_nearest_voxel(p_world) {
            VoxelQuery::Voxel(v) if v.weight == 1.0 => {}
            VoxelQuery::Voxel(_) => {
                stats.skipped_visited += 1;
                continue;
            }
            VoxelQuery::NotAllocated => {
                stats.skipped_unallocated += 1;
                continue;
            }
        }

        // Back-projected quadrant half-diagonal at the center's depth sets
        // the isotropic initial scale.
        let corner = Vector2::new(leaf.origin.0 as f64, leaf.origin.1 as f64);
        let corner_cam = geometry::backproject(corner, depth, k)
            .expect("corner backprojection shares the center's valid depth");
        let d = (corner_cam - p_cam).norm().clamp(SCALE_MIN, SCALE_MAX);

        let px = frame.rgb.get_pixel(cu.floor() as u32, cv.floor() as u32);
        let rgb = Vector3::new(
            px.0[0] as f64 / 255.0,
            px.0[1] as f64 / 255.0,
            px.0[2] as f64 / 255.0,
        );
        let mut sh_coeffs = vec![Vector3::zeros(); coeff_count];
        sh_coeffs[0] = (rgb - Vector3::repeat(0.5)) / sh::SH_C0;

        map.push(Gaussian3D {
            position: p_world,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(d.ln()),
            opacity_logit: 0.0,
            sh: sh_coeffs,
        });
        stats.appended += 1;
    }
    stats
}
