//! Octree-indexed TSDF volume: Morton-coded 8^3 voxel blocks, band
//! allocation along camera rays, and weighted-average depth integration.
//!
//! The octree is realized as a hash map keyed by the block's Morton code;
//! the hierarchy is implicit in the code itself, which is all a
//! single-resolution TSDF needs from a spatial index.

use std::collections::{HashMap, HashSet};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::DepthImage;
use crate::geometry::{self, Intrinsics, Pose};

/// Voxel blocks are cubes of `BLOCK_EDGE`^3 voxels.
pub const BLOCK_EDGE: u32 = 8;
pub const BLOCK_VOLUME: usize = (BLOCK_EDGE * BLOCK_EDGE * BLOCK_EDGE) as usize;

/// World voxel index offset so negative coordinates stay Morton-encodable.
/// Gives a usable extent of +-2^20 voxels around the origin.
pub const COORD_OFFSET: i64 = 1 << 20;

const MORTON_COORD_BITS: u32 = 21;
const MORTON_COORD_MAX: u32 = (1 << MORTON_COORD_BITS) - 1;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TsdfError {
    #[error("voxel coordinate {0} exceeds {MORTON_COORD_BITS} bits")]
    CoordOverflow(u32),
    #[error("point ({0:.3}, {1:.3}, {2:.3}) m is outside the addressable volume")]
    OutOfRange(f64, f64, f64),
    #[error("depth image is {got_w}x{got_h} but intrinsics expect {want_w}x{want_h}")]
    DepthSizeMismatch {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
}

fn spread_bits(x: u32) -> u64 {
    let mut x = x as u64 & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f00000000ffff;
    x = (x | (x << 16)) & 0x1f0000ff0000ff;
    x = (x | (x << 8)) & 0x100f00f00f00f00f;
    x = (x | (x << 4)) & 0x10c30c30c30c30c3;
    x = (x | (x << 2)) & 0x1249249249249249;
    x
}

fn compact_bits(x: u64) -> u32 {
    let mut x = x & 0x1249249249249249;
    x = (x | (x >> 2)) & 0x10c30c30c30c30c3;
    x = (x | (x >> 4)) & 0x100f00f00f00f00f;
    x = (x | (x >> 8)) & 0x1f0000ff0000ff;
    x = (x | (x >> 16)) & 0x1f00000000ffff;
    x = (x | (x >> 32)) & 0x1fffff;
    x as u32
}

/// Interleave the bits of three 21-bit coordinates: bit 3i of the code is
/// x_i, bit 3i+1 is y_i, bit 3i+2 is z_i.
pub fn morton_encode(x: u32, y: u32, z: u32) -> Result<u64, TsdfError> {
    for c in [x, y, z] {
        if c > MORTON_COORD_MAX {
            return Err(TsdfError::CoordOverflow(c));
        }
    }
    Ok(spread_bits(x) | (spread_bits(y) << 1) | (spread_bits(z) << 2))
}

pub fn morton_decode(code: u64) -> (u32, u32, u32) {
    (compact_bits(code), compact_bits(code >> 1), compact_bits(code >> 2))
}

/// One voxel of the field: normalized truncated distance plus the
/// integer-valued observation count, capped at `w_max`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TsdfVoxel {
    pub tsdf: f32,
    pub weight: f32,
}

/// Dense 8^3 voxel cube, the allocation granule of the volume.
#[derive(Debug, Clone)]
pub struct VoxelBlock {
    pub morton: u64,
    pub voxels: Box<[TsdfVoxel; BLOCK_VOLUME]>,
}

impl VoxelBlock {
    fn new(morton: u64) -> Self {
        Self {
            morton,
            voxels: Box::new([TsdfVoxel::default(); BLOCK_VOLUME]),
        }
    }

    /// Linear index of a voxel inside the block, x-fastest.
    #[inline]
    pub fn voxel_index(lx: u32, ly: u32, lz: u32) -> usize {
        (lx + ly * BLOCK_EDGE + lz * BLOCK_EDGE * BLOCK_EDGE) as usize
    }
}

/// How a new sample is merged with the stored value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionRule {
    /// New sample weighted by the updated count w_k, denominator w_{k-1}+w_k.
    #[default]
    Paper,
    /// KinectFusion-style: new sample weighted by 1.
    Classic,
}

/// Sparse TSDF volume over Morton-indexed voxel blocks.
#[derive(Debug, Clone)]
pub struct TsdfVolume {
    blocks: HashMap<u64, VoxelBlock>,
    voxel_size: f64,
    trunc_band: f64,
    w_max: u32,
    fusion_rule: FusionRule,
}

/// Result of a nearest-voxel query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VoxelQuery {
    Voxel(TsdfVoxel),
    NotAllocated,
}

impl TsdfVolume {
    pub fn new(voxel_size: f64, trunc_band: f64, w_max: u32, fusion_rule: FusionRule) -> Self {
        assert!(voxel_size > 0.0, "voxel_size must be positive");
        assert!(
            trunc_band >= voxel_size,
            "truncation band must span at least one voxel"
        );
        Self {
            blocks: HashMap::new(),
            voxel_size,
            trunc_band,
            w_max,
            fusion_rule,
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn trunc_band(&self) -> f64 {
        self.trunc_band
    }

    pub fn w_max(&self) -> u32 {
        self.w_max
    }

    pub fn fusion_rule(&self) -> FusionRule {
        self.fusion_rule
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, morton: u64) -> Option<&VoxelBlock> {
        self.blocks.get(&morton)
    }

    /// Blocks sorted by Morton code, for deterministic export and scans.
    pub fn blocks_sorted(&self) -> Vec<&VoxelBlock> {
        let mut blocks: Vec<&VoxelBlock> = self.blocks.values().collect();
        blocks.sort_by_key(|b| b.morton);
        blocks
    }

    /// Insert a block parsed from an export; replaces any existing one.
    pub fn insert_block(&mut self, block: VoxelBlock) {
        self.blocks.insert(block.morton, block);
    }

    /// Offset voxel index of the cell containing a world point.
    #[inline]
    pub fn world_to_voxel(&self, p: Vector3<f64>) -> Result<(u32, u32, u32), TsdfError> {
        let to_idx = |v: f64| -> Result<u32, TsdfError> {
            let idx = (v / self.voxel_size).floor() as i64 + COORD_OFFSET;
            if idx < 0 || idx > MORTON_COORD_MAX as i64 {
                Err(TsdfError::OutOfRange(p.x, p.y, p.z))
            } else {
                Ok(idx as u32)
            }
        };
        Ok((to_idx(p.x)?, to_idx(p.y)?, to_idx(p.z)?))
    }

    /// World-frame center of the voxel at an offset index.
    #[inline]
    pub fn voxel_center(&self, idx: (u32, u32, u32)) -> Vector3<f64> {
        Vector3::new(
            (idx.0 as i64 - COORD_OFFSET) as f64 + 0.5,
            (idx.1 as i64 - COORD_OFFSET) as f64 + 0.5,
            (idx.2 as i64 - COORD_OFFSET) as f64 + 0.5,
        ) * self.voxel_size
    }

    /// Morton code of the block containing a voxel index.
    #[inline]
    pub fn block_key(idx: (u32, u32, u32)) -> Result<u64, TsdfError> {
        morton_encode(
            idx.0 & !(BLOCK_EDGE - 1),
            idx.1 & !(BLOCK_EDGE - 1),
            idx.2 & !(BLOCK_EDGE - 1),
        )
    }

    /// Voxel whose grid cell contains `p`, or `NotAllocated`.
    pub fn query_nearest_voxel(&self, p: Vector3<f64>) -> VoxelQuery {
        let Ok(idx) = self.world_to_voxel(p) else {
            return VoxelQuery::NotAllocated;
        };
        let Ok(key) = Self::block_key(idx) else {
            return VoxelQuery::NotAllocated;
        };
        match self.blocks.get(&key) {
            Some(block) => {
                let local = (idx.0 % BLOCK_EDGE, idx.1 % BLOCK_EDGE, idx.2 % BLOCK_EDGE);
                VoxelQuery::Voxel(block.voxels[VoxelBlock::voxel_index(local.0, local.1, local.2)])
            }
            None => VoxelQuery::NotAllocated,
        }
    }

    /// Allocate every voxel block intersecting the per-pixel ray segment
    /// `[d - eps, d + eps]` (in depth along the ray). Existing blocks are
    /// untouched. Returns the number of blocks created.
    pub fn allocate_band(
        &mut self,
        depth: &DepthImage,
        pose: &Pose,
        k: &Intrinsics,
    ) -> Result<usize, TsdfError> {
        self.check_depth_size(depth, k)?;
        let mut wanted: HashSet<u64> = HashSet::new();
        let origin = pose.translation;
        for j in 0..depth.height {
            for i in 0..depth.width {
                let d = depth.get(i, j);
                if !(d > 0.0) || !d.is_finite() {
                    continue;
                }
                // z-normalized ray through the pixel center, in world frame.
                let u = Intrinsics::pixel_center(i, j);
                let dir_cam = Vector3::new((u.x - k.cx) / k.fx, (u.y - k.cy) / k.fy, 1.0);
                let dir_world = pose.rotation * dir_cam;
                let t0 = (d - self.trunc_band).max(self.voxel_size * 0.1);
                let t1 = d + self.trunc_band;
                if t1 <= t0 {
                    continue;
                }
                let a = origin + dir_world * t0;
                let b = origin + dir_world * t1;
                self.blocks_on_segment(a, b, &mut wanted)?;
            }
        }
        let mut created = 0;
        for key in wanted {
            self.blocks.entry(key).or_insert_with(|| {
                created += 1;
                VoxelBlock::new(key)
            });
        }
        Ok(created)
    }

    /// Exact voxel-block traversal of a world-space segment (3D DDA).
    fn blocks_on_segment(
        &self,
        a: Vector3<f64>,
        b: Vector3<f64>,
        out: &mut HashSet<u64>,
    ) -> Result<(), TsdfError> {
        let block_size = self.voxel_size * BLOCK_EDGE as f64;
        // Work in block-grid coordinates (offset so they are non-negative).
        let offset = (COORD_OFFSET / BLOCK_EDGE as i64) as f64;
        let ga = a / block_size + Vector3::repeat(offset);
        let gb = b / block_size + Vector3::repeat(offset);
        let dir = gb - ga;
        let len = dir.norm();

        let mut cell = ga.map(|v| v.floor() as i64);
        let end_cell = gb.map(|v| v.floor() as i64);
        let step = dir.map(|v| if v > 0.0 { 1i64 } else { -1i64 });

        // Parametric distance (in t of a + t*(b-a), t in [0,1]) to the next
        // grid plane per axis, and per-cell increment.
        let mut t_max = Vector3::zeros();
        let mut t_delta = Vector3::zeros();
        for axis in 0..3 {
            if dir[axis].abs() < 1e-15 {
                t_max[axis] = f64::INFINITY;
                t_delta[axis] = f64::INFINITY;
            } else {
                let next_plane = if dir[axis] > 0.0 {
                    cell[axis] as f64 + 1.0
                } else {
                    cell[axis] as f64
                };
                t_max[axis] = (next_plane - ga[axis]) / dir[axis];
                t_delta[axis] = 1.0 / dir[axis].abs();
            }
        }

        let push = |cell: &Vector3<i64>, out: &mut HashSet<u64>| -> Result<(), TsdfError> {
            let vx = cell.x * BLOCK_EDGE as i64;
            let vy = cell.y * BLOCK_EDGE as i64;
            let vz = cell.z * BLOCK_EDGE as i64;
            if vx < 0 || vy < 0 || vz < 0 {
                return Err(TsdfError::OutOfRange(0.0, 0.0, 0.0));
            }
            out.insert(morton_encode(vx as u32, vy as u32, vz as u32)?);
            Ok(())
        };

        push(&cell, out)?;
        if len < 1e-15 {
            return Ok(());
        }
        // Upper bound on traversed cells: manhattan distance + slack.
        let max_steps = (end_cell - cell).abs().sum() + 3;
        for _ in 0..max_steps {
            if cell == end_cell {
                break;
            }
            let axis = if t_max.x <= t_max.y && t_max.x <= t_max.z {
                0
            } else if t_max.y <= t_max.z {
                1
            } else {
                2
            };
            cell[axis] += step[axis];
            t_max[axis] += t_delta[axis];
            push(&cell, out)?;
        }
        Ok(())
    }

    /// Integrate a depth frame into all allocated blocks (Eqs. of the
    /// running weighted average). Returns the number of voxels updated.
    pub fn integrate(
        &mut self,
        depth: &DepthImage,
        pose: &Pose,
        k: &Intrinsics,
    ) -> Result<usize, TsdfError> {
        self.check_depth_size(depth, k)?;
        let inv_pose = pose.inverse();
        let voxel_size = self.voxel_size;
        let trunc_band = self.trunc_band;
        let w_max = self.w_max;
        let rule = self.fusion_rule;

        // The camera-frame position of a voxel center is affine in its
        // local index, so walk it incrementally instead of re-transforming.
        let step_x = inv_pose.rotation.column(0) * voxel_size;
        let step_y = inv_pose.rotation.column(1) * voxel_size;
        let step_z = inv_pose.rotation.column(2) * voxel_size;
        let updated: usize = self
            .blocks
            .par_iter_mut()
            .map(|(_, block)| {
                let (bx, by, bz) = morton_decode(block.morton);
                let base = Vector3::new(
                    (bx as i64 - COORD_OFFSET) as f64 + 0.5,
                    (by as i64 - COORD_OFFSET) as f64 + 0.5,
                    (bz as i64 - COORD_OFFSET) as f64 + 0.5,
                ) * voxel_size;
                let base_cam = inv_pose.transform(base);
                let mut updated = 0usize;
                for lz in 0..BLOCK_EDGE {
                    for ly in 0..BLOCK_EDGE {
                        for lx in 0..BLOCK_EDGE {
                            let p_cam = base_cam
                                + step_x * lx as f64
                                + step_y * ly as f64
                                + step_z * lz as f64;
                            if p_cam.z <= 0.0 {
                                continue;
                            }
                            let u = Vector2::new(
                                k.fx * p_cam.x / p_cam.z + k.cx,
                                k.fy * p_cam.y / p_cam.z + k.cy,
                            );
                            let (ui, vi) = (u.x.floor(), u.y.floor());
                            if ui < 0.0 || vi < 0.0 || ui >= k.width as f64 || vi >= k.height as f64
                            {
                                continue;
                            }
                            let measured = depth.get(ui as u32, vi as u32);
                            if !(measured > 0.0) || !measured.is_finite() {
                                continue;
                            }
                            let sdf = measured - p_cam.z;
                            // Deep behind the surface: outside the band, skip.
                            if sdf < -trunc_band {
                                continue;
                            }
                            let tsdf_new = (sdf / trunc_band).clamp(-1.0, 1.0);
                            let voxel = &mut block.voxels
                                [VoxelBlock::voxel_index(lx, ly, lz)];
                            *voxel = fuse_voxel(*voxel, tsdf_new as f32, w_max, rule);
                            updated += 1;
                        }
                    }
                }
                updated
            })
            .sum();
        Ok(updated)
    }

    /// Render a depth image by marching rays to the first tsdf zero
    /// crossing (positive to negative), with linear interpolation between
    /// the bracketing samples. Pixels without a crossing are 0 (invalid).
    pub fn raycast_depth(&self, pose: &Pose, k: &Intrinsics, max_depth: f64) -> DepthImage {
        let mut out = DepthImage::new(k.width, k.height);
        let step = self.voxel_size * 0.5;
        let origin = pose.translation;
        let rows: Vec<Vec<f64>> = (0..k.height)
            .into_par_iter()
            .map(|j| {
                let mut row = vec![0.0f64; k.width as usize];
                for i in 0..k.width {
                    let u = Intrinsics::pixel_center(i, j);
                    let dir_cam = Vector3::new((u.x - k.cx) / k.fx, (u.y - k.cy) / k.fy, 1.0);
                    let dir_norm = dir_cam.norm();
                    let dir_world = (pose.rotation * dir_cam) / dir_norm;
                    // t is arc length; camera z = t / dir_norm.
                    let t_start = geometry::Z_NEAR_DEFAULT * dir_norm;
                    let t_end = max_depth * dir_norm;
                    let mut prev: Option<(f64, f32)> = None;
                    let mut t = t_start;
                    while t <= t_end {
                        let p = origin + dir_world * t;
                        let sample = match self.query_nearest_voxel(p) {
                            VoxelQuery::Voxel(v) if v.weight > 0.0 => Some(v.tsdf),
                            _ => None,
                        };
                        if let Some(tsdf) = sample {
                            if let Some((t_prev, tsdf_prev)) = prev {
                                if tsdf_prev > 0.0 && tsdf <= 0.0 {
                                    let frac =
                                        tsdf_prev as f64 / (tsdf_prev as f64 - tsdf as f64);
                                    let t_hit = t_prev + frac * (t - t_prev);
                                    row[i as usize] = t_hit / dir_norm;
                                    break;
                                }
                            }
                            prev = Some((t, tsdf));
                        } else {
                            prev = None;
                        }
                        t += step;
                    }
                }
                row
            })
            .collect();
        for (j, row) in rows.into_iter().enumerate() {
            for (i, v) in row.into_iter().enumerate() {
                out.set(i as u32, j as u32, v);
            }
        }
        out
    }

    fn check_depth_size(&self, depth: &DepthImage, k: &Intrinsics) -> Result<(), TsdfError> {
        if depth.width != k.width || depth.height != k.height {
            return Err(TsdfError::DepthSizeMismatch {
                got_w: depth.width,
                got_h: depth.height,
                want_w: k.width,
                want_h: k.height,
            });
        }
        Ok(())
    }
}

/// Merge one normalized sample into a voxel. `tsdf_new` must already be
/// clamped to [-1, 1].
#[inline]
pub fn fuse_voxel(prev: TsdfVoxel, tsdf_new: f32, w_max: u32, rule: FusionRule) -> TsdfVoxel {
    let w_prev = prev.weight as f64;
    let w_new = (w_prev + 1.0).min(w_max as f64);
    let fused = match rule {
        FusionRule::Paper => {
            (prev.tsdf as f64 * w_prev + tsdf_new as f64 * w_new) / (w_prev + w_new)
        }
        FusionRule::Classic => (prev.tsdf as f64 * w_prev + tsdf_new as f64) / (w_prev + 1.0),
    };
    TsdfVoxel {
        tsdf: fused as f32,
        weight: w_new as f32,
    }
}
