//! Acceptance suite: one test per release criterion, each printing a
//! PASS line on success. Run with `cargo test --test acceptance`
//! (`-- --nocapture` to see the lines and the measured margins).

use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use gsfusion_core::dataset::synthetic::{presets, Primitive, SceneSpec, Texture, Trajectory};
use gsfusion_core::dataset::{DatasetError, DepthImage, Frame, Sequence};
use gsfusion_core::export::{export_gaussians_ply, export_tsdf, import_gaussians_ply, import_tsdf};
use gsfusion_core::gaussians::{Gaussian3D, GaussianMap};
use gsfusion_core::geometry::{Intrinsics, Pose};
use gsfusion_core::metrics::FloatImage;
use gsfusion_core::pipeline::{evaluate_map, run_frames, PipelineConfig, RunOutput};
use gsfusion_core::renderer::{
    project_gaussian, render, render_backward, render_with_state, RenderOptions,
};
use gsfusion_core::tsdf::{
    morton_encode, FusionRule, TsdfVolume, VoxelQuery, BLOCK_EDGE, COORD_OFFSET,
};
use gsfusion_core::tsdf;

const ALPHA_CUTOFF: f64 = 1.0 / 255.0;
const TRANSMITTANCE_FLOOR: f64 = 1e-4;

fn pass(id: &str, detail: String) {
    println!("ACCEPTANCE {id}: PASS ({detail})");
}

// --------------------------------------------------------------------
// Criterion 1: analytic gradients match central finite differences on
// >= 20 random small scenes, all five parameter groups, rel < 1e-3
// (abs < 1e-6 near zero), h = 1e-4, in under 60 s.
// --------------------------------------------------------------------

fn fd_scene(seed: u64) -> (GaussianMap, Intrinsics, Pose, RenderOptions) {
    let k = Intrinsics::new(32.0, 32.0, 16.0, 16.0, 32, 32, 1e-3).unwrap();
    let opts = RenderOptions {
        background: Vector3::new(0.12, 0.15, 0.1),
        ..Default::default()
    };
    let mut rng = StdRng::seed_from_u64(seed);
    let mut map = GaussianMap::new(0);
    let mut depths: Vec<f64> = Vec::new();
    while map.len() < 10 {
        let z: f64 = rng.random_range(0.9..2.4);
        // Distinct depths keep the global sort away from tie boundaries.
        if depths.iter().any(|d| (d - z).abs() < 1e-3) {
            continue;
        }
        let mut g = Gaussian3D {
            position: Vector3::new(
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
                z,
            ),
            rotation: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            log_scale: Vector3::new(
                rng.random_range(-3.2..-2.2),
                rng.random_range(-3.2..-2.2),
                rng.random_range(-3.2..-2.2),
            ),
            opacity_logit: rng.random_range(-1.5..1.5),
            // Raw colors stay well inside (0, 1) so the clamp gate cannot
            // flip inside the FD window.
            sh: vec![Vector3::new(
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
            )],
        };
        g.reproject_parameters();
        depths.push(z);
        map.push(g);
    }
    (map, k, Pose::identity(), opts)
}

/// Pixels whose contribution to the loss could jump within the FD window:
/// near a splat's alpha-cutoff level set, near its footprint boundary, or
/// where the transmittance floor is about to trigger. Rebuilt here from the
/// public projection API, independent of the backward pass under test.
fn fd_kink_mask(map: &GaussianMap, pose: &Pose, k: &Intrinsics, opts: &RenderOptions) -> Vec<bool> {
    let inv_pose = pose.inverse();
    let mut splats: Vec<_> = (0..map.len())
        .filter_map(|i| project_gaussian(map, i, &inv_pose, pose.translation, k, opts))
        .collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap());
    let mut risky = vec![false; (k.width * k.height) as usize];
    // A bbox bound can flip a whole pixel row/column only when it sits
    // within the FD window of an integer; bounds move well under 0.02 px
    // per perturbation here.
    let near_int = |v: f64| (v - v.round()).abs() < 0.02;
    for splat in &splats {
        let det = splat.cov[0] * splat.cov[2] - splat.cov[1] * splat.cov[1];
        let mid = 0.5 * (splat.cov[0] + splat.cov[2]);
        let radius = 3.0 * (mid + (mid * mid - det).max(0.0).sqrt()).sqrt();
        let risky_x0 = near_int(splat.mean.x - radius);
        let risky_x1 = near_int(splat.mean.x + radius);
        let risky_y0 = near_int(splat.mean.y - radius);
        let risky_y1 = near_int(splat.mean.y + radius);
        for py in 0..k.height {
            for px in 0..k.width {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                let dx = cx - splat.mean.x;
                let dy = cy - splat.mean.y;
                let quad = splat.inv_cov[0] * dx * dx
                    + 2.0 * splat.inv_cov[1] * dx * dy
                    + splat.inv_cov[2] * dy * dy;
                let a = splat.alpha * (-0.5 * quad).exp();
                let near_cutoff = (a - ALPHA_CUTOFF).abs() < 3e-4;
                let in_band = dx.abs() <= radius + 1.5 && dy.abs() <= radius + 1.5;
                let near_edge = in_band
                    && ((risky_x0 && (cx - (splat.mean.x - radius)).abs() < 1.5)
                        || (risky_x1 && (cx - (splat.mean.x + radius)).abs() < 1.5)
                        || (risky_y0 && (cy - (splat.mean.y - radius)).abs() < 1.5)
                        || (risky_y1 && (cy - (splat.mean.y + radius)).abs() < 1.5));
                if near_cutoff || near_edge {
                    risky[(py * k.width + px) as usize] = true;
                }
            }
        }
    }
    // Transmittance floor proximity along the blend order.
    for py in 0..k.height {
        for px in 0..k.width {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut t = 1.0f64;
            for splat in &splats {
                let (bx0, by0, bx1, by1) = splat.pixel_bbox();
                if px < bx0 || px > bx1 || py < by0 || py > by1 {
                    continue;
                }
                let dx = cx - splat.mean.x;
                let dy = cy - splat.mean.y;
                let quad = splat.inv_cov[0] * dx * dx
                    + 2.0 * splat.inv_cov[1] * dx * dy
                    + splat.inv_cov[2] * dy * dy;
                if quad < 0.0 {
                    continue;
                }
                let a = splat.alpha * (-0.5 * quad).exp();
                if a < ALPHA_CUTOFF {
                    continue;
                }
                t *= 1.0 - a;
                if (t / TRANSMITTANCE_FLOOR).ln().abs() < 0.3 {
                    risky[(py * k.width + px) as usize] = true;
                }
                if t < TRANSMITTANCE_FLOOR {
                    break;
                }
            }
        }
    }
    risky
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let h = 1e-4;
    let mut checked = 0usize;
    for scene in 0..20u64 {
        let (mut map, k, pose, opts) = fd_scene(9000 + scene);
        let n_px = (k.width * k.height) as usize;
        let risky = fd_kink_mask(&map, &pose, &k, &opts);
        let mut rng = StdRng::seed_from_u64(777 + scene);
        let upstream: Vec<Vector3<f64>> = (0..n_px)
            .map(|i| {
                if risky[i] {
                    Vector3::zeros()
                } else {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                }
            })
            .collect();
        let active = risky.iter().filter(|r| !**r).count();
        assert!(
            active * 2 >= n_px,
            "scene {scene}: kink mask too large ({active}/{n_px})"
        );

        let loss = |map: &GaussianMap| -> f64 {
            render(map, &pose, &k, &opts)
                .color
                .iter()
                .zip(&upstream)
                .map(|(c, g)| c.dot(g))
                .sum()
        };
        let (_, state) = render_with_state(&map, &pose, &k, &opts);
        let grads = render_backward(&map, &pose, &k, &upstream, &state).unwrap();

        let mut check = |analytic: f64, fd: f64, what: &str| {
            checked += 1;
            let denom = analytic.abs().max(fd.abs());
            if denom < 1e-6 {
                assert!(
                    (analytic - fd).abs() < 1e-6,
                    "scene {scene} {what}: analytic {analytic:.3e} vs fd {fd:.3e}"
                );
            } else {
                let rel = (analytic - fd).abs() / denom;
                assert!(
                    rel < 1e-3,
                    "scene {scene} {what}: analytic {analytic:.6e} vs fd {fd:.6e} rel {rel:.3e}"
                );
            }
        };
        let central = |map: &mut GaussianMap, apply: &dyn Fn(&mut GaussianMap, f64)| -> f64 {
            apply(map, h);
            let lp = loss(map);
            apply(map, -2.0 * h);
            let lm = loss(map);
            apply(map, h);
            (lp - lm) / (2.0 * h)
        };

        for gi in 0..map.len() {
            for axis in 0..3 {
                let fd = central(&mut map, &|m, d| m.gaussians_mut()[gi].position[axis] += d);
                check(grads.position[gi][axis], fd, "position");
            }
            for ci in 0..4 {
                let fd = central(&mut map, &|m, d| m.gaussians_mut()[gi].rotation[ci] += d);
                check(grads.rotation[gi][ci], fd, "rotation");
            }
            for axis in 0..3 {
                let fd = central(&mut map, &|m, d| m.gaussians_mut()[gi].log_scale[axis] += d);
                check(grads.log_scale[gi][axis], fd, "log_scale");
            }
            let fd = central(&mut map, &|m, d| m.gaussians_mut()[gi].opacity_logit += d);
            check(grads.opacity_logit[gi], fd, "opacity_logit");
            for ch in 0..3 {
                let fd = central(&mut map, &|m, d| m.gaussians_mut()[gi].sh[0][ch] += d);
                check(grads.sh[gi][ch], fd, "sh");
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:.2?}");
    pass(
        "1 gradient-correctness",
        format!("20 scenes, {checked} derivatives, {elapsed:.2?}"),
    );
}

// --------------------------------------------------------------------
// Criterion 2: octree-path fusion equals a dense-array replay bit for bit
// on a 32^3 scene over a 20-frame trajectory, in under 30 s.
// --------------------------------------------------------------------

const DENSE_N: usize = 32; // voxels per axis
const DENSE_BLOCKS: usize = DENSE_N / BLOCK_EDGE as usize;

struct DenseTsdf {
    tsdf: Vec<f32>,
    weight: Vec<f32>,
    allocated: Vec<bool>, // per 4^3 block
}

impl DenseTsdf {
    fn new() -> Self {
        Self {
            tsdf: vec![0.0; DENSE_N * DENSE_N * DENSE_N],
            weight: vec![0.0; DENSE_N * DENSE_N * DENSE_N],
            allocated: vec![false; DENSE_BLOCKS * DENSE_BLOCKS * DENSE_BLOCKS],
        }
    }

    fn voxel_index(x: usize, y: usize, z: usize) -> usize {
        x + y * DENSE_N + z * DENSE_N * DENSE_N
    }

    fn block_index(bx: usize, by: usize, bz: usize) -> usize {
        bx + by * DENSE_BLOCKS + bz * DENSE_BLOCKS * DENSE_BLOCKS
    }
}

fn segment_hits_aabb(a: Vector3<f64>, b: Vector3<f64>, min: Vector3<f64>, max: Vector3<f64>) -> bool {
    let dir = b - a;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-15 {
            if a[axis] < min[axis] || a[axis] > max[axis] {
                return false;
            }
        } else {
            let inv = 1.0 / dir[axis];
            let mut near = (min[axis] - a[axis]) * inv;
            let mut far = (max[axis] - a[axis]) * inv;
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

/// Independent dense replay of band allocation (brute-force segment/AABB)
/// and the weighted-average integration equations.
fn dense_fuse_frame(
    dense: &mut DenseTsdf,
    depth: &DepthImage,
    pose: &Pose,
    k: &Intrinsics,
    voxel_size: f64,
    eps: f64,
    w_max: u32,
) {
    let block_m = voxel_size * BLOCK_EDGE as f64;
    // Allocation: every dense block overlapped by any pixel's band segment.
    for j in 0..depth.height {
        for i in 0..depth.width {
            let d = depth.get(i, j);
            if !(d > 0.0) || !d.is_finite() {
                continue;
            }
            let u = Intrinsics::pixel_center(i, j);
            let dir_cam = Vector3::new((u.x - k.cx) / k.fx, (u.y - k.cy) / k.fy, 1.0);
            let dir_world = pose.rotation * dir_cam;
            let t0 = (d - eps).max(voxel_size * 0.1);
            let t1 = d + eps;
            if t1 <= t0 {
                continue;
            }
            let a = pose.translation + dir_world * t0;
            let b = pose.translation + dir_world * t1;
            for bz in 0..DENSE_BLOCKS {
                for by in 0..DENSE_BLOCKS {
                    for bx in 0..DENSE_BLOCKS {
                        if dense.allocated[DenseTsdf::block_index(bx, by, bz)] {
                            continue;
                        }
                        let min =
                            Vector3::new(bx as f64, by as f64, bz as f64) * block_m;
                        let max = min + Vector3::repeat(block_m);
                        if segment_hits_aabb(a, b, min, max) {
                            dense.allocated[DenseTsdf::block_index(bx, by, bz)] = true;
                        }
                    }
                }
            }
        }
    }
    // Integration: scalar replay of the fusion equations over allocated
    // blocks, with the same arithmetic order as the implementation.
    let inv_pose = pose.inverse();
    for z in 0..DENSE_N {
        for y in 0..DENSE_N {
            for x in 0..DENSE_N {
                let block = DenseTsdf::block_index(
                    x / BLOCK_EDGE as usize,
                    y / BLOCK_EDGE as usize,
                    z / BLOCK_EDGE as usize,
                );
                if !dense.allocated[block] {
                    continue;
                }
                let center = Vector3::new(
                    x as f64 + 0.5,
                    y as f64 + 0.5,
                    z as f64 + 0.5,
                ) * voxel_size;
                let p_cam = inv_pose.transform(center);
                if p_cam.z <= 0.0 {
                    continue;
                }
                let u = k.fx * p_cam.x / p_cam.z + k.cx;
                let v = k.fy * p_cam.y / p_cam.z + k.cy;
                let (ui, vi) = (u.floor(), v.floor());
                if ui < 0.0 || vi < 0.0 || ui >= k.width as f64 || vi >= k.height as f64 {
                    continue;
                }
                let measured = depth.get(ui as u32, vi as u32);
                if !(measured > 0.0) || !measured.is_finite() {
                    continue;
                }
                let sdf = measured - p_cam.z;
                if sdf < -eps {
                    continue;
                }
                let tsdf_new = (sdf / eps).clamp(-1.0, 1.0) as f32;
                let idx = DenseTsdf::voxel_index(x, y, z);
                let w_prev = dense.weight[idx] as f64;
                let w_new = (w_prev + 1.0).min(w_max as f64);
                let fused = (dense.tsdf[idx] as f64 * w_prev + tsdf_new as f64 * w_new)
                    / (w_prev + w_new);
                dense.tsdf[idx] = fused as f32;
                dense.weight[idx] = w_new as f32;
            }
        }
    }
}

/// Small scene confined to the 32^3 region [0, 0.32)^3 in world space.
fn dense_test_scene() -> (SceneSpec, Vec<Pose>) {
    let k = Intrinsics::new(24.0, 24.0, 12.0, 9.0, 24, 18, 1e-3).unwrap();
    let spec = SceneSpec {
        intrinsics: k,
        primitives: vec![
            Primitive::Rect {
                origin: Vector3::new(0.02, 0.02, 0.23),
                edge_u: Vector3::new(0.28, 0.0, 0.0),
                edge_v: Vector3::new(0.0, 0.28, 0.017),
                texture: Texture::Solid([0.5, 0.5, 0.5]),
            },
            Primitive::Sphere {
                center: Vector3::new(0.165, 0.155, 0.19),
                radius: 0.035,
                texture: Texture::Solid([0.8, 0.2, 0.2]),
            },
        ],
        trajectory: Trajectory::Static(Pose::identity()),
        max_depth: 1.0,
    };
    let mut poses = Vec::new();
    let mut rng = StdRng::seed_from_u64(4242);
    for _ in 0..20 {
        let eye = Vector3::new(
            0.16 + rng.random_range(-0.012..0.012),
            0.155 + rng.random_range(-0.012..0.012),
            0.035 + rng.random_range(-0.01..0.01),
        );
        let target = Vector3::new(
            0.16 + rng.random_range(-0.01..0.01),
            0.155 + rng.random_range(-0.01..0.01),
            0.23,
        );
        poses.push(gsfusion_core::dataset::synthetic::look_at(eye, target));
    }
    (spec, poses)
}

#[test]
fn criterion_2_tsdf_oracle_equivalence() {
    let started = Instant::now();
    let voxel_size = 0.01;
    let eps = 0.06;
    let w_max = 100;
    let (spec, poses) = dense_test_scene();
    let k = spec.intrinsics;

    let mut volume = TsdfVolume::new(voxel_size, eps, w_max, FusionRule::Paper);
    let mut dense = DenseTsdf::new();
    for pose in &poses {
        let (_, depth) = spec.render_frame(pose);
        assert!(depth.valid_count() > 0, "no depth in test frame");
        volume.allocate_band(&depth, pose, &k).unwrap();
        volume.integrate(&depth, pose, &k).unwrap();
        dense_fuse_frame(&mut dense, &depth, pose, &k, voxel_size, eps, w_max);
    }

    // The octree must allocate exactly the dense-region blocks (nothing
    // outside the region, same set inside).
    let mut expected_blocks = HashSet::new();
    for bz in 0..DENSE_BLOCKS {
        for by in 0..DENSE_BLOCKS {
            for bx in 0..DENSE_BLOCKS {
                if dense.allocated[DenseTsdf::block_index(bx, by, bz)] {
                    let morton = morton_encode(
                        (bx * BLOCK_EDGE as usize) as u32 + COORD_OFFSET as u32,
                        (by * BLOCK_EDGE as usize) as u32 + COORD_OFFSET as u32,
                        (bz * BLOCK_EDGE as usize) as u32 + COORD_OFFSET as u32,
                    )
                    .unwrap();
                    expected_blocks.insert(morton);
                }
            }
        }
    }
    let got_blocks: HashSet<u64> = volume.blocks_sorted().iter().map(|b| b.morton).collect();
    assert_eq!(got_blocks, expected_blocks, "allocated block sets differ");

    // Bit-for-bit voxel equality across the region.
    let mut compared = 0usize;
    let mut observed = 0usize;
    for z in 0..DENSE_N {
        for y in 0..DENSE_N {
            for x in 0..DENSE_N {
                let idx = DenseTsdf::voxel_index(x, y, z);
                let p = Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * voxel_size;
                let (tsdf_v, weight_v) = match volume.query_nearest_voxel(p) {
                    VoxelQuery::Voxel(v) => (v.tsdf, v.weight),
                    VoxelQuery::NotAllocated => (0.0, 0.0),
                };
                assert_eq!(
                    tsdf_v.to_bits(),
                    dense.tsdf[idx].to_bits(),
                    "tsdf mismatch at ({x},{y},{z}): {tsdf_v} vs {}",
                    dense.tsdf[idx]
                );
                assert_eq!(
                    weight_v.to_bits(),
                    dense.weight[idx].to_bits(),
                    "weight mismatch at ({x},{y},{z})"
                );
                compared += 1;
                if weight_v > 0.0 {
                    observed += 1;
                }
            }
        }
    }
    assert!(observed > 500, "only {observed} observed voxels; scene too sparse");
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "took {elapsed:.2?}");
    pass(
        "2 tsdf-oracle-equivalence",
        format!("{compared} voxels bitwise equal ({observed} observed), 20 frames, {elapsed:.2?}"),
    );
}

// --------------------------------------------------------------------
// Criterion 3: replaying an identical 20-frame sequence adds exactly 0
// Gaussians, in under 60 s.
// --------------------------------------------------------------------

#[test]
fn criterion_3_gated_growth() {
    let started = Instant::now();
    // Full-frustum wall: every pixel has valid depth and there are no
    // occlusion silhouettes, so the weight gate saturates exactly.
    let spec = presets::checker_wall(96, 72, 2.0, 6);
    let frames = spec.render_sequence(20).unwrap();
    let config = PipelineConfig {
        iters_keyframe: 2,
        iters_non_keyframe: 1,
        global_iters: 0,
        ..Default::default()
    };
    let mut mapper = gsfusion_core::Mapper::new(config, spec.intrinsics).unwrap();
    for frame in &frames {
        mapper.process_frame(frame).unwrap();
    }
    let after_first = mapper.map().len();
    assert!(after_first > 0);

    let mut second_pass_added = 0;
    for frame in &frames {
        let replay = Frame {
            index: frame.index + frames.len(),
            rgb: frame.rgb.clone(),
            depth: frame.depth.clone(),
            pose: frame.pose,
        };
        let stats = mapper.process_frame(&replay).unwrap();
        second_pass_added += stats.new_gaussians;
    }
    assert_eq!(second_pass_added, 0, "second pass must add no Gaussians");
    assert_eq!(mapper.map().len(), after_first);
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:.2?}");
    pass(
        "3 gated-growth",
        format!("{after_first} Gaussians after pass 1, +0 after pass 2, {elapsed:.2?}"),
    );
}

// --------------------------------------------------------------------
// Criterion 4: self-supervised reconstruction. Render targets from a known
// 200-Gaussian map, run the full pipeline, and reach mean training-view
// PSNR >= 30 dB after 10 global passes, in under 10 minutes.
// --------------------------------------------------------------------

#[test]
fn criterion_4_self_supervised_reconstruction() {
    let started = Instant::now();
    let spec = presets::cluttered_room(128, 96);
    let n_frames = 20usize;
    let scene_frames = spec.render_sequence(n_frames).unwrap();

    // Stage 1: build the known 200-Gaussian map by seeding the pipeline on
    // the raw scene with a coarse quadtree then truncating.
    let seed_config = PipelineConfig {
        qtree_threshold: 0.3,
        qtree_min_cell: 10,
        iters_keyframe: 3,
        iters_non_keyframe: 1,
        global_iters: 3,
        ..Default::default()
    };
    let seeded = run_frames(seed_config, spec.intrinsics, &scene_frames).unwrap();
    assert!(
        seeded.map.len() >= 200,
        "seed stage produced only {} Gaussians",
        seeded.map.len()
    );
    let mut known = GaussianMap::new(0);
    for g in seeded.map.gaussians().iter().take(200) {
        known.push(g.clone());
    }

    // Stage 2: targets rendered from the known map; depth stays analytic.
    let opts = RenderOptions::default();
    let target_frames: Vec<Frame> = scene_frames
        .iter()
        .map(|f| Frame {
            index: f.index,
            rgb: render(&known, &f.pose, &spec.intrinsics, &opts).to_rgb8(),
            depth: f.depth.clone(),
            pose: f.pose,
        })
        .collect();

    // Stage 3: full pipeline on the rendered targets, defaults plus the
    // 10 global passes under test.
    let config = PipelineConfig {
        global_iters: 10,
        ..Default::default()
    };
    let out = run_frames(config, spec.intrinsics, &target_frames).unwrap();
    let seq = Sequence {
        intrinsics: spec.intrinsics,
        frames: target_frames,
    };
    let report = evaluate_map(&out.map, &seq, &opts, None).unwrap();
    let elapsed = started.elapsed();
    assert!(
        report.mean_psnr >= 30.0,
        "training-view PSNR {:.2} dB < 30 dB",
        report.mean_psnr
    );
    assert!(elapsed.as_secs() < 600, "took {elapsed:.2?}");
    pass(
        "4 self-supervised-reconstruction",
        format!(
            "PSNR {:.2} dB with {} Gaussians over {n_frames} frames, {elapsed:.2?}",
            report.mean_psnr,
            out.map.len()
        ),
    );
}

// --------------------------------------------------------------------
// Criterion 5: ablation directions on a fixed-seed corpus.
// --------------------------------------------------------------------

struct CorpusRun {
    output: RunOutput,
    psnr: f64,
}

fn corpus_frames() -> &'static (SceneSpec, Vec<Frame>) {
    static FRAMES: OnceLock<(SceneSpec, Vec<Frame>)> = OnceLock::new();
    FRAMES.get_or_init(|| {
        let spec = presets::cluttered_room(96, 72);
        let frames = spec.render_sequence(16).unwrap();
        (spec, frames)
    })
}

fn run_corpus(mutate: impl FnOnce(&mut PipelineConfig)) -> CorpusRun {
    let (spec, frames) = corpus_frames();
    let mut config = PipelineConfig {
        kf_threshold: 30,
        ..Default::default()
    };
    mutate(&mut config);
    let opts = config.render_options();
    let output = run_frames(config, spec.intrinsics, frames).unwrap();
    let seq = Sequence {
        intrinsics: spec.intrinsics,
        frames: frames.clone(),
    };
    let report = evaluate_map(&output.map, &seq, &opts, None).unwrap();
    CorpusRun {
        output,
        psnr: report.mean_psnr,
    }
}

#[test]
fn criterion_5a_quadtree_threshold_direction() {
    let coarse = run_corpus(|c| c.qtree_threshold = 0.1);
    let fine = run_corpus(|c| c.qtree_threshold = 0.01);
    assert!(
        fine.output.map.len() > coarse.output.map.len(),
        "finer threshold must add Gaussians: {} vs {}",
        fine.output.map.len(),
        coarse.output.map.len()
    );
    assert!(
        fine.psnr >= coarse.psnr,
        "finer threshold dropped PSNR: {:.2} vs {:.2}",
        fine.psnr,
        coarse.psnr
    );
    pass(
        "5a quadtree-threshold",
        format!(
            "0.01: {} Gaussians / {:.2} dB, 0.1: {} / {:.2} dB",
            fine.output.map.len(),
            fine.psnr,
            coarse.output.map.len(),
            coarse.psnr
        ),
    );
}

#[test]
fn criterion_5b_global_iteration_direction() {
    let g0 = run_corpus(|c| c.global_iters = 0);
    let g10 = run_corpus(|c| c.global_iters = 10);
    let g20 = run_corpus(|c| c.global_iters = 20);
    assert!(
        g10.psnr > g0.psnr,
        "10 global passes must beat 0: {:.2} vs {:.2}",
        g10.psnr,
        g0.psnr
    );
    assert!(
        g20.psnr > g10.psnr,
        "20 global passes must beat 10: {:.2} vs {:.2}",
        g20.psnr,
        g10.psnr
    );
    pass(
        "5b global-iterations",
        format!("PSNR {:.2} < {:.2} < {:.2} dB", g0.psnr, g10.psnr, g20.psnr),
    );
}

#[test]
fn criterion_5c_random_replay_direction() {
    // Frontal leg, then a long oblique revisit of the same wall: the
    // oblique views keep optimizing the same splats under a conflicting
    // projection, so the frontal (first-leg) views degrade unless random
    // keyframe replay keeps them in the loop.
    let spec = presets::oblique_revisit(96, 72, 0.3);
    let frames = spec.render_sequence(36).unwrap();
    let first_half: Vec<Frame> = frames[..11].to_vec();
    let run = |replay: bool| {
        let config = PipelineConfig {
            random_replay: replay,
            kf_threshold: 30,
            global_iters: 0,
            ..Default::default()
        };
        let opts = config.render_options();
        let output = run_frames(config, spec.intrinsics, &frames).unwrap();
        let seq = Sequence {
            intrinsics: spec.intrinsics,
            frames: first_half.clone(),
        };
        evaluate_map(&output.map, &seq, &opts, None).unwrap().mean_psnr
    };
    let with_replay = run(true);
    let without_replay = run(false);
    assert!(
        with_replay >= without_replay + 1.0,
        "replay must win by >= 1 dB on first-half views: {with_replay:.2} vs {without_replay:.2}"
    );
    pass(
        "5c random-replay",
        format!("first-half PSNR {with_replay:.2} vs {without_replay:.2} dB"),
    );
}

#[test]
fn criterion_5d_voxel_size_direction() {
    let spec = presets::orbit_sphere(96, 72);
    let frames = spec.render_sequence(16).unwrap();
    let run = |voxel: f64| {
        let config = PipelineConfig {
            voxel_size: voxel,
            kf_threshold: 30,
            ..Default::default()
        };
        let opts = config.render_options();
        let output = run_frames(config, spec.intrinsics, &frames).unwrap();
        let seq = Sequence {
            intrinsics: spec.intrinsics,
            frames: frames.clone(),
        };
        let psnr = evaluate_map(&output.map, &seq, &opts, None).unwrap().mean_psnr;
        CorpusRun { output, psnr }
    };
    let fine = run(0.01);
    let coarse = run(0.05);
    assert!(
        coarse.output.map.len() < fine.output.map.len(),
        "larger voxels must gate more Gaussians: {} vs {}",
        coarse.output.map.len(),
        fine.output.map.len()
    );
    assert!(
        coarse.psnr <= fine.psnr,
        "larger voxels must not raise PSNR: {:.2} vs {:.2}",
        coarse.psnr,
        fine.psnr
    );
    pass(
        "5d voxel-size",
        format!(
            "5cm: {} Gaussians / {:.2} dB, 1cm: {} / {:.2} dB",
            coarse.output.map.len(),
            coarse.psnr,
            fine.output.map.len(),
            fine.psnr
        ),
    );
}

// --------------------------------------------------------------------
// Criterion 6: budget property. At threshold 0.1, Gaussians initialized
// per frame stay below 10% of the frame's valid pixels.
// --------------------------------------------------------------------

#[test]
fn criterion_6_budget_property() {
    let (_, frames) = corpus_frames();
    let run = run_corpus(|c| c.qtree_threshold = 0.1);
    // Run-total compactness: far fewer Gaussians than valid pixels seen.
    let total_valid: usize = frames.iter().map(|f| f.depth.valid_count()).sum();
    let total_ratio = run.output.map.len() as f64 / total_valid as f64;
    assert!(
        total_ratio < 0.05,
        "{} Gaussians for {} processed valid pixels",
        run.output.map.len(),
        total_valid
    );
    let mut worst = 0.0f64;
    for (stats, frame) in run.output.stats.frames.iter().zip(frames) {
        let valid = frame.depth.valid_count();
        if valid == 0 {
            assert_eq!(stats.new_gaussians, 0);
            continue;
        }
        let ratio = stats.new_gaussians as f64 / valid as f64;
        worst = worst.max(ratio);
        assert!(
            ratio < 0.10,
            "frame {}: {} new Gaussians for {} valid pixels ({:.1}%)",
            stats.index,
            stats.new_gaussians,
            valid,
            ratio * 100.0
        );
    }
    pass(
        "6 budget-property",
        format!(
            "worst per-frame ratio {:.2}%, run total {:.2}% of valid pixels",
            worst * 100.0,
            total_ratio * 100.0
        ),
    );
}

// --------------------------------------------------------------------
// Criterion 7: determinism. Identical seed and config produce bitwise
// identical PLY and TSDF exports.
// --------------------------------------------------------------------

#[test]
fn criterion_7_determinism() {
    let spec = presets::cluttered_room(64, 48);
    let frames = spec.render_sequence(6).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let config = PipelineConfig {
            seed: 7,
            global_iters: 3,
            deterministic: true,
            ..Default::default()
        };
        let out = run_frames(config, spec.intrinsics, &frames).unwrap();
        let ply = tmp.path().join(format!("{tag}.ply"));
        let tsdf_path = tmp.path().join(format!("{tag}.tsdf"));
        export_gaussians_ply(&out.map, &ply, 0.0).unwrap();
        export_tsdf(&out.volume, &tsdf_path).unwrap();
        (std::fs::read(ply).unwrap(), std::fs::read(tsdf_path).unwrap())
    };
    let (ply_a, tsdf_a) = run("a");
    let (ply_b, tsdf_b) = run("b");
    assert_eq!(ply_a, ply_b, "PLY exports differ between identical runs");
    assert_eq!(tsdf_a, tsdf_b, "TSDF exports differ between identical runs");
    pass(
        "7 determinism",
        format!("{} PLY bytes and {} TSDF bytes identical", ply_a.len(), tsdf_a.len()),
    );
}

// --------------------------------------------------------------------
// Criterion 8: format contracts. Bitwise roundtrips, the closed-form TSDF
// file size, and the specified dataset rejection errors.
// --------------------------------------------------------------------

#[test]
fn criterion_8_format_contracts() {
    let tmp = tempfile::tempdir().unwrap();

    // Maps from a short run.
    let spec = presets::cluttered_room(64, 48);
    let frames = spec.render_sequence(3).unwrap();
    let config = PipelineConfig {
        iters_keyframe: 1,
        iters_non_keyframe: 1,
        global_iters: 0,
        ..Default::default()
    };
    let out = run_frames(config, spec.intrinsics, &frames).unwrap();

    // PLY: import equals stored values; re-export is byte identical.
    let ply1 = tmp.path().join("map1.ply");
    let ply2 = tmp.path().join("map2.ply");
    let written = export_gaussians_ply(&out.map, &ply1, 0.0).unwrap();
    assert_eq!(written, out.map.len());
    let imported = import_gaussians_ply(&ply1).unwrap();
    assert_eq!(imported.len(), out.map.len());
    export_gaussians_ply(&imported, &ply2, 0.0).unwrap();
    assert_eq!(std::fs::read(&ply1).unwrap(), std::fs::read(&ply2).unwrap());

    // TSDF: bitwise roundtrip and exact file size.
    let t1 = tmp.path().join("map1.tsdf");
    let t2 = tmp.path().join("map2.tsdf");
    let blocks = export_tsdf(&out.volume, &t1).unwrap() as u64;
    let size = std::fs::metadata(&t1).unwrap().len();
    assert_eq!(size, 44 + blocks * (8 + 4096), "TSDF size formula violated");
    let reloaded = import_tsdf(&t1, FusionRule::Paper).unwrap();
    export_tsdf(&reloaded, &t2).unwrap();
    assert_eq!(std::fs::read(&t1).unwrap(), std::fs::read(&t2).unwrap());

    // Malformed dataset directories.
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert!(matches!(
        gsfusion_core::dataset::SequenceDir::open(&empty),
        Err(DatasetError::MissingIntrinsics(_))
    ));

    let seq_dir = tmp.path().join("seq");
    gsfusion_core::dataset::synthetic::generate_synthetic(&spec, 2, &seq_dir).unwrap();
    let poses_path = seq_dir.join("poses.txt");
    let mut text = std::fs::read_to_string(&poses_path).unwrap();
    let line = text.lines().next().unwrap().to_string();
    text.push_str(&line);
    text.push('\n');
    std::fs::write(&poses_path, text).unwrap();
    assert!(matches!(
        gsfusion_core::dataset::SequenceDir::open(&seq_dir),
        Err(DatasetError::PoseCountMismatch { poses: 3, images: 2 })
    ));

    // Wrong depth bit depth -> BadImage naming the offender.
    let seq2 = tmp.path().join("seq2");
    gsfusion_core::dataset::synthetic::generate_synthetic(&spec, 1, &seq2).unwrap();
    image::GrayImage::from_pixel(64, 48, image::Luma([9u8]))
        .save(seq2.join("depth/000000.png"))
        .unwrap();
    match gsfusion_core::dataset::load_sequence_eager(&seq2) {
        Err(DatasetError::BadImage { name, .. }) => assert!(name.contains("000000")),
        other => panic!("expected BadImage, got {other:?}"),
    }

    pass(
        "8 format-contracts",
        format!("{written} PLY records, {blocks} TSDF blocks, 3 rejection paths"),
    );
}

// --------------------------------------------------------------------
// Criterion 9: performance floor. A 640x480 synthetic sequence with well
// under 50k Gaussians sustains >= 1 frame/s online (compute time of the
// per-frame loop) in parallel mode.
// --------------------------------------------------------------------

#[test]
fn criterion_9_performance_floor() {
    let spec = presets::desk_scene(640, 480);
    let frames = spec.render_sequence(8).unwrap();
    let config = PipelineConfig::default();
    let out = run_frames(config, spec.intrinsics, &frames).unwrap();
    let gaussians = out.map.len();
    assert!(gaussians <= 50_000, "{gaussians} Gaussians exceed the bound");
    let fps = out.stats.summary.fps_excl_io;
    assert!(
        fps >= 1.0,
        "online loop ran at {fps:.2} fps with {gaussians} Gaussians"
    );
    pass(
        "9 performance-floor",
        format!(
            "{fps:.2} fps online ({} Gaussians, {} blocks, incl-io {:.2} fps)",
            gaussians,
            out.stats.summary.block_count,
            out.stats.summary.fps_incl_io
        ),
    );
}

// --------------------------------------------------------------------
// Supporting checks referenced by the criteria above.
// --------------------------------------------------------------------

/// The running weighted average stored per voxel equals an independent
/// scalar replay over the observation sequence.
#[test]
fn voxel_replay_matches_scalar_recurrence() {
    let mut voxel = tsdf::TsdfVoxel::default();
    let samples = [0.8f32, -0.3, 0.5, 1.0, -1.0, 0.25, 0.1];
    let w_max = 4u32;
    for s in samples {
        voxel = tsdf::fuse_voxel(voxel, s, w_max, FusionRule::Paper);
    }
    // Independent replay.
    let mut tsdf_acc = 0.0f64;
    let mut w = 0.0f64;
    for s in samples {
        let w_new = (w + 1.0).min(w_max as f64);
        tsdf_acc = ((tsdf_acc * w) + s as f64 * w_new) / (w + w_new);
        // Mirror the implementation's storage precision.
        tsdf_acc = tsdf_acc as f32 as f64;
        w = w_new;
    }
    assert!((voxel.tsdf as f64 - tsdf_acc).abs() < 1e-6);
    assert_eq!(voxel.weight as f64, w);
}

/// Radius sweep for the plane raycast example stated with the renderer ops.
#[test]
fn raycast_sphere_analytic_agreement() {
    let spec = presets::orbit_sphere(48, 36);
    let k = spec.intrinsics;
    let poses = spec.trajectory.poses(4);
    let mut volume = TsdfVolume::new(0.01, 0.06, 100, FusionRule::Paper);
    for pose in &poses {
        let (_, depth) = spec.render_frame(pose);
        volume.allocate_band(&depth, pose, &k).unwrap();
        volume.integrate(&depth, pose, &k).unwrap();
    }
    let pose = &poses[0];
    let rendered = volume.raycast_depth(pose, &k, 5.0);
    let (_, truth) = spec.render_frame(pose);
    let mut valid = 0usize;
    let mut close = 0usize;
    for j in 0..k.height {
        for i in 0..k.width {
            let got = rendered.get(i, j);
            let want = truth.get(i, j);
            if got > 0.0 && want > 0.0 {
                valid += 1;
                if (got - want).abs() <= 2.0 * volume.voxel_size() {
                    close += 1;
                }
            }
        }
    }
    assert!(valid > 100, "too few valid pixels: {valid}");
    assert!(
        close as f64 >= 0.95 * valid as f64,
        "only {close}/{valid} pixels within 2 voxels of the analytic depth"
    );
}

/// FloatImage and RenderedFrame stay consistent through the RGB8 quantizer
/// used for keyframe targets.
#[test]
fn rendered_frame_rgb8_roundtrip_error_bounded() {
    let spec = presets::cluttered_room(48, 36);
    let frames = spec.render_sequence(1).unwrap();
    let img = FloatImage::from_rgb8(&frames[0].rgb);
    let back = FloatImage::from_rgb8(&{
        let mut rgb = image::RgbImage::new(48, 36);
        for (i, px) in rgb.pixels_mut().enumerate() {
            let c = img.data[i];
            *px = image::Rgb([
                (c.x * 255.0).round() as u8,
                (c.y * 255.0).round() as u8,
                (c.z * 255.0).round() as u8,
            ]);
        }
        rgb
    });
    for (a, b) in img.data.iter().zip(&back.data) {
        assert!((a - b).abs().max() <= 0.5 / 255.0 + 1e-9);
    }
}
