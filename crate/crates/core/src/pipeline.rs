//! Per-frame orchestration: fuse depth, segment the RGB image, seed gated
//! Gaussians, optimize online, and finish with global optimization over the
//! keyframe list.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use thiserror::Error;

use crate::dataset::{DatasetError, Frame, Sequence};
use crate::export;
use crate::gaussians::{self, GaussianMap};
use crate::geometry::Intrinsics;
use crate::metrics::{self, FloatImage, FrameMetrics, MetricReport};
use crate::optimizer::{
    LossSample, OnlineOptimizer, OptTarget, OptimConfig, OptimError,
};
use crate::quadtree::{self, ContrastMetric, QuadtreeError};
use crate::renderer::RenderOptions;
use crate::tsdf::{FusionRule, TsdfError, TsdfVolume};

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("frame {frame}: {source}")]
    Tsdf { frame: usize, source: TsdfError },
    #[error("frame {frame}: {source}")]
    Quadtree {
        frame: usize,
        source: QuadtreeError,
    },
    #[error("frame {frame}: {source}")]
    Optim { frame: usize, source: OptimError },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Export(#[from] export::ExportError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Every knob of the system, matching the CLI flags and the config file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub voxel_size: f64,
    /// Truncation band in meters; default is 6 * voxel_size.
    pub trunc_band: Option<f64>,
    pub w_max: u32,
    pub fusion_rule: FusionRule,
    pub qtree_threshold: f64,
    pub qtree_min_cell: u32,
    pub contrast_metric: ContrastMetric,
    pub kf_threshold: usize,
    pub iters_keyframe: usize,
    pub iters_non_keyframe: usize,
    pub global_iters: usize,
    pub all_frames_keyframes: bool,
    pub random_replay: bool,
    pub tile_size: u32,
    pub sh_degree: usize,
    pub seed: u64,
    pub lr_position: f64,
    pub lr_sh: f64,
    pub lr_opacity: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub background: [f64; 3],
    pub z_near: f64,
    /// Kept for interface compatibility; reductions are deterministic
    /// either way (tile-ordered folds).
    pub deterministic: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let optim = OptimConfig::default();
        Self {
            voxel_size: 0.01,
            trunc_band: None,
            w_max: 100,
            fusion_rule: FusionRule::Paper,
            qtree_threshold: 0.1,
            qtree_min_cell: 4,
            contrast_metric: ContrastMetric::Range,
            kf_threshold: 50,
            iters_keyframe: 5,
            iters_non_keyframe: 3,
            global_iters: 10,
            all_frames_keyframes: false,
            random_replay: true,
            tile_size: 16,
            sh_degree: 0,
            seed: 0,
            lr_position: optim.lr_position,
            lr_sh: optim.lr_sh,
            lr_opacity: optim.lr_opacity,
            lr_log_scale: optim.lr_log_scale,
            lr_rotation: optim.lr_rotation,
            background: [0.0, 0.0, 0.0],
            z_near: crate::geometry::Z_NEAR_DEFAULT,
            deterministic: true,
        }
    }
}

impl PipelineConfig {
    pub fn trunc_band(&self) -> f64 {
        self.trunc_band.unwrap_or(6.0 * self.voxel_size)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.voxel_size > 0.0) {
            return Err(PipelineError::Config("voxel_size must be positive".into()));
        }
        if self.trunc_band() < self.voxel_size {
            return Err(PipelineError::Config(
                "trunc_band must span at least one voxel".into(),
            ));
        }
        if !(self.qtree_threshold > 0.0 && self.qtree_threshold <= 1.0) {
            return Err(PipelineError::Config(
                "qtree_threshold must be in (0, 1]".into(),
            ));
        }
        if self.qtree_min_cell < 2 {
            return Err(PipelineError::Config("qtree_min_cell must be >= 2".into()));
        }
        if self.iters_keyframe < self.iters_non_keyframe {
            return Err(PipelineError::Config(
                "iters_keyframe must be >= iters_non_keyframe".into(),
            ));
        }
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return Err(PipelineError::Config(format!(
                "sh_degree must be <= {}",
                crate::sh::MAX_DEGREE
            )));
        }
        Ok(())
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            iters_keyframe: self.iters_keyframe,
            iters_non_keyframe: self.iters_non_keyframe,
            kf_threshold: self.kf_threshold,
            global_iters: self.global_iters,
            all_frames_keyframes: self.all_frames_keyframes,
            random_replay: self.random_replay,
            lr_position: self.lr_position,
            lr_sh: self.lr_sh,
            lr_opacity: self.lr_opacity,
            lr_log_scale: self.lr_log_scale,
            lr_rotation: self.lr_rotation,
            seed: self.seed,
            ..OptimConfig::default()
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            tile_size: self.tile_size,
            background: Vector3::new(self.background[0], self.background[1], self.background[2]),
            z_near: self.z_near,
        }
    }

    /// Parse a `key = value` config file (# starts a comment). Keys match
    /// the field names of this struct.
    pub fn from_config_text(text: &str) -> Result<Self, PipelineError> {
        let mut config = Self::default();
        config.apply_config_text(text)?;
        Ok(config)
    }

    pub fn apply_config_text(&mut self, text: &str) -> Result<(), PipelineError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(PipelineError::Config(format!(
                    "line {}: expected 'key = value', got {raw:?}",
                    lineno + 1
                )));
            };
            self.apply_kv(key.trim(), value.trim()).map_err(|e| {
                PipelineError::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| format!("bad value for {key}: {e}"))
        }
        match key {
            "voxel_size" => self.voxel_size = parse(key, value)?,
            "trunc_band" => self.trunc_band = Some(parse(key, value)?),
            "w_max" => self.w_max = parse(key, value)?,
            "fusion_rule" => {
                self.fusion_rule = match value {
                    "paper" => FusionRule::Paper,
                    "classic" => FusionRule::Classic,
                    other => return Err(format!("bad fusion_rule {other:?}")),
                }
            }
            "qtree_threshold" => self.qtree_threshold = parse(key, value)?,
            "qtree_min_cell" => self.qtree_min_cell = parse(key, value)?,
            "contrast_metric" => {
                self.contrast_metric = match value {
                    "range" => ContrastMetric::Range,
                    "stddev" => ContrastMetric::StdDev,
                    other => return Err(format!("bad contrast_metric {other:?}")),
                }
            }
            "kf_threshold" => self.kf_threshold = parse(key, value)?,
            "iters_keyframe" => self.iters_keyframe = parse(key, value)?,
            "iters_non_keyframe" => self.iters_non_keyframe = parse(key, value)?,
            "global_iters" => self.global_iters = parse(key, value)?,
            "all_frames_keyframes" => self.all_frames_keyframes = parse(key, value)?,
            "random_replay" => self.random_replay = parse(key, value)?,
            "tile_size" => self.tile_size = parse(key, value)?,
            "sh_degree" => self.sh_degree = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr_position" => self.lr_position = parse(key, value)?,
            "lr_sh" => self.lr_sh = parse(key, value)?,
            "lr_opacity" => self.lr_opacity = parse(key, value)?,
            "lr_log_scale" => self.lr_log_scale = parse(key, value)?,
            "lr_rotation" => self.lr_rotation = parse(key, value)?,
            "background" => {
                let vals: Vec<f64> = value
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?;
                if vals.len() != 3 {
                    return Err("background needs 3 values".into());
                }
                self.background = [vals[0], vals[1], vals[2]];
            }
            "z_near" => self.z_near = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }
}

/// Timings and counters of one processed frame.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FrameStats {
    pub index: usize,
    pub blocks_allocated: usize,
    pub voxels_updated: usize,
    pub leaf_count: usize,
    pub new_gaussians: usize,
    pub is_keyframe: bool,
    pub final_loss: Option<f64>,
    pub gaussian_count: usize,
    pub block_count: usize,
    pub fuse_ms: f64,
    pub segment_ms: f64,
    pub init_ms: f64,
    pub optimize_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub frame_count: usize,
    pub gaussian_count: usize,
    pub block_count: usize,
    pub keyframe_count: usize,
    /// Wall time of the online phase including dataset I/O, seconds.
    pub online_wall_s: f64,
    /// frames / online_wall_s.
    pub fps_incl_io: f64,
    /// frames / sum of per-frame compute times.
    pub fps_excl_io: f64,
    pub global_opt_s: f64,
    pub global_pass_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct RunStats {
    pub frames: Vec<FrameStats>,
    pub summary: RunSummary,
}

/// Incremental mapping session: feed posed frames in order, then finalize.
pub struct Mapper {
    config: PipelineConfig,
    intrinsics: Intrinsics,
    volume: TsdfVolume,
    map: GaussianMap,
    online: OnlineOptimizer,
    frames: Vec<FrameStats>,
    loss_samples: Vec<LossSample>,
    started: Instant,
    finalized: Option<f64>,
}

impl Mapper {
    pub fn new(config: PipelineConfig, intrinsics: Intrinsics) -> Result<Self, PipelineError> {
        config.validate()?;
        intrinsics
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let volume = TsdfVolume::new(
            config.voxel_size,
            config.trunc_band(),
            config.w_max,
            config.fusion_rule,
        );
        let map = GaussianMap::new(config.sh_degree);
        let online = OnlineOptimizer::new(config.optim_config(), config.render_options(), intrinsics);
        Ok(Self {
            config,
            intrinsics,
            volume,
            map,
            online,
            frames: Vec::new(),
            loss_samples: Vec::new(),
            started: Instant::now(),
            finalized: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn volume(&self) -> &TsdfVolume {
        &self.volume
    }

    pub fn map(&self) -> &GaussianMap {
        &self.map
    }

    pub fn keyframe_count(&self) -> usize {
        self.online.keyframes().len()
    }

    pub fn loss_samples(&self) -> &[LossSample] {
        &self.loss_samples
    }

    pub fn frame_stats(&self) -> &[FrameStats] {
        &self.frames
    }

    /// Run the full per-frame loop: allocate, integrate, decompose,
    /// initialize, optimize.
    pub fn process_frame(&mut self, frame: &Frame) -> Result<FrameStats, PipelineError> {
        let total_start = Instant::now();
        let index = frame.index;

        let fuse_start = Instant::now();
        let blocks_allocated = self
            .volume
            .allocate_band(&frame.depth, &frame.pose, &self.intrinsics)
            .map_err(|source| PipelineError::Tsdf { frame: index, source })?;
        let voxels_updated = self
            .volume
            .integrate(&frame.depth, &frame.pose, &self.intrinsics)
            .map_err(|source| PipelineError::Tsdf { frame: index, source })?;
        let fuse_ms = fuse_start.elapsed().as_secs_f64() * 1e3;

        let segment_start = Instant::now();
        let leaves = quadtree::decompose_with_metric(
            &frame.rgb,
            self.config.qtree_threshold,
            self.config.qtree_min_cell,
            self.config.contrast_metric,
        )
        .map_err(|source| PipelineError::Quadtree { frame: index, source })?;
        let segment_ms = segment_start.elapsed().as_secs_f64() * 1e3;

        let init_start = Instant::now();
        let init_stats = gaussians::initialize_from_frame(
            &mut self.map,
            &leaves,
            frame,
            &self.intrinsics,
            &self.volume,
        );
        let init_ms = init_start.elapsed().as_secs_f64() * 1e3;

        let optimize_start = Instant::now();
        let report = self
            .online
            .process_frame(&mut self.map, OptTarget::from_frame(frame), init_stats.appended)
            .map_err(|source| PipelineError::Optim { frame: index, source })?;
        let optimize_ms = optimize_start.elapsed().as_secs_f64() * 1e3;

        self.loss_samples.extend(report.samples.iter().cloned());
        let stats = FrameStats {
            index,
            blocks_allocated,
            voxels_updated,
            leaf_count: leaves.len(),
            new_gaussians: init_stats.appended,
            is_keyframe: report.is_keyframe,
            final_loss: report.final_loss,
            gaussian_count: self.map.len(),
            block_count: self.volume.block_count(),
            fuse_ms,
            segment_ms,
            init_ms,
            optimize_ms,
            total_ms: total_start.elapsed().as_secs_f64() * 1e3,
        };
        self.frames.push(stats.clone());
        Ok(stats)
    }

    /// Post-scan global optimization. Returns the mean loss per pass.
    pub fn finalize(&mut self) -> Result<Vec<f64>, PipelineError> {
        let start = Instant::now();
        let (passes, samples) = self
            .online
            .global_optimize(&mut self.map, self.config.global_iters)
            .map_err(|source| PipelineError::Optim { frame: usize::MAX, source })?;
        self.loss_samples.extend(samples);
        self.finalized = Some(start.elapsed().as_secs_f64());
        Ok(passes)
    }

    /// Render the current map from an arbitrary pose.
    pub fn render_pose(&self, pose: &crate::geometry::Pose) -> crate::renderer::RenderedFrame {
        crate::renderer::render(&self.map, pose, &self.intrinsics, &self.config.render_options())
    }

    pub fn stats(&self) -> RunStats {
        let online_wall_s = self.started.elapsed().as_secs_f64();
        self.stats_with_wall(online_wall_s, Vec::new())
    }

    fn stats_with_wall(&self, online_wall_s: f64, global_pass_losses: Vec<f64>) -> RunStats {
        let compute_s: f64 = self.frames.iter().map(|f| f.total_ms).sum::<f64>() / 1e3;
        let n = self.frames.len();
        let summary = RunSummary {
            frame_count: n,
            gaussian_count: self.map.len(),
            block_count: self.volume.block_count(),
            keyframe_count: self.online.keyframes().len(),
            online_wall_s,
            fps_incl_io: if online_wall_s > 0.0 {
                n as f64 / online_wall_s
            } else {
                0.0
            },
            fps_excl_io: if compute_s > 0.0 {
                n as f64 / compute_s
            } else {
                0.0
            },
            global_opt_s: self.finalized.unwrap_or(0.0),
            global_pass_losses,
        };
        RunStats {
            frames: self.frames.clone(),
            summary,
        }
    }
}

/// Output of a complete run.
pub struct RunOutput {
    pub stats: RunStats,
    pub volume: TsdfVolume,
    pub map: GaussianMap,
    pub loss_samples: Vec<LossSample>,
}

/// Drive a mapper over an in-memory frame list and finish with global
/// optimization.
pub fn run_frames(
    config: PipelineConfig,
    intrinsics: Intrinsics,
    frames: &[Frame],
) -> Result<RunOutput, PipelineError> {
    let mut mapper = Mapper::new(config, intrinsics)?;
    let online_start = Instant::now();
    for frame in frames {
        mapper.process_frame(frame)?;
    }
    let online_wall_s = online_start.elapsed().as_secs_f64();
    let passes = mapper.finalize()?;
    let stats = mapper.stats_with_wall(online_wall_s, passes);
    Ok(RunOutput {
        stats,
        volume: mapper.volume,
        map: mapper.map,
        loss_samples: mapper.loss_samples,
    })
}

/// Load a sequence directory and run the pipeline over it.
pub fn run_dataset(config: PipelineConfig, dataset: &Path) -> Result<RunOutput, PipelineError> {
    let (intrinsics, frames) = crate::dataset::load_sequence(dataset)?;
    let mut mapper = Mapper::new(config, intrinsics)?;
    let online_start = Instant::now();
    for frame in frames {
        let frame = frame?;
        mapper.process_frame(&frame)?;
    }
    let online_wall_s = online_start.elapsed().as_secs_f64();
    let passes = mapper.finalize()?;
    let stats = mapper.stats_with_wall(online_wall_s, passes);
    Ok(RunOutput {
        stats,
        volume: mapper.volume,
        map: mapper.map,
        loss_samples: mapper.loss_samples,
    })
}

/// Render every pose of a sequence from a Gaussian map, compare against the
/// ground-truth RGB, and optionally write the rendered PNGs.
pub fn evaluate_map(
    map: &GaussianMap,
    sequence: &Sequence,
    render_options: &RenderOptions,
    out_dir: Option<&Path>,
) -> Result<MetricReport, PipelineError> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut per_frame = Vec::with_capacity(sequence.frames.len());
    for frame in &sequence.frames {
        let rendered = crate::renderer::render(map, &frame.pose, &sequence.intrinsics, render_options);
        let rendered_float =
            FloatImage::from_parts(rendered.width, rendered.height, rendered.color.clone());
        let truth = FloatImage::from_rgb8(&frame.rgb);
        let psnr = metrics::psnr(&rendered_float, &truth)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let ssim = metrics::ssim(&rendered_float, &truth)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        per_frame.push(FrameMetrics {
            frame_index: frame.index,
            psnr,
            ssim,
        });
        if let Some(dir) = out_dir {
            let path = dir.join(format!("render_{:06}.png", frame.index));
            rendered
                .to_rgb8()
                .save(&path)
                .map_err(|e| PipelineError::Config(format!("writing {path:?}: {e}")))?;
        }
    }
    let report = MetricReport::from_frames(per_frame);
    if let Some(dir) = out_dir {
        write_metrics_csv(&dir.join("metrics.csv"), &report)?;
    }
    Ok(report)
}

pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<(), PipelineError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "frame_index,psnr,ssim")?;
    for f in &report.per_frame {
        writeln!(out, "{},{:.6},{:.6}", f.frame_index, f.psnr, f.ssim)?;
    }
    writeln!(out, "mean,{:.6},{:.6}", report.mean_psnr, report.mean_ssim)?;
    Ok(())
}

/// Loss trace CSV: frame_index, phase, iteration, loss.
pub fn write_loss_csv(path: &Path, samples: &[LossSample]) -> Result<(), PipelineError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "frame_index,phase,iteration,loss")?;
    for s in samples {
        writeln!(out, "{},{},{},{:.9}", s.frame_index, s.phase, s.iteration, s.loss)?;
    }
    Ok(())
}

/// Per-frame stats as JSON lines, then one summary object.
pub fn write_stats_jsonl(path: &Path, stats: &RunStats) -> Result<(), PipelineError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for frame in &stats.frames {
        let line = serde_json::to_string(frame)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    let summary = serde_json::json!({ "summary": stats.summary });
    writeln!(
        out,
        "{}",
        serde_json::to_string(&summary).map_err(|e| PipelineError::Config(e.to_string()))?
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::presets;

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            voxel_size: 0.02,
            kf_threshold: 10,
            iters_keyframe: 3,
            iters_non_keyframe: 1,
            global_iters: 2,
            qtree_min_cell: 4,
            ..Default::default()
        }
    }

    #[test]
    fn pipeline_runs_on_synthetic_wall() {
        let spec = presets::checker_wall(48, 36, 2.0, 4);
        let frames = spec.render_sequence(4).unwrap();
        let out = run_frames(small_config(), spec.intrinsics, &frames).unwrap();
        assert_eq!(out.stats.frames.len(), 4);
        assert!(out.map.len() > 0, "no gaussians seeded");
        assert!(out.volume.block_count() > 0);
        // First frame over a fresh volume seeds the most.
        assert!(out.stats.frames[0].new_gaussians > 0);
        assert!(out.stats.frames[0].is_keyframe);
        // Counts never decrease.
        for pair in out.stats.frames.windows(2) {
            assert!(pair[1].gaussian_count >= pair[0].gaussian_count);
            assert!(pair[1].block_count >= pair[0].block_count);
        }
        assert_eq!(out.stats.summary.frame_count, 4);
        assert!(out.stats.summary.fps_excl_io > 0.0);
    }

    #[test]
    fn empty_sequence_empty_maps() {
        let spec = presets::checker_wall(32, 24, 2.0, 4);
        let out = run_frames(small_config(), spec.intrinsics, &[]).unwrap();
        assert_eq!(out.stats.frames.len(), 0);
        assert_eq!(out.map.len(), 0);
        assert_eq!(out.volume.block_count(), 0);
        assert!(out.stats.summary.global_pass_losses.is_empty());
    }

    #[test]
    fn static_camera_adds_near_zero_after_first_frame() {
        let spec0 = presets::checker_wall(48, 36, 2.0, 4);
        let spec = crate::dataset::synthetic::SceneSpec {
            trajectory: crate::dataset::synthetic::Trajectory::Static(
                crate::geometry::Pose::identity(),
            ),
            ..spec0
        };
        let frames = spec.render_sequence(5).unwrap();
        let out = run_frames(small_config(), spec.intrinsics, &frames).unwrap();
        let first = out.stats.frames[0].new_gaussians;
        let later: usize = out.stats.frames[1..].iter().map(|f| f.new_gaussians).sum();
        assert!(first > 0);
        assert_eq!(later, 0, "static camera must not keep seeding");
    }

    #[test]
    fn config_text_roundtrip() {
        let text = "voxel_size = 0.05\nqtree_threshold = 0.01 # stricter\nkf_threshold = 10\nall_frames_keyframes = true\nbackground = 0.1 0.2 0.3\nfusion_rule = classic\n";
        let config = PipelineConfig::from_config_text(text).unwrap();
        assert_eq!(config.voxel_size, 0.05);
        assert_eq!(config.qtree_threshold, 0.01);
        assert_eq!(config.kf_threshold, 10);
        assert!(config.all_frames_keyframes);
        assert_eq!(config.background, [0.1, 0.2, 0.3]);
        assert_eq!(config.fusion_rule, FusionRule::Classic);

        assert!(PipelineConfig::from_config_text("nope = 1").is_err());
        assert!(PipelineConfig::from_config_text("voxel_size").is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = PipelineConfig {
            iters_keyframe: 1,
            iters_non_keyframe: 5,
            ..Default::default()
        };
        assert!(Mapper::new(bad, presets::default_intrinsics(16, 16)).is_err());
    }

    #[test]
    fn pipeline_supports_higher_sh_degrees() {
        let spec = presets::checker_wall(32, 24, 2.0, 4);
        let frames = spec.render_sequence(2).unwrap();
        let config = PipelineConfig {
            sh_degree: 1,
            ..small_config()
        };
        let out = run_frames(config, spec.intrinsics, &frames).unwrap();
        assert!(out.map.len() > 0);
        assert_eq!(out.map.coeff_count(), 4);
        // Higher-order coefficients start at zero but are optimizer-reachable.
        let g = &out.map.gaussians()[0];
        assert_eq!(g.sh.len(), 4);
    }

    #[test]
    fn evaluate_writes_outputs() {
        let spec = presets::checker_wall(48, 36, 2.0, 4);
        let frames = spec.render_sequence(2).unwrap();
        let out = run_frames(small_config(), spec.intrinsics, &frames).unwrap();
        let seq = Sequence {
            intrinsics: spec.intrinsics,
            frames,
        };
        let tmp = tempfile::tempdir().unwrap();
        let report = evaluate_map(
            &out.map,
            &seq,
            &RenderOptions::default(),
            Some(tmp.path()),
        )
        .unwrap();
        assert_eq!(report.per_frame.len(), 2);
        assert!(tmp.path().join("render_000000.png").exists());
        assert!(tmp.path().join("metrics.csv").exists());
        assert!(report.mean_psnr > 0.0);
    }
}
