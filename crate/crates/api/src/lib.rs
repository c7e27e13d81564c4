//! Request and response types of the mapping service HTTP/JSON API.
//!
//! Image payloads travel as base64-encoded PNG bytes; poses are 16
//! row-major floats of the 4x4 camera-to-world matrix, matching the
//! on-disk pose format. Heavier offline operations (evaluation, batch
//! rendering) take filesystem paths, which assumes the server shares a
//! filesystem with the caller (the default in-process deployment).

use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub use gsfusion_core::geometry::Intrinsics;
pub use gsfusion_core::metrics::{FrameMetrics, MetricReport};
pub use gsfusion_core::pipeline::{FrameStats, PipelineConfig, RunStats, RunSummary};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: Uuid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: Uuid,
    pub frames: usize,
    pub gaussians: usize,
    pub blocks: usize,
    pub keyframes: usize,
    pub finalized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionList {
    pub sessions: Vec<SessionInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PushFrameRequest {
    pub index: usize,
    /// 8-bit RGB PNG, base64.
    pub rgb_png_b64: String,
    /// 16-bit grayscale PNG, base64.
    pub depth_png_b64: String,
    /// Row-major 4x4 camera-to-world matrix.
    pub pose: [f64; 16],
    /// Source names used in error messages.
    #[serde(default)]
    pub rgb_name: Option<String>,
    #[serde(default)]
    pub depth_name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalizeResponse {
    /// Mean keyframe loss per global pass.
    pub pass_losses: Vec<f64>,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSampleDto {
    pub frame_index: usize,
    pub phase: String,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossTrace {
    pub samples: Vec<LossSampleDto>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderPoseRequest {
    pub pose: [f64; 16],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderPoseResponse {
    pub png_b64: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportGaussiansRequest {
    #[serde(default)]
    pub opacity_cull: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportBytesResponse {
    pub data_b64: String,
    /// Records written: Gaussians for PLY, blocks for TSDF.
    pub records: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRequest {
    pub map_path: String,
    pub dataset_dir: String,
    pub out_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderFileRequest {
    pub map_path: String,
    pub pose_file: String,
    /// Defaults to `intrinsics.txt` next to the pose file.
    #[serde(default)]
    pub intrinsics_path: Option<String>,
    pub out_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderFileResponse {
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadtreeOverlayRequest {
    pub dataset_dir: String,
    pub frame: usize,
    pub threshold: f64,
    #[serde(default)]
    pub min_cell: Option<u32>,
    pub out_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadtreeOverlayResponse {
    pub leaves: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthRequest {
    /// One of the built-in scene presets.
    pub scene: String,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub out_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthResponse {
    pub frames: usize,
}
