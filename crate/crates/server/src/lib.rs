//! Mapping service: fusion sessions over HTTP/JSON.
//!
//! A session owns one incremental mapper. Frames are pushed in order as
//! base64 PNG pairs plus a pose; the map can be rendered or exported at
//! any point, and `finalize` runs the post-scan global optimization.
//! Offline operations (evaluation, pose-file rendering, quadtree overlays,
//! synthetic data generation) take filesystem paths and run server-side.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as AxumPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use uuid::Uuid;

use gsfusion_api as api;
use gsfusion_core::dataset::{self, Frame};
use gsfusion_core::export;
use gsfusion_core::geometry::Pose;
use gsfusion_core::pipeline::{self, Mapper};
use gsfusion_core::quadtree;
use gsfusion_core::renderer::RenderOptions;

struct SessionState {
    mapper: Mapper,
    finalize: Option<api::FinalizeResponse>,
}

type SharedSession = Arc<Mutex<SessionState>>;

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<Mutex<HashMap<Uuid, SharedSession>>>,
}

/// Service error with an HTTP status; the body is a JSON `ErrorBody`.
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(api::ErrorBody {
                error: self.message,
            }),
        )
            .into_response()
    }
}

impl From<pipeline::PipelineError> for ApiError {
    fn from(err: pipeline::PipelineError) -> Self {
        use pipeline::PipelineError::*;
        match &err {
            Config(_) | Dataset(_) | Quadtree { .. } => ApiError::bad_request(err.to_string()),
            _ => ApiError::internal(err.to_string()),
        }
    }
}

impl From<dataset::DatasetError> for ApiError {
    fn from(err: dataset::DatasetError) -> Self {
        ApiError::bad_request(err.to_string())
    }
}

impl From<export::ExportError> for ApiError {
    fn from(err: export::ExportError) -> Self {
        ApiError::bad_request(err.to_string())
    }
}

pub fn build_router() -> Router {
    let state = AppState::default();
    Router::new()
        .route("/healthz", get(health))
        .route("/v1/sessions", post(create_session).get(list_sessions))
        .route("/v1/sessions/{id}", delete(delete_session))
        .route("/v1/sessions/{id}/frames", post(push_frame))
        .route("/v1/sessions/{id}/finalize", post(finalize_session))
        .route("/v1/sessions/{id}/stats", get(session_stats))
        .route("/v1/sessions/{id}/losses", get(session_losses))
        .route("/v1/sessions/{id}/render", post(render_pose))
        .route("/v1/sessions/{id}/export/gaussians", post(export_gaussians))
        .route("/v1/sessions/{id}/export/tsdf", post(export_tsdf_handler))
        .route("/v1/eval", post(eval_dataset))
        .route("/v1/render-file", post(render_file))
        .route("/v1/quadtree-overlay", post(quadtree_overlay))
        .route("/v1/synth", post(synth_dataset))
        .with_state(state)
}

/// Serve on an already-bound listener (lets callers pick port 0).
pub async fn serve(listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, build_router()).await
}

async fn health() -> Json<api::HealthResponse> {
    Json(api::HealthResponse {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

fn get_session(state: &AppState, id: Uuid) -> Result<SharedSession, ApiError> {
    state
        .sessions
        .lock()
        .unwrap()
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
}

/// Run a closure over the locked session on the blocking pool.
async fn with_session<T, F>(session: SharedSession, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut SessionState) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || {
        let mut guard = session.lock().unwrap();
        f(&mut guard)
    })
    .await
    .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

async fn create_session(
    State(state): State<AppState>,
    Json(req): Json<api::CreateSessionRequest>,
) -> Result<Json<api::CreateSessionResponse>, ApiError> {
    let mapper = Mapper::new(req.config, req.intrinsics)?;
    let id = Uuid::new_v4();
    state.sessions.lock().unwrap().insert(
        id,
        Arc::new(Mutex::new(SessionState {
            mapper,
            finalize: None,
        })),
    );
    Ok(Json(api::CreateSessionResponse { session_id: id }))
}

async fn list_sessions(State(state): State<AppState>) -> Json<api::SessionList> {
    let sessions = state.sessions.lock().unwrap();
    let mut infos: Vec<api::SessionInfo> = sessions
        .iter()
        .map(|(id, s)| {
            let s = s.lock().unwrap();
            api::SessionInfo {
                session_id: *id,
                frames: s.mapper.frame_stats().len(),
                gaussians: s.mapper.map().len(),
                blocks: s.mapper.volume().block_count(),
                keyframes: s.mapper.keyframe_count(),
                finalized: s.finalize.is_some(),
            }
        })
        .collect();
    infos.sort_by_key(|i| i.session_id);
    Json(api::SessionList { sessions: infos })
}

async fn delete_session(
    State(state): State<AppState>,
    AxumPath(id): AxumPath<Uuid>,
) -> Result<StatusCode, ApiError> {
    state
        .sessions
        .lock()
        .unwrap()
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
}

async fn push_frame(
    State(state): State<AppState>,
    AxumPath(id): AxumPath<Uuid>,
    Json(req): Json<api::PushFrameRequest>,
) -> Result<Json<api::FrameStats>, ApiError> {
    let session = get_session(&state, id)?;
    let stats = with_session(session, move |s| {
        let k = *s.mapper.intrinsics();
        let rgb_bytes = BASE64
            .decode(&req.rgb_png_b64)
            .map_err(|e| ApiError::bad_request(format!("rgb_png_b64: {e}")))?;
        let depth_bytes = BASE64
            .decode(&req.depth_png_b64)
            .map_err(|e| ApiError::bad_request(format!("depth_png_b64: {e}")))?;
        let rgb_name = req.rgb_name.unwrap_or_else(|| format!("frame {}", req.index));
        let depth_name = req
            .depth_name
            .unwrap_or_else(|| format!("frame {} depth", req.index));
        let rgb = dataset::decode_rgb_png(&rgb_bytes, &rgb_name, &k)?;
        let depth = dataset::decode_depth_png(&depth_bytes, &depth_name, &k)?;
        let pose = Pose::from_row_major(&req.pose)
            .map_err(|e| ApiError::bad_request(format!("pose: {e}")))?;
        let frame = Frame {
            index: req.index,
            rgb,
            depth,
            pose,
        };
        Ok(s.mapper.process_frame(&frame)?)
    })
    .await?;
    Ok(Json(stats))
}

async fn finalize_session(
    State(state): State<AppState>,
    AxumPath(id): AxumPath<Uuid>,
) -> Result<Json<api::FinalizeResponse>, ApiError> {
    let session = get_session(&state, id)?;
    let response = with_session(session, |s| {
        if let Some(done) = &s.finalize {
            return Ok(done.clone());
        }
        let started = std::time::Instant::now();
        let pass_losses = s.mapper.finalize()?;
        let response = api::FinalizeResponse {
            pass_losses,
            duration_s: started.elapsed().as_secs_f64(),
        };
        s.finalize = Some(response.clone());
        Ok(response)
    })
    .await?;
    Ok(Json(response))
}

async fn session_stats(
    State(state): State<AppState>,
    AxumPath(id): AxumPath<Uuid>,
) -> Result<Json<api::RunStats>, ApiError> {
    let session = get_session(&state, id)?;
    let stats = with_session(session, |s| Ok(s.mapper.stats())).await?;
    Ok(Json(stats))
}

async fn session_losses(
    State(state): State<AppState>,
    AxumPath(id): AxumPath<Uuid>,
) -> Result<Json<api::LossTrace>, ApiError> {
    let session = get_session(&state, id)?;
    let samples = with_session(session, |s| {
        Ok(s.mapper
            .loss_samples()
            .iter()
            .map(|l| api::LossSampleDto {
                frame_index: l.frame_index,
                phase: l.phase.to_string(),
                iteration: l.iteration,
                loss: l.loss,
            })
            .collect::<Vec<_>>())
    })
    .await?;
    Ok(Json(api::LossTrace { samples }))
}

async fn render_pose(
    State(state): State<AppState>,
    AxumPath(id): AxumPath<Uuid>,
    Json(req): Json<api::RenderPoseRequest>,
) -> Result<Json<api::RenderPoseResponse>, ApiError> {
    let session = get_session(&state, id)?;
    let response = with_session(session, move |s| {
        let pose = Pose::from_row_major(&req.pose)
            .map_err(|e| ApiError::bad_request(format!("pose: {e}")))?;
        let rendered = s.mapper.render_pose(&pose);
        let png = encode_png(&rendered.to_rgb8())?;
        Ok(api::RenderPoseResponse {
            png_b64: BASE64.encode(png),
            width: rendered.width,
            height: rendered.height,
        })
    })
    .await?;
    Ok(Json(response))
}

async fn export_gaussians(
    State(state): State<AppState>,
    AxumPath(id): AxumPath<Uuid>,
    Json(req): Json<api::ExportGaussiansRequest>,
) -> Result<Json<api::ExportBytesResponse>, ApiError> {
    let session = get_session(&state, id)?;
    let response = with_session(session, move |s| {
        let tmp = tempfile_path("ply")?;
        let records = export::export_gaussians_ply(s.mapper.map(), &tmp, req.opacity_cull)?;
        let bytes = std::fs::read(&tmp).map_err(|e| ApiError::internal(e.to_string()))?;
        let _ = std::fs::remove_file(&tmp);
        Ok(api::ExportBytesResponse {
            data_b64: BASE64.encode(bytes),
            records,
        })
    })
    .await?;
    Ok(Json(response))
}

async fn export_tsdf_handler(
    State(state): State<AppState>,
    AxumPath(id): AxumPath<Uuid>,
) -> Result<Json<api::ExportBytesResponse>, ApiError> {
    let session = get_session(&state, id)?;
    let response = with_session(session, move |s| {
        let tmp = tempfile_path("tsdf")?;
        let records = export::export_tsdf(s.mapper.volume(), &tmp)?;
        let bytes = std::fs::read(&tmp).map_err(|e| ApiError::internal(e.to_string()))?;
        let _ = std::fs::remove_file(&tmp);
        Ok(api::ExportBytesResponse {
            data_b64: BASE64.encode(bytes),
            records,
        })
    })
    .await?;
    Ok(Json(response))
}

async fn eval_dataset(
    Json(req): Json<api::EvalRequest>,
) -> Result<Json<api::MetricReport>, ApiError> {
    let report = tokio::task::spawn_blocking(move || -> Result<api::MetricReport, ApiError> {
        let map = export::import_gaussians_ply(Path::new(&req.map_path))?;
        let sequence = dataset::load_sequence_eager(Path::new(&req.dataset_dir))?;
        let report = pipeline::evaluate_map(
            &map,
            &sequence,
            &RenderOptions::default(),
            Some(Path::new(&req.out_dir)),
        )?;
        Ok(report)
    })
    .await
    .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))??;
    Ok(Json(report))
}

async fn render_file(
    Json(req): Json<api::RenderFileRequest>,
) -> Result<Json<api::RenderFileResponse>, ApiError> {
    let frames = tokio::task::spawn_blocking(move || -> Result<usize, ApiError> {
        let pose_file = PathBuf::from(&req.pose_file);
        let intrinsics_path = req
            .intrinsics_path
            .map(PathBuf::from)
            .unwrap_or_else(|| {
                pose_file
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("intrinsics.txt")
            });
        let k = dataset::read_intrinsics(&intrinsics_path)?;
        let poses = dataset::read_poses(&pose_file)?;
        let map = export::import_gaussians_ply(Path::new(&req.map_path))?;
        let out_dir = PathBuf::from(&req.out_dir);
        std::fs::create_dir_all(&out_dir).map_err(|e| ApiError::internal(e.to_string()))?;
        let opts = RenderOptions::default();
        for (i, pose) in poses.iter().enumerate() {
            let rendered = gsfusion_core::renderer::render(&map, pose, &k, &opts);
            let path = out_dir.join(format!("render_{i:06}.png"));
            rendered
                .to_rgb8()
                .save(&path)
                .map_err(|e| ApiError::internal(format!("writing {path:?}: {e}")))?;
        }
        Ok(poses.len())
    })
    .await
    .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))??;
    Ok(Json(api::RenderFileResponse { frames }))
}

async fn quadtree_overlay(
    Json(req): Json<api::QuadtreeOverlayRequest>,
) -> Result<Json<api::QuadtreeOverlayResponse>, ApiError> {
    let leaves = tokio::task::spawn_blocking(move || -> Result<usize, ApiError> {
        let seq = dataset::SequenceDir::open(Path::new(&req.dataset_dir))?;
        if req.frame >= seq.len() {
            return Err(ApiError::bad_request(format!(
                "frame {} out of range (sequence has {})",
                req.frame,
                seq.len()
            )));
        }
        let frame = seq.decode_frame(req.frame)?;
        let leaves = quadtree::decompose(&frame.rgb, req.threshold, req.min_cell.unwrap_or(4))
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let overlay = quadtree::overlay_leaves(&frame.rgb, &leaves);
        overlay
            .save(Path::new(&req.out_path))
            .map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(leaves.len())
    })
    .await
    .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))??;
    Ok(Json(api::QuadtreeOverlayResponse { leaves }))
}

async fn synth_dataset(
    Json(req): Json<api::SynthRequest>,
) -> Result<Json<api::SynthResponse>, ApiError> {
    let frames = tokio::task::spawn_blocking(move || -> Result<usize, ApiError> {
        use gsfusion_core::dataset::synthetic::presets;
        let spec = match req.scene.as_str() {
            "checker-wall" => presets::checker_wall(req.width, req.height, 2.0, 6),
            "cluttered-room" => presets::cluttered_room(req.width, req.height),
            "orbit-sphere" => presets::orbit_sphere(req.width, req.height),
            "desk" => presets::desk_scene(req.width, req.height),
            "oblique-revisit" => presets::oblique_revisit(req.width, req.height, 0.3),
            other => {
                return Err(ApiError::bad_request(format!(
                    "unknown scene {other:?}; expected checker-wall, cluttered-room, \
                     orbit-sphere, desk, or oblique-revisit"
                )))
            }
        };
        gsfusion_core::dataset::synthetic::generate_synthetic(
            &spec,
            req.frames,
            Path::new(&req.out_dir),
        )
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
        Ok(req.frames)
    })
    .await
    .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))??;
    Ok(Json(api::SynthResponse { frames }))
}

fn encode_png(img: &image::RgbImage) -> Result<Vec<u8>, ApiError> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(|e| ApiError::internal(format!("png encode: {e}")))?;
    Ok(bytes.into_inner())
}

fn tempfile_path(ext: &str) -> Result<PathBuf, ApiError> {
    let dir = std::env::temp_dir();
    Ok(dir.join(format!("gsfusion-{}.{ext}", Uuid::new_v4())))
}
