//! Thin async client for the mapping service.

use gsfusion_api as api;
use thiserror::Error;
use uuid::Uuid;

#[derive(Error, Debug)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Api { status: u16, message: String },
}

pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Self {
        let mut base = base_url.into();
        while base.ends_with('/') {
            base.pop();
        }
        Self {
            base,
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn into_result<T: serde::de::DeserializeOwned>(
        response: reqwest::Response,
    ) -> Result<T, ClientError> {
        let status = response.status();
        if status.is_success() {
            Ok(response.json::<T>().await?)
        } else {
            let message = match response.json::<api::ErrorBody>().await {
                Ok(body) => body.error,
                Err(_) => status.to_string(),
            };
            Err(ClientError::Api {
                status: status.as_u16(),
                message,
            })
        }
    }

    async fn post_json<Req: serde::Serialize, Resp: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        req: &Req,
    ) -> Result<Resp, ClientError> {
        let response = self
            .http
            .post(format!("{}{}", self.base, path))
            .json(req)
            .send()
            .await?;
        Self::into_result(response).await
    }

    async fn post_empty<Resp: serde::de::DeserializeOwned>(
        &self,
        path: &str,
    ) -> Result<Resp, ClientError> {
        let response = self
            .http
            .post(format!("{}{}", self.base, path))
            .json(&serde_json::json!({}))
            .send()
            .await?;
        Self::into_result(response).await
    }

    async fn get_json<Resp: serde::de::DeserializeOwned>(
        &self,
        path: &str,
    ) -> Result<Resp, ClientError> {
        let response = self
            .http
            .get(format!("{}{}", self.base, path))
            .send()
            .await?;
        Self::into_result(response).await
    }

    pub async fn health(&self) -> Result<api::HealthResponse, ClientError> {
        self.get_json("/healthz").await
    }

    pub async fn create_session(
        &self,
        req: &api::CreateSessionRequest,
    ) -> Result<api::CreateSessionResponse, ClientError> {
        self.post_json("/v1/sessions", req).await
    }

    pub async fn list_sessions(&self) -> Result<api::SessionList, ClientError> {
        self.get_json("/v1/sessions").await
    }

    pub async fn delete_session(&self, id: Uuid) -> Result<(), ClientError> {
        let response = self
            .http
            .delete(format!("{}/v1/sessions/{id}", self.base))
            .send()
            .await?;
        let status = response.status();
        if status.is_success() {
            Ok(())
        } else {
            let message = match response.json::<api::ErrorBody>().await {
                Ok(body) => body.error,
                Err(_) => status.to_string(),
            };
            Err(ClientError::Api {
                status: status.as_u16(),
                message,
            })
        }
    }

    pub async fn push_frame(
        &self,
        id: Uuid,
        req: &api::PushFrameRequest,
    ) -> Result<api::FrameStats, ClientError> {
        self.post_json(&format!("/v1/sessions/{id}/frames"), req).await
    }

    pub async fn finalize(&self, id: Uuid) -> Result<api::FinalizeResponse, ClientError> {
        self.post_empty(&format!("/v1/sessions/{id}/finalize")).await
    }

    pub async fn stats(&self, id: Uuid) -> Result<api::RunStats, ClientError> {
        self.get_json(&format!("/v1/sessions/{id}/stats")).await
    }

    pub async fn losses(&self, id: Uuid) -> Result<api::LossTrace, ClientError> {
        self.get_json(&format!("/v1/sessions/{id}/losses")).await
    }

    pub async fn render_pose(
        &self,
        id: Uuid,
        req: &api::RenderPoseRequest,
    ) -> Result<api::RenderPoseResponse, ClientError> {
        self.post_json(&format!("/v1/sessions/{id}/render"), req).await
    }

    pub async fn export_gaussians(
        &self,
        id: Uuid,
        req: &api::ExportGaussiansRequest,
    ) -> Result<api::ExportBytesResponse, ClientError> {
        self.post_json(&format!("/v1/sessions/{id}/export/gaussians"), req)
            .await
    }

    pub async fn export_tsdf(&self, id: Uuid) -> Result<api::ExportBytesResponse, ClientError> {
        self.post_empty(&format!("/v1/sessions/{id}/export/tsdf")).await
    }

    pub async fn eval(&self, req: &api::EvalRequest) -> Result<api::MetricReport, ClientError> {
        self.post_json("/v1/eval", req).await
    }

    pub async fn render_file(
        &self,
        req: &api::RenderFileRequest,
    ) -> Result<api::RenderFileResponse, ClientError> {
        self.post_json("/v1/render-file", req).await
    }

    pub async fn quadtree_overlay(
        &self,
        req: &api::QuadtreeOverlayRequest,
    ) -> Result<api::QuadtreeOverlayResponse, ClientError> {
        self.post_json("/v1/quadtree-overlay", req).await
    }

    pub async fn synth(&self, req: &api::SynthRequest) -> Result<api::SynthResponse, ClientError> {
        self.post_json("/v1/synth", req).await
    }
}
