//! Async client for the fragtrace HTTP service.

use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;
use thiserror::Error;

use fragtrace::tracer::{
    CreateTrace, ErrorBody, FragmentOverlay, PickRequest, PickResponse, SessionInfo, StoredTrace,
    TraceRequest,
};
use fragtrace::volume::Axis;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with an error payload.
    #[error("{status}: {} ({})", body.message, body.error)]
    Api { status: StatusCode, body: ErrorBody },
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }

    /// The requested end state is unreachable.
    pub fn is_no_path(&self) -> bool {
        self.status() == Some(StatusCode::CONFLICT)
    }

    pub fn is_not_found(&self) -> bool {
        self.status() == Some(StatusCode::NOT_FOUND)
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            base: base.into().trim_end_matches('/').to_string(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn check(resp: Response) -> Result<Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            error: "http".into(),
            message: text,
        });
        Err(ClientError::Api { status, body })
    }

    async fn json<T: DeserializeOwned>(resp: Response) -> Result<T> {
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn info(&self) -> Result<SessionInfo> {
        Self::json(self.http.get(self.url("/session/info")).send().await?).await
    }

    pub async fn mip_png(&self, axis: Axis) -> Result<Vec<u8>> {
        let resp = self
            .http
            .get(self.url(&format!("/mip?axis={axis}")))
            .send()
            .await?;
        Ok(Self::check(resp).await?.bytes().await?.to_vec())
    }

    pub async fn fragments(&self, axis: Axis) -> Result<FragmentOverlay> {
        Self::json(
            self.http
                .get(self.url(&format!("/fragments?axis={axis}")))
                .send()
                .await?,
        )
        .await
    }

    pub async fn trace(&self, request: TraceRequest, name: Option<String>) -> Result<StoredTrace> {
        let body = CreateTrace { request, name };
        Self::json(
            self.http
                .post(self.url("/trace"))
                .json(&body)
                .send()
                .await?,
        )
        .await
    }

    pub async fn traces(&self) -> Result<Vec<StoredTrace>> {
        Self::json(self.http.get(self.url("/traces")).send().await?).await
    }

    pub async fn get_trace(&self, id: u64) -> Result<StoredTrace> {
        Self::json(
            self.http
                .get(self.url(&format!("/trace/{id}")))
                .send()
                .await?,
        )
        .await
    }

    pub async fn delete_trace(&self, id: u64) -> Result<()> {
        Self::check(
            self.http
                .delete(self.url(&format!("/trace/{id}")))
                .send()
                .await?,
        )
        .await?;
        Ok(())
    }

    pub async fn trace_swc(&self, id: u64) -> Result<String> {
        let resp = self
            .http
            .get(self.url(&format!("/trace/{id}/swc")))
            .send()
            .await?;
        Ok(Self::check(resp).await?.text().await?)
    }

    pub async fn pick(&self, request: &PickRequest) -> Result<PickResponse> {
        Self::json(
            self.http
                .post(self.url("/pick"))
                .json(request)
                .send()
                .await?,
        )
        .await
    }
}
