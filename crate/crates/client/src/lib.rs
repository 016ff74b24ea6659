//! Thin typed wrapper over the service's JSON endpoints.

use avitmp_api as api;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with a non-2xx status.
    #[error("{status} ({kind}): {message}")]
    Api {
        status: StatusCode,
        kind: String,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let (kind, message) = match serde_json::from_str::<api::ErrorBody>(&text) {
            Ok(b) => (b.kind, b.error),
            Err(_) => ("unknown".to_string(), text),
        };
        Err(ClientError::Api { status, kind, message })
    }

    pub async fn health(&self) -> Result<bool> {
        let resp = self.http.get(format!("{}{}", self.base, api::HEALTH)).send().await?;
        Ok(resp.status().is_success())
    }

    pub async fn train(&self, req: &api::TrainRequest) -> Result<api::TrainResponse> {
        self.post(api::TRAIN, req).await
    }

    pub async fn track(&self, req: &api::TrackRequest) -> Result<api::TrackResponse> {
        self.post(api::TRACK, req).await
    }

    pub async fn ablate(&self, req: &api::AblateRequest) -> Result<api::AblateResponse> {
        self.post(api::ABLATE, req).await
    }

    pub async fn gradcheck(&self, req: &api::GradcheckRequest) -> Result<api::GradcheckResponse> {
        self.post(api::GRADCHECK, req).await
    }

    pub async fn generate(&self, req: &api::GenerateRequest) -> Result<api::GenerateResponse> {
        self.post(api::GENERATE, req).await
    }
}
