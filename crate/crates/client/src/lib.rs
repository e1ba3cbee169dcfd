//! Typed async client for the experiment service.

use forla_api::{
    routes, CommRequest, CommResponse, CompareRequest, CompareResponse, ErrorBody, ErrorKind, EvaluateRequest,
    EvaluateResponse, ExportRequest, ExportResponse, GenDataRequest, GenDataResponse, Health, TrainRequest,
    TrainResponse,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use forla_api as api;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {}", body.message)]
    Api { status: u16, body: ErrorBody },
}

impl ClientError {
    /// Error category reported by the server, if it answered at all.
    pub fn kind(&self) -> Option<ErrorKind> {
        match self {
            ClientError::Api { body, .. } => Some(body.kind),
            ClientError::Http(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            kind: ErrorKind::Internal,
            message: text,
        });
        Err(ClientError::Api {
            status: status.as_u16(),
            body,
        })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, route: &str, body: &B) -> Result<T> {
        let resp = self.http.post(format!("{}{route}", self.base)).json(body).send().await?;
        Self::decode(resp).await
    }

    pub async fn health(&self) -> Result<Health> {
        let resp = self.http.get(format!("{}{}", self.base, routes::HEALTH)).send().await?;
        Self::decode(resp).await
    }

    pub async fn gen_data(&self, req: &GenDataRequest) -> Result<GenDataResponse> {
        self.post(routes::GEN_DATA, req).await
    }

    pub async fn train(&self, req: &TrainRequest) -> Result<TrainResponse> {
        self.post(routes::TRAIN, req).await
    }

    pub async fn evaluate(&self, req: &EvaluateRequest) -> Result<EvaluateResponse> {
        self.post(routes::EVALUATE, req).await
    }

    pub async fn compare(&self, req: &CompareRequest) -> Result<CompareResponse> {
        self.post(routes::COMPARE, req).await
    }

    pub async fn export_features(&self, req: &ExportRequest) -> Result<ExportResponse> {
        self.post(routes::EXPORT_FEATURES, req).await
    }

    pub async fn comm_report(&self, req: &CommRequest) -> Result<CommResponse> {
        self.post(routes::COMM_REPORT, req).await
    }
}
