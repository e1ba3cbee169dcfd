//! HTTP/JSON front end for the experiment harness.
//!
//! Every training or evaluation call runs on the blocking pool; the
//! handlers only parse, dispatch and map errors.

use std::net::SocketAddr;

use axum::body::Bytes;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forla_api::{
    routes, CommRequest, CommResponse, CompareRequest, CompareResponse, ErrorBody, ErrorKind, EvaluateRequest,
    EvaluateResponse, ExportRequest, ExportResponse, GenDataRequest, GenDataResponse, Health, TrainRequest,
    TrainResponse,
};
use forla_core::features::{write_cache, CACHE_MAGIC};
use forla_core::federation::{comm_report, CommLedger, FullScaleSizes};
use forla_core::harness::{
    compare_modes, export_features, generate_scenes, load_run, param_counts, run_experiment_with, Dataset,
    RunOptions,
};
use forla_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpListener;

/// An error on its way to becoming a JSON response.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        let status = match kind {
            ErrorKind::BadRequest | ErrorKind::Config => StatusCode::BAD_REQUEST,
            ErrorKind::Numerical => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            body: ErrorBody {
                kind,
                message: message.into(),
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let kind = if e.is_config() {
            ErrorKind::Config
        } else if e.is_numerical() {
            ErrorKind::Numerical
        } else if matches!(&e, Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound) {
            ErrorKind::NotFound
        } else {
            ErrorKind::Internal
        };
        ApiError::new(kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(ErrorKind::BadRequest, format!("invalid request body: {e}")))
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> forla_core::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError::from),
        Err(e) => Err(ApiError::new(ErrorKind::Internal, format!("worker task failed: {e}"))),
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn gen_data(body: Bytes) -> ApiResult<GenDataResponse> {
    let req: GenDataRequest = parse(&body)?;
    blocking(move || {
        req.config.validate()?;
        let (train, test) = generate_scenes(&req.config)?;
        std::fs::create_dir_all(&req.out_dir)?;
        let train_path = req.out_dir.join("train.cache");
        let test_path = req.out_dir.join("test.cache");
        write_cache(&train_path, CACHE_MAGIC, &train)?;
        write_cache(&test_path, CACHE_MAGIC, &test)?;
        tracing::info!(train = train.len(), test = test.len(), dir = %req.out_dir.display(), "scenes written");
        Ok(GenDataResponse {
            train_path,
            test_path,
            train_scenes: train.len(),
            test_scenes: test.len(),
            domains: req.config.data.domains,
            channels: req.config.data.channels.clone(),
        })
    })
    .await
}

async fn train(body: Bytes) -> ApiResult<TrainResponse> {
    let req: TrainRequest = parse(&body)?;
    blocking(move || {
        let opts = RunOptions {
            checkpoint: req.checkpoint.clone(),
            checkpoint_every: req.checkpoint_every,
            resume: req.resume.clone(),
            max_rounds: None,
        };
        tracing::info!(mode = %req.config.mode, seed = req.config.seed, "training");
        let out = run_experiment_with(&req.config, &opts)?;
        if let Some(dir) = &req.out_dir {
            out.write(dir)?;
        }
        Ok(TrainResponse {
            comm: out.comm_report(),
            iterations: out.state.workers.iter().map(|w| w.state.iter).collect(),
            report: out.report,
            shared_params: out.shared_params,
            full_params: out.full_params,
            out_dir: req.out_dir,
        })
    })
    .await
}

async fn evaluate(body: Bytes) -> ApiResult<EvaluateResponse> {
    let req: EvaluateRequest = parse(&body)?;
    blocking(move || {
        let out = load_run(&req.config, &req.checkpoint)?;
        Ok(EvaluateResponse { report: out.report })
    })
    .await
}

async fn compare(body: Bytes) -> ApiResult<CompareResponse> {
    let req: CompareRequest = parse(&body)?;
    blocking(move || compare_modes(&req.configs, &req.seeds)).await
}

async fn export(body: Bytes) -> ApiResult<ExportResponse> {
    let req: ExportRequest = parse(&body)?;
    blocking(move || {
        let out = load_run(&req.config, &req.checkpoint)?;
        let worker = out
            .state
            .workers
            .iter()
            .find(|w| w.state.client_id == req.client)
            .ok_or_else(|| Error::Config(format!("no client {} in this run", req.client)))?;
        let ds = Dataset::build(&req.config)?;
        let scenes = &ds.test[worker.domain as usize];
        if let Some(parent) = req.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let written = export_features(&worker.state.student, scenes, &req.path, req.config.seed)?;
        let (height, width, channels) = written
            .first()
            .map(|s| (s.features[0].height, s.features[0].width, s.features[0].channels))
            .unwrap_or_default();
        Ok(ExportResponse {
            path: req.path,
            client: req.client,
            domain: worker.domain,
            scenes: written.len(),
            height,
            width,
            channels,
        })
    })
    .await
}

async fn comm(body: Bytes) -> ApiResult<CommResponse> {
    let req: CommRequest = parse(&body)?;
    blocking(move || match &req.checkpoint {
        Some(path) => Ok(load_run(&req.config, path)?.comm_report()),
        None => {
            req.config.validate()?;
            let (shared, full) = param_counts(&req.config)?;
            Ok(comm_report(&CommLedger::default(), req.config.adapter, shared, full, &FullScaleSizes::default()))
        }
    })
    .await
}

async fn fallback() -> ApiError {
    ApiError::new(ErrorKind::NotFound, "no such route")
}

pub fn router() -> Router {
    Router::new()
        .route(routes::HEALTH, get(health))
        .route(routes::GEN_DATA, post(gen_data))
        .route(routes::TRAIN, post(train))
        .route(routes::EVALUATE, post(evaluate))
        .route(routes::COMPARE, post(compare))
        .route(routes::EXPORT_FEATURES, post(export))
        .route(routes::COMM_REPORT, post(comm))
        .fallback(fallback)
}

/// Serves on an already bound listener until the task is dropped.
pub async fn serve_on(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve_on(listener).await
}

/// Binds an ephemeral loopback port and serves in the background.
pub async fn spawn_local() -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(("127.0.0.1", 0)).await?;
    let addr = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve_on(listener).await {
            tracing::error!("embedded server stopped: {e}");
        }
    });
    Ok(addr)
}
