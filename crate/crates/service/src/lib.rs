//! HTTP/JSON front end for the tracker. Every handler runs its CPU-bound
//! work on the blocking pool.

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::Path;

use avitmp_api as api;
use avitmp_core::ablation::ablate;
use avitmp_core::gradsuite::run_suite;
use avitmp_core::inference::{diagnostics_jsonl, run_episode, ScriptedPredictor, TargetPredictor};
use avitmp_core::model::shape_check;
use avitmp_core::numerics::checkpoint::checkpoint_bytes;
use avitmp_core::numerics::Fault;
use avitmp_core::synthworld::{evaluate, generate_sequence, load_sequence, save_sequence};
use avitmp_core::training::{loss_log_csv, train};
use avitmp_core::{Error as CoreError, Model, ModelConfig};
use axum::extract::rejection::JsonRejection;
use axum::extract::DefaultBodyLimit;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use tokio::net::TcpListener;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: api::ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, msg: impl Into<String>) -> Self {
        Self {
            status,
            body: api::ErrorBody {
                kind: kind.into(),
                error: msg.into(),
            },
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let (status, kind) = match &e {
            CoreError::Config(_) => (StatusCode::BAD_REQUEST, "config"),
            CoreError::Checkpoint(_) => (StatusCode::UNPROCESSABLE_ENTITY, "checkpoint"),
            CoreError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => (StatusCode::NOT_FOUND, "not_found"),
            CoreError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "config", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Checkpoints arrive inline as base64.
pub const MAX_BODY_BYTES: usize = 256 << 20;

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
    }
}

async fn health() -> &'static str {
    "ok"
}

fn do_train(req: api::TrainRequest) -> Result<api::TrainResponse, ApiError> {
    let out = train(&req.model, &req.train, &req.loss, &req.world, &req.inference, req.seed)?;
    tracing::info!(steps = req.train.steps, seed = req.seed, "trained");
    Ok(api::TrainResponse {
        checkpoint: B64.encode(checkpoint_bytes(&out.model.store)),
        loss_log: loss_log_csv(&out.log),
        parameters: out.model.store.len(),
    })
}

fn require_dir(path: &str) -> Result<&Path, ApiError> {
    let p = Path::new(path);
    if !p.is_dir() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no sequence directory at {path}")));
    }
    Ok(p)
}

fn do_track(req: api::TrackRequest) -> Result<api::TrackResponse, ApiError> {
    let seq = load_sequence(require_dir(&req.sequence)?)?;
    let predictor: Box<dyn TargetPredictor> = if req.oracle {
        Box::new(ScriptedPredictor::oracle(req.model.clone(), &seq.gt))
    } else {
        let encoded = req
            .checkpoint
            .as_deref()
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "config", "a checkpoint is required unless oracle is set"))?;
        let bytes = B64
            .decode(encoded)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "checkpoint", format!("checkpoint is not base64: {e}")))?;
        Box::new(Model::load(req.model.clone(), &mut Cursor::new(bytes))?)
    };
    let ep = run_episode(predictor.as_ref(), &seq.frames, &seq.gt[0], &req.inference)?;
    let m = evaluate(&ep.boxes, &seq.gt)?;
    Ok(api::TrackResponse {
        metrics: api::TrackMetrics {
            frames: seq.frames.len(),
            auc: m.auc,
            precision: m.precision,
            failures: m.failures,
            mean_iou: m.mean_iou,
        },
        diagnostics: diagnostics_jsonl(&ep.diagnostics),
        boxes: ep.boxes,
    })
}

fn do_ablate(req: api::AblateRequest) -> Result<api::AblateResponse, ApiError> {
    let rows = ablate(&req.variants, &req.model, &req.train, &req.loss, &req.world, &req.inference, &req.eval)?;
    Ok(api::AblateResponse { rows })
}

fn do_gradcheck(req: api::GradcheckRequest) -> Result<api::GradcheckResponse, ApiError> {
    if req.seeds == 0 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "config", "seeds must be >= 1"));
    }
    let fault = req.fault.as_deref().map(Fault::parse).transpose()?;
    let report = run_suite(req.seeds, fault)?;
    let shapes = if req.paper_scale {
        Some(shape_check(&ModelConfig::paper_scale(), 0)?)
    } else {
        None
    };
    Ok(api::GradcheckResponse { report, shapes })
}

fn do_generate(req: api::GenerateRequest) -> Result<api::GenerateResponse, ApiError> {
    let seq = generate_sequence(&req.world, req.seed)?;
    save_sequence(&seq, Path::new(&req.out))?;
    Ok(api::GenerateResponse {
        frames: seq.frames.len(),
        gt: seq.gt,
    })
}

macro_rules! handler {
    ($name:ident, $req:ty, $resp:ty, $work:ident) => {
        async fn $name(body: Result<Json<$req>, JsonRejection>) -> ApiResult<$resp> {
            let Json(req) = body?;
            blocking(move || $work(req)).await
        }
    };
}

handler!(train_handler, api::TrainRequest, api::TrainResponse, do_train);
handler!(track_handler, api::TrackRequest, api::TrackResponse, do_track);
handler!(ablate_handler, api::AblateRequest, api::AblateResponse, do_ablate);
handler!(gradcheck_handler, api::GradcheckRequest, api::GradcheckResponse, do_gradcheck);
handler!(generate_handler, api::GenerateRequest, api::GenerateResponse, do_generate);

pub fn router() -> Router {
    Router::new()
        .route(api::HEALTH, get(health))
        .route(api::TRAIN, post(train_handler))
        .route(api::TRACK, post(track_handler))
        .route(api::ABLATE, post(ablate_handler))
        .route(api::GRADCHECK, post(gradcheck_handler))
        .route(api::GENERATE, post(generate_handler))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
}

/// Binds `addr` and serves in a background task. Returns the bound address
/// (useful with port 0) and the task handle.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let task = tokio::spawn(async move { axum::serve(listener, router()).await });
    Ok((local, task))
}
