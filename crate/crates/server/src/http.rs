//! `/v1` HTTP/JSON API over an [`Engine`].

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use ctlmap::active_learning::FeedbackRecord;
use ctlmap::corpus::DataFormat;
use ctlmap::hybrid::MappingQuery;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::engine::{Engine, EngineError, RetrainTicket};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
    details: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
            details: json!({}),
        }
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

pub fn status_for(e: &EngineError) -> StatusCode {
    match e {
        EngineError::UnknownRegulation(_) | EngineError::UnknownExperiment(_) => StatusCode::NOT_FOUND,
        EngineError::RegulationExists(_) | EngineError::DuplicateFeedbackId(_) => StatusCode::CONFLICT,
        EngineError::EmptyIndex(_) | EngineError::ModelNotTrained(_) => StatusCode::CONFLICT,
        EngineError::InvalidThreshold(_) | EngineError::InvalidFeedback(_) | EngineError::InvalidRequest(_) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        EngineError::Corpus { .. } => StatusCode::BAD_REQUEST,
        EngineError::Busy(_) => StatusCode::SERVICE_UNAVAILABLE,
        EngineError::ReadOnly => StatusCode::FORBIDDEN,
        EngineError::Config(_) | EngineError::Training(_) | EngineError::Storage(_) | EngineError::Io(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        ApiError {
            status: status_for(&e),
            code: e.code().into(),
            message: e.to_string(),
            details: e.details(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        let status = match e {
            JsonRejection::MissingJsonContentType(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            JsonRejection::JsonSyntaxError(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, "InvalidRequest", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "details": self.details });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
struct AppState {
    engine: Arc<Engine>,
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, EngineError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn spawn_retrain(engine: Arc<Engine>, ticket: RetrainTicket) {
    tokio::task::spawn_blocking(move || {
        if let Err(e) = engine.run_retrain(ticket) {
            eprintln!("retrain failed: {e}");
        }
    });
}

#[derive(Debug, Deserialize)]
struct CatalogParams {
    regulation_id: Option<String>,
    format: Option<String>,
    #[serde(default)]
    replace: bool,
}

async fn post_catalogs(
    State(state): State<AppState>,
    Query(params): Query<CatalogParams>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let format = match params.format.as_deref() {
        Some(f) => f
            .parse::<DataFormat>()
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidRequest", e.to_string()))?,
        None => {
            let csv = headers
                .get(header::CONTENT_TYPE)
                .and_then(|v| v.to_str().ok())
                .is_some_and(|v| v.starts_with("text/csv"));
            if csv {
                DataFormat::Csv
            } else {
                DataFormat::Jsonl
            }
        }
    };
    let engine = state.engine.clone();
    let summary = blocking(move || engine.ingest_catalog(&body, format, params.regulation_id.as_deref(), params.replace)).await?;
    Ok(Json(serde_json::to_value(summary).unwrap_or_default()))
}

#[derive(Debug, Deserialize)]
struct MapRequest {
    text: String,
    regulation_id: String,
    threshold: Option<f64>,
    max_hits: Option<usize>,
}

async fn post_map(State(state): State<AppState>, body: Result<Json<MapRequest>, JsonRejection>) -> ApiResult<Json<Value>> {
    let Json(req) = body?;
    let config = state.engine.config();
    let query = MappingQuery {
        text: req.text,
        regulation_id: req.regulation_id,
        threshold: req.threshold.unwrap_or(config.default_threshold),
        max_hits: req.max_hits.unwrap_or(config.max_hits),
    };
    let result = state.engine.map(&query)?;
    Ok(Json(serde_json::to_value(result).unwrap_or_default()))
}

#[derive(Debug, Deserialize)]
struct FeedbackRequest {
    feedback_id: String,
    regulation_id: String,
    check_text: String,
    #[serde(default)]
    accepted: BTreeSet<String>,
    #[serde(default)]
    rejected: BTreeSet<String>,
    submitted_at: Option<DateTime<Utc>>,
    #[serde(default)]
    author: String,
}

async fn post_feedback(
    State(state): State<AppState>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = body?;
    let record = FeedbackRecord {
        feedback_id: req.feedback_id,
        regulation_id: req.regulation_id,
        check_text: req.check_text,
        accepted: req.accepted,
        rejected: req.rejected,
        submitted_at: req.submitted_at.unwrap_or_else(Utc::now),
        author: req.author,
    };
    let engine = state.engine.clone();
    let (ack, ticket) = blocking(move || engine.submit_feedback(&record)).await?;
    if let Some(ticket) = ticket {
        spawn_retrain(state.engine.clone(), ticket);
    }
    Ok(Json(serde_json::to_value(ack).unwrap_or_default()))
}

#[derive(Debug, Deserialize)]
struct CoverageParams {
    #[serde(alias = "regulation_id")]
    regulation: Option<String>,
    format: Option<String>,
}

async fn get_coverage(State(state): State<AppState>, Query(params): Query<CoverageParams>) -> ApiResult<Response> {
    let Some(regulation) = params.regulation else {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidRequest", "missing `regulation` parameter"));
    };
    let report = state.engine.coverage(&regulation)?;
    if params.format.as_deref() == Some("csv") {
        let mut out = Vec::new();
        report
            .write_family_csv(&mut out)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?;
        return Ok(([(header::CONTENT_TYPE, "text/csv")], out).into_response());
    }
    Ok(Json(report).into_response())
}

async fn get_status(State(state): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(state.engine.status()).unwrap_or_default())
}

#[derive(Debug, Deserialize)]
struct MetricsParams {
    experiment: Option<String>,
}

async fn get_metrics(State(state): State<AppState>, Query(params): Query<MetricsParams>) -> ApiResult<Json<Value>> {
    match params.experiment {
        Some(id) => Ok(Json(state.engine.experiment(&id)?)),
        None => Ok(Json(json!({ "experiments": state.engine.experiment_ids()? }))),
    }
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if req.method() == Method::POST {
        if let Some(token) = &state.engine.config().auth_token {
            let presented = req
                .headers()
                .get(header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "));
            if presented != Some(token.as_str()) {
                return ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or invalid bearer token")
                    .into_response();
            }
        }
    }
    next.run(req).await
}

async fn cors(req: Request, next: Next) -> Response {
    let mut response = if req.method() == Method::OPTIONS {
        StatusCode::NO_CONTENT.into_response()
    } else {
        next.run(req).await
    };
    let h = response.headers_mut();
    h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, OPTIONS"));
    h.insert(
        header::ACCESS_CONTROL_ALLOW_HEADERS,
        HeaderValue::from_static("authorization, content-type"),
    );
    response
}

pub fn router(engine: Arc<Engine>) -> Router {
    let state = AppState { engine };
    Router::new()
        .route("/v1/catalogs", post(post_catalogs))
        .route("/v1/map", post(post_map))
        .route("/v1/feedback", post(post_feedback))
        .route("/v1/coverage", get(get_coverage))
        .route("/v1/status", get(get_status))
        .route("/v1/metrics", get(get_metrics))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(middleware::from_fn(cors))
        .with_state(state)
}

/// Serves until ctrl-c. `on_bound` receives the bound address.
pub async fn serve(engine: Arc<Engine>, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
