//! HTTP surface over an [`Explainer`].
//!
//! Sessions hold per-anchor cached state. Each session has its own mutex, so
//! requests for one session run one at a time while distinct sessions proceed
//! in parallel. All recourse work runs on blocking threads. The trained
//! artifacts behind the explainer are never mutated by any endpoint.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{validate_values, FeatureKind, FeatureSchema, Instance, LabelColumn};
use crate::error::{Error, FieldError};
use crate::recourse::{Explainer, Overrides, RecourseConfig, Session};

pub const SERVICE_SCHEMA_VERSION: u32 = 1;

/// Response header carrying the wall-clock time of the recourse computation.
pub const ELAPSED_HEADER: &str = "x-elapsed-ms";

/// Response header naming the stages a what-if query recomputed.
pub const REBUILT_HEADER: &str = "x-rebuilt";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Sessions untouched for longer than this are dropped.
    pub idle_timeout: Duration,
    /// Configuration used by sessions created without one.
    pub default_config: RecourseConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            idle_timeout: Duration::from_secs(30 * 60),
            default_config: RecourseConfig::default(),
        }
    }
}

struct SessionEntry {
    config: RecourseConfig,
    session: Option<Session>,
    last_used: Instant,
}

/// Shared state of a running service.
pub struct AppState {
    explainer: Arc<Explainer>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionEntry>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(explainer: Arc<Explainer>, config: ServiceConfig) -> Arc<Self> {
        Arc::new(AppState {
            explainer,
            config,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    /// Drops every session idle for longer than the configured timeout and
    /// returns how many were removed.
    pub fn evict_idle(&self) -> usize {
        let mut sessions = self.sessions.lock().expect("session map poisoned");
        let before = sessions.len();
        let timeout = self.config.idle_timeout;
        sessions.retain(|_, entry| match entry.try_lock() {
            Ok(e) => e.last_used.elapsed() <= timeout,
            // busy sessions are in use, hence not idle
            Err(_) => true,
        });
        before - sessions.len()
    }

    fn lookup(&self, id: &str) -> Result<Arc<Mutex<SessionEntry>>, ApiError> {
        self.evict_idle();
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

/// Error body shared by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDocument {
    pub schema_version: u32,
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldErrorDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldErrorDocument {
    pub feature: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorDocument,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorDocument {
                schema_version: SERVICE_SCHEMA_VERSION,
                error: error.into(),
                message: message.into(),
                fields: Vec::new(),
            },
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "unknown-session",
            format!("no session '{id}'"),
        )
    }

    fn fields(errors: Vec<FieldError>) -> Self {
        let mut e = Self::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid-instance",
            format!("{} field error(s)", errors.len()),
        );
        e.body.fields = errors
            .into_iter()
            .map(|f| FieldErrorDocument {
                feature: f.feature,
                message: f.message,
            })
            .collect();
        e
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::InvalidInstance(fields) => ApiError::fields(fields),
            Error::Dimension { .. } => ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid-instance",
                message,
            ),
            Error::InvalidArgument(_) => ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid-argument",
                message,
            ),
            Error::NoContrastClass(_) => {
                ApiError::new(StatusCode::CONFLICT, "no-contrast-class", message)
            }
            Error::NoPath => ApiError::new(StatusCode::CONFLICT, "no-path", message),
            Error::Remote(_) => ApiError::new(StatusCode::BAD_GATEWAY, "remote-model", message),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid-request",
            e.to_string(),
        )
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub config: Option<RecourseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub schema_version: u32,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaResponse {
    pub schema_version: u32,
    pub session: String,
    pub features: Vec<FeatureSchema>,
    pub label: Option<LabelColumn>,
    pub class_count: usize,
    pub pool_size: usize,
}

/// An anchor given either by pool row or by explicit values. Values may be a
/// list in schema order or an object keyed by feature name; categorical values
/// are category names or indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnchorSpec {
    Index { index: usize },
    Values { values: Value },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    pub anchor: AnchorSpec,
    #[serde(default)]
    pub overrides: Option<Overrides>,
}

impl Default for ExplainRequest {
    fn default() -> Self {
        ExplainRequest {
            anchor: AnchorSpec::Values {
                values: Value::Null,
            },
            overrides: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhatIfRequest {
    pub overrides: Overrides,
}

fn parse_value(f: &FeatureSchema, v: &Value) -> Result<f64, String> {
    match (&f.kind, v) {
        (FeatureKind::Numeric, Value::Number(n)) => {
            n.as_f64().ok_or_else(|| "not a finite number".to_string())
        }
        (FeatureKind::Numeric, _) => Err(format!("expected a number, got {v}")),
        (FeatureKind::Categorical { categories }, Value::String(s)) => categories
            .iter()
            .position(|c| c == s)
            .map(|i| i as f64)
            .ok_or_else(|| format!("unknown category '{s}'")),
        (FeatureKind::Categorical { .. }, Value::Number(n)) => {
            n.as_f64().ok_or_else(|| "not a finite number".to_string())
        }
        (FeatureKind::Categorical { .. }, _) => Err(format!("expected a category name, got {v}")),
    }
}

/// Converts a JSON anchor into raw values, reporting every bad field at once.
pub fn parse_anchor_values(schema: &[FeatureSchema], values: &Value) -> crate::Result<Vec<f64>> {
    let mut errors = Vec::new();
    let mut out = vec![f64::NAN; schema.len()];
    match values {
        Value::Array(items) => {
            if items.len() != schema.len() {
                return Err(Error::InvalidInstance(vec![FieldError::new(
                    "(anchor)",
                    format!("expected {} values, got {}", schema.len(), items.len()),
                )]));
            }
            for (j, (f, v)) in schema.iter().zip(items).enumerate() {
                match parse_value(f, v) {
                    Ok(x) => out[j] = x,
                    Err(m) => errors.push(FieldError::new(&f.name, m)),
                }
            }
        }
        Value::Object(map) => {
            for key in map.keys() {
                if !schema.iter().any(|f| &f.name == key) {
                    errors.push(FieldError::new(key, "unknown feature"));
                }
            }
            for (j, f) in schema.iter().enumerate() {
                match map.get(&f.name) {
                    None => errors.push(FieldError::new(&f.name, "missing value")),
                    Some(v) => match parse_value(f, v) {
                        Ok(x) => out[j] = x,
                        Err(m) => errors.push(FieldError::new(&f.name, m)),
                    },
                }
            }
        }
        _ => {
            return Err(Error::InvalidInstance(vec![FieldError::new(
                "(anchor)",
                "expected a list of values or an object keyed by feature name",
            )]))
        }
    }
    if !errors.is_empty() {
        return Err(Error::InvalidInstance(errors));
    }
    validate_values(schema, &out)?;
    Ok(out)
}

fn resolve_anchor(explainer: &Explainer, spec: &AnchorSpec) -> crate::Result<Instance> {
    match spec {
        AnchorSpec::Index { index } => {
            let pool = explainer.pool();
            if *index >= pool.len() {
                return Err(Error::InvalidInstance(vec![FieldError::new(
                    "(anchor)",
                    format!(
                        "index {index} is out of range for a pool of {} rows",
                        pool.len()
                    ),
                )]));
            }
            Ok(pool.instance(*index))
        }
        AnchorSpec::Values { values } => Ok(Instance::new(parse_anchor_values(
            explainer.schema(),
            values,
        )?)),
    }
}

fn json_with_headers<T: Serialize>(body: &T, elapsed: Duration, rebuilt: Option<&str>) -> Response {
    let mut response = Json(body).into_response();
    let headers = response.headers_mut();
    let millis = format!("{:.3}", elapsed.as_secs_f64() * 1e3);
    headers.insert(
        ELAPSED_HEADER,
        HeaderValue::from_str(&millis).expect("ascii number"),
    );
    if let Some(r) = rebuilt {
        headers.insert(
            REBUILT_HEADER,
            HeaderValue::from_str(r).expect("ascii stage name"),
        );
    }
    response
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Serialize)]
struct Health {
    schema_version: u32,
    status: &'static str,
    version: &'static str,
}

async fn healthz() -> impl IntoResponse {
    Json(Health {
        schema_version: SERVICE_SCHEMA_VERSION,
        status: "ok",
        version: env!("CARGO_PKG_VERSION"),
    })
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let request: CreateSessionRequest = parse_body(&body)?;
    let config = request
        .config
        .unwrap_or_else(|| state.config.default_config.clone());
    config.validate()?;
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    state.evict_idle();
    state.sessions.lock().expect("session map poisoned").insert(
        id.clone(),
        Arc::new(Mutex::new(SessionEntry {
            config,
            session: None,
            last_used: Instant::now(),
        })),
    );
    Ok((
        StatusCode::CREATED,
        Json(CreateSessionResponse {
            schema_version: SERVICE_SCHEMA_VERSION,
            id,
        }),
    ))
}

async fn get_schema(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SchemaResponse>> {
    let entry = state.lookup(&id)?;
    let mut e = entry.lock().expect("session poisoned");
    e.last_used = Instant::now();
    let pool = state.explainer.pool();
    let features = match &e.session {
        Some(s) => s.schema().to_vec(),
        None => pool.schema().to_vec(),
    };
    Ok(Json(SchemaResponse {
        schema_version: SERVICE_SCHEMA_VERSION,
        session: id,
        features,
        label: pool.label_column().cloned(),
        class_count: state.explainer.model().class_count(),
        pool_size: pool.len(),
    }))
}

async fn explain(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let entry = state.lookup(&id)?;
    let request: ExplainRequest = parse_body(&body)?;
    let explainer = state.explainer.clone();
    blocking(move || {
        let mut e = entry.lock().expect("session poisoned");
        e.last_used = Instant::now();
        let x = resolve_anchor(&explainer, &request.anchor)?;
        let started = Instant::now();
        let mut session = Session::start(&explainer, &x, &e.config)?;
        if let Some(overrides) = request.overrides.filter(|o| !o.is_empty()) {
            session.what_if(&explainer, &overrides)?;
        }
        let elapsed = started.elapsed();
        let response = json_with_headers(session.explanation(), elapsed, None);
        e.session = Some(session);
        Ok(response)
    })
    .await
}

async fn what_if(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let entry = state.lookup(&id)?;
    let request: WhatIfRequest = parse_body(&body)?;
    let explainer = state.explainer.clone();
    blocking(move || {
        let mut e = entry.lock().expect("session poisoned");
        e.last_used = Instant::now();
        let session = e.session.as_mut().ok_or_else(|| {
            ApiError::new(
                StatusCode::CONFLICT,
                "no-anchor",
                "explain an anchor before asking what-if questions",
            )
        })?;
        let rebuilt = session.what_if(&explainer, &request.overrides)?;
        let name = serde_json::to_value(rebuilt).expect("enum serializes");
        Ok(json_with_headers(
            session.explanation(),
            session.elapsed(),
            name.as_str(),
        ))
    })
    .await
}

async fn get_tree(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let entry = state.lookup(&id)?;
    let mut e = entry.lock().expect("session poisoned");
    e.last_used = Instant::now();
    let session = e.session.as_ref().ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            "no-anchor",
            "explain an anchor before requesting its tree",
        )
    })?;
    Ok(Json(session.tree().to_document(session.schema())).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/schema", get(get_schema))
        .route("/sessions/{id}/explain", post(explain))
        .route("/sessions/{id}/whatif", post(what_if))
        .route("/sessions/{id}/tree", get(get_tree))
        .with_state(state)
}

/// Serves until the listener fails, evicting idle sessions in the background.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    let sweeper = state.clone();
    let period = (state.config.idle_timeout / 4).max(Duration::from_secs(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            sweeper.evict_idle();
        }
    });
    axum::serve(listener, router(state)).await
}
