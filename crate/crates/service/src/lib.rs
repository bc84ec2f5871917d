//! Local HTTP/JSON service over one open library.
//!
//! All mutations go through a single write lock and are saved before the
//! response is sent. Gateway calls (LLM classification, template generation,
//! summaries) run on the blocking pool without holding the lock.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;
use tower_http::cors::{AllowOrigin, CorsLayer};

use pwm_core::classifier::BackendId;
use pwm_core::engine::{summarize_library, Engine, Health, TemplatePatch};
use pwm_core::library::PromptFilter;
use pwm_core::model::Origin;
use pwm_core::template::{Binding, ExtractionMode};
use pwm_core::Error;

pub const DEFAULT_PORT: u16 = 7878;
/// Origin of the web UI dev server, allowed by CORS in dev mode.
pub const DEFAULT_DEV_ORIGIN: &str = "http://localhost:5173";

/// Error body shared by the service and the CLI's json output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub status: u16,
}

/// HTTP status for each engine error code.
pub fn status_for(err: &Error) -> StatusCode {
    match err {
        Error::NotFound { .. } => StatusCode::NOT_FOUND,
        Error::StaleSuggestion(_) | Error::AlreadyResolved(_) => StatusCode::CONFLICT,
        Error::InsufficientData(_)
        | Error::NoCommonSkeleton
        | Error::DegenerateLabels(_)
        | Error::DegenerateAgreement
        | Error::EmptyDataset
        | Error::ModelMismatch(_) => StatusCode::UNPROCESSABLE_ENTITY,
        Error::GatewayUnavailable(_) | Error::InvalidResponse(_) => StatusCode::BAD_GATEWAY,
        Error::BackendUnavailable { .. } | Error::MissingCredential(_) => StatusCode::SERVICE_UNAVAILABLE,
        Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { code: code.into(), message: message.into(), status: status.as_u16() }
    }

    pub fn invalid_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        ApiError::new(status_for(&err), err.code(), err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, json_body(&self)).into_response()
    }
}

/// Compact JSON, the exact bytes of every response body.
pub fn to_body<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("response types always serialize")
}

fn json_body<T: Serialize>(value: &T) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], to_body(value)).into_response()
}

fn ok<T: Serialize>(value: &T) -> Response {
    json_body(value)
}

fn created<T: Serialize>(value: &T) -> Response {
    (StatusCode::CREATED, json_body(value)).into_response()
}

type ApiResult = Result<Response, ApiError>;

/// JSON body extractor whose rejections use the API error shape.
pub struct Body<T>(pub T);

impl<S, T> FromRequest<S> for Body<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match axum::Json::<T>::from_request(req, state).await {
            Ok(axum::Json(v)) => Ok(Body(v)),
            Err(e) => Err(ApiError::invalid_request(json_rejection_message(&e))),
        }
    }
}

fn json_rejection_message(e: &JsonRejection) -> String {
    e.body_text()
}

/// Query extractor with API-shaped rejections.
pub struct Query<T>(pub T);

impl<S, T> FromRequestParts<S> for Query<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut axum::http::request::Parts, state: &S) -> Result<Self, Self::Rejection> {
        match axum::extract::Query::<T>::from_request_parts(parts, state).await {
            Ok(axum::extract::Query(v)) => Ok(Query(v)),
            Err(e) => Err(ApiError::invalid_request(query_rejection_message(&e))),
        }
    }
}

/// Body that may be omitted entirely; an empty body means defaults.
fn optional_body<T: DeserializeOwned + Default>(bytes: &[u8]) -> Result<T, ApiError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError::invalid_request(format!("invalid JSON body: {e}")))
}

fn query_rejection_message(e: &QueryRejection) -> String {
    e.body_text()
}

// ---------------------------------------------------------------------------
// Request bodies

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextBody {
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListQuery {
    #[serde(default)]
    pub intent: Option<String>,
    #[serde(default)]
    pub role: Option<String>,
    #[serde(default)]
    pub sdlc: Option<String>,
    #[serde(default, rename = "type")]
    pub ptype: Option<String>,
}

impl ListQuery {
    /// Empty parameters count as unset.
    pub fn filter(self) -> PromptFilter {
        let keep = |v: Option<String>| v.filter(|s| !s.is_empty());
        PromptFilter { intent: keep(self.intent), role: keep(self.role), sdlc: keep(self.sdlc), ptype: keep(self.ptype) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdQuery {
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractBody {
    pub prompt_id: String,
    #[serde(default = "default_mode")]
    pub mode: ExtractionMode,
}

fn default_mode() -> ExtractionMode {
    ExtractionMode::Aligned
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderBody {
    pub binding: Binding,
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyBody {
    #[serde(default)]
    pub backend: Option<BackendId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupBody {
    #[serde(default)]
    pub threshold: Option<f64>,
}

// ---------------------------------------------------------------------------
// State and routing

#[derive(Clone)]
pub struct AppState {
    engine: Arc<RwLock<Engine>>,
    token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        AppState { engine: Arc::new(RwLock::new(engine)), token: None }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(Arc::from(token.into()));
        self
    }

    pub fn engine(&self) -> &Arc<RwLock<Engine>> {
        &self.engine
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub token: Option<String>,
    /// Origins allowed by CORS; empty disables the CORS layer.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { bind: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)), token: None, cors_origins: Vec::new() }
    }
}

impl ServiceConfig {
    /// Non-loopback binds must set a bearer token.
    pub fn validate(&self) -> Result<(), String> {
        if !self.bind.ip().is_loopback() && self.token.as_deref().is_none_or(str::is_empty) {
            return Err(format!("refusing to bind {} without a bearer token", self.bind));
        }
        Ok(())
    }
}

async fn auth(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let expected = format!("Bearer {token}");
        let given = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/prompts", get(list_prompts).post(add_prompt))
        .route("/api/prompts/{id}", get(get_prompt).patch(update_prompt).delete(delete_prompt))
        .route("/api/prompts/{id}/similar", get(similar))
        .route("/api/prompts/{id}/optimize", post(optimize))
        .route("/api/prompts/{id}/classify", post(classify))
        .route("/api/suggestions/{id}/accept", post(accept))
        .route("/api/suggestions/{id}/reject", post(reject))
        .route("/api/templates", get(list_templates))
        .route("/api/templates/extract", post(extract_template))
        .route("/api/templates/{id}", get(get_template).patch(edit_template))
        .route("/api/templates/{id}/render", post(render_template))
        .route("/api/library/summary", get(summary))
        .route("/api/library/dedup", post(dedup))
        .route("/api/library/export", get(export))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .route_layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

fn cors(origins: &[String]) -> Result<CorsLayer, String> {
    let values = origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|_| format!("invalid CORS origin {o:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CorsLayer::new()
        .allow_origin(AllowOrigin::list(values))
        .allow_methods([Method::GET, Method::POST, Method::PATCH, Method::DELETE])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]))
}

/// Full application: routes plus CORS when configured.
pub fn app(state: AppState, config: &ServiceConfig) -> Result<Router, String> {
    let router = router(state);
    if config.cors_origins.is_empty() {
        Ok(router)
    } else {
        Ok(router.layer(cors(&config.cors_origins)?))
    }
}

/// Serves until the process is stopped.
pub async fn serve(engine: Engine, config: ServiceConfig) -> std::io::Result<()> {
    config.validate().map_err(std::io::Error::other)?;
    let mut state = AppState::new(engine);
    if let Some(t) = &config.token {
        state = state.with_token(t.clone());
    }
    let app = app(state, &config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}

// ---------------------------------------------------------------------------
// Handlers

fn save(engine: &Engine) -> Result<(), ApiError> {
    engine.save().map_err(ApiError::from)
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> T + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

async fn health() -> Response {
    ok(&Health::ok())
}

async fn list_prompts(State(s): State<AppState>, Query(q): Query<ListQuery>) -> ApiResult {
    let engine = s.engine.read().await;
    Ok(ok(&engine.list_prompts(&q.filter())?))
}

async fn get_prompt(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let engine = s.engine.read().await;
    Ok(ok(&engine.get_prompt(&id)?))
}

async fn add_prompt(State(s): State<AppState>, Body(body): Body<TextBody>) -> ApiResult {
    if body.text.trim().is_empty() {
        return Err(Error::EmptyText.into());
    }
    let classifier = s.engine.read().await.classifier().clone();
    let text = body.text.clone();
    let classified = blocking(move || Engine::classify_text(&classifier, &text)).await?;
    let mut engine = s.engine.write().await;
    let r = engine.add_classified(&body.text, Origin::Manual, classified)?;
    save(&engine)?;
    Ok(created(&r))
}

async fn update_prompt(State(s): State<AppState>, Path(id): Path<String>, Body(body): Body<TextBody>) -> ApiResult {
    if body.text.trim().is_empty() {
        return Err(Error::EmptyText.into());
    }
    let classifier = {
        let engine = s.engine.read().await;
        engine.library().prompt(&id)?;
        engine.classifier().clone()
    };
    let text = body.text.clone();
    let classified = blocking(move || Engine::classify_text(&classifier, &text)).await?;
    let mut engine = s.engine.write().await;
    let r = engine.update_classified(&id, &body.text, classified)?;
    save(&engine)?;
    Ok(ok(&r))
}

async fn delete_prompt(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let mut engine = s.engine.write().await;
    let r = engine.delete_prompt(&id)?;
    save(&engine)?;
    Ok(ok(&r))
}

async fn similar(State(s): State<AppState>, Path(id): Path<String>, Query(q): Query<ThresholdQuery>) -> ApiResult {
    let engine = s.engine.read().await;
    Ok(ok(&engine.similar(&id, q.threshold)?))
}

async fn optimize(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let mut engine = s.engine.write().await;
    let r = engine.optimize(&id)?;
    save(&engine)?;
    Ok(ok(&r))
}

async fn classify(State(s): State<AppState>, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult {
    let backend = optional_body::<ClassifyBody>(&body)?.backend;
    let (classifier, text) = {
        let engine = s.engine.read().await;
        (engine.classifier_for(backend), engine.library().prompt(&id)?.text.clone())
    };
    let classification = blocking(move || classifier.classify(&text)).await??;
    let mut engine = s.engine.write().await;
    let r = engine.store_classification(&id, classification, Vec::new())?;
    save(&engine)?;
    Ok(ok(&r))
}

async fn accept(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let mut engine = s.engine.write().await;
    let r = engine.accept(&id)?;
    save(&engine)?;
    Ok(ok(&r))
}

async fn reject(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let mut engine = s.engine.write().await;
    let r = engine.reject(&id)?;
    save(&engine)?;
    Ok(ok(&r))
}

async fn list_templates(State(s): State<AppState>) -> ApiResult {
    Ok(ok(&s.engine.read().await.list_templates()))
}

async fn get_template(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    Ok(ok(&s.engine.read().await.get_template(&id)?))
}

async fn extract_template(State(s): State<AppState>, Body(body): Body<ExtractBody>) -> ApiResult {
    let (job, gateway) = {
        let engine = s.engine.read().await;
        (engine.extract_job(&body.prompt_id, body.mode)?, Arc::clone(engine.gateway()))
    };
    let (job, outcome) = blocking(move || {
        let outcome = job.run(&gateway);
        (job, outcome)
    })
    .await?;
    let mut engine = s.engine.write().await;
    let r = engine.commit_extraction(&job, outcome?)?;
    save(&engine)?;
    Ok(created(&r))
}

async fn edit_template(State(s): State<AppState>, Path(id): Path<String>, Body(patch): Body<TemplatePatch>) -> ApiResult {
    let mut engine = s.engine.write().await;
    let r = engine.edit_template(&id, patch)?;
    save(&engine)?;
    Ok(ok(&r))
}

async fn render_template(State(s): State<AppState>, Path(id): Path<String>, Body(body): Body<RenderBody>) -> ApiResult {
    let engine = s.engine.read().await;
    Ok(ok(&engine.render_template(&id, &body.binding, body.strict)?))
}

async fn summary(State(s): State<AppState>) -> ApiResult {
    let (library, gateway) = {
        let engine = s.engine.read().await;
        (engine.library().clone(), Arc::clone(engine.gateway()))
    };
    let summary = blocking(move || summarize_library(&library, &gateway)).await?;
    Ok(ok(&summary))
}

async fn dedup(State(s): State<AppState>, body: axum::body::Bytes) -> ApiResult {
    let threshold = optional_body::<DedupBody>(&body)?.threshold;
    let mut engine = s.engine.write().await;
    let r = engine.dedup(threshold)?;
    save(&engine)?;
    Ok(ok(&r))
}

async fn export(State(s): State<AppState>) -> ApiResult {
    let text = s.engine.read().await.export_json();
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], text).into_response())
}
