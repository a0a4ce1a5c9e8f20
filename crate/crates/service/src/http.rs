//! JSON over HTTP.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/v1/answer` | `AnswerRequest` + optional `policy`, or `{items: [...], policy?}` | item, or `{items}` |
//! | GET | `/v1/items?status=&page=&per_page=` | | `Page` |
//! | GET | `/v1/items/{id}` | | item |
//! | GET | `/v1/items/{id}/trace` | | JSONL step summaries of the regeneration |
//! | POST | `/v1/items/{id}/annotation` | `AnnotationInput` | item |
//! | POST | `/v1/items/{id}/regenerate` | `RegenerateInput` | item |
//! | POST | `/v1/items/{id}/deliver` | `DeliverInput` | item |
//! | GET | `/v1/export?from=&to=` | | JSONL archive |
//! | GET | `/v1/health` | | `{status}` |
//!
//! Errors are `{code, message, detail}` with `code` one of `not_found`
//! (404), `conflict` (409), `validation` (422), `unauthorized` (401) or
//! `internal` (500). Everything outside `/v1` is served from the static
//! directory when one is configured.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use expert_cfg::GatePolicy;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use crate::config::ServiceConfig;
use crate::engine::{AnnotationInput, AnswerRequest, DeliverInput, RegenerateInput, ReviewService, DEFAULT_PER_PAGE};
use crate::error::ServiceError;
use crate::item::{ReviewItem, Status};

pub const NDJSON: &str = "application/x-ndjson";

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = self.0.code();
        let status = match code {
            "not_found" => StatusCode::NOT_FOUND,
            "conflict" => StatusCode::CONFLICT,
            "validation" => StatusCode::UNPROCESSABLE_ENTITY,
            "unauthorized" => StatusCode::UNAUTHORIZED,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let detail = match &self.0 {
            ServiceError::Validation { detail, .. } => detail.clone().unwrap_or(Value::Null),
            _ => Value::Null,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{}", self.0);
        }
        let body = json!({ "code": code, "message": self.0.to_string(), "detail": detail });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
struct AppState {
    service: Arc<ReviewService>,
    permits: Arc<Semaphore>,
}

impl AppState {
    /// Runs blocking model work on the blocking pool, at most `pool_size` at once.
    async fn run<T, F>(&self, f: F) -> ApiResult<T>
    where
        T: Send + 'static,
        F: FnOnce(&ReviewService) -> Result<T, ServiceError> + Send + 'static,
    {
        let _permit = self.permits.clone().acquire_owned().await.expect("semaphore never closed");
        let service = self.service.clone();
        tokio::task::spawn_blocking(move || f(&service))
            .await
            .map_err(|e| ServiceError::Core(expert_cfg::Error::Format(format!("worker failed: {e}"))))?
            .map_err(ApiError)
    }

    fn view(&self, item: &ReviewItem) -> Value {
        let mut v = serde_json::to_value(item).expect("items serialize");
        if !self.service.config().show_initial_answer {
            v["initial"] = Value::Null;
        }
        v
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| {
        ApiError(ServiceError::Validation {
            message: format!("malformed request body: {e}"),
            detail: Some(json!({ "line": e.line(), "column": e.column() })),
        })
    })
}

#[derive(Deserialize)]
struct SingleBody {
    #[serde(flatten)]
    request: AnswerRequest,
    #[serde(default)]
    policy: Option<GatePolicy>,
}

#[derive(Deserialize)]
struct BatchBody {
    items: Vec<AnswerRequest>,
    #[serde(default)]
    policy: Option<GatePolicy>,
}

async fn answer(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let raw: Value = parse(&body)?;
    if raw.get("items").is_some() {
        let b: BatchBody = parse(&body)?;
        let items = st.run(move |s| s.answer_batch(b.items, b.policy)).await?;
        Ok(Json(json!({ "items": items.iter().map(|i| st.view(i)).collect::<Vec<_>>() })))
    } else {
        let b: SingleBody = parse(&body)?;
        let item = st.run(move |s| s.answer(b.request, b.policy)).await?;
        Ok(Json(st.view(&item)))
    }
}

#[derive(Deserialize)]
struct ListQuery {
    status: Option<String>,
    page: Option<usize>,
    per_page: Option<usize>,
}

async fn list_items(State(st): State<AppState>, Query(q): Query<ListQuery>) -> ApiResult<Json<Value>> {
    let status = q
        .status
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Status>())
        .transpose()
        .map_err(ServiceError::validation)?;
    let page = st
        .service
        .list_items(status, q.page.unwrap_or(1), q.per_page.unwrap_or(DEFAULT_PER_PAGE))?;
    Ok(Json(serde_json::to_value(page).expect("pages serialize")))
}

async fn get_item(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(st.view(&st.service.get(&id)?)))
}

async fn trace(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let item = st.service.get(&id)?;
    let regen = item
        .regeneration
        .ok_or_else(|| ServiceError::NotFound(format!("trace for item {id} (not regenerated)")))?;
    let mut out = String::new();
    for s in &regen.steps {
        out.push_str(&serde_json::to_string(s).expect("steps serialize"));
        out.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, NDJSON)], out).into_response())
}

async fn annotate(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let input: AnnotationInput = parse(&body)?;
    let item = st.run(move |s| s.submit_annotation(&id, input)).await?;
    Ok(Json(st.view(&item)))
}

async fn regenerate(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let input: RegenerateInput = parse(&body)?;
    let item = st.run(move |s| s.regenerate(&id, input)).await?;
    Ok(Json(st.view(&item)))
}

async fn deliver(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let input: DeliverInput = parse(&body)?;
    let item = st.run(move |s| s.deliver(&id, input)).await?;
    Ok(Json(st.view(&item)))
}

#[derive(Deserialize)]
struct ExportQuery {
    from: Option<u64>,
    to: Option<u64>,
}

async fn export(State(st): State<AppState>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let text = st.service.export(q.from, q.to)?;
    Ok(([(header::CONTENT_TYPE, NDJSON)], text).into_response())
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn not_found() -> ApiError {
    ApiError(ServiceError::NotFound("route".into()))
}

async fn require_token(State(token): State<Arc<String>>, headers: HeaderMap, req: Request, next: Next) -> Response {
    let ok = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token.as_str());
    if ok {
        next.run(req).await
    } else {
        ApiError(ServiceError::Unauthorized).into_response()
    }
}

pub fn router(service: Arc<ReviewService>) -> Router {
    let config = service.config().clone();
    let state = AppState {
        permits: Arc::new(Semaphore::new(config.pool_size)),
        service,
    };
    let mut api = Router::new()
        .route("/v1/answer", post(answer))
        .route("/v1/items", get(list_items))
        .route("/v1/items/:id", get(get_item))
        .route("/v1/items/:id/trace", get(trace))
        .route("/v1/items/:id/annotation", post(annotate))
        .route("/v1/items/:id/regenerate", post(regenerate))
        .route("/v1/items/:id/deliver", post(deliver))
        .route("/v1/export", get(export))
        .with_state(state);
    if let Some(token) = config.auth_token {
        api = api.layer(middleware::from_fn_with_state(Arc::new(token), require_token));
    }
    let app = Router::new().route("/v1/health", get(health)).merge(api);
    match config.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.fallback(not_found),
    }
}

/// Serves until Ctrl-C, then writes a final snapshot.
pub async fn serve(config: ServiceConfig) -> crate::Result<()> {
    let bind = config.bind.clone();
    let service = Arc::new(tokio::task::block_in_place(|| ReviewService::from_config(config))?);
    let listener = tokio::net::TcpListener::bind(&bind)
        .await
        .map_err(|e| expert_cfg::Error::io(bind.clone(), e))?;
    log::info!("listening on {bind}");
    axum::serve(listener, router(service.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| expert_cfg::Error::io(bind, e))?;
    service.checkpoint()
}
