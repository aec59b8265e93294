//! HTTP front end for [`ActivationService`].
//!
//! `POST /v1/activate` and `GET /v1/server-key` are public. Product
//! administration requires `Authorization: Bearer <token>`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use ecakp_core::crypto::{ct_eq, hex_serde};
use ecakp_core::server::{ActivationRequest, ActivationService, LedgerStats, PolicyMode, ServiceError};
use ecakp_core::ContentId;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Environment variable holding the admin bearer token.
pub const ADMIN_TOKEN_VAR: &str = "ECAKP_ADMIN_TOKEN";

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<ActivationService>,
    /// Admin endpoints answer 503 when no token is configured.
    pub admin_token: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterProduct {
    pub content_id: ContentId,
    #[serde(with = "hex_serde")]
    pub master_key: [u8; 32],
    pub policy: PolicyMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProductStats {
    pub content_id: ContentId,
    pub policy: PolicyMode,
    #[serde(flatten)]
    pub stats: LedgerStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerKeyBody {
    pub public_key: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::Protocol(_) | ServiceError::InvalidPolicy(_) => StatusCode::BAD_REQUEST,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Storage(_) => StatusCode::SERVICE_UNAVAILABLE,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/activate", post(activate))
        .route("/v1/server-key", get(server_key))
        .route("/v1/products", post(register))
        .route("/v1/products/{id}/policy", put(set_policy))
        .route("/v1/products/{id}/stats", get(stats))
        .with_state(state)
}

fn authorize(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let Some(expected) = state.admin_token.as_deref() else {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "admin endpoints disabled: no token configured"));
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("");
    if ct_eq(presented.as_bytes(), expected.as_bytes()) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token"))
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request body: {e}")))
}

fn parse_id(raw: &str) -> ApiResult<ContentId> {
    ContentId::parse_hex(raw).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn activate(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: ActivationRequest = parse_json(&body)?;
    let svc = state.service.clone();
    let resp = blocking(move || svc.activate(&req)).await?;
    Ok(Json(resp).into_response())
}

async fn server_key(State(state): State<AppState>) -> Json<ServerKeyBody> {
    Json(ServerKeyBody { public_key: state.service.public_key().to_hex() })
}

async fn register(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    authorize(&state, &headers)?;
    let body: RegisterProduct = parse_json(&body)?;
    let svc = state.service.clone();
    let (id, policy) = (body.content_id, body.policy);
    blocking(move || svc.register_product(id, body.master_key, policy)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "content_id": id, "policy": policy }))).into_response())
}

async fn set_policy(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    authorize(&state, &headers)?;
    let id = parse_id(&id)?;
    let policy: PolicyMode = parse_json(&body)?;
    let svc = state.service.clone();
    blocking(move || svc.set_policy(id, policy)).await?;
    Ok(Json(json!({ "content_id": id, "policy": policy })).into_response())
}

async fn stats(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Json<ProductStats>> {
    authorize(&state, &headers)?;
    let id = parse_id(&id)?;
    let stats = state.service.ledger_stats(id)?;
    let policy = state.service.policy(id)?;
    Ok(Json(ProductStats { content_id: id, policy, stats }))
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Runs the server on its own runtime thread. Used by tests and embedding
/// callers; the thread lives until the process exits.
pub fn spawn_background(state: AppState, addr: SocketAddr) -> std::io::Result<SocketAddr> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
    let local = listener.local_addr()?;
    std::thread::spawn(move || {
        rt.block_on(async move {
            let _ = axum::serve(listener, router(state)).await;
        })
    });
    Ok(local)
}
