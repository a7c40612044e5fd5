//! HTTP/JSON front end for the gateway and the escalation queue.
//!
//! Every response body is canonical JSON except the DOT export of a
//! provenance graph. When the config carries a bearer token, every route
//! except `/v1/health` requires `Authorization: Bearer <token>`.

mod bootstrap;
mod error;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use agentsafe_core::canonical::CanonicalJson;
use agentsafe_core::escalation::{OperatorVerdict, TicketStatus};
use agentsafe_core::gateway::{Gateway, OpenSessionRequest};
use agentsafe_core::ledger::payload::ToolCallRequest;
use agentsafe_core::ledger::ApgFormat;
use agentsafe_core::policy::Scalar;
use agentsafe_core::telemetry::SemanticEvent;
use agentsafe_core::triage::ContainmentLevel;

pub use bootstrap::{build_gateway, BootstrapError};
pub use error::ApiError;

/// How often pending escalations are checked against the timeout.
pub const EXPIRY_SWEEP: Duration = Duration::from_secs(1);

#[derive(Clone)]
struct AppState {
    gateway: Arc<Gateway>,
    token: Option<Arc<str>>,
}

type ApiResult = Result<Response, ApiError>;

fn canonical<T: Serialize>(status: StatusCode, body: &T) -> ApiResult {
    let text = CanonicalJson::from_serialize(body)
        .map_err(|e| ApiError::internal(e.to_string()))?
        .into_string();
    Ok((status, [(header::CONTENT_TYPE, "application/json")], text).into_response())
}

fn ok<T: Serialize>(body: &T) -> ApiResult {
    canonical(StatusCode::OK, body)
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("invalid-body", e.to_string()))
}

/// Run a gateway call off the async workers; adapters and lanes may block.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Gateway) -> Result<T, agentsafe_core::gateway::GatewayError> + Send + 'static,
{
    let gw = state.gateway.clone();
    tokio::task::spawn_blocking(move || f(&gw))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::from)
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    let token = gateway.config().bearer_token.as_deref().map(Arc::from);
    let state = AppState { gateway, token };
    let api = Router::new()
        .route("/v1/sessions", post(open_session).get(list_sessions))
        .route("/v1/sessions/{id}", get(session_status))
        .route("/v1/sessions/{id}/events", post(submit_event))
        .route("/v1/sessions/{id}/tool-calls", post(tool_call))
        .route("/v1/sessions/{id}/containment", post(containment))
        .route("/v1/sessions/{id}/apg", get(apg))
        .route("/v1/ledger/verify", get(verify_ledger))
        .route("/v1/escalations", get(list_escalations))
        .route("/v1/escalations/{id}", get(escalation))
        .route("/v1/escalations/{id}/decision", post(decide))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/v1/health", get(health))
        .merge(api)
        .fallback(not_found)
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_ref()) {
            let mut resp = ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
            return resp;
        }
    }
    next.run(request).await
}

async fn health() -> ApiResult {
    ok(&serde_json::json!({ "status": "ok" }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such route")
}

#[derive(Serialize)]
struct SessionOpened {
    session_id: String,
}

async fn open_session(State(state): State<AppState>, body: Bytes) -> ApiResult {
    let req: OpenSessionRequest = parse(&body)?;
    let session_id = blocking(&state, move |gw| gw.open_session_by_ref(&req)).await?;
    canonical(StatusCode::CREATED, &SessionOpened { session_id })
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult {
    let gw = &state.gateway;
    let statuses: Vec<_> = gw
        .session_ids()
        .iter()
        .filter_map(|id| gw.session_status(id).ok())
        .collect();
    ok(&statuses)
}

async fn session_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(&state.gateway.session_status(&id)?)
}

async fn submit_event(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let event: SemanticEvent = parse(&body)?;
    ok(&blocking(&state, move |gw| gw.submit_event(&id, event)).await?)
}

async fn tool_call(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let mut request: ToolCallRequest = parse(&body)?;
    // evaluation labels are harness-only
    request.labels.clear();
    ok(&blocking(&state, move |gw| gw.authorize_tool_call(&id, request)).await?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainmentBody {
    level: ContainmentLevel,
    cause: String,
}

async fn containment(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: ContainmentBody = parse(&body)?;
    ok(&blocking(&state, move |gw| gw.apply_containment(&id, req.level, &req.cause)).await?)
}

#[derive(Deserialize)]
struct ApgQuery {
    format: Option<String>,
}

async fn apg(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<ApgQuery>) -> ApiResult {
    let format: ApgFormat = q
        .format
        .as_deref()
        .unwrap_or("json")
        .parse()
        .map_err(|e: agentsafe_core::ledger::ApgError| ApiError::bad_request("unsupported-format", e.to_string()))?;
    let text = blocking(&state, move |gw| gw.apg(&id, format)).await?;
    let content_type = match format {
        ApgFormat::Json => "application/json",
        ApgFormat::Dot => "text/vnd.graphviz",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], text).into_response())
}

async fn verify_ledger(State(state): State<AppState>) -> ApiResult {
    ok(&blocking(&state, |gw| Ok(gw.verify_ledger())).await?)
}

#[derive(Deserialize)]
struct EscalationQuery {
    status: Option<TicketStatus>,
}

async fn list_escalations(State(state): State<AppState>, Query(q): Query<EscalationQuery>) -> ApiResult {
    ok(&state.gateway.escalations(q.status))
}

async fn escalation(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    match state.gateway.escalation(&id) {
        Some(t) => ok(&t),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "unknown-ticket", format!("unknown escalation `{id}`"))),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    verdict: OperatorVerdict,
    operator_id: String,
    #[serde(default)]
    modified_args: Option<std::collections::BTreeMap<String, Scalar>>,
}

async fn decide(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: DecisionBody = parse(&body)?;
    if req.operator_id.trim().is_empty() {
        return Err(ApiError::bad_request("invalid-body", "operator_id must not be empty"));
    }
    let decision = blocking(&state, move |gw| gw.decide(&id, req.verdict, &req.operator_id, req.modified_args)).await?;
    ok(&decision)
}

/// Serve until Ctrl-C, sweeping escalation timeouts in the background.
pub async fn serve(gateway: Arc<Gateway>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "gateway listening");
    let sweeper = {
        let gw = gateway.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(EXPIRY_SWEEP);
            loop {
                tick.tick().await;
                let gw = gw.clone();
                let swept = tokio::task::spawn_blocking(move || gw.expire(gw.clock().now_ms())).await;
                match swept {
                    Ok(Ok(expired)) if !expired.is_empty() => tracing::info!(count = expired.len(), "escalations expired"),
                    Ok(Err(e)) => tracing::warn!(error = %e, "expiry sweep failed"),
                    _ => {}
                }
            }
        })
    };
    let result = axum::serve(listener, router(gateway))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    sweeper.abort();
    result
}
