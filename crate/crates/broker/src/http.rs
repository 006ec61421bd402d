//! HTTP+JSON surface of the broker.
//!
//! | method | path | auth |
//! |---|---|---|
//! | POST | /v1/token | none |
//! | POST | /v1/endpoints | Bearer |
//! | GET  | /v1/endpoints, /v1/endpoints/{id} | Bearer |
//! | POST | /v1/functions | Bearer |
//! | GET  | /v1/functions/{id} | Bearer |
//! | POST | /v1/tasks | Bearer |
//! | GET  | /v1/runs | Bearer |
//! | POST | /v1/runs/{id}/approve, /v1/runs/{id}/reject | Bearer |
//! | GET  | /v1/runs/{id}, /v1/runs/{id}/result | Bearer |
//! | POST | /v1/agent/{endpoint_id}/poll | Agent |
//! | POST | /v1/agent/{endpoint_id}/runs/{id}/state | Agent |
//! | POST | /v1/agent/{endpoint_id}/runs/{id}/result | Agent |
//! | GET  | /v1/artifacts/{id} | Bearer |
//! | GET  | /v1/audit | Bearer |

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use ci_protocol::api::*;
use ci_protocol::{decode, encode, ArtifactId, EndpointId, FunctionId, RunId, TaskSpec, WireMessage};
use serde::Serialize;

use crate::broker::{AuditFilter, Broker, RunFilter};
use crate::error::BrokerError;

type Shared = Arc<Broker>;

/// Result reports carry both output streams and base64 artifact files.
pub const MAX_RESULT_BODY_BYTES: usize = 64 << 20;

pub fn router(broker: Shared) -> Router {
    Router::new()
        .route("/v1/token", post(token))
        .route("/v1/endpoints", post(register_endpoint).get(list_endpoints))
        .route("/v1/endpoints/{id}", get(get_endpoint))
        .route("/v1/functions", post(register_function))
        .route("/v1/functions/{id}", get(get_function))
        .route("/v1/tasks", post(submit_task))
        .route("/v1/runs", get(list_runs))
        .route("/v1/runs/{id}", get(get_status))
        .route("/v1/runs/{id}/result", get(get_result))
        .route("/v1/runs/{id}/approve", post(approve))
        .route("/v1/runs/{id}/reject", post(reject))
        .route("/v1/agent/{endpoint_id}/poll", post(agent_poll))
        .route("/v1/agent/{endpoint_id}/runs/{id}/state", post(agent_state))
        .route(
            "/v1/agent/{endpoint_id}/runs/{id}/result",
            post(agent_result).layer(DefaultBodyLimit::max(MAX_RESULT_BODY_BYTES)),
        )
        .route("/v1/artifacts/{id}", get(get_artifact))
        .route("/v1/audit", get(query_audit))
        .with_state(broker)
}

pub struct ApiError(BrokerError);

impl From<BrokerError> for ApiError {
    fn from(err: BrokerError) -> Self {
        ApiError(err)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.0.status();
        let bundle = match &self.0 {
            BrokerError::ArtifactPurged(bundle) => Some((**bundle).clone()),
            _ => None,
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        let body = ErrorBody {
            error_code: self.0.code().to_string(),
            message: self.0.to_string(),
            bundle,
        };
        (status, wire(&body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn wire<T: Serialize>(value: &T) -> Response {
    (
        [(header::CONTENT_TYPE, "application/json")],
        encode(value),
    )
        .into_response()
}

fn ok<T: Serialize>(value: &T) -> ApiResult {
    Ok(wire(value))
}

fn body<T: WireMessage>(bytes: &Bytes) -> Result<T, ApiError> {
    decode(bytes).map_err(|e| ApiError(BrokerError::Schema(e)))
}

fn credential<'a>(headers: &'a HeaderMap, scheme: &str) -> Option<&'a str> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let (given, rest) = value.split_once(' ')?;
    given
        .eq_ignore_ascii_case(scheme)
        .then(|| rest.trim())
        .filter(|v| !v.is_empty())
}

fn bearer(headers: &HeaderMap) -> Result<&str, ApiError> {
    credential(headers, "Bearer").ok_or(ApiError(BrokerError::InvalidToken))
}

fn agent_key(headers: &HeaderMap) -> Result<&str, ApiError> {
    credential(headers, "Agent").ok_or(ApiError(BrokerError::InvalidAgentKey))
}

fn parse_id<T: std::str::FromStr>(raw: &str, what: &str) -> Result<T, ApiError> {
    raw.parse().map_err(|_| {
        ApiError(BrokerError::Schema(ci_protocol::SchemaError::new(
            what,
            format!("`{raw}` is not a valid identifier"),
        )))
    })
}

async fn token(State(b): State<Shared>, bytes: Bytes) -> ApiResult {
    let req: TokenRequest = body(&bytes)?;
    ok(&b.issue_token(&req.client_id, &req.client_secret)?)
}

async fn register_endpoint(State(b): State<Shared>, headers: HeaderMap, bytes: Bytes) -> ApiResult {
    let descriptor: EndpointDescriptor = decode(&bytes)
        .map_err(|e| ApiError(BrokerError::InvalidDescriptor(e.to_string())))?;
    let registration = b.register_endpoint(bearer(&headers)?, descriptor)?;
    Ok((StatusCode::CREATED, wire(&registration)).into_response())
}

async fn list_endpoints(State(b): State<Shared>, headers: HeaderMap) -> ApiResult {
    ok(&b.list_endpoints(bearer(&headers)?)?)
}

async fn get_endpoint(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let id: EndpointId = parse_id(&id, "endpoint_id")?;
    ok(&b.get_endpoint(bearer(&headers)?, &id)?)
}

async fn register_function(State(b): State<Shared>, headers: HeaderMap, bytes: Bytes) -> ApiResult {
    let req: RegisterFunctionRequest = body(&bytes)?;
    let registration = b.register_function(bearer(&headers)?, req)?;
    Ok((StatusCode::CREATED, wire(&registration)).into_response())
}

async fn get_function(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let id: FunctionId = parse_id(&id, "function_id")?;
    ok(&b.get_function(bearer(&headers)?, &id)?)
}

async fn submit_task(State(b): State<Shared>, headers: HeaderMap, bytes: Bytes) -> ApiResult {
    let spec: TaskSpec =
        decode(&bytes).map_err(|e| ApiError(BrokerError::InvalidSpec(e.to_string())))?;
    let submitted = b.submit_task(bearer(&headers)?, spec)?;
    Ok((StatusCode::CREATED, wire(&submitted)).into_response())
}

async fn list_runs(
    State(b): State<Shared>,
    headers: HeaderMap,
    Query(filter): Query<RunFilter>,
) -> ApiResult {
    let runs = b.list_runs(bearer(&headers)?, &filter)?;
    ok(&RunList { runs })
}

async fn get_status(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let id: RunId = parse_id(&id, "run_id")?;
    ok(&b.get_status(bearer(&headers)?, &id)?)
}

async fn get_result(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let id: RunId = parse_id(&id, "run_id")?;
    ok(&b.get_result(bearer(&headers)?, &id)?)
}

async fn approve(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let id: RunId = parse_id(&id, "run_id")?;
    ok(&b.approve(bearer(&headers)?, &id)?)
}

async fn reject(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let id: RunId = parse_id(&id, "run_id")?;
    ok(&b.reject(bearer(&headers)?, &id)?)
}

async fn agent_poll(
    State(b): State<Shared>,
    headers: HeaderMap,
    Path(endpoint_id): Path<String>,
    bytes: Bytes,
) -> ApiResult {
    let endpoint_id: EndpointId = parse_id(&endpoint_id, "endpoint_id")?;
    let req: PollRequest = body(&bytes)?;
    let key = agent_key(&headers)?;
    let tasks = b
        .agent_poll_wait(
            &endpoint_id,
            key,
            req.max_n,
            Duration::from_secs(req.wait_seconds as u64),
        )
        .await?;
    ok(&PollResponse { tasks })
}

async fn agent_state(
    State(b): State<Shared>,
    headers: HeaderMap,
    Path((endpoint_id, run_id)): Path<(String, String)>,
    bytes: Bytes,
) -> ApiResult {
    let endpoint_id: EndpointId = parse_id(&endpoint_id, "endpoint_id")?;
    let run_id: RunId = parse_id(&run_id, "run_id")?;
    let report: StateReport = body(&bytes)?;
    let run = b.report_state(&endpoint_id, agent_key(&headers)?, &run_id, report.state)?;
    ok(&StateReport { state: run.state })
}

async fn agent_result(
    State(b): State<Shared>,
    headers: HeaderMap,
    Path((endpoint_id, run_id)): Path<(String, String)>,
    bytes: Bytes,
) -> ApiResult {
    let endpoint_id: EndpointId = parse_id(&endpoint_id, "endpoint_id")?;
    let run_id: RunId = parse_id(&run_id, "run_id")?;
    let report: ResultReport = body(&bytes)?;
    ok(&b.report_result(&endpoint_id, agent_key(&headers)?, &run_id, report)?)
}

async fn get_artifact(State(b): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let id: ArtifactId = parse_id(&id, "artifact_id")?;
    let token = bearer(&headers)?.to_string();
    // File reads happen off the async workers.
    let content = tokio::task::spawn_blocking(move || b.get_artifact(&token, &id))
        .await
        .map_err(|e| ApiError(BrokerError::Storage(e.to_string())))??;
    ok(&content)
}

async fn query_audit(
    State(b): State<Shared>,
    headers: HeaderMap,
    Query(filter): Query<AuditFilter>,
) -> ApiResult {
    let events = b.query_audit(bearer(&headers)?, &filter)?;
    ok(&AuditPage { events })
}
