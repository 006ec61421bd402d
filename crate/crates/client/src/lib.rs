//! Async HTTP clients for the broker.
//!
//! [`UserClient`] speaks the bearer-token API used by adapters, admin tools and
//! dashboards. [`AgentClient`] speaks the agent-key API used by site agents.
//! Request and response bodies go through the protocol codec, so schema
//! violations surface as [`ClientError::Decode`] rather than as silent defaults.

use std::time::Duration;

use ci_protocol::api::*;
use ci_protocol::{
    decode, encode, ArtifactId, AuditAction, AuditEvent, BearerToken, EndpointId, EndpointRecord,
    FunctionId, FunctionRecord, RunId, RunState, TaskResult, TaskRun, TaskSpec, Timestamp,
    WireMessage,
};
use reqwest::{Method, StatusCode};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// Connection refused, DNS failure, timeout: the broker was not reached.
    #[error("broker unreachable: {0}")]
    Unreachable(String),
    /// The broker answered with an error body.
    #[error("{code}: {message}")]
    Api {
        status: u16,
        code: String,
        message: String,
        bundle: Option<ci_protocol::ArtifactBundle>,
    },
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::Unreachable(_) => "unreachable",
            ClientError::Api { code, .. } => code,
            ClientError::Decode(_) => "bad_response",
        }
    }

    pub fn is_auth(&self) -> bool {
        matches!(
            self.code(),
            "auth_failure" | "invalid_token" | "invalid_agent_key"
        )
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

/// Query parameters of `GET /v1/runs`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunQuery {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint_id: Option<EndpointId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<RunState>,
}

/// Query parameters of `GET /v1/audit`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct AuditQuery {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<AuditAction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from_seq: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub to_seq: Option<u64>,
}

#[derive(Debug, Clone)]
struct Transport {
    http: reqwest::Client,
    base: String,
}

impl Transport {
    fn new(base_url: &str, timeout: Duration) -> Result<Self> {
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(10))
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Unreachable(e.to_string()))?;
        Ok(Transport {
            http,
            base: base_url.trim_end_matches('/').to_string(),
        })
    }

    async fn call<B, Q, R>(
        &self,
        method: Method,
        path: &str,
        auth: Option<String>,
        query: Option<&Q>,
        body: Option<&B>,
    ) -> Result<R>
    where
        B: Serialize + ?Sized,
        Q: Serialize + ?Sized,
        R: WireMessage,
    {
        let mut req = self.http.request(method, format!("{}{}", self.base, path));
        if let Some(auth) = auth {
            req = req.header(reqwest::header::AUTHORIZATION, auth);
        }
        if let Some(query) = query {
            req = req.query(query);
        }
        if let Some(body) = body {
            req = req
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(encode(body));
        }
        let resp = req.send().await.map_err(transport_error)?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(transport_error)?;
        if status.is_success() {
            return decode(&bytes).map_err(|e| ClientError::Decode(e.to_string()));
        }
        Err(api_error(status, &bytes))
    }
}

fn transport_error(err: reqwest::Error) -> ClientError {
    if err.is_decode() {
        ClientError::Decode(err.to_string())
    } else {
        ClientError::Unreachable(err.to_string())
    }
}

fn api_error(status: StatusCode, bytes: &[u8]) -> ClientError {
    match decode::<ErrorBody>(bytes) {
        Ok(body) => ClientError::Api {
            status: status.as_u16(),
            code: body.error_code,
            message: body.message,
            bundle: body.bundle,
        },
        Err(_) => ClientError::Api {
            status: status.as_u16(),
            code: format!("http_{}", status.as_u16()),
            message: String::from_utf8_lossy(bytes).chars().take(200).collect(),
            bundle: None,
        },
    }
}

const NO_QUERY: Option<&()> = None;
const NO_BODY: Option<&()> = None;

/// Re-login margin: a token this close to expiry is replaced before use.
const REFRESH_MARGIN_MS: i64 = 60_000;

/// User-side client. Holds the client credential in memory so it can renew
/// its bearer token; the credential is never logged or written anywhere.
pub struct UserClient {
    transport: Transport,
    client_id: String,
    client_secret: String,
    token: tokio::sync::Mutex<Option<BearerToken>>,
}

impl std::fmt::Debug for UserClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UserClient")
            .field("base", &self.transport.base)
            .field("client_id", &self.client_id)
            .finish_non_exhaustive()
    }
}

impl UserClient {
    pub fn new(base_url: &str, client_id: &str, client_secret: &str) -> Result<Self> {
        Ok(UserClient {
            transport: Transport::new(base_url, Duration::from_secs(60))?,
            client_id: client_id.to_string(),
            client_secret: client_secret.to_string(),
            token: tokio::sync::Mutex::new(None),
        })
    }

    /// Exchanges the credential for a fresh token and keeps it.
    pub async fn login(&self) -> Result<BearerToken> {
        let req = TokenRequest {
            client_id: self.client_id.clone(),
            client_secret: self.client_secret.clone(),
        };
        let token: BearerToken = self
            .transport
            .call(Method::POST, "/v1/token", None, NO_QUERY, Some(&req))
            .await?;
        *self.token.lock().await = Some(token.clone());
        Ok(token)
    }

    async fn auth(&self) -> Result<String> {
        let current = self.token.lock().await.clone();
        let token = match current {
            Some(t) if t.expires_at.since(Timestamp::now()) > REFRESH_MARGIN_MS => t,
            _ => self.login().await?,
        };
        Ok(format!("Bearer {}", token.token))
    }

    /// One authenticated call. A rejected token (clock skew, broker restart
    /// with pruned tokens) triggers a single re-login and retry.
    async fn authed<Q, B, R>(&self, method: Method, path: &str, query: Option<&Q>, body: Option<&B>) -> Result<R>
    where
        Q: Serialize + ?Sized,
        B: Serialize + ?Sized,
        R: WireMessage,
    {
        let auth = self.auth().await?;
        match self.transport.call(method.clone(), path, Some(auth), query, body).await {
            Err(ClientError::Api { code, .. }) if code == "invalid_token" => {
                let token = self.login().await?;
                let auth = format!("Bearer {}", token.token);
                self.transport.call(method, path, Some(auth), query, body).await
            }
            other => other,
        }
    }

    async fn get<R: WireMessage>(&self, path: &str) -> Result<R> {
        self.authed(Method::GET, path, NO_QUERY, NO_BODY).await
    }

    async fn post<B: Serialize + ?Sized, R: WireMessage>(&self, path: &str, body: Option<&B>) -> Result<R> {
        self.authed(Method::POST, path, NO_QUERY, body).await
    }

    pub async fn register_endpoint(&self, descriptor: &EndpointDescriptor) -> Result<EndpointRegistration> {
        self.post("/v1/endpoints", Some(descriptor)).await
    }

    pub async fn list_endpoints(&self) -> Result<Vec<EndpointRecord>> {
        self.get("/v1/endpoints").await
    }

    pub async fn get_endpoint(&self, id: &EndpointId) -> Result<EndpointRecord> {
        self.get(&format!("/v1/endpoints/{id}")).await
    }

    pub async fn register_function(&self, req: &RegisterFunctionRequest) -> Result<FunctionRegistration> {
        self.post("/v1/functions", Some(req)).await
    }

    pub async fn get_function(&self, id: &FunctionId) -> Result<FunctionRecord> {
        self.get(&format!("/v1/functions/{id}")).await
    }

    pub async fn submit_task(&self, spec: &TaskSpec) -> Result<SubmitResponse> {
        self.post("/v1/tasks", Some(spec)).await
    }

    pub async fn approve(&self, run_id: &RunId) -> Result<TaskRun> {
        self.post(&format!("/v1/runs/{run_id}/approve"), NO_BODY).await
    }

    pub async fn reject(&self, run_id: &RunId) -> Result<TaskRun> {
        self.post(&format!("/v1/runs/{run_id}/reject"), NO_BODY).await
    }

    pub async fn get_status(&self, run_id: &RunId) -> Result<TaskRun> {
        self.get(&format!("/v1/runs/{run_id}")).await
    }

    pub async fn get_result(&self, run_id: &RunId) -> Result<TaskResult> {
        self.get(&format!("/v1/runs/{run_id}/result")).await
    }

    pub async fn list_runs(&self, query: &RunQuery) -> Result<Vec<TaskRun>> {
        let list: RunList = self.authed(Method::GET, "/v1/runs", Some(query), NO_BODY).await?;
        Ok(list.runs)
    }

    pub async fn get_artifact(&self, id: &ArtifactId) -> Result<ArtifactContent> {
        self.get(&format!("/v1/artifacts/{id}")).await
    }

    pub async fn query_audit(&self, query: &AuditQuery) -> Result<Vec<AuditEvent>> {
        let page: AuditPage = self.authed(Method::GET, "/v1/audit", Some(query), NO_BODY).await?;
        Ok(page.events)
    }
}

/// Agent-side client, authenticated by the endpoint's agent key.
pub struct AgentClient {
    transport: Transport,
    endpoint_id: EndpointId,
    agent_key: String,
}

impl std::fmt::Debug for AgentClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentClient")
            .field("base", &self.transport.base)
            .field("endpoint_id", &self.endpoint_id)
            .finish_non_exhaustive()
    }
}

impl AgentClient {
    /// `request_timeout` must exceed the long-poll wait the agent asks for.
    pub fn new(
        base_url: &str,
        endpoint_id: EndpointId,
        agent_key: &str,
        request_timeout: Duration,
    ) -> Result<Self> {
        Ok(AgentClient {
            transport: Transport::new(base_url, request_timeout)?,
            endpoint_id,
            agent_key: agent_key.to_string(),
        })
    }

    pub fn endpoint_id(&self) -> EndpointId {
        self.endpoint_id
    }

    fn auth(&self) -> Option<String> {
        Some(format!("Agent {}", self.agent_key))
    }

    pub async fn poll(&self, max_n: u32, wait_seconds: u32) -> Result<Vec<ClaimedTask>> {
        let req = PollRequest { max_n, wait_seconds };
        let resp: PollResponse = self
            .transport
            .call(
                Method::POST,
                &format!("/v1/agent/{}/poll", self.endpoint_id),
                self.auth(),
                NO_QUERY,
                Some(&req),
            )
            .await?;
        Ok(resp.tasks)
    }

    pub async fn report_state(&self, run_id: &RunId, state: RunState) -> Result<RunState> {
        let resp: StateReport = self
            .transport
            .call(
                Method::POST,
                &format!("/v1/agent/{}/runs/{run_id}/state", self.endpoint_id),
                self.auth(),
                NO_QUERY,
                Some(&StateReport { state }),
            )
            .await?;
        Ok(resp.state)
    }

    pub async fn report_result(&self, run_id: &RunId, report: &ResultReport) -> Result<ResultAck> {
        self.transport
            .call(
                Method::POST,
                &format!("/v1/agent/{}/runs/{run_id}/result", self.endpoint_id),
                self.auth(),
                NO_QUERY,
                Some(report),
            )
            .await
    }
}
