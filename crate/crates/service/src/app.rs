use std::collections::HashMap;
use std::future::Future;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pathwarden_core::audit::{AuditRecord, ChainStatus, FailCause};
use pathwarden_core::canonical::digest_of;
use pathwarden_core::decision::Outcome;
use pathwarden_core::engine::{fail_reason, Admission, ApprovalRequest, Decision, Engine, EngineConfig, EngineError};
use pathwarden_core::model::{AgentId, AgentRecord, Payload, ProposedAction, RequestId, TaskId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::auth::{Caller, Scope, Tokens};
use crate::error::ApiError;
use crate::idempotency::{IdempotencyStore, StoredResponse};
use crate::wire::*;

/// Header set on responses served from the idempotency store.
pub const REPLAY_HEADER: &str = "idempotent-replay";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub tokens: Tokens,
    /// How long a request waits for the engine before failing.
    pub request_timeout: Duration,
    /// Upper bound on `wait_ms` of the approval feed.
    pub max_long_poll: Duration,
}

impl ServiceConfig {
    /// The engine's evaluation timeout plus a short grace period.
    pub fn for_engine(engine: &EngineConfig, tokens: Tokens) -> Self {
        Self {
            tokens,
            request_timeout: Duration::from_millis(engine.evaluation_timeout_ms + 250),
            max_long_poll: Duration::from_secs(30),
        }
    }
}

pub struct AppState {
    engine: Arc<Engine>,
    config: ServiceConfig,
    idempotency: IdempotencyStore,
    available: AtomicBool,
    changes: watch::Sender<u64>,
    /// Index of the next step per task, as last reported to a client.
    next_step: Mutex<HashMap<TaskId, u64>>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            engine,
            config,
            idempotency: IdempotencyStore::default(),
            available: AtomicBool::new(true),
            changes: watch::channel(0).0,
            next_step: Mutex::new(HashMap::new()),
        })
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn idempotency(&self) -> &IdempotencyStore {
        &self.idempotency
    }

    /// Marks the engine as down (or back up). While down, mutating requests
    /// answer 503 without side effects and proposals fail closed.
    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
    }

    pub fn is_available(&self) -> bool {
        self.available.load(Ordering::SeqCst)
    }

    fn bump(&self) {
        self.changes.send_modify(|v| *v += 1);
    }

    fn remember_step(&self, task: &TaskId, next: u64) {
        self.next_step.lock().unwrap_or_else(|e| e.into_inner()).insert(task.clone(), next);
    }

    fn known_step(&self, task: &TaskId) -> u64 {
        self.next_step.lock().unwrap_or_else(|e| e.into_inner()).get(task).copied().unwrap_or(0)
    }

    async fn blocking<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
    {
        if !self.is_available() {
            return Err(ApiError::unavailable("engine is unavailable"));
        }
        let engine = self.engine.clone();
        match tokio::time::timeout(self.config.request_timeout, tokio::task::spawn_blocking(move || f(&engine))).await {
            Err(_) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "engine-timeout",
                format!("no engine response within {:?}", self.config.request_timeout),
            )),
            Ok(Err(join)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "engine-panic", join.to_string())),
            Ok(Ok(r)) => r.map_err(ApiError::from),
        }
    }

    fn summary(&self, req: &ApprovalRequest, content: bool) -> ApprovalSummary {
        let agent = self.engine.agent(&req.agent_id);
        ApprovalSummary::new(
            req,
            agent.as_ref().map(|a| a.purpose.clone()),
            agent.and_then(|a| a.risk_class),
            content,
        )
    }
}

/// A successful handler result before it is stored.
struct Reply {
    status: StatusCode,
    body: serde_json::Value,
}

impl Reply {
    fn ok<T: Serialize>(body: &T) -> Result<Self, ApiError> {
        Self::with(StatusCode::OK, body)
    }

    fn with<T: Serialize>(status: StatusCode, body: &T) -> Result<Self, ApiError> {
        let body = serde_json::to_value(body)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "serialization", e.to_string()))?;
        Ok(Self { status, body })
    }
}

fn json_response(status: StatusCode, body: Bytes, replay: bool) -> Response {
    let mut r = (status, body).into_response();
    r.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    if replay {
        r.headers_mut().insert(REPLAY_HEADER, HeaderValue::from_static("true"));
    }
    r
}

fn authorize(state: &AppState, headers: &HeaderMap, scope: Option<Scope>) -> Result<Caller, ApiError> {
    let caller = state.config.tokens.caller(headers)?;
    if let Some(s) = scope {
        caller.require(s)?;
    }
    Ok(caller)
}

const RUNTIME: Option<Scope> = Some(Scope::AgentRuntime);

/// Shared path of every mutating endpoint: auth, envelope checks, then the
/// operation at most once per (org, request id).
async fn mutate<P, F, Fut>(
    state: Arc<AppState>,
    headers: HeaderMap,
    route: String,
    body: Bytes,
    scope: Option<Scope>,
    op: F,
) -> Response
where
    P: DeserializeOwned,
    F: FnOnce(Arc<AppState>, P) -> Fut,
    Fut: Future<Output = Result<Reply, ApiError>>,
{
    let prepared = (|| {
        authorize(&state, &headers, scope)?;
        let env: WireEnvelope = serde_json::from_slice(&body)
            .map_err(|e| ApiError::bad_request("malformed-body", format!("expected a request envelope: {e}")))?;
        if env.api_version != API_VERSION {
            return Err(ApiError::bad_request("unsupported-api-version", format!("api_version {:?}", env.api_version)));
        }
        if env.request_id.trim().is_empty() {
            return Err(ApiError::bad_request("missing-request-id", "request_id is required"));
        }
        if env.org_id != state.engine.config().org_id {
            return Err(ApiError::bad_request("wrong-org", format!("org_id {:?} is not served here", env.org_id)));
        }
        let fingerprint = digest_of(&(&route, &env.payload))
            .map_err(|e| ApiError::bad_request("malformed-body", e.to_string()))?;
        let payload: P = serde_json::from_value(env.payload)
            .map_err(|e| ApiError::bad_request("malformed-payload", e.to_string()))?;
        Ok((env.org_id, env.request_id, fingerprint, payload))
    })();
    let (org, request_id, fingerprint, payload) = match prepared {
        Ok(p) => p,
        Err(e) => return e.into_response(),
    };

    let cell = state.idempotency.slot(&org, &request_id);
    let mut fresh = false;
    let stored = cell
        .get_or_init(|| async {
            fresh = true;
            let (status, value) = match op(state.clone(), payload).await {
                Ok(r) => (r.status, r.body),
                Err(e) => (e.status, serde_json::to_value(e.body()).unwrap_or_default()),
            };
            let body = Bytes::from(serde_json::to_vec(&value).unwrap_or_default());
            StoredResponse { status, body, fingerprint }
        })
        .await
        .clone();

    if stored.fingerprint != fingerprint {
        return ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "idempotency-key-reused",
            format!("request_id {request_id:?} was used for a different request"),
        )
        .into_response();
    }
    if fresh {
        if stored.status.is_server_error() {
            state.idempotency.forget(&org, &request_id, &cell);
        }
        state.bump();
    }
    json_response(stored.status, stored.body, !fresh)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/agents", post(register))
        .route("/v1/agents/{agent}/definition", post(report_definition))
        .route("/v1/tasks", post(admit))
        .route("/v1/admissions/{ticket}", get(admission))
        .route("/v1/tasks/{task}/propose", post(propose))
        .route("/v1/tasks/{task}/output", post(output))
        .route("/v1/tasks/{task}/delegate", post(delegate))
        .route("/v1/tasks/{task}/close", post(close))
        .route("/v1/approvals", get(approvals))
        .route("/v1/approvals/{id}", get(approval))
        .route("/v1/approvals/{id}/resolve", post(resolve))
        .route("/v1/audit", get(audit))
        .route("/v1/sigma", get(sigma))
        .route("/v1/fleet", get(fleet))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "available": state.is_available(),
        "policy_set_version": state.engine.policies().version,
        "api_version": API_VERSION,
    }))
}

async fn register(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    mutate(state, headers, "/v1/agents".into(), body, RUNTIME, |state, record: AgentRecord| async move {
        let outcome = state.blocking(move |e| e.register_agent(record)).await?;
        Reply::ok(&outcome)
    })
    .await
}

async fn report_definition(
    State(state): State<Arc<AppState>>,
    Path(agent): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let route = format!("/v1/agents/{agent}/definition");
    mutate(state, headers, route, body, RUNTIME, |state, req: DefinitionRequest| async move {
        let agent_id = AgentId::new(agent);
        let id = agent_id.clone();
        let hash = state.blocking(move |e| e.report_running_definition(&id, &req.definition)).await?;
        Reply::ok(&DefinitionResponse { agent_id, running_definition_hash: hash })
    })
    .await
}

async fn admit(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    mutate(state, headers, "/v1/tasks".into(), body, RUNTIME, |state, req: AdmitRequest| async move {
        let admission = state.blocking(move |e| e.admit_task(&req.agent_id)).await?;
        let status = match admission {
            Admission::Admitted { .. } => StatusCode::CREATED,
            Admission::Deferred { .. } => StatusCode::ACCEPTED,
        };
        Reply::with(status, &admission)
    })
    .await
}

async fn admission(State(state): State<Arc<AppState>>, Path(ticket): Path<String>, headers: HeaderMap) -> Response {
    let r = async {
        authorize(&state, &headers, None)?;
        let status = state.blocking(move |e| e.ticket_status(&ticket)).await?;
        Ok::<_, ApiError>(Json(status))
    };
    r.await.into_response()
}

/// Block decision produced by the service itself when the engine did not answer.
fn service_block(state: &AppState, task_id: &TaskId, cause: FailCause) -> Decision {
    Decision {
        task_id: task_id.clone(),
        step_index: state.known_step(task_id),
        outcome: Outcome::Block,
        v_i: 1.0,
        per_policy: Vec::new(),
        reason: fail_reason(&cause),
        fail_closed: Some(cause),
        approval_request: None,
        approval_granted: None,
        sigma_version: state.engine.sigma().version,
        audit_sequence_no: None,
    }
}

async fn propose(
    State(state): State<Arc<AppState>>,
    Path(task): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let route = format!("/v1/tasks/{task}/propose");
    mutate(state, headers, route, body, RUNTIME, |state, proposed: ProposedAction| async move {
        let task_id = TaskId::new(task);
        let started = Instant::now();
        let id = task_id.clone();
        let decision = match state.blocking(move |e| e.evaluate_step(&id, proposed)).await {
            Ok(d) => d,
            Err(e) if e.status.is_server_error() => {
                tracing::warn!(task = %task_id, error = %e, "proposal failed closed in the service");
                let message = format!("{} after {} ms: {}", e.code, started.elapsed().as_millis(), e.message);
                service_block(&state, &task_id, FailCause::Unavailable { message })
            }
            Err(e) => return Err(e),
        };
        state.remember_step(&task_id, decision.step_index);
        let approval_location = decision.approval_request.as_ref().map(|id| format!("/v1/approvals/{id}"));
        Reply::ok(&ProposeResponse { decision, approval_location })
    })
    .await
}

async fn output(State(state): State<Arc<AppState>>, Path(task): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let route = format!("/v1/tasks/{task}/output");
    mutate(state, headers, route, body, RUNTIME, |state, output: Payload| async move {
        let task_id = TaskId::new(task);
        let id = task_id.clone();
        let receipt = state.blocking(move |e| e.report_step_output(&id, output)).await?;
        state.remember_step(&task_id, receipt.step_index + 1);
        Reply::ok(&receipt)
    })
    .await
}

async fn delegate(State(state): State<Arc<AppState>>, Path(task): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let route = format!("/v1/tasks/{task}/delegate");
    mutate(state, headers, route, body, RUNTIME, |state, req: DelegateRequest| async move {
        let parent = TaskId::new(task);
        let child = state.blocking(move |e| e.delegate(&parent, &req.agent_id)).await?;
        Reply::with(StatusCode::CREATED, &DelegateResponse { child_task_id: child })
    })
    .await
}

async fn close(State(state): State<Arc<AppState>>, Path(task): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let route = format!("/v1/tasks/{task}/close");
    mutate(state, headers, route, body, RUNTIME, |state, req: CloseRequest| async move {
        let task_id = TaskId::new(task);
        let closed = state.blocking(move |e| e.close_task(&task_id, req.terminal)).await?;
        Reply::ok(&closed)
    })
    .await
}

#[derive(Debug, Deserialize)]
struct FeedQuery {
    /// Return once the feed version differs from this one.
    since: Option<u64>,
    wait_ms: Option<u64>,
}

async fn approvals(State(state): State<Arc<AppState>>, Query(q): Query<FeedQuery>, headers: HeaderMap) -> Response {
    let r = async {
        let caller = authorize(&state, &headers, None)?;
        let mut rx = state.changes.subscribe();
        if let (Some(since), Some(wait)) = (q.since, q.wait_ms) {
            let wait = Duration::from_millis(wait).min(state.config.max_long_poll);
            let _ = tokio::time::timeout(wait, rx.wait_for(|v| *v != since)).await;
        }
        let version = *rx.borrow();
        let content = caller.has(Scope::AuditorContent);
        let pending = state
            .blocking(|e| {
                e.expire_approvals();
                Ok(e.pending_approvals())
            })
            .await?;
        let mut pending: Vec<ApprovalSummary> = pending.iter().map(|r| state.summary(r, content)).collect();
        pending.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.request_id.cmp(&b.request_id)));
        Ok::<_, ApiError>(Json(ApprovalFeed { version, pending }))
    };
    r.await.into_response()
}

async fn approval(State(state): State<Arc<AppState>>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    let r = async {
        let caller = authorize(&state, &headers, None)?;
        let request_id = RequestId::new(id);
        let rid = request_id.clone();
        let req = state
            .blocking(move |e| e.approval(&rid).ok_or(EngineError::NotFound { kind: "approval", id: rid.to_string() }))
            .await?;
        Ok::<_, ApiError>(Json(state.summary(&req, caller.has(Scope::AuditorContent))))
    };
    r.await.into_response()
}

/// Reviewers resolve approvals, so any valid token may; envelope and
/// idempotency rules are those of the runtime calls.
async fn resolve(State(state): State<Arc<AppState>>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let route = format!("/v1/approvals/{id}/resolve");
    let content = match authorize(&state, &headers, None) {
        Ok(c) => c.has(Scope::AuditorContent),
        Err(e) => return e.into_response(),
    };
    mutate(state, headers, route, body, None, move |state, req: ResolveRequest| async move {
        let request_id = RequestId::new(id);
        if let Some(note) = &req.note {
            tracing::info!(request = %request_id, resolver = %req.resolver, note, "approval note");
        }
        let resolution =
            state.blocking(move |e| e.resolve_approval(&request_id, req.verdict, &req.resolver)).await?;
        if let Some(d) = &resolution.decision {
            state.remember_step(&d.task_id, d.step_index);
        }
        Reply::ok(&ResolveResponse {
            request: state.summary(&resolution.request, content),
            decision: resolution.decision,
            closed: resolution.closed,
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
struct AuditQuery {
    task: Option<String>,
}

async fn audit(State(state): State<Arc<AppState>>, Query(q): Query<AuditQuery>, headers: HeaderMap) -> Response {
    let r = async {
        let caller = authorize(&state, &headers, None)?;
        let content = caller.has(Scope::AuditorContent);
        let task = q.task.map(TaskId::new);
        let (head, valid, records) = state
            .blocking(move |e| {
                Ok(e.with_trail(|t| {
                    let pick = |r: &AuditRecord| if content { r.clone() } else { r.metadata_only() };
                    let records: Vec<AuditRecord> = match &task {
                        Some(task) => t.for_task(task).map(pick).collect(),
                        None => t.records().iter().map(pick).collect(),
                    };
                    (t.head(), t.verify() == ChainStatus::Ok, records)
                }))
            })
            .await?;
        let records = records
            .iter()
            .map(serde_json::to_value)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "serialization", e.to_string()))?;
        Ok::<_, ApiError>(Json(AuditResponse { head, chain_valid: valid, content_included: content, records }))
    };
    r.await.into_response()
}

async fn sigma(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Response {
    match authorize(&state, &headers, None) {
        Ok(_) => Json(state.engine.sigma().export()).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn fleet(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Response {
    let r = async {
        authorize(&state, &headers, None)?;
        let report = state.blocking(|e| Ok(e.fleet_report())).await?;
        Ok::<_, ApiError>(Json(report))
    };
    r.await.into_response()
}
