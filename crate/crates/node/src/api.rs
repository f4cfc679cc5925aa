//! JSON-over-HTTP client API. Every response is `{ok, data}` or
//! `{ok: false, error: {code, message, current_version?}}`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::header::AUTHORIZATION;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dims_core::config::ActorConfig;
use dims_core::docstore::content_hash;
use dims_core::model::{AnnotationKind, ModuleKind, TaskStatus};
use dims_core::{NodeId, Timestamp};
use dims_federation::{Node, OpResult};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::runtime::NodeHandle;

#[derive(Clone)]
pub struct AppState {
    node: NodeHandle,
    tokens: Arc<HashMap<String, String>>,
}

impl AppState {
    pub fn new(node: NodeHandle, actors: &[ActorConfig]) -> Self {
        let tokens = actors.iter().map(|a| (a.token.clone(), a.name.clone())).collect();
        AppState {
            node,
            tokens: Arc::new(tokens),
        }
    }

    async fn run<T, F>(&self, f: F) -> Result<Data, ApiError>
    where
        T: Serialize,
        F: FnOnce(&mut Node, Timestamp) -> Result<T, ApiError> + Send + 'static,
        T: Send + 'static,
    {
        let out = self
            .node
            .call(f)
            .await
            .map_err(|_| ApiError::new("internal", "node stopped"))??;
        Ok(Data(serde_json::to_value(out).map_err(|e| ApiError::new("internal", e.to_string()))?))
    }
}

/// Authenticated actor name.
#[derive(Debug, Clone)]
pub struct Actor(pub String);

pub struct Data(pub Value);

impl IntoResponse for Data {
    fn into_response(self) -> Response {
        Json(json!({"ok": true, "data": self.0})).into_response()
    }
}

type ApiResult = Result<Data, ApiError>;

fn body<T: DeserializeOwned>(b: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    Ok(b?.0)
}

fn query<T: DeserializeOwned>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    Ok(q?.0)
}

fn b64(text: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(text)
        .map_err(|e| ApiError::new("invalid_request", format!("content_b64: {e}")))
}

fn node_id(text: &str) -> Result<NodeId, ApiError> {
    Ok(NodeId::parse(text)?)
}

fn timestamp(text: &str) -> Result<Timestamp, ApiError> {
    Ok(Timestamp::parse(text)?)
}

async fn auth(State(app): State<AppState>, mut req: Request, next: Next) -> Response {
    let token = req
        .headers()
        .get(AUTHORIZATION)
        .and_then(|h| h.to_str().ok())
        .and_then(|h| h.strip_prefix("Bearer "));
    match token.and_then(|t| app.tokens.get(t)) {
        Some(name) => {
            req.extensions_mut().insert(Actor(name.clone()));
            next.run(req).await
        }
        None => ApiError::new("unauthorized", "missing or unknown bearer token").into_response(),
    }
}

/// Every route that needs a token, as `(method, path)`.
pub const PROTECTED_ROUTES: &[(&str, &str)] = &[
    ("GET", "/api/workspaces"),
    ("POST", "/api/workspaces"),
    ("GET", "/api/workspaces/{slug}/modules"),
    ("POST", "/api/workspaces/{slug}/modules"),
    ("POST", "/api/workspaces/{slug}/members"),
    ("GET", "/api/objects"),
    ("POST", "/api/objects"),
    ("GET", "/api/objects/{id}"),
    ("POST", "/api/objects/{id}"),
    ("POST", "/api/objects/{id}/annotations"),
    ("POST", "/api/annotations/{id}/resolve"),
    ("GET", "/api/search"),
    ("GET", "/api/watches"),
    ("POST", "/api/watches"),
    ("GET", "/api/inbox"),
    ("POST", "/api/inbox/{id}/ack"),
    ("POST", "/api/documents"),
    ("GET", "/api/documents/{id}"),
    ("GET", "/api/documents/{id}/history"),
    ("POST", "/api/documents/{id}/push"),
    ("GET", "/api/locate"),
    ("GET", "/api/roster"),
    ("POST", "/api/messages"),
    ("POST", "/api/presence"),
    ("GET", "/api/events"),
    ("POST", "/api/events"),
    ("GET", "/api/tasks"),
    ("POST", "/api/tasks"),
    ("POST", "/api/tasks/{id}/status"),
];

pub fn router(app: AppState) -> Router {
    let protected = Router::new()
        .route("/api/workspaces", get(list_workspaces).post(create_workspace))
        .route("/api/workspaces/{slug}/modules", get(list_modules).post(create_module))
        .route("/api/workspaces/{slug}/members", post(add_member))
        .route("/api/objects", get(list_objects).post(create_object))
        .route("/api/objects/{id}", get(get_object).post(update_object))
        .route("/api/objects/{id}/annotations", post(add_annotation))
        .route("/api/annotations/{id}/resolve", post(resolve_action))
        .route("/api/search", get(search))
        .route("/api/watches", get(list_watches).post(create_watch))
        .route("/api/inbox", get(inbox))
        .route("/api/inbox/{id}/ack", post(ack))
        .route("/api/documents", post(create_document))
        .route("/api/documents/{id}", get(get_document))
        .route("/api/documents/{id}/history", get(history))
        .route("/api/documents/{id}/push", post(push))
        .route("/api/locate", get(locate))
        .route("/api/roster", get(roster))
        .route("/api/messages", post(send_message))
        .route("/api/presence", post(set_presence))
        .route("/api/events", get(list_events).post(create_event))
        .route("/api/tasks", get(list_tasks).post(create_task))
        .route("/api/tasks/{id}/status", post(set_task_status))
        .route_layer(middleware::from_fn_with_state(app.clone(), auth));
    Router::new()
        .route("/api/health", get(health))
        .merge(protected)
        .fallback(|| async { ApiError::new("not_found", "no such endpoint") })
        .with_state(app)
}

async fn health(State(app): State<AppState>) -> ApiResult {
    app.run(|node, _| {
        Ok(json!({
            "status": "ok",
            "node_id": node.id(),
            "available": node.is_available(),
        }))
    })
    .await
}

// ---- workspaces -----------------------------------------------------------

#[derive(Deserialize)]
struct NewWorkspace {
    slug: String,
    title: String,
}

async fn list_workspaces(State(app): State<AppState>) -> ApiResult {
    app.run(|node, _| Ok(node.store().state().workspaces().cloned().collect::<Vec<_>>()))
        .await
}

async fn create_workspace(
    State(app): State<AppState>,
    Extension(Actor(actor)): Extension<Actor>,
    b: Result<Json<NewWorkspace>, JsonRejection>,
) -> ApiResult {
    let b = body(b)?;
    app.run(move |node, now| Ok(node.store_mut().create_workspace(now, &b.slug, &b.title, &actor)?))
        .await
}

#[derive(Deserialize)]
struct NewMember {
    member: String,
}

async fn add_member(
    State(app): State<AppState>,
    Extension(Actor(actor)): Extension<Actor>,
    Path(slug): Path<String>,
    b: Result<Json<NewMember>, JsonRejection>,
) -> ApiResult {
    let b = body(b)?;
    app.run(move |node, now| {
        let ws = node.store().state().workspace_by_slug(&slug)?.id.clone();
        Ok(node.store_mut().add_member(now, &ws, &actor, &b.member)?)
    })
    .await
}

#[derive(Deserialize)]
struct NewModule {
    kind: ModuleKind,
    slug: String,
    #[serde(default)]
    shared: bool,
}

async fn list_modules(State(app): State<AppState>, Path(slug): Path<String>) -> ApiResult {
    app.run(move |node, _| {
        let state = node.store().state();
        let ws = state.workspace_by_slug(&slug)?;
        Ok(state.modules_of(&ws.id).cloned().collect::<Vec<_>>())
    })
    .await
}

async fn create_module(
    State(app): State<AppState>,
    Path(slug): Path<String>,
    b: Result<Json<NewModule>, JsonRejection>,
) -> ApiResult {
    let b = body(b)?;
    app.run(move |node, now| {
        let ws = node.store().state().workspace_by_slug(&slug)?.id.clone();
        Ok(node.store_mut().create_module(now, &ws, b.kind, &b.slug, b.shared)?)
    })
    .await
}

// ---- objects and annotations ---------------------------------------------

#[derive(Deserialize)]
struct ObjectFilter {
    module: Option<String>,
    workspace: Option<String>,
}

async fn list_objects(State(app): State<AppState>, q: Result<Query<ObjectFilter>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    app.run(move |node, _| {
        let state = node.store().state();
        let ws = match &q.workspace {
            Some(slug) => Some(state.workspace_by_slug(slug)?.slug.clone()),
            None => None,
        };
        if let Some(m) = &q.module {
            state.module(m)?;
        }
        let objects: Vec<_> = state
            .objects()
            .filter(|o| q.module.as_ref().is_none_or(|m| o.module_id == *m))
            .filter(|o| ws.as_ref().is_none_or(|w| o.object_ref.workspace == *w))
            .cloned()
            .collect();
        Ok(objects)
    })
    .await
}

#[derive(Deserialize)]
struct NewObject {
    module_id: String,
    title: String,
    #[serde(default)]
    body: String,
    #[serde(default)]
    context: BTreeMap<String, String>,
}

fn commit_json(c: dims_core::store::ObjectCommit) -> Value {
    json!({"object": c.object, "notifications": c.notifications.len()})
}

async fn create_object(
    State(app): State<AppState>,
    Extension(Actor(actor)): Extension<Actor>,
    b: Result<Json<NewObject>, JsonRejection>,
) -> ApiResult {
    let b = body(b)?;
    app.run(move |node, now| {
        let c = node
            .store_mut()
            .create_object(now, &b.module_id, &b.title, &b.body, b.context, &actor)?;
        Ok(commit_json(c))
    })
    .await
}

async fn get_object(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    app.run(move |node, _| Ok(node.store().state().object(&id)?.clone())).await
}

#[derive(Deserialize)]
struct ObjectUpdate {
    title: Option<String>,
    body: Option<String>,
    context: Option<BTreeMap<String, String>>,
}

async fn update_object(
    State(app): State<AppState>,
    Extension(Actor(actor)): Extension<Actor>,
    Path(id): Path<String>,
    b: Result<Json<ObjectUpdate>, JsonRejection>,
) -> ApiResult {
    let b = body(b)?;
    app.run(move |node, now| {
        let c = node.store_mut().update_object(
            now,
            &id,
            b.title.as_deref(),
            b.body.as_deref(),
            b.context,
            &actor,
        )?;
        Ok(commit_json(c))
    })
    .await
}

#[derive(Deserialize)]
struct NewAnnotation {
    kind: AnnotationKind,
    text: String,
    assignee: Option<String>,
}

async fn add_annotation(
    State(app): State<AppState>,
    Extension(Actor(actor)): Extension<Actor>,
    Path(id): Path<String>,
    b: Result<Json<NewAnnotation>, JsonRejection>,
) -> ApiResult {
    let b = body(b)?;
    app.run(move |node, now| {
        Ok(node
            .store_mut()
            .add_annotation(now, &id, b.kind, &b.text, &actor, b.assignee.as_deref())?)
    })
    .await
}

async fn resolve_action(
    State(app): State<AppState>,
    Extension(Actor(actor)): Extension<Actor>,
    Path(id): Path<String>,
) -> ApiResult {
    app.run(move |node, now| {
        let object = node.store().state().annotation(&id)?.0.id.clone();
        Ok(node.store_mut().resolve_action(now, &object, &id, &actor)?)
    })
    .await
}

// ---- search and watches ---------------------------------------------------

#[derive(Deserialize)]
struct SearchParams {
    q: String,
    #[serde(default)]
    scope: Scope,
    #[serde(default = "yes")]
    include_local: bool,
    timeout_ms: Option<u64>,
}

fn yes() -> bool {
    true
}

#[derive(Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Scope {
    #[default]
    Local,
    Federated,
}

async fn search(State(app): State<AppState>, q: Result<Query<SearchParams>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    if q.scope == Scope::Local {
        return app
            .run(move |node, _| {
                let hits = node.store().state().search(&q.q)?;
                Ok(json!({"query": q.q, "results": hits}))
            })
            .await;
    }
    let result = app
        .node
        .op(move |node, now| node.federated_search(&q.q, q.include_local, q.timeout_ms, now))
        .await
        .map_err(|_| ApiError::new("internal", "node stopped"))??;
    match result {
        OpResult::Search(rs) => Ok(Data(json!(rs))),
        _ => Err(ApiError::new("internal", "unexpected result")),
    }
}

#[derive(Deserialize)]
struct NewWatch {
    query: String,
}

fn watch_json(w: &dims_core::query::WatchQuery) -> Value {
    json!({"id": w.id, "owner": w.owner, "query": w.raw_query, "created_at": w.created_at})
}

async fn list_watches(State(app): State<AppState>, Extension(Actor(actor)): Extension<Actor>) -> ApiResult {
    app.run(move |node, _| {
        Ok(node
            .store()
            .state()
            .watches()
            .filter(|w| w.owner == actor)
            .map(watch_json)
            .collect::<Vec<_>>())
    })
    .await
}

async fn create_watch(
    State(app): State<AppState>,
    Extension(Actor(actor)): Extension<Actor>,
    b: Result<Json<NewWatch>, JsonRejection>,
) -> ApiResult {
    let b = body(b)?;
    app.run(move |node, now| Ok(watch_json(&node.store_mut().register_watch(now, &actor, &b.query)?)))
        .await
}

// ---- inbox ------------------------------------------------------------------

async fn inbox(State(app): State<AppState>, Extension(Actor(actor)): Extension<Actor>) -> ApiResult {
    app.run(move |node, _| {
        let inbox = node.store().state().inbox();
        let entries: Vec<_> = inbox.for_actor(&actor).cloned().collect();
        Ok(json!({"entries": entries, "unacknowledged": inbox.unacknowledged(&actor)}))
    })
    .await
}

async fn ack(State(app): State<AppState>, Extension(Actor(actor)): Extension<Actor>, Path(id): Path<String>) -> ApiResult {
    app.run(move |node, now| {
        let entry = node
            .store()
            .state()
            .inbox()
            .get(&id)
            .filter(|e| e.owner == actor || e.owner == "*")
            .cloned();
        if entry.is_none() {
            return Err(dims_core::Error::UnknownInboxEntry(id).into());
        }
        Ok(node.store_mut().ack_inbox(now, &id)?)
    })
    .await
}

// ---- documents --------------------------------------------------------------

#[derive(Deserialize)]
struct NewDocument {
    module_id: String,
    name: String,
    content_b64: String,
}

async fn create_document(
    State(app): State<AppState>,
    Extension(Actor(actor)): Extension<Actor>,
    b: Result<Json<NewDocument>, JsonRejection>,
) -> ApiResult {
    let b = body(b)?;
    let content = b64(&b.content_b64)?;
    app.run(move |node, now| {
        let (doc, commit) = node
            .store_mut()
            .create_document(now, &b.module_id, &b.name, content, &actor)?;
        Ok(json!({"document": doc, "object": commit.object}))
    })
    .await
}

#[derive(Deserialize)]
struct VersionParams {
    version: Option<u64>,
    origin: Option<String>,
}

#[derive(Serialize)]
struct VersionView {
    origin: NodeId,
    doc_id: String,
    name: String,
    version: u64,
    current_version: u64,
    author: String,
    content_b64: String,
    content_hash: String,
}

async fn get_document(
    State(app): State<AppState>,
    Extension(Actor(actor)): Extension<Actor>,
    Path(id): Path<String>,
    q: Result<Query<VersionParams>, QueryRejection>,
) -> ApiResult {
    let q = query(q)?;
    let origin = q.origin.as_deref().map(node_id).transpose()?;
    if let Some(origin) = origin.filter(|o| o != app.node.node_id()) {
        let result = app
            .node
            .op(move |node, now| node.remote_fetch(&origin, &id, q.version, &actor, now))
            .await
            .map_err(|_| ApiError::new("internal", "node stopped"))??;
        let OpResult::Fetch(Ok(f)) = result else {
            return Err(ApiError::new("internal", "unexpected result"));
        };
        return Ok(Data(json!(VersionView {
            origin: f.origin,
            doc_id: f.doc_id,
            name: f.name,
            version: f.version,
            current_version: f.current_version,
            author: f.author,
            content_b64: B64.encode(&f.content),
            content_hash: f.content_hash,
        })));
    }
    app.run(move |node, now| {
        let doc = node.store().state().document(&id)?.clone();
        let v = node.store_mut().get_version(now, &id, q.version, None)?;
        debug_assert_eq!(content_hash(&v.content), v.content_hash);
        Ok(VersionView {
            origin: doc.origin_node,
            doc_id: doc.doc_id,
            name: doc.name,
            version: v.version,
            current_version: doc.current_version,
            author: v.author,
            content_b64: B64.encode(&v.content),
            content_hash: v.content_hash,
        })
    })
    .await
}

async fn history(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    app.run(move |node, _| Ok(node.store().state().history(&id)?)).await
}

#[derive(Deserialize)]
struct PushBody {
    base_version: u64,
    content_b64: String,
    origin: Option<String>,
}

async fn push(
    State(app): State<AppState>,
    Extension(Actor(actor)): Extension<Actor>,
    Path(id): Path<String>,
    b: Result<Json<PushBody>, JsonRejection>,
) -> ApiResult {
    let b = body(b)?;
    let content = b64(&b.content_b64)?;
    let origin = b.origin.as_deref().map(node_id).transpose()?;
    if let Some(origin) = origin.filter(|o| o != app.node.node_id()) {
        let result = app
            .node
            .op(move |node, now| node.remote_push(&origin, &id, b.base_version, content, &actor, now))
            .await
            .map_err(|_| ApiError::new("internal", "node stopped"))??;
        let OpResult::Push(Ok(p)) = result else {
            return Err(ApiError::new("internal", "unexpected result"));
        };
        return Ok(Data(json!(p)));
    }
    app.run(move |node, now| {
        let me = node.id().clone();
        let (doc, _) = node
            .store_mut()
            .push_version(now, &me, &id, b.base_version, content, &actor, &me)?;
        Ok(json!({"origin": doc.origin_node, "doc_id": doc.doc_id, "current_version": doc.current_version}))
    })
    .await
}

#[derive(Deserialize)]
struct LocateParams {
    selector: String,
    timeout_ms: Option<u64>,
}

async fn locate(State(app): State<AppState>, q: Result<Query<LocateParams>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    let result = app
        .node
        .op(move |node, now| node.locate(&q.selector, q.timeout_ms, now))
        .await
        .map_err(|_| ApiError::new("internal", "node stopped"))??;
    match result {
        OpResult::Locate(l) => Ok(Data(json!(l))),
        _ => Err(ApiError::new("internal", "unexpected result")),
    }
}

// ---- roster, messages, presence -------------------------------------------

async fn roster(State(app): State<AppState>) -> ApiResult {
    app.run(|node, _| Ok(node.roster())).await
}

#[derive(Deserialize)]
struct NewMessage {
    to_node: String,
    to_actor: Option<String>,
    body: String,
}

async fn send_message(
    State(app): State<AppState>,
    Extension(Actor(actor)): Extension<Actor>,
    b: Result<Json<NewMessage>, JsonRejection>,
) -> ApiResult {
    let b = body(b)?;
    let to = node_id(&b.to_node)?;
    app.run(move |node, now| {
        let d = node.send_message(&to, Some(&actor), b.to_actor.as_deref(), &b.body, now)?;
        Ok(json!({"delivery": d}))
    })
    .await
}

#[derive(Deserialize)]
struct PresenceBody {
    available: bool,
}

async fn set_presence(State(app): State<AppState>, b: Result<Json<PresenceBody>, JsonRejection>) -> ApiResult {
    let b = body(b)?;
    app.run(move |node, now| {
        node.set_presence(b.available, now);
        Ok(json!({"available": node.is_available()}))
    })
    .await
}

// ---- planning and projects -------------------------------------------------

#[derive(Deserialize)]
struct EventRange {
    workspace: String,
    start: String,
    end: String,
}

async fn list_events(State(app): State<AppState>, q: Result<Query<EventRange>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    let (start, end) = (timestamp(&q.start)?, timestamp(&q.end)?);
    app.run(move |node, _| {
        let state = node.store().state();
        let ws = state.workspace_by_slug(&q.workspace)?.id.clone();
        Ok(state.list_events(&ws, start, end)?)
    })
    .await
}

#[derive(Deserialize)]
struct NewEvent {
    workspace: String,
    title: String,
    start: String,
    end: String,
    #[serde(default)]
    participants: Vec<String>,
}

async fn create_event(State(app): State<AppState>, b: Result<Json<NewEvent>, JsonRejection>) -> ApiResult {
    let b = body(b)?;
    let (start, end) = (timestamp(&b.start)?, timestamp(&b.end)?);
    app.run(move |node, now| {
        let ws = node.store().state().workspace_by_slug(&b.workspace)?.id.clone();
        Ok(node
            .store_mut()
            .create_event(now, &ws, &b.title, start, end, &b.participants)?)
    })
    .await
}

#[derive(Deserialize)]
struct TaskFilter {
    project: Option<String>,
}

async fn list_tasks(State(app): State<AppState>, q: Result<Query<TaskFilter>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    app.run(move |node, _| {
        let tasks: Vec<_> = node
            .store()
            .state()
            .tasks()
            .filter(|t| q.project.as_ref().is_none_or(|p| t.project_id == *p))
            .cloned()
            .collect();
        Ok(tasks)
    })
    .await
}

#[derive(Deserialize)]
struct NewTask {
    project_id: String,
    title: String,
    assignee: String,
    due: Option<String>,
}

async fn create_task(State(app): State<AppState>, b: Result<Json<NewTask>, JsonRejection>) -> ApiResult {
    let b = body(b)?;
    app.run(move |node, now| {
        Ok(node
            .store_mut()
            .create_task(now, &b.project_id, &b.title, &b.assignee, b.due.as_deref())?)
    })
    .await
}

#[derive(Deserialize)]
struct StatusBody {
    status: TaskStatus,
}

async fn set_task_status(
    State(app): State<AppState>,
    Path(id): Path<String>,
    b: Result<Json<StatusBody>, JsonRejection>,
) -> ApiResult {
    let b = body(b)?;
    app.run(move |node, now| Ok(node.store_mut().set_task_status(now, &id, b.status)?))
        .await
}
