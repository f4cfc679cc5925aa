use std::collections::BTreeSet;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dims_core::config::{ActorConfig, PeerConfig, Timeouts};
use dims_core::query::ParseError;
use dims_core::{Error, ErrorKind, NodeId, Store};
use dims_federation::stanza::codes;
use dims_federation::{FedError, Node};
use dims_node::api::PROTECTED_ROUTES;
use dims_node::{router, runtime, status_for, ApiError, AppState, STATUS_TABLE};
use serde_json::{json, Value};
use tower::ServiceExt;

fn nid(s: &str) -> NodeId {
    NodeId::parse(s).unwrap()
}

fn app(peers: &[PeerConfig]) -> Router {
    let timeouts = Timeouts {
        search_ms: 300,
        ..Timeouts::default()
    };
    let node = Node::new(Store::in_memory(nid("alpha@dims.test")), peers, timeouts, 1);
    let handle = runtime::spawn(node);
    let actors = [
        ActorConfig { name: "alice".into(), token: "tok-alice".into() },
        ActorConfig { name: "bob".into(), token: "tok-bob".into() },
    ];
    router(AppState::new(handle, &actors))
}

async fn call(app: &Router, method: &str, path: &str, auth: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(path);
    if let Some(a) = auth {
        req = req.header("authorization", a);
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), 1 << 24).await.unwrap();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn as_alice(app: &Router, method: &str, path: &str, body: Option<Value>) -> Value {
    let (status, v) = call(app, method, path, Some("Bearer tok-alice"), body).await;
    assert_eq!(status, StatusCode::OK, "{method} {path}: {v}");
    assert_eq!(v["ok"], true);
    v["data"].clone()
}

#[tokio::test]
async fn every_endpoint_but_health_needs_a_token() {
    let app = app(&[]);
    for (method, path) in PROTECTED_ROUTES {
        let path = path.replace("{slug}", "x").replace("{id}", "x");
        for auth in [None, Some("Bearer nope"), Some("tok-alice"), Some("Basic tok-alice")] {
            let (status, v) = call(&app, method, &path, auth, Some(json!({}))).await;
            assert_eq!(status, StatusCode::UNAUTHORIZED, "{method} {path} with {auth:?}");
            assert_eq!(v["ok"], false);
            assert_eq!(v["error"]["code"], "unauthorized");
        }
        // and the route is real
        let (_, v) = call(&app, method, &path, Some("Bearer tok-bob"), Some(json!({}))).await;
        assert_ne!(v["error"]["code"], "not_found", "{method} {path} is not routed");
        assert_ne!(v["error"]["code"], "unauthorized");
    }
    let (status, v) = call(&app, "GET", "/api/health", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["data"]["node_id"], "alpha@dims.test");
    let (status, v) = call(&app, "GET", "/api/nowhere", Some("Bearer tok-bob"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "not_found");
}

fn core_errors() -> Vec<Error> {
    let s = || "x".to_string();
    vec![
        Error::DuplicateSlug(s()),
        Error::InvalidSlug(s()),
        Error::UnknownWorkspace(s()),
        Error::UnknownModule(s()),
        Error::NotAMember { actor: s(), workspace: s() },
        Error::UnknownObject(s()),
        Error::InvalidContext,
        Error::ActionWithoutAssignee,
        Error::InformationWithAssignee,
        Error::UnknownAnnotation(s()),
        Error::NotAnAction(s()),
        Error::AlreadyDone(s()),
        Error::InvalidRange,
        Error::IllegalTransition { from: s(), to: s() },
        Error::UnknownTask(s()),
        Error::Query(ParseError::EmptyQuery),
        Error::Query(ParseError::UnbalancedParenthesis { position: 0 }),
        Error::Query(ParseError::DanglingOperator { position: 0 }),
        Error::Query(ParseError::EmptyGroup { position: 0 }),
        Error::Query(ParseError::UnterminatedPhrase { position: 0 }),
        Error::UnknownWatch(s()),
        Error::UnknownDocument(s()),
        Error::UnknownVersion { doc_id: s(), version: 2 },
        Error::CorruptContent { doc_id: s(), version: 1 },
        Error::VersionConflict { current_version: 2 },
        Error::NotOrigin(s()),
        Error::WrongModuleKind { module: s(), kind: s() },
        Error::UnknownInboxEntry(s()),
        Error::InvalidNodeId(s()),
        Error::InvalidObjectRef(s()),
        Error::InvalidTimestamp(s()),
        Error::ConfigNotFound(s()),
        Error::ConfigInvalid { path: s(), message: s() },
        Error::JournalCorrupt { line: 1, message: s() },
        Error::Io(s()),
        Error::Poisoned,
    ]
}

fn fed_errors() -> Vec<FedError> {
    let n = nid("beta@dims.test");
    let mut v = vec![
        FedError::Query(ParseError::EmptyQuery),
        FedError::EmptySelector,
        FedError::UnknownPeer(n.clone()),
        FedError::PeerUnavailable(n.clone()),
        FedError::RequestTimeout(n.clone()),
        FedError::TransferCorrupt { doc_id: "d".into() },
        FedError::QueueFull(n.clone()),
        FedError::Store(Error::UnknownDocument("d".into())),
    ];
    for code in [
        codes::UNSUPPORTED,
        codes::MALFORMED,
        codes::TIMEOUT,
        codes::CONFLICT,
        codes::NOT_ORIGIN,
        codes::UNKNOWN_DOCUMENT,
        codes::UNKNOWN_VERSION,
        codes::CORRUPT,
        codes::UNAVAILABLE,
        codes::INTERNAL,
    ] {
        v.push(FedError::Remote {
            peer: n.clone(),
            code: code.into(),
            text: String::new(),
            current_version: (code == codes::CONFLICT).then_some(3),
        });
    }
    v
}

#[test]
fn every_domain_error_has_exactly_one_status() {
    let mut seen = BTreeSet::new();
    for (code, _) in STATUS_TABLE {
        assert!(seen.insert(*code), "{code} listed twice");
    }

    for e in core_errors() {
        let api = ApiError::from(e.clone());
        assert!(status_for(&api.code).is_some(), "{} has no status", api.code);
        let expected = match e.kind() {
            ErrorKind::Validation => 400,
            ErrorKind::NotFound => 404,
            ErrorKind::Conflict => 409,
            ErrorKind::Internal => 500,
        };
        assert_eq!(api.status().as_u16(), expected, "{}", api.code);
    }
    let conflict = ApiError::from(Error::VersionConflict { current_version: 2 });
    assert_eq!(
        conflict.body(),
        json!({"ok": false, "error": {"code": "conflict", "message": conflict.message, "current_version": 2}})
    );

    let fed: Vec<(String, u16)> = fed_errors()
        .into_iter()
        .map(|e| {
            let api = ApiError::from(e);
            assert!(status_for(&api.code).is_some(), "{} has no status", api.code);
            (api.code.clone(), api.status().as_u16())
        })
        .collect();
    let expect = |code: &str| fed.iter().find(|(c, _)| c == code).unwrap().1;
    assert_eq!(expect("peer_unavailable"), 503);
    assert_eq!(expect("request_timeout"), 504);
    assert_eq!(expect("transfer_corrupt"), 502);
    assert_eq!(expect("unknown_peer"), 404);
    assert_eq!(expect("conflict"), 409);
    assert_eq!(expect("empty_selector"), 400);

    // a code means the same status whether it arose locally or remotely
    for (code, status) in &fed {
        if let Some(local) = core_errors().into_iter().map(ApiError::from).find(|a| a.code == *code) {
            assert_eq!(local.status().as_u16(), *status, "{code}");
        }
    }
    let remote_conflict = ApiError::from(FedError::Remote {
        peer: nid("beta@dims.test"),
        code: "conflict".into(),
        text: String::new(),
        current_version: Some(3),
    });
    assert_eq!(remote_conflict.current_version, Some(3));
}

#[tokio::test]
async fn workspace_objects_annotations_and_inbox() {
    let app = app(&[]);
    let ws = as_alice(&app, "POST", "/api/workspaces", Some(json!({"slug": "sales", "title": "Sales"}))).await;
    assert_eq!(ws["slug"], "sales");
    let (status, v) = call(&app, "POST", "/api/workspaces", Some("Bearer tok-alice"), Some(json!({"slug": "sales", "title": "again"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "duplicate_slug");
    let (status, v) = call(&app, "POST", "/api/workspaces", Some("Bearer tok-alice"), Some(json!({"slug": "Sales Team!", "title": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "invalid_slug");

    as_alice(&app, "POST", "/api/workspaces/sales/members", Some(json!({"member": "bob"}))).await;
    let m = as_alice(&app, "POST", "/api/workspaces/sales/modules", Some(json!({"kind": "CONTENT", "slug": "notes"}))).await;
    let module = m["id"].as_str().unwrap().to_string();
    let mods = as_alice(&app, "GET", "/api/workspaces/sales/modules", None).await;
    assert_eq!(mods.as_array().unwrap().len(), 2);

    let o = as_alice(
        &app,
        "POST",
        "/api/objects",
        Some(json!({"module_id": module, "title": "Quarterly report", "body": "pipeline numbers", "context": {"client": "acme"}})),
    )
    .await;
    let object = o["object"]["id"].as_str().unwrap().to_string();
    assert_eq!(o["object"]["context"]["author"], "alice");
    assert_eq!(o["object"]["ref"], format!("alpha@dims.test/sales/notes/{object}"));

    let listed = as_alice(&app, "GET", &format!("/api/objects?module={module}"), None).await;
    assert_eq!(listed.as_array().unwrap().len(), 1);

    // INFORMATION: nobody is notified; ACTION: only the assignee
    as_alice(&app, "POST", &format!("/api/objects/{object}/annotations"), Some(json!({"kind": "INFORMATION", "text": "FYI"}))).await;
    let action = as_alice(
        &app,
        "POST",
        &format!("/api/objects/{object}/annotations"),
        Some(json!({"kind": "ACTION", "text": "review", "assignee": "bob"})),
    )
    .await;
    let (_, bob) = call(&app, "GET", "/api/inbox", Some("Bearer tok-bob"), None).await;
    let kinds: Vec<&str> = bob["data"]["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["kind"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, vec!["ACTION_ASSIGNED"]);
    assert_eq!(bob["data"]["unacknowledged"], 1);
    let alice_inbox = as_alice(&app, "GET", "/api/inbox", None).await;
    assert!(alice_inbox["entries"].as_array().unwrap().is_empty());

    let entry = bob["data"]["entries"][0]["id"].as_str().unwrap().to_string();
    let (status, _) = call(&app, "POST", &format!("/api/inbox/{entry}/ack"), Some("Bearer tok-alice"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    for _ in 0..2 {
        let (status, v) = call(&app, "POST", &format!("/api/inbox/{entry}/ack"), Some("Bearer tok-bob"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["data"]["acknowledged"], true);
    }

    let ann = action["id"].as_str().unwrap();
    let (status, v) = call(&app, "POST", &format!("/api/annotations/{ann}/resolve"), Some("Bearer tok-bob"), None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["data"]["status"], "DONE");
    let (status, v) = call(&app, "POST", &format!("/api/annotations/{ann}/resolve"), Some("Bearer tok-bob"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "already_done");

    let (status, v) = call(&app, "POST", &format!("/api/objects/{object}/annotations"), Some("Bearer tok-alice"), Some(json!({"kind": "ACTION", "text": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "action_without_assignee");
    let (status, v) = call(&app, "GET", "/api/objects/nope", Some("Bearer tok-alice"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "unknown_object");
}

#[tokio::test]
async fn search_watch_and_parse_errors() {
    let app = app(&[]);
    as_alice(&app, "POST", "/api/workspaces", Some(json!({"slug": "w", "title": "W"}))).await;
    let m = as_alice(&app, "POST", "/api/workspaces/w/modules", Some(json!({"kind": "CONTENT", "slug": "notes"}))).await;
    let module = m["id"].as_str().unwrap().to_string();
    let w = as_alice(&app, "POST", "/api/watches", Some(json!({"query": "invoice AND NOT draft"}))).await;
    assert_eq!(w["owner"], "alice");
    assert_eq!(as_alice(&app, "GET", "/api/watches", None).await.as_array().unwrap().len(), 1);

    for (title, body) in [("Invoice 42", "final"), ("Invoice 43", "draft copy"), ("Minutes", "")] {
        as_alice(&app, "POST", "/api/objects", Some(json!({"module_id": module, "title": title, "body": body}))).await;
    }
    let hits = as_alice(&app, "GET", "/api/search?q=invoice", None).await;
    assert_eq!(hits["results"].as_array().unwrap().len(), 2);
    let hits = as_alice(&app, "GET", "/api/search?q=invoice%20AND%20NOT%20draft&scope=local", None).await;
    assert_eq!(hits["results"][0]["title"], "Invoice 42");

    let inbox = as_alice(&app, "GET", "/api/inbox", None).await;
    let notes: Vec<&Value> = inbox["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["kind"] == "WATCH_NOTIFICATION")
        .collect();
    assert_eq!(notes.len(), 1);

    let (status, v) = call(&app, "GET", "/api/search?q=(", Some("Bearer tok-alice"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "unbalanced_parenthesis");
    let (status, v) = call(&app, "POST", "/api/watches", Some("Bearer tok-alice"), Some(json!({"query": "a AND"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "dangling_operator");
    let (status, v) = call(&app, "GET", "/api/search", Some("Bearer tok-alice"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "invalid_request");
}

#[tokio::test]
async fn documents_push_and_conflict() {
    let app = app(&[]);
    as_alice(&app, "POST", "/api/workspaces", Some(json!({"slug": "w", "title": "W"}))).await;
    let m = as_alice(&app, "POST", "/api/workspaces/w/modules", Some(json!({"kind": "DOCUMENTS", "slug": "docs"}))).await;
    let module = m["id"].as_str().unwrap().to_string();
    let d = as_alice(
        &app,
        "POST",
        "/api/documents",
        Some(json!({"module_id": module, "name": "plan.txt", "content_b64": B64.encode("first")})),
    )
    .await;
    let doc = d["document"]["doc_id"].as_str().unwrap().to_string();
    assert_eq!(d["document"]["current_version"], 1);

    let p = as_alice(&app, "POST", &format!("/api/documents/{doc}/push"), Some(json!({"base_version": 1, "content_b64": B64.encode("second")}))).await;
    assert_eq!(p["current_version"], 2);
    let (status, v) = call(
        &app,
        "POST",
        &format!("/api/documents/{doc}/push"),
        Some("Bearer tok-alice"),
        Some(json!({"base_version": 1, "content_b64": B64.encode("stale")})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "conflict");
    assert_eq!(v["error"]["current_version"], 2);

    let got = as_alice(&app, "GET", &format!("/api/documents/{doc}"), None).await;
    assert_eq!(B64.decode(got["content_b64"].as_str().unwrap()).unwrap(), b"second");
    assert_eq!(got["version"], 2);
    let got = as_alice(&app, "GET", &format!("/api/documents/{doc}?version=1"), None).await;
    assert_eq!(B64.decode(got["content_b64"].as_str().unwrap()).unwrap(), b"first");
    let (status, v) = call(&app, "GET", &format!("/api/documents/{doc}?version=7"), Some("Bearer tok-alice"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "unknown_version");

    let h = as_alice(&app, "GET", &format!("/api/documents/{doc}/history"), None).await;
    let kinds: Vec<&str> = h.as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, vec!["CREATED", "PUSHED"]);

    let (status, v) = call(&app, "POST", "/api/documents", Some("Bearer tok-alice"), Some(json!({"module_id": module, "name": "x", "content_b64": "!!"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "invalid_request");

    let (status, v) = call(&app, "GET", &format!("/api/documents/{doc}?origin=ghost@dims.test"), Some("Bearer tok-alice"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "unknown_peer");

    let loc = as_alice(&app, "GET", "/api/locate?selector=plan", None).await;
    assert_eq!(loc["hits"][0]["doc_id"], doc);
    assert_eq!(loc["hits"][0]["current_version"], 2);
    let (status, v) = call(&app, "GET", "/api/locate?selector=", Some("Bearer tok-alice"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "empty_selector");
}

#[tokio::test]
async fn planning_and_projects() {
    let app = app(&[]);
    as_alice(&app, "POST", "/api/workspaces", Some(json!({"slug": "w", "title": "W"}))).await;
    let p = as_alice(&app, "POST", "/api/workspaces/w/modules", Some(json!({"kind": "PROJECTS", "slug": "proj"}))).await;
    let launch = as_alice(&app, "POST", "/api/objects", Some(json!({"module_id": p["id"], "title": "Launch"}))).await;
    let project = launch["object"]["id"].as_str().unwrap().to_string();
    as_alice(&app, "POST", "/api/workspaces/w/modules", Some(json!({"kind": "PLANNING", "slug": "cal"}))).await;

    as_alice(
        &app,
        "POST",
        "/api/events",
        Some(json!({"workspace": "w", "title": "standup", "start": "2025-03-03T09:00:00.000Z", "end": "2025-03-03T09:15:00.000Z", "participants": ["bob"]})),
    )
    .await;
    let week = as_alice(&app, "GET", "/api/events?workspace=w&start=2025-03-03T00:00:00.000Z&end=2025-03-10T00:00:00.000Z", None).await;
    assert_eq!(week.as_array().unwrap().len(), 1);
    let after = as_alice(&app, "GET", "/api/events?workspace=w&start=2025-03-03T09:15:00.000Z&end=2025-03-04T00:00:00.000Z", None).await;
    assert!(after.as_array().unwrap().is_empty());
    let (status, v) = call(&app, "GET", "/api/events?workspace=w&start=2025-03-04T00:00:00.000Z&end=2025-03-03T00:00:00.000Z", Some("Bearer tok-alice"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "invalid_range");

    let t = as_alice(&app, "POST", "/api/tasks", Some(json!({"project_id": project, "title": "ship", "assignee": "bob"}))).await;
    let task = t["id"].as_str().unwrap().to_string();
    assert_eq!(t["status"], "TODO");
    let moved = as_alice(&app, "POST", &format!("/api/tasks/{task}/status"), Some(json!({"status": "DONE"}))).await;
    assert_eq!(moved["status"], "DONE");
    let (status, v) = call(&app, "POST", &format!("/api/tasks/{task}/status"), Some("Bearer tok-alice"), Some(json!({"status": "TODO"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "illegal_transition");
    let tasks = as_alice(&app, "GET", &format!("/api/tasks?project={project}"), None).await;
    assert_eq!(tasks.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn federated_search_with_a_peer_down_is_partial() {
    let app = app(&[PeerConfig {
        node_id: nid("beta@dims.test"),
        address: "127.0.0.1:1".into(),
    }]);
    as_alice(&app, "POST", "/api/workspaces", Some(json!({"slug": "w", "title": "W"}))).await;
    let m = as_alice(&app, "POST", "/api/workspaces/w/modules", Some(json!({"kind": "CONTENT", "slug": "notes"}))).await;
    as_alice(&app, "POST", "/api/objects", Some(json!({"module_id": m["id"], "title": "budget"}))).await;

    let rs = as_alice(&app, "GET", "/api/search?q=budget&scope=federated", None).await;
    assert_eq!(rs["partial"], true);
    assert_eq!(rs["per_node"]["beta@dims.test"]["status"], "TIMEOUT");
    assert_eq!(rs["per_node"]["alpha@dims.test"]["status"], "OK");
    assert_eq!(rs["merged"].as_array().unwrap().len(), 1);

    let roster = as_alice(&app, "GET", "/api/roster", None).await;
    assert_eq!(roster[0]["peer"], "beta@dims.test");
    assert_ne!(roster[0]["state"], "ONLINE");

    let (status, v) = call(&app, "GET", "/api/documents/d?origin=beta@dims.test", Some("Bearer tok-alice"), None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"]["code"], "peer_unavailable");

    let sent = as_alice(&app, "POST", "/api/messages", Some(json!({"to_node": "beta@dims.test", "body": "hi"}))).await;
    assert_eq!(sent["delivery"], "queued");
}
