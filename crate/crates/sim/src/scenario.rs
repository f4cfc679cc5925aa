//! Scripted scenarios: timed steps against a [`SimNetwork`] and assertions
//! over their outputs and the resulting node state.

use std::collections::{BTreeMap, BTreeSet};

use dims_core::inbox::InboxEntry;
use dims_core::NodeId;
use dims_federation::{FedError, OpId, OpResult};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::network::{LogRecord, SimNetwork, ACTOR, DOCS, NOTES, WORKSPACE};
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    CreateObject,
    UpdateObject,
    CreateDocument,
    Fetch,
    Push,
    Search,
    Locate,
    Watch,
    Message,
    Partition,
    Heal,
    SetLatency,
    Assert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    /// Virtual ms after the scenario starts.
    pub at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub action: Action,
    #[serde(default)]
    pub args: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub label: String,
    pub at_ms: u64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub log: Vec<LogRecord>,
    pub report: Vec<AssertionResult>,
    /// Output of every labelled step that finished.
    pub outputs: BTreeMap<String, Value>,
}

impl Outcome {
    pub fn failed(&self) -> Vec<String> {
        self.report.iter().filter(|r| !r.passed).map(|r| r.label.clone()).collect()
    }
}

const COMPARATORS: [&str; 3] = ["equals", "len", "contains"];
const SUBJECTS: [&str; 6] = ["step", "document", "roster", "inbox", "count", "local_search"];

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn label(&self, i: usize) -> String {
        self.steps[i].label.clone().unwrap_or_else(|| format!("step{}", i + 1))
    }

    /// Order, label and reference checks that need no network.
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ScenarioInvalid(m));
        let mut seen = BTreeSet::new();
        let mut last = 0;
        for (i, step) in self.steps.iter().enumerate() {
            let label = self.label(i);
            if step.at_ms < last {
                return bad(format!("{label}: steps must be sorted by at_ms"));
            }
            last = step.at_ms;
            let mut refs = Vec::new();
            collect_refs(&Value::Object(step.args.clone()), &mut refs);
            if step.action == Action::Assert {
                if let Some(Value::String(s)) = step.args.get("step") {
                    refs.push(s.clone());
                }
                let subjects = SUBJECTS.iter().filter(|k| step.args.contains_key(**k)).count();
                let comparators = COMPARATORS.iter().filter(|k| step.args.contains_key(**k)).count();
                if subjects != 1 || comparators != 1 {
                    return bad(format!("{label}: an assert needs one subject and one comparator"));
                }
            }
            for r in refs {
                if !seen.contains(&r) {
                    return bad(format!("{label}: refers to {r}, which is not an earlier step"));
                }
            }
            if !seen.insert(label.clone()) {
                return bad(format!("{label}: duplicate label"));
            }
        }
        Ok(())
    }
}

fn collect_refs(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => {
            if let Some(r) = s.strip_prefix('$') {
                out.push(r.split('/').next().unwrap_or("").to_string());
            }
        }
        Value::Array(xs) => xs.iter().for_each(|x| collect_refs(x, out)),
        Value::Object(m) => m.values().for_each(|x| collect_refs(x, out)),
        _ => {}
    }
}

fn lookup<'a>(mut v: &'a Value, path: &str) -> Option<&'a Value> {
    for seg in path.split('/').filter(|s| !s.is_empty()) {
        v = match v {
            Value::Object(m) => m.get(seg)?,
            Value::Array(xs) => xs.get(seg.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(v)
}

struct Runner<'n> {
    net: &'n mut SimNetwork,
    base: u64,
    outputs: BTreeMap<String, Value>,
    pending: BTreeMap<String, (NodeId, OpId)>,
    report: Vec<AssertionResult>,
}

struct Args<'a> {
    label: &'a str,
    map: Map<String, Value>,
}

impl Args<'_> {
    fn err(&self, m: impl std::fmt::Display) -> SimError {
        SimError::ScenarioInvalid(format!("{}: {m}", self.label))
    }

    fn opt_str(&self, key: &str) -> Result<Option<&str>, SimError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.err(format!("`{key}` must be a string"))),
        }
    }

    fn str(&self, key: &str) -> Result<&str, SimError> {
        self.opt_str(key)?.ok_or_else(|| self.err(format!("missing `{key}`")))
    }

    fn opt_u64(&self, key: &str) -> Result<Option<u64>, SimError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v.as_u64().map(Some).ok_or_else(|| self.err(format!("`{key}` must be an integer"))),
        }
    }

    fn u64(&self, key: &str) -> Result<u64, SimError> {
        self.opt_u64(key)?.ok_or_else(|| self.err(format!("missing `{key}`")))
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool, SimError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(_) => Err(self.err(format!("`{key}` must be a boolean"))),
        }
    }

    fn context(&self) -> Result<Option<BTreeMap<String, String>>, SimError> {
        match self.map.get("context") {
            None => Ok(None),
            Some(Value::Object(m)) => m
                .iter()
                .map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
                .collect::<Option<_>>()
                .map(Some)
                .ok_or_else(|| self.err("context values must be strings")),
            Some(_) => Err(self.err("`context` must be an object")),
        }
    }
}

fn err_json(e: &FedError) -> Value {
    let current = match e {
        FedError::Remote { current_version, .. } => *current_version,
        FedError::Store(dims_core::Error::VersionConflict { current_version }) => Some(*current_version),
        _ => None,
    };
    json!({"ok": false, "code": e.code(), "message": e.to_string(), "current_version": current})
}

fn core_err_json(e: &dims_core::Error) -> Value {
    json!({"ok": false, "code": e.code(), "message": e.to_string()})
}

fn result_json(r: &OpResult) -> Value {
    match r {
        OpResult::Search(rs) => json!({
            "partial": rs.partial,
            "merged": rs.merged,
            "refs": rs.merged.iter().map(|h| h.object_ref.to_string()).collect::<Vec<_>>(),
            "per_node": rs.per_node.iter().map(|(n, r)| (n.to_string(), json!(r.status))).collect::<Map<_, _>>(),
        }),
        OpResult::Locate(lr) => json!({
            "partial": lr.partial,
            "hits": lr.hits,
            "per_node": lr.per_node.iter().map(|(n, s)| (n.to_string(), json!(s))).collect::<Map<_, _>>(),
        }),
        OpResult::Fetch(Ok(f)) => json!({
            "ok": true,
            "origin": f.origin,
            "doc_id": f.doc_id,
            "version": f.version,
            "current_version": f.current_version,
            "content": String::from_utf8_lossy(&f.content),
            "content_hash": f.content_hash,
        }),
        OpResult::Push(Ok(p)) => json!({"ok": true, "origin": p.origin, "doc_id": p.doc_id, "current_version": p.current_version}),
        OpResult::Fetch(Err(e)) | OpResult::Push(Err(e)) => err_json(e),
    }
}

impl Runner<'_> {
    fn substitute(&self, label: &str, v: &Value) -> Result<Value, SimError> {
        Ok(match v {
            Value::String(s) if s.starts_with('$') => {
                let r = &s[1..];
                let (head, path) = r.split_once('/').unwrap_or((r, ""));
                let out = self.outputs.get(head).ok_or_else(|| {
                    SimError::ScenarioInvalid(format!("{label}: output of {head} is not available yet"))
                })?;
                lookup(out, path)
                    .cloned()
                    .ok_or_else(|| SimError::ScenarioInvalid(format!("{label}: {s} does not exist")))?
            }
            Value::Array(xs) => Value::Array(xs.iter().map(|x| self.substitute(label, x)).collect::<Result<_, _>>()?),
            Value::Object(m) => Value::Object(
                m.iter()
                    .map(|(k, x)| Ok((k.clone(), self.substitute(label, x)?)))
                    .collect::<Result<_, SimError>>()?,
            ),
            other => other.clone(),
        })
    }

    fn node(&self, args: &Args, key: &str) -> Result<NodeId, SimError> {
        let name = args.str(key)?;
        self.net.resolve(name).ok_or_else(|| args.err(format!("unknown node {name}")))
    }

    fn collect(&mut self) {
        let done: Vec<String> = self
            .pending
            .iter()
            .filter(|(_, (n, op))| self.net.is_done(n, *op))
            .map(|(l, _)| l.clone())
            .collect();
        for label in done {
            let (n, op) = self.pending.remove(&label).unwrap();
            let r = self.net.take_result(&n, op).unwrap();
            self.outputs.insert(label, result_json(&r));
        }
    }

    fn module(&self, node: &NodeId, slug: &str) -> Result<String, dims_core::Error> {
        let state = self.net.node(node).store().state();
        let ws = state.workspace_by_slug(WORKSPACE)?;
        Ok(state.module_by_slug(&ws.id, slug)?.id.clone())
    }

    fn start(&mut self, label: &str, node: NodeId, started: Result<OpId, FedError>) {
        match started {
            Ok(op) => {
                self.pending.insert(label.to_string(), (node, op));
                self.collect();
            }
            Err(e) => {
                self.outputs.insert(label.to_string(), err_json(&e));
            }
        }
    }

    fn step(&mut self, label: &str, step: &Step) -> Result<(), SimError> {
        let map = match self.substitute(label, &Value::Object(step.args.clone()))? {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        let a = Args { label, map };
        let out = match step.action {
            Action::CreateObject => {
                let node = self.node(&a, "node")?;
                let module = a.opt_str("module")?.unwrap_or(NOTES).to_string();
                let (title, body) = (a.str("title")?.to_string(), a.opt_str("body")?.unwrap_or("").to_string());
                let ctx = a.context()?.unwrap_or_default();
                let actor = a.opt_str("actor")?.unwrap_or(ACTOR).to_string();
                let module = self.module(&node, &module);
                let res = self.net.with_node(&node, |n, now| {
                    n.store_mut().create_object(now, &module?, &title, &body, ctx, &actor)
                });
                match res {
                    Ok(c) => json!({
                        "ok": true,
                        "object_id": c.object.id,
                        "object_ref": c.object.object_ref.to_string(),
                        "notifications": c.notifications.len(),
                    }),
                    Err(e) => core_err_json(&e),
                }
            }
            Action::UpdateObject => {
                let node = self.node(&a, "node")?;
                let id = a.str("object_id")?.to_string();
                let title = a.opt_str("title")?.map(str::to_string);
                let body = a.opt_str("body")?.map(str::to_string);
                let ctx = a.context()?;
                let actor = a.opt_str("actor")?.unwrap_or(ACTOR).to_string();
                let res = self.net.with_node(&node, |n, now| {
                    n.store_mut().update_object(now, &id, title.as_deref(), body.as_deref(), ctx, &actor)
                });
                match res {
                    Ok(c) => json!({
                        "ok": true,
                        "object_id": c.object.id,
                        "object_ref": c.object.object_ref.to_string(),
                        "notifications": c.notifications.len(),
                    }),
                    Err(e) => core_err_json(&e),
                }
            }
            Action::CreateDocument => {
                let node = self.node(&a, "node")?;
                let name = a.str("name")?.to_string();
                let content = a.opt_str("content")?.unwrap_or("").as_bytes().to_vec();
                let actor = a.opt_str("actor")?.unwrap_or(ACTOR).to_string();
                let module = self.module(&node, DOCS);
                let res = self.net.with_node(&node, |n, now| {
                    n.store_mut().create_document(now, &module?, &name, content, &actor)
                });
                match res {
                    Ok((d, c)) => json!({
                        "ok": true,
                        "doc_id": d.doc_id,
                        "origin": d.origin_node,
                        "version": d.current_version,
                        "object_id": c.object.id,
                    }),
                    Err(e) => core_err_json(&e),
                }
            }
            Action::Fetch => {
                let node = self.node(&a, "node")?;
                let origin = self.node(&a, "origin")?;
                let doc = a.str("doc_id")?.to_string();
                let version = a.opt_u64("version")?;
                let actor = a.opt_str("actor")?.unwrap_or(ACTOR).to_string();
                let started = self
                    .net
                    .start_op(&node, |n, now| n.remote_fetch(&origin, &doc, version, &actor, now));
                self.start(label, node, started);
                return Ok(());
            }
            Action::Push => {
                let node = self.node(&a, "node")?;
                let origin = self.node(&a, "origin")?;
                let doc = a.str("doc_id")?.to_string();
                let base = a.u64("base_version")?;
                let content = a.str("content")?.as_bytes().to_vec();
                let actor = a.opt_str("actor")?.unwrap_or(ACTOR).to_string();
                let started = self
                    .net
                    .start_op(&node, |n, now| n.remote_push(&origin, &doc, base, content, &actor, now));
                self.start(label, node, started);
                return Ok(());
            }
            Action::Search => {
                let node = self.node(&a, "node")?;
                let q = a.str("q")?.to_string();
                let local = a.bool_or("include_local", true)?;
                let timeout = a.opt_u64("timeout_ms")?;
                let started = self.net.start_op(&node, |n, now| n.federated_search(&q, local, timeout, now));
                self.start(label, node, started);
                return Ok(());
            }
            Action::Locate => {
                let node = self.node(&a, "node")?;
                let sel = a.str("selector")?.to_string();
                let timeout = a.opt_u64("timeout_ms")?;
                let started = self.net.start_op(&node, |n, now| n.locate(&sel, timeout, now));
                self.start(label, node, started);
                return Ok(());
            }
            Action::Watch => {
                let node = self.node(&a, "node")?;
                let q = a.str("q")?.to_string();
                let owner = a.opt_str("owner")?.unwrap_or(ACTOR).to_string();
                match self.net.with_node(&node, |n, now| n.store_mut().register_watch(now, &owner, &q)) {
                    Ok(w) => json!({"ok": true, "watch_id": w.id}),
                    Err(e) => core_err_json(&e),
                }
            }
            Action::Message => {
                let node = self.node(&a, "node")?;
                let to = self.node(&a, "to")?;
                let from_actor = a.opt_str("from_actor")?.map(str::to_string);
                let to_actor = a.opt_str("to_actor")?.map(str::to_string);
                let body = a.str("body")?.to_string();
                let res = self.net.with_node(&node, |n, now| {
                    n.send_message(&to, from_actor.as_deref(), to_actor.as_deref(), &body, now)
                });
                match res {
                    Ok(d) => json!({"ok": true, "delivery": d}),
                    Err(e) => err_json(&e),
                }
            }
            Action::Partition | Action::Heal | Action::SetLatency => {
                let (x, y) = (self.node(&a, "a")?, self.node(&a, "b")?);
                if self.net.faults(&x, &y).is_none() {
                    return Err(a.err(format!("{x} and {y} are not roster peers")));
                }
                match step.action {
                    Action::Partition => self.net.partition(&x, &y),
                    Action::Heal => self.net.heal(&x, &y),
                    _ => {
                        let ms = a.u64("latency_ms")?;
                        self.net.set_latency(&x, &y, ms);
                    }
                }
                json!({"ok": true})
            }
            Action::Assert => {
                let result = self.assert(label, &a)?;
                self.report.push(result);
                return Ok(());
            }
        };
        self.outputs.insert(label.to_string(), out);
        Ok(())
    }

    fn subject(&self, a: &Args) -> Result<Result<Value, String>, SimError> {
        if let Some(step) = a.opt_str("step")? {
            return Ok(match self.outputs.get(step) {
                Some(v) => Ok(v.clone()),
                None if self.pending.contains_key(step) => Err(format!("{step} has not completed")),
                None => Err(format!("{step} produced no output")),
            });
        }
        let sub = |key: &str| -> Result<Args, SimError> {
            match a.map.get(key) {
                Some(Value::Object(m)) => Ok(Args { label: a.label, map: m.clone() }),
                Some(Value::String(s)) => Ok(Args {
                    label: a.label,
                    map: Map::from_iter([("node".to_string(), Value::String(s.clone()))]),
                }),
                _ => Err(a.err(format!("`{key}` must be an object or a node name"))),
            }
        };
        if a.map.contains_key("document") {
            let d = sub("document")?;
            let node = self.node(&d, "node")?;
            let state = self.net.node(&node).store().state();
            let doc_id = d.str("doc_id")?;
            let Ok(doc) = state.document(doc_id) else {
                return Ok(Ok(Value::Null));
            };
            let history = state.history(doc_id).unwrap_or_default();
            return Ok(Ok(json!({
                "doc_id": doc.doc_id,
                "name": doc.name,
                "origin_node": doc.origin_node,
                "current_version": doc.current_version,
                "kinds": history.iter().map(|e| json!(e.kind)).collect::<Vec<_>>(),
                "history": history,
            })));
        }
        if a.map.contains_key("roster") {
            let node = self.node(&sub("roster")?, "node")?;
            let roster: Map<String, Value> = self
                .net
                .node(&node)
                .roster()
                .into_iter()
                .map(|e| (e.peer.to_string(), json!(e.state)))
                .collect();
            return Ok(Ok(Value::Object(roster)));
        }
        if a.map.contains_key("inbox") {
            let i = sub("inbox")?;
            let node = self.node(&i, "node")?;
            let owner = i.opt_str("owner")?;
            let kind = i.opt_str("kind")?;
            let entries: Vec<&InboxEntry> = self
                .net
                .node(&node)
                .store()
                .state()
                .inbox()
                .all()
                .filter(|e| owner.is_none_or(|o| e.owner == o))
                .filter(|e| kind.is_none_or(|k| json!(e.kind) == json!(k)))
                .collect();
            return Ok(Ok(json!(entries)));
        }
        if a.map.contains_key("count") {
            let c = sub("count")?;
            let event = c.str("event")?;
            let kind = c.opt_str("type")?;
            let nodes = match c.opt_str("node")? {
                Some(_) => vec![self.node(&c, "node")?],
                None => self.net.node_ids(),
            };
            let since = self.base;
            let total: usize = self
                .net
                .log()
                .iter()
                .filter(|r| r.t_ms >= since && r.event == event)
                .filter(|r| nodes.iter().any(|n| n.as_str() == r.node))
                .filter(|r| kind.is_none_or(|k| r.detail.get("type").and_then(Value::as_str) == Some(k)))
                .count();
            return Ok(Ok(json!(total)));
        }
        let s = sub("local_search")?;
        let node = self.node(&s, "node")?;
        let q = s.str("q")?;
        Ok(match self.net.node(&node).store().state().search(q) {
            Ok(hits) => Ok(json!(hits.iter().map(|h| h.object_ref.to_string()).collect::<Vec<_>>())),
            Err(e) => Err(format!("local search failed: {e}")),
        })
    }

    fn assert(&self, label: &str, a: &Args) -> Result<AssertionResult, SimError> {
        let at_ms = self.net.elapsed() - self.base;
        let verdict = |passed: bool, detail: String| AssertionResult {
            label: label.to_string(),
            at_ms,
            passed,
            detail,
        };
        let subject = match self.subject(a)? {
            Ok(v) => v,
            Err(why) => return Ok(verdict(false, why)),
        };
        let path = a.opt_str("path")?.unwrap_or("");
        let Some(actual) = lookup(&subject, path) else {
            return Ok(verdict(false, format!("no value at `{path}`")));
        };
        let (passed, expected) = if let Some(want) = a.map.get("equals") {
            (actual == want, format!("== {want}"))
        } else if let Some(n) = a.map.get("len") {
            let n = n.as_u64().ok_or_else(|| a.err("`len` must be an integer"))?;
            let len = match actual {
                Value::Array(xs) => Some(xs.len()),
                Value::Object(m) => Some(m.len()),
                Value::String(s) => Some(s.chars().count()),
                _ => None,
            };
            (len == Some(n as usize), format!("len {n}"))
        } else {
            let want = &a.map["contains"];
            let hit = match (actual, want) {
                (Value::Array(xs), w) => xs.contains(w),
                (Value::String(s), Value::String(w)) => s.contains(w.as_str()),
                (Value::Object(m), Value::String(k)) => m.contains_key(k),
                _ => false,
            };
            (hit, format!("contains {want}"))
        };
        let detail = if passed {
            format!("{path} {expected}").trim_start().to_string()
        } else {
            format!("{path}: expected {expected}, got {actual}")
        };
        Ok(verdict(passed, detail))
    }
}

/// Runs `scenario` on the virtual clock, then lets outstanding operations
/// resolve. Fails with [`SimError::AssertionFailed`] if any assert failed.
pub fn run_scenario(net: &mut SimNetwork, scenario: &Scenario) -> Result<Outcome, SimError> {
    scenario.validate()?;
    let base = net.elapsed();
    let mut r = Runner {
        net,
        base,
        outputs: BTreeMap::new(),
        pending: BTreeMap::new(),
        report: Vec::new(),
    };
    for (i, step) in scenario.steps.iter().enumerate() {
        r.net.run_until(base + step.at_ms);
        r.collect();
        r.step(&scenario.label(i), step)?;
    }
    while !r.pending.is_empty() {
        match r.net.next_time() {
            Some(t) => r.net.run_until(t),
            None => break,
        }
        r.collect();
    }
    let outcome = Outcome {
        log: r.net.log().to_vec(),
        report: r.report,
        outputs: r.outputs,
    };
    let failed = outcome.failed();
    if failed.is_empty() {
        Ok(outcome)
    } else {
        Err(SimError::AssertionFailed {
            failed,
            outcome: Box::new(outcome),
        })
    }
}
