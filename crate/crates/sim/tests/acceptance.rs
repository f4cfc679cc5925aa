//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::panic;
use std::time::{Duration, Instant};

use dims_core::model::{AnnotationKind, ModuleKind, TaskStatus};
use dims_core::query::{parse_query, Index, IndexedDoc, ParseError, QueryAst};
use dims_core::{NodeId, Store, Timestamp};
use dims_federation::stanza::{check_line, Verdict};
use dims_federation::{decode, encode, CodecError, FedError, LinkState, OpResult, PeerStatus, StanzaKind};
use dims_sim::{build_network, run_scenario, LinkFaults, NetworkSpec, Scenario, SimNetwork};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

type Checked = Result<String, String>;
type Fixture = (&'static str, fn(&ParseError) -> bool);
type Criterion = (&'static str, fn() -> Checked);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---- independent query oracle ------------------------------------------------

/// Lowercase, decompose, drop combining marks, split on anything that is
/// not alphanumeric.
fn fold(text: &str) -> Vec<String> {
    let flat: String = text.nfd().filter(|c| !is_combining_mark(*c)).collect::<String>().to_lowercase();
    flat.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.nfc().collect())
        .collect()
}

#[derive(Clone, Debug)]
struct Obj {
    id: String,
    title: String,
    body: String,
    context: Vec<String>,
}

impl Obj {
    /// Weighted segments: title 2, body 1, each context value 1.
    fn segments(&self) -> Vec<(u64, Vec<String>)> {
        let mut out = vec![(2, fold(&self.title)), (1, fold(&self.body))];
        out.extend(self.context.iter().map(|c| (1, fold(c))));
        out
    }
}

fn oracle_holds(segs: &[(u64, Vec<String>)], q: &QueryAst) -> bool {
    match q {
        QueryAst::Term(t) => segs.iter().any(|(_, s)| s.contains(t)),
        QueryAst::Phrase(p) => segs
            .iter()
            .any(|(_, s)| s.len() >= p.len() && (0..=s.len() - p.len()).any(|i| s[i..i + p.len()] == p[..])),
        QueryAst::And(cs) => cs.iter().all(|c| oracle_holds(segs, c)),
        QueryAst::Or(cs) => cs.iter().any(|c| oracle_holds(segs, c)),
        QueryAst::Not(c) => !oracle_holds(segs, c),
    }
}

fn oracle_positive(q: &QueryAst, out: &mut BTreeSet<String>) {
    match q {
        QueryAst::Term(t) => {
            out.insert(t.clone());
        }
        QueryAst::Phrase(p) => out.extend(p.iter().cloned()),
        QueryAst::And(cs) | QueryAst::Or(cs) => cs.iter().for_each(|c| oracle_positive(c, out)),
        QueryAst::Not(_) => {}
    }
}

/// Brute force: every object tested on its own; score is the weighted count
/// of positive query tokens.
fn oracle(corpus: &[Obj], q: &QueryAst) -> BTreeMap<String, u64> {
    let mut terms = BTreeSet::new();
    oracle_positive(q, &mut terms);
    corpus
        .iter()
        .filter_map(|o| {
            let segs = o.segments();
            oracle_holds(&segs, q).then(|| {
                let score = segs
                    .iter()
                    .map(|(w, s)| w * s.iter().filter(|t| terms.contains(*t)).count() as u64)
                    .sum();
                (o.id.clone(), score)
            })
        })
        .collect()
}

// ---- generators --------------------------------------------------------------

const WORDS: &[&str] = &[
    "alpha", "Beta", "gamma", "delta", "café", "CAFE", "Éclair", "eclair", "naïve", "naive", "x1", "42", "report",
    "Report", "crane", "harbour",
];
const SEPARATORS: &[&str] = &[" ", "  ", ", ", "-", "/", ". ", "'"];
const KEYWORD_WORDS: &[&str] = &["and", "or", "not"];

fn text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.random_range(0..=max_words);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push_str(SEPARATORS.choose(rng).unwrap());
        }
        out.push_str(WORDS.choose(rng).unwrap());
    }
    out
}

fn corpus(rng: &mut ChaCha8Rng, max: usize, prefix: &str) -> Vec<Obj> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|i| Obj {
            id: format!("{prefix}{i:02}"),
            title: text(rng, 4),
            body: text(rng, 8),
            context: (0..rng.random_range(0..=2)).map(|_| text(rng, 3)).collect(),
        })
        .collect()
}

fn vocab() -> Vec<String> {
    let set: BTreeSet<String> = WORDS.iter().flat_map(|w| fold(w)).collect();
    set.into_iter().collect()
}

fn leaf(rng: &mut ChaCha8Rng, words: &[String]) -> QueryAst {
    if rng.random_bool(0.25) {
        let n = rng.random_range(2..=3);
        QueryAst::Phrase((0..n).map(|_| words.choose(rng).unwrap().clone()).collect())
    } else {
        QueryAst::Term(words.choose(rng).unwrap().clone())
    }
}

/// Random tree no deeper than `depth`, in the shape the parser produces.
fn ast(rng: &mut ChaCha8Rng, words: &[String], depth: usize) -> QueryAst {
    if depth <= 1 || rng.random_bool(0.3) {
        return leaf(rng, words);
    }
    match rng.random_range(0..3) {
        0 => QueryAst::And((0..rng.random_range(2..=3)).map(|_| ast(rng, words, depth - 1)).collect()),
        1 => QueryAst::Or((0..rng.random_range(2..=3)).map(|_| ast(rng, words, depth - 1)).collect()),
        _ => ast(rng, words, depth - 1).negate(),
    }
}

fn index_of(corpus: &[Obj]) -> Index {
    let mut index = Index::new();
    for o in corpus {
        let doc = IndexedDoc::new(&o.title, &o.body, o.context.iter().map(String::as_str), Timestamp::SIM_EPOCH);
        index.index_object(&o.id, doc);
    }
    index
}

// ---- criteria ----------------------------------------------------------------

fn query_oracle() -> Checked {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x51);
    let words = vocab();
    let mut nonempty = 0;
    for case in 0..1000 {
        let docs = corpus(&mut rng, 20, "o");
        let q = ast(&mut rng, &words, 4);
        ensure!(q.depth() <= 4, "case {case}: generator produced depth {}", q.depth());
        let got: BTreeMap<String, u64> = index_of(&docs).evaluate(&q).into_iter().collect();
        let want = oracle(&docs, &q);
        ensure!(got == want, "case {case}: query {q}\n  index  {got:?}\n  oracle {want:?}");
        if !want.is_empty() {
            nonempty += 1;
        }
    }
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:?}");
    Ok(format!("1000/1000 cases agree ({nonempty} with matches) in {took:.2?}"))
}

fn parser_suite() -> Checked {
    let mut rng = ChaCha8Rng::seed_from_u64(0x52);
    let mut words = vocab();
    words.extend(KEYWORD_WORDS.iter().map(|w| w.to_string()));
    for case in 0..1000 {
        let q = ast(&mut rng, &words, 4);
        let printed = q.to_string();
        match parse_query(&printed) {
            Ok(back) => ensure!(back == q, "case {case}: {printed} parsed as {back:?}"),
            Err(e) => return Err(format!("case {case}: {printed} failed: {e}")),
        }
    }
    let fixtures: [Fixture; 9] = [
        ("", |e| matches!(e, ParseError::EmptyQuery)),
        ("   ", |e| matches!(e, ParseError::EmptyQuery)),
        ("(alpha", |e| matches!(e, ParseError::UnbalancedParenthesis { .. })),
        ("alpha)", |e| matches!(e, ParseError::UnbalancedParenthesis { .. })),
        ("alpha AND", |e| matches!(e, ParseError::DanglingOperator { .. })),
        ("OR beta", |e| matches!(e, ParseError::DanglingOperator { .. })),
        ("NOT", |e| matches!(e, ParseError::DanglingOperator { .. })),
        ("()", |e| matches!(e, ParseError::EmptyGroup { .. })),
        ("alpha AND ( )", |e| matches!(e, ParseError::EmptyGroup { .. })),
    ];
    for (raw, expected) in fixtures {
        match parse_query(raw) {
            Err(e) if expected(&e) => {}
            other => return Err(format!("{raw:?} gave {other:?}")),
        }
    }
    let base = vocab();
    for case in 0..300 {
        let docs = corpus(&mut rng, 20, "o");
        let index = index_of(&docs);
        let (a, b) = (ast(&mut rng, &base, 3), ast(&mut rng, &base, 3));
        let not_and = QueryAst::And(vec![a.clone(), b.clone()]).negate();
        let or_nots = QueryAst::Or(vec![a.clone().negate(), b.clone().negate()]);
        ensure!(index.matches(&not_and) == index.matches(&or_nots), "case {case}: NOT (a AND b) with a={a} b={b}");
        let not_or = QueryAst::Or(vec![a.clone(), b.clone()]).negate();
        let and_nots = QueryAst::And(vec![a.clone().negate(), b.clone().negate()]);
        ensure!(index.matches(&not_or) == index.matches(&and_nots), "case {case}: NOT (a OR b) with a={a} b={b}");
    }
    Ok("1000 round trips, 4 error classes over 9 fixtures, De Morgan on 300 corpora".into())
}

const GOLDEN: &str = include_str!("../../federation/tests/fixtures/stanzas.ndjson");
const MALFORMED: &str = include_str!("../../federation/tests/fixtures/malformed.ndjson");

fn codec_golden() -> Checked {
    let mut kinds = BTreeSet::new();
    let lines: Vec<&str> = GOLDEN.lines().collect();
    ensure!(lines.len() >= 14, "only {} golden lines", lines.len());
    for (i, line) in lines.iter().enumerate() {
        let Verdict::Canonical(s) = check_line(line.as_bytes()) else {
            return Err(format!("golden line {} is not canonical", i + 1));
        };
        ensure!(encode(&s) == format!("{line}\n").into_bytes(), "line {} re-encodes differently", i + 1);
        ensure!(decode(&encode(&s)).as_ref() == Ok(&s), "line {} does not round-trip", i + 1);
        kinds.insert(s.kind().ok_or(format!("line {}: unknown type", i + 1))?);
    }
    let missing: Vec<_> = StanzaKind::ALL.iter().filter(|k| !kinds.contains(k)).collect();
    ensure!(missing.is_empty(), "no fixture for {missing:?}");
    let bad: Vec<&str> = MALFORMED.lines().collect();
    for (i, line) in bad.iter().enumerate() {
        ensure!(
            matches!(decode(line.as_bytes()), Err(CodecError::Malformed(_))),
            "malformed line {} was not rejected as malformed",
            i + 1
        );
    }
    Ok(format!("{} golden lines over {} types, {} malformed lines rejected", lines.len(), kinds.len(), bad.len()))
}

const PAIR: &str = include_str!("../scenarios/pair.json");
const MESH3: &str = include_str!("../scenarios/mesh3.json");
const ROUND_TRIP: &str = include_str!("../scenarios/round_trip.json");

fn round_trip() -> Checked {
    let started = Instant::now();
    let spec = NetworkSpec::parse(PAIR).map_err(|e| e.to_string())?;
    let scenario = Scenario::parse(ROUND_TRIP).map_err(|e| e.to_string())?;
    let mut logs = Vec::new();
    for _ in 0..2 {
        let mut net = build_network(&spec, 11).map_err(|e| e.to_string())?;
        let out = run_scenario(&mut net, &scenario).map_err(|e| e.to_string())?;
        ensure!(out.outputs["get"]["version"] == 1, "fetched {}", out.outputs["get"]);
        ensure!(out.outputs["put"]["current_version"] == 2, "push gave {}", out.outputs["put"]);
        ensure!(out.outputs["stale"]["code"] == "conflict", "second push gave {}", out.outputs["stale"]);
        ensure!(out.outputs["stale"]["current_version"] == 2, "second push gave {}", out.outputs["stale"]);
        let b = net.resolve("b").unwrap();
        let doc = out.outputs["doc"]["doc_id"].as_str().unwrap();
        let kinds: Vec<Value> =
            net.node(&b).store().state().history(doc).unwrap().iter().map(|e| json!(e.kind)).collect();
        ensure!(kinds == [json!("CREATED"), json!("FETCHED_BY"), json!("PUSHED")], "provenance {kinds:?}");
        logs.push(net.log_ndjson());
    }
    ensure!(logs[0] == logs[1], "two runs with one seed produced different logs");
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(5), "took {took:?}");
    Ok(format!("v1 -> v2, provenance CREATED/FETCHED_BY/PUSHED, conflict at 2, deterministic, {took:.2?}"))
}

fn ids(net: &SimNetwork, names: &[&str]) -> Vec<NodeId> {
    names.iter().map(|n| net.resolve(n).unwrap()).collect()
}

fn mesh() -> SimNetwork {
    build_network(&NetworkSpec::parse(MESH3).unwrap(), 5).unwrap()
}

fn search(net: &mut SimNetwork, from: &NodeId, q: &str) -> Result<dims_federation::FederatedResultSet, String> {
    match net.call(from, |n, now| n.federated_search(q, true, None, now)) {
        Ok(OpResult::Search(rs)) => Ok(rs),
        other => Err(format!("search {q}: {other:?}")),
    }
}

fn local_union(net: &SimNetwork, nodes: &[NodeId], q: &str) -> BTreeSet<(String, u64)> {
    nodes
        .iter()
        .flat_map(|n| net.node(n).store().state().search(q).unwrap())
        .map(|h| (h.object_ref.to_string(), h.score))
        .collect()
}

fn federated_soundness() -> Checked {
    let mut net = mesh();
    let nodes = ids(&net, &["a", "b", "c"]);
    let mut rng = ChaCha8Rng::seed_from_u64(0x55);
    for n in &nodes {
        let module = {
            let s = net.node(n).store().state();
            let ws = s.workspace_by_slug("main").unwrap();
            s.module_by_slug(&ws.id, "notes").unwrap().id.clone()
        };
        for _ in 0..10 {
            let (title, body) = (text(&mut rng, 4), text(&mut rng, 8));
            net.with_node(n, |node, now| {
                node.store_mut().create_object(now, &module, &title, &body, BTreeMap::new(), "alice").map(|_| ())
            })
            .map_err(|e| e.to_string())?;
        }
    }
    let total: usize = nodes.iter().map(|n| net.node(n).store().state().objects().count()).sum();
    ensure!(total == 30, "{total} objects");
    let words = vocab();
    let queries: Vec<String> = (0..50).map(|_| ast(&mut rng, &words, 3).to_string()).collect();
    let mut hits = 0;
    for q in &queries {
        let rs = search(&mut net, &nodes[0], q)?;
        ensure!(!rs.partial, "{q}: partial on a healthy mesh");
        let merged: BTreeSet<(String, u64)> =
            rs.merged.iter().map(|h| (h.object_ref.to_string(), h.score)).collect();
        ensure!(merged.len() == rs.merged.len(), "{q}: duplicate hits");
        ensure!(merged == local_union(&net, &nodes, q), "{q}: merged differs from the union");
        hits += merged.len();
    }
    net.partition(&nodes[0], &nodes[2]);
    for q in &queries {
        let rs = search(&mut net, &nodes[0], q)?;
        ensure!(rs.partial, "{q}: not partial with c cut off");
        ensure!(rs.per_node[&nodes[2]].status == PeerStatus::Timeout, "{q}: c reported {:?}", rs.per_node[&nodes[2]]);
        let merged: BTreeSet<(String, u64)> =
            rs.merged.iter().map(|h| (h.object_ref.to_string(), h.score)).collect();
        ensure!(merged == local_union(&net, &nodes[..2], q), "{q}: surviving union differs");
    }
    Ok(format!("50 queries exact over 30 objects ({hits} hits); partitioned runs partial with exact survivors"))
}

fn loop_freedom() -> Checked {
    let spec = NetworkSpec::new(&["a@ring", "b@ring", "c@ring"], &[("a@ring", "b@ring"), ("b@ring", "c@ring"), ("c@ring", "a@ring")])
        .map_err(|e| e.to_string())?;
    let mut net = build_network(&spec, 6).map_err(|e| e.to_string())?;
    let a = net.resolve("a").unwrap();
    let before = net.log().len();
    search(&mut net, &a, "anything")?;
    net.run_for(60_000);
    let processed = net.log()[before..]
        .iter()
        .filter(|r| r.event == "request_processed" && r.detail["type"] == "search.request")
        .count();
    ensure!(processed == 3, "{processed} search.request processed");
    Ok("one client search processed exactly 3 search.request".into())
}

fn presence() -> Checked {
    let mut net = mesh();
    let [a, b, c] = <[NodeId; 3]>::try_from(ids(&net, &["a", "b", "c"])).unwrap();
    net.partition(&a, &b);
    net.partition(&a, &c);
    net.run_for(45_000);
    ensure!(net.link_state(&a, &b) == Some(LinkState::Unavailable), "a still sees b as {:?}", net.link_state(&a, &b));
    ensure!(net.link_state(&c, &a) == Some(LinkState::Unavailable), "c still sees a as {:?}", net.link_state(&c, &a));
    net.heal(&a, &b);
    net.heal(&a, &c);
    let healed = net.elapsed();
    let cycle = 15_000;
    while !net.all_online() {
        match net.next_time() {
            Some(t) if t <= healed + cycle => net.run_until(t),
            _ => return Err(format!("{} of 6 links ONLINE a cycle after heal", net.online_links())),
        }
    }
    let converged = net.elapsed() - healed;

    let spec = NetworkSpec::parse(PAIR).map_err(|e| e.to_string())?;
    let mut net = build_network(&spec, 7).map_err(|e| e.to_string())?;
    let [a, b] = <[NodeId; 2]>::try_from(ids(&net, &["a", "b"])).unwrap();
    let transitions = |net: &SimNetwork, to: &str| -> Vec<u64> {
        net.log()
            .iter()
            .filter(|r| r.node == a.as_str() && r.event == "link_state" && r.detail["peer"] == b.as_str() && r.detail["to"] == to)
            .map(|r| r.t_ms)
            .collect()
    };
    let online = transitions(&net, "ONLINE")[0];
    // b falls silent halfway between two keepalives
    let silenced = online + 5_000;
    net.run_until(silenced);
    net.set_faults(&b, &a, LinkFaults { drop: true, ..LinkFaults::clean(10) });
    net.run_until(silenced + 29_999);
    ensure!(net.link_state(&a, &b) == Some(LinkState::Online), "flipped early");
    net.run_until(silenced + 30_000);
    let flips = transitions(&net, "UNAVAILABLE");
    ensure!(flips == [silenced + 30_000], "UNAVAILABLE at {flips:?}, silenced at {silenced}");
    Ok(format!("all 6 links ONLINE {converged} ms after heal; silent peer flipped at +30000 ms"))
}

fn scenario(steps: Value) -> Result<dims_sim::Outcome, String> {
    let spec = NetworkSpec::parse(PAIR).map_err(|e| e.to_string())?;
    let mut net = build_network(&spec, 8).map_err(|e| e.to_string())?;
    let s: Scenario = serde_json::from_value(json!({ "steps": steps })).map_err(|e| e.to_string())?;
    run_scenario(&mut net, &s).map_err(|e| match e {
        dims_sim::SimError::AssertionFailed { outcome, .. } => format!(
            "{:?}",
            outcome.report.iter().filter(|r| !r.passed).map(|r| format!("{}: {}", r.label, r.detail)).collect::<Vec<_>>()
        ),
        other => other.to_string(),
    })
}

fn watch_semantics() -> Checked {
    let inbox = |owner: &str, n: u64| json!({"inbox": {"node": "a", "owner": owner, "kind": "WATCH_NOTIFICATION"}, "len": n});
    scenario(json!([
        {"at_ms": 0, "label": "earlier", "action": "create_object", "args": {"node": "a", "title": "invoice march"}},
        {"at_ms": 10, "label": "w", "action": "watch", "args": {"node": "a", "q": "invoice"}},
        {"at_ms": 20, "label": "nothing_retroactive", "action": "assert", "args": inbox("alice", 0)},
        {"at_ms": 30, "label": "later", "action": "create_object", "args": {"node": "a", "title": "invoice april"}},
        {"at_ms": 40, "label": "fires_for_new", "action": "assert", "args": inbox("alice", 1)}
    ]))
    .map_err(|e| format!("non-retroactive: {e}"))?;
    scenario(json!([
        {"at_ms": 0, "label": "w", "action": "watch", "args": {"node": "a", "q": "invoice"}},
        {"at_ms": 10, "label": "o", "action": "create_object", "args": {"node": "a", "title": "invoice may"}},
        {"at_ms": 20, "label": "edit", "action": "update_object",
         "args": {"node": "a", "object_id": "$o/object_id", "title": "invoice may revised", "body": "invoice"}},
        {"at_ms": 30, "label": "edit_silent", "action": "assert", "args": {"step": "edit", "path": "notifications", "equals": 0}},
        {"at_ms": 30, "label": "once_per_pair", "action": "assert", "args": inbox("alice", 1)},
        {"at_ms": 40, "label": "other", "action": "create_object", "args": {"node": "a", "title": "invoice june"}},
        {"at_ms": 50, "label": "new_object_new_entry", "action": "assert", "args": inbox("alice", 2)}
    ]))
    .map_err(|e| format!("dedup: {e}"))?;
    scenario(json!([
        {"at_ms": 0, "label": "w1", "action": "watch", "args": {"node": "a", "q": "invoice OR payment"}},
        {"at_ms": 0, "label": "w2", "action": "watch", "args": {"node": "a", "q": "payment", "owner": "bob"}},
        {"at_ms": 10, "label": "o", "action": "create_object",
         "args": {"node": "a", "title": "invoice payment", "body": "invoice invoice payment", "context": {"ref": "payment due"}}},
        {"at_ms": 20, "label": "two_watches_two_entries", "action": "assert", "args": {"step": "o", "path": "notifications", "equals": 2}},
        {"at_ms": 20, "label": "alice_once", "action": "assert", "args": inbox("alice", 1)},
        {"at_ms": 20, "label": "bob_once", "action": "assert", "args": inbox("bob", 1)},
        {"at_ms": 30, "label": "miss", "action": "create_object", "args": {"node": "a", "title": "unrelated"}},
        {"at_ms": 30, "label": "remote", "action": "create_object", "args": {"node": "b", "title": "payment elsewhere"}},
        {"at_ms": 40, "label": "still_once", "action": "assert", "args": inbox("alice", 1)}
    ]))
    .map_err(|e| format!("exactly one: {e}"))?;
    Ok("non-retroactive, deduplicated per (watch, object), exactly one entry per match".into())
}

fn crash_recovery() -> Checked {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let node = NodeId::parse("journal@dims.sim").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x59);
    let (mut store, _) = Store::open(node.clone(), dir.path()).map_err(|e| e.to_string())?;
    let t = |i: u64| Timestamp::SIM_EPOCH.plus_millis(i * 1_000);
    let ws = store.create_workspace(t(0), "crash", "Crash", "alice").unwrap().id;
    store.add_member(t(0), &ws, "alice", "bob").unwrap();
    let notes = store.create_module(t(0), &ws, ModuleKind::Content, "notes", false).unwrap().id;
    let docs = store.create_module(t(0), &ws, ModuleKind::Documents, "docs", false).unwrap().id;
    let projects = store.create_module(t(0), &ws, ModuleKind::Projects, "projects", false).unwrap().id;
    let project = store.create_object(t(0), &projects, "launch", "", BTreeMap::new(), "alice").unwrap().object.id;
    let mut objects = vec![project.clone()];
    let mut actions: Vec<(String, String)> = Vec::new();
    let mut documents: Vec<(String, u64)> = Vec::new();
    let mut tasks: Vec<String> = Vec::new();
    let (mut ok, mut refused) = (6, 0);
    let mut i = 6;
    while ok < 100 {
        i += 1;
        let at = t(i);
        let r: Result<(), dims_core::Error> = match rng.random_range(0..10) {
            0 | 1 => {
                let mut ctx = BTreeMap::new();
                if rng.random_bool(0.5) {
                    ctx.insert("site".to_string(), text(&mut rng, 2));
                }
                store.create_object(at, &notes, &text(&mut rng, 4), &text(&mut rng, 8), ctx, "alice").map(|c| objects.push(c.object.id))
            }
            2 => {
                let id = objects.choose(&mut rng).unwrap().clone();
                store.update_object(at, &id, Some(&text(&mut rng, 3)), None, None, "alice").map(|_| ())
            }
            3 => {
                let id = objects.choose(&mut rng).unwrap().clone();
                let action = rng.random_bool(0.5);
                let kind = if action { AnnotationKind::Action } else { AnnotationKind::Information };
                store
                    .add_annotation(at, &id, kind, &text(&mut rng, 5), "alice", action.then_some("bob"))
                    .map(|a| if action { actions.push((id, a.id)) })
            }
            4 => match actions.pop() {
                Some((o, a)) => store.resolve_action(at, &o, &a, if rng.random_bool(0.8) { "bob" } else { "alice" }).map(|_| ()),
                None => store.register_watch(at, "bob", "report OR crane").map(|_| ()),
            },
            5 => store.register_watch(at, "alice", &leaf(&mut rng, &vocab()).to_string()).map(|_| ()),
            6 => {
                let name = format!("{}.txt", text(&mut rng, 2));
                store
                    .create_document(at, &docs, &name, text(&mut rng, 6).into_bytes(), "alice")
                    .map(|(d, _)| documents.push((d.doc_id, 1)))
            }
            7 => match documents.choose(&mut rng).cloned() {
                Some((doc, v)) => {
                    let base = if rng.random_bool(0.8) { v } else { v.saturating_sub(1) };
                    let r = store.push_version(at, &node, &doc, base, text(&mut rng, 6).into_bytes(), "bob", &node);
                    if r.is_ok() {
                        documents.iter_mut().find(|d| d.0 == doc).unwrap().1 += 1;
                    }
                    r.map(|_| ())
                }
                None => store.register_watch(at, "alice", "alpha").map(|_| ()),
            },
            8 => store
                .create_event(at, &ws, &text(&mut rng, 2), t(i), t(i + rng.random_range(0..5)), &["alice".to_string()])
                .map(|_| ()),
            _ => match tasks.choose(&mut rng).cloned() {
                Some(task) if rng.random_bool(0.6) => {
                    let status = [TaskStatus::Todo, TaskStatus::Doing, TaskStatus::Done][rng.random_range(0..3)];
                    store.set_task_status(at, &task, status).map(|_| ())
                }
                _ => store.create_task(at, &project, &text(&mut rng, 3), "bob", None).map(|tk| tasks.push(tk.id)),
            },
        };
        match r {
            Ok(()) => ok += 1,
            Err(_) => refused += 1,
        }
    }
    let words = vocab();
    let probes: Vec<String> = (0..20).map(|_| ast(&mut rng, &words, 3).to_string()).collect();
    let answer = |s: &Store| -> Vec<Vec<(String, u64)>> {
        probes
            .iter()
            .map(|q| s.state().search(q).unwrap().into_iter().map(|h| (h.object_id, h.score)).collect())
            .collect()
    };
    let live = (store.state().canonical_dump(), answer(&store));
    drop(store);
    let mut replays = Vec::new();
    for _ in 0..2 {
        let (s, report) = Store::open(node.clone(), dir.path()).map_err(|e| e.to_string())?;
        ensure!(!report.discarded_tail, "clean journal reported a torn tail");
        ensure!(report.records == ok, "{} records for {ok} accepted commands", report.records);
        replays.push((s.state().canonical_dump(), answer(&s)));
    }
    ensure!(replays[0].0 == replays[1].0, "two replays disagree");
    ensure!(replays[0].0 == live.0, "replayed state differs from the live state");
    ensure!(replays[0].1 == live.1 && replays[1].1 == live.1, "probe answers differ after replay");
    let nonempty = live.1.iter().filter(|r| !r.is_empty()).count();
    Ok(format!("{ok} journaled commands ({refused} more refused); 20 probes ({nonempty} non-empty) and dumps identical"))
}

fn duplicate_and_corruption() -> Checked {
    let spec = NetworkSpec::parse(PAIR).map_err(|e| e.to_string())?;
    let mut net = build_network(&spec, 9).map_err(|e| e.to_string())?;
    let [a, b] = <[NodeId; 2]>::try_from(ids(&net, &["a", "b"])).unwrap();
    let docs = {
        let s = net.node(&b).store().state();
        let ws = s.workspace_by_slug("main").unwrap();
        s.module_by_slug(&ws.id, "docs").unwrap().id.clone()
    };
    let doc = net
        .with_node(&b, |n, now| n.store_mut().create_document(now, &docs, "plan.txt", b"v1 body".to_vec(), "alice"))
        .map_err(|e| e.to_string())?
        .0
        .doc_id;
    let d = doc.clone();
    match net.call(&a, |n, now| n.remote_fetch(&b, &d, None, "alice", now)) {
        Ok(OpResult::Fetch(Ok(f))) if f.version == 1 => {}
        other => return Err(format!("fetch: {other:?}")),
    }

    let before = net.log().len();
    net.set_faults(&a, &b, LinkFaults { duplicate_prob: 1.0, ..LinkFaults::clean(10) });
    let d = doc.clone();
    match net.call(&a, |n, now| n.remote_push(&b, &d, 1, b"v2 body".to_vec(), "alice", now)) {
        Ok(OpResult::Push(Ok(p))) if p.current_version == 2 => {}
        other => return Err(format!("duplicated push: {other:?}")),
    }
    net.run_for(1_000);
    let state = net.node(&b).store().state();
    ensure!(state.document(&doc).unwrap().current_version == 2, "origin moved past v2");
    let pushed = state.history(&doc).unwrap().iter().filter(|e| json!(e.kind) == "PUSHED").count();
    ensure!(pushed == 1, "{pushed} PUSHED entries");
    let log = &net.log()[before..];
    let count = |node: &NodeId, event: &str, kind: &str| {
        log.iter().filter(|r| r.node == node.as_str() && r.event == event && r.detail["type"] == kind).count()
    };
    ensure!(count(&b, "request_processed", "push.request") == 1, "push processed twice");
    ensure!(count(&b, "duplicate_request", "push.request") == 1, "duplicate not recognised");
    let responses: Vec<&Value> = log
        .iter()
        .filter(|r| r.node == b.as_str() && r.event == "stanza_sent" && r.detail["type"] == "push.response")
        .map(|r| &r.detail["id"])
        .collect();
    ensure!(responses.len() == 2 && responses[0] == responses[1], "re-responses {responses:?}");
    let received: Vec<&Value> = log
        .iter()
        .filter(|r| r.node == a.as_str() && r.event == "stanza_received" && r.detail["type"] == "push.response")
        .map(|r| &r.detail["id"])
        .collect();
    ensure!(received == responses, "a received {received:?}");
    ensure!(log.iter().any(|r| r.node == a.as_str() && r.event == "unmatched_response"), "second response not absorbed");

    net.set_faults(&a, &b, LinkFaults { corrupt_prob: 1.0, ..LinkFaults::clean(10) });
    let snapshot = |net: &SimNetwork| {
        let s = net.node(&b).store().state();
        (s.document(&doc).unwrap().clone(), s.history(&doc).unwrap(), s.get_version(&doc, None).unwrap().clone())
    };
    let origin_before = snapshot(&net);
    let d = doc.clone();
    match net.call(&a, |n, now| n.remote_push(&b, &d, 2, b"v3 body".to_vec(), "alice", now)) {
        Ok(OpResult::Push(Err(FedError::TransferCorrupt { .. }))) => {}
        other => return Err(format!("corrupted push: {other:?}")),
    }
    net.run_for(1_000);
    ensure!(snapshot(&net) == origin_before, "origin changed after a corrupted push");
    ensure!(net.log().iter().any(|r| r.event == "net_corrupted"), "no corruption was injected");

    net.set_faults(&a, &b, LinkFaults::clean(10));
    net.set_faults(&b, &a, LinkFaults { corrupt_prob: 1.0, ..LinkFaults::clean(10) });
    let d = doc.clone();
    match net.call(&a, |n, now| n.remote_fetch(&b, &d, None, "alice", now)) {
        Ok(OpResult::Fetch(Err(FedError::TransferCorrupt { .. }))) => {}
        other => return Err(format!("corrupted fetch: {other:?}")),
    }
    Ok("duplicated push: one version, cached re-response; corrupted push and fetch: transfer_corrupt, origin unchanged".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("query_oracle_equivalence", query_oracle),
        ("parser_suite", parser_suite),
        ("codec_golden_files", codec_golden),
        ("document_round_trip", round_trip),
        ("federated_search_soundness", federated_soundness),
        ("loop_freedom", loop_freedom),
        ("presence_convergence", presence),
        ("watch_semantics", watch_semantics),
        ("crash_recovery", crash_recovery),
        ("duplicate_corruption_robustness", duplicate_and_corruption),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let result = panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let ms = started.elapsed().as_millis();
        match result {
            Ok(detail) => println!("PASS {name} [{ms} ms] {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} [{ms} ms] {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
