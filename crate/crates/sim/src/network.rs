//! In-process transports on a virtual clock.

use std::collections::BTreeMap;

use dims_core::config::PeerConfig;
use dims_core::model::ModuleKind;
use dims_core::{NodeId, Store, Timestamp};
use dims_federation::stanza::{decode_b64, encode_b64};
use dims_federation::{decode, encode, ConnId, FedError, LinkState, Node, OpId, OpResult, Output};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::spec::NetworkSpec;
use crate::SimError;

/// Workspace every simulated node boots with.
pub const WORKSPACE: &str = "main";
/// CONTENT module slug inside [`WORKSPACE`].
pub const NOTES: &str = "notes";
/// DOCUMENTS module slug inside [`WORKSPACE`].
pub const DOCS: &str = "docs";
pub const ACTOR: &str = "alice";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkFaults {
    pub latency_ms: u64,
    pub drop: bool,
    pub duplicate_prob: f64,
    pub corrupt_prob: f64,
}

impl LinkFaults {
    pub fn clean(latency_ms: u64) -> Self {
        LinkFaults {
            latency_ms,
            drop: false,
            duplicate_prob: 0.0,
            corrupt_prob: 0.0,
        }
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t_ms: u64,
    pub node: String,
    pub event: String,
    pub detail: Value,
}

enum Delivery {
    Line(ConnId, Vec<u8>),
    Closed(ConnId),
}

pub struct SimNetwork {
    nodes: BTreeMap<NodeId, Node>,
    links: BTreeMap<(NodeId, NodeId), LinkFaults>,
    clock: u64,
    rng_seed: u64,
    rng: ChaCha8Rng,
    log: Vec<LogRecord>,
    completed: BTreeMap<(NodeId, OpId), OpResult>,
    routes: BTreeMap<(NodeId, ConnId), (NodeId, ConnId)>,
    last_arrival: BTreeMap<(NodeId, ConnId), u64>,
    queue: BTreeMap<(u64, u64), (NodeId, Delivery)>,
    seq: u64,
    next_conn: u64,
}

fn stanza_meta(line: &[u8]) -> (String, String) {
    match decode(line) {
        Ok(s) => (s.kind, s.id),
        Err(_) => ("?".into(), "?".into()),
    }
}

/// Boots every node of `spec` and runs until all roster links are ONLINE.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<SimNetwork, SimError> {
    spec.validate()?;
    let mut nodes = BTreeMap::new();
    let mut links = BTreeMap::new();
    for n in &spec.nodes {
        let peers: Vec<PeerConfig> = n
            .peers
            .iter()
            .map(|p| PeerConfig {
                node_id: p.clone(),
                address: p.to_string(),
            })
            .collect();
        for p in &n.peers {
            links.insert((n.id.clone(), p.clone()), LinkFaults::clean(spec.latency_ms));
        }
        let mut store = Store::in_memory(n.id.clone());
        seed_workspace(&mut store).map_err(|e| SimError::Node(e.to_string()))?;
        nodes.insert(n.id.clone(), Node::new(store, &peers, spec.timeouts, 0));
    }
    for l in &spec.links {
        links.insert(
            (l.from.clone(), l.to.clone()),
            LinkFaults {
                latency_ms: l.latency_ms.unwrap_or(spec.latency_ms),
                drop: l.drop,
                duplicate_prob: l.duplicate_prob,
                corrupt_prob: l.corrupt_prob,
            },
        );
    }
    let mut net = SimNetwork {
        nodes,
        links,
        clock: 0,
        rng_seed: seed,
        rng: ChaCha8Rng::seed_from_u64(seed),
        log: Vec::new(),
        completed: BTreeMap::new(),
        routes: BTreeMap::new(),
        last_arrival: BTreeMap::new(),
        queue: BTreeMap::new(),
        seq: 0,
        next_conn: 0,
    };
    let ids: Vec<NodeId> = net.nodes.keys().cloned().collect();
    for n in &ids {
        let now = net.now();
        net.nodes.get_mut(n).unwrap().start(now);
        net.flush(n);
    }
    let limit = spec.timeouts.handshake_ms + 2 * spec.timeouts.ping_interval_ms;
    while !net.all_online() && net.clock < limit {
        let step = net.clock + spec.latency_ms.max(1);
        net.run_until(step);
    }
    if !net.all_online() {
        return Err(SimError::Boot(format!("links not ONLINE after {limit} ms")));
    }
    Ok(net)
}

fn seed_workspace(store: &mut Store) -> dims_core::Result<()> {
    let at = Timestamp::SIM_EPOCH;
    let ws = store.create_workspace(at, WORKSPACE, "Main", ACTOR)?;
    store.create_module(at, &ws.id, ModuleKind::Content, NOTES, false)?;
    store.create_module(at, &ws.id, ModuleKind::Documents, DOCS, false)?;
    Ok(())
}

impl SimNetwork {
    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Virtual milliseconds since boot.
    pub fn elapsed(&self) -> u64 {
        self.clock
    }

    pub fn now(&self) -> Timestamp {
        Timestamp::SIM_EPOCH.plus_millis(self.clock)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().cloned().collect()
    }

    pub fn node(&self, id: &NodeId) -> &Node {
        &self.nodes[id]
    }

    /// Accepts a full id or an unambiguous local part.
    pub fn resolve(&self, name: &str) -> Option<NodeId> {
        if let Some(id) = self.nodes.keys().find(|id| id.as_str() == name) {
            return Some(id.clone());
        }
        let mut hits = self.nodes.keys().filter(|id| id.as_str().split('@').next() == Some(name));
        match (hits.next(), hits.next()) {
            (Some(id), None) => Some(id.clone()),
            _ => None,
        }
    }

    pub fn links(&self) -> &BTreeMap<(NodeId, NodeId), LinkFaults> {
        &self.links
    }

    pub fn faults(&self, from: &NodeId, to: &NodeId) -> Option<LinkFaults> {
        self.links.get(&(from.clone(), to.clone())).copied()
    }

    pub fn set_faults(&mut self, from: &NodeId, to: &NodeId, faults: LinkFaults) {
        if let Some(l) = self.links.get_mut(&(from.clone(), to.clone())) {
            *l = faults;
        }
    }

    /// Directed roster links currently ONLINE.
    pub fn online_links(&self) -> usize {
        self.nodes
            .values()
            .flat_map(|n| n.links())
            .filter(|l| l.state == LinkState::Online)
            .count()
    }

    pub fn all_online(&self) -> bool {
        self.online_links() == self.links.len()
    }

    pub fn link_state(&self, of: &NodeId, peer: &NodeId) -> Option<LinkState> {
        self.nodes.get(of)?.link(peer).map(|l| l.state)
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn log_ndjson(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    /// Log entries of `node` with `event`, optionally narrowed by stanza type.
    pub fn count(&self, node: &NodeId, event: &str, kind: Option<&str>) -> usize {
        self.log
            .iter()
            .filter(|r| {
                r.node == node.as_str()
                    && r.event == event
                    && kind.is_none_or(|k| r.detail.get("type").and_then(Value::as_str) == Some(k))
            })
            .count()
    }

    fn record(&mut self, node: &str, event: &str, detail: Value) {
        self.log.push(LogRecord {
            t_ms: self.clock,
            node: node.to_string(),
            event: event.to_string(),
            detail,
        });
    }

    /// Runs `f` against one node and routes whatever it produced.
    pub fn with_node<R>(&mut self, id: &NodeId, f: impl FnOnce(&mut Node, Timestamp) -> R) -> R {
        let now = self.now();
        let out = f(self.nodes.get_mut(id).expect("known node"), now);
        self.flush(id);
        out
    }

    /// Starts a federated operation; a local refusal comes back as `Err`.
    pub fn start_op(
        &mut self,
        id: &NodeId,
        f: impl FnOnce(&mut Node, Timestamp) -> Result<OpId, FedError>,
    ) -> Result<OpId, FedError> {
        self.with_node(id, f)
    }

    pub fn take_result(&mut self, id: &NodeId, op: OpId) -> Option<OpResult> {
        self.completed.remove(&(id.clone(), op))
    }

    pub fn is_done(&self, id: &NodeId, op: OpId) -> bool {
        self.completed.contains_key(&(id.clone(), op))
    }

    /// Advances the clock until `op` completes.
    pub fn wait(&mut self, id: &NodeId, op: OpId) -> Option<OpResult> {
        while !self.is_done(id, op) {
            let t = self.next_time()?;
            self.run_until(t);
        }
        self.take_result(id, op)
    }

    /// Starts an operation and waits for it.
    pub fn call(
        &mut self,
        id: &NodeId,
        f: impl FnOnce(&mut Node, Timestamp) -> Result<OpId, FedError>,
    ) -> Result<OpResult, FedError> {
        let op = self.start_op(id, f)?;
        Ok(self.wait(id, op).expect("every op resolves by its deadline"))
    }

    pub fn partition(&mut self, a: &NodeId, b: &NodeId) {
        self.set_drop(a, b, true);
        self.record("net", "partition", json!({"a": a, "b": b}));
    }

    pub fn heal(&mut self, a: &NodeId, b: &NodeId) {
        self.set_drop(a, b, false);
        self.record("net", "heal", json!({"a": a, "b": b}));
    }

    fn set_drop(&mut self, a: &NodeId, b: &NodeId, drop: bool) {
        for key in [(a.clone(), b.clone()), (b.clone(), a.clone())] {
            if let Some(l) = self.links.get_mut(&key) {
                l.drop = drop;
            }
        }
    }

    pub fn set_latency(&mut self, a: &NodeId, b: &NodeId, latency_ms: u64) {
        for key in [(a.clone(), b.clone()), (b.clone(), a.clone())] {
            if let Some(l) = self.links.get_mut(&key) {
                l.latency_ms = latency_ms;
            }
        }
        self.record("net", "set_latency", json!({"a": a, "b": b, "latency_ms": latency_ms}));
    }

    fn enqueue(&mut self, at: u64, dest: NodeId, d: Delivery) {
        self.seq += 1;
        self.queue.insert((at, self.seq), (dest, d));
    }

    /// Flips one byte of a `content_b64` payload. Returns the byte index.
    fn corrupt(&mut self, line: &mut Vec<u8>) -> Option<usize> {
        let mut s = decode(line).ok()?;
        let mut bytes = decode_b64(s.payload.get("content_b64")?.as_str()?).ok()?;
        if bytes.is_empty() {
            return None;
        }
        let at = self.rng.random_range(0..bytes.len());
        bytes[at] ^= self.rng.random_range(1..=255u8);
        s.payload.insert("content_b64".into(), encode_b64(&bytes).into());
        *line = encode(&s);
        Some(at)
    }

    fn has_content(line: &[u8]) -> bool {
        decode(line).is_ok_and(|s| s.payload.get("content_b64").and_then(Value::as_str).is_some_and(|c| !c.is_empty()))
    }

    fn flush(&mut self, n: &NodeId) {
        let node = self.nodes.get_mut(n).expect("known node");
        let outputs = node.drain_outputs();
        let events = node.drain_events();
        for e in events {
            self.record(n.as_str(), e.event, e.detail);
        }
        for out in outputs {
            match out {
                Output::Send { conn, line } => self.send(n, conn, line),
                Output::Close { conn } => {
                    if let Some((dest, rconn)) = self.routes.remove(&(n.clone(), conn)) {
                        self.routes.remove(&(dest.clone(), rconn));
                        let latency = self.faults(n, &dest).map_or(0, |f| f.latency_ms);
                        let at = self.arrival(&dest, rconn, latency);
                        self.enqueue(at, dest, Delivery::Closed(rconn));
                    }
                }
                Output::Dial { peer, address } => self.dial(n, peer, &address),
                Output::Completed { op, result } => {
                    self.completed.insert((n.clone(), op), result);
                }
            }
        }
    }

    /// Arrival time on one connection; lines never overtake each other.
    fn arrival(&mut self, dest: &NodeId, rconn: ConnId, latency: u64) -> u64 {
        let key = (dest.clone(), rconn);
        let at = (self.clock + latency).max(self.last_arrival.get(&key).copied().unwrap_or(0));
        self.last_arrival.insert(key, at);
        at
    }

    fn send(&mut self, n: &NodeId, conn: ConnId, mut line: Vec<u8>) {
        let Some((dest, rconn)) = self.routes.get(&(n.clone(), conn)).cloned() else {
            return;
        };
        let faults = self.faults(n, &dest).unwrap_or(LinkFaults::clean(0));
        if faults.drop {
            let (kind, id) = stanza_meta(&line);
            self.record(n.as_str(), "net_dropped", json!({"to": dest, "type": kind, "id": id}));
            return;
        }
        if faults.corrupt_prob > 0.0 && Self::has_content(&line) && self.rng.random_bool(faults.corrupt_prob) {
            if let Some(byte) = self.corrupt(&mut line) {
                let (kind, id) = stanza_meta(&line);
                self.record(n.as_str(), "net_corrupted", json!({"to": dest, "type": kind, "id": id, "byte": byte}));
            }
        }
        let copies = if faults.duplicate_prob > 0.0 && self.rng.random_bool(faults.duplicate_prob) {
            let (kind, id) = stanza_meta(&line);
            self.record(n.as_str(), "net_duplicated", json!({"to": dest, "type": kind, "id": id}));
            2
        } else {
            1
        };
        for _ in 0..copies {
            let at = self.arrival(&dest, rconn, faults.latency_ms);
            self.enqueue(at, dest.clone(), Delivery::Line(rconn, line.clone()));
        }
    }

    fn dial(&mut self, n: &NodeId, peer: NodeId, address: &str) {
        let now = self.now();
        let target = NodeId::parse(address).ok().filter(|t| self.nodes.contains_key(t));
        let reachable = target.filter(|t| self.faults(n, t).is_some_and(|f| !f.drop));
        let Some(target) = reachable else {
            self.nodes.get_mut(n).unwrap().on_dial_failed(&peer, now);
            self.flush(n);
            return;
        };
        self.next_conn += 1;
        let a = ConnId(self.next_conn);
        self.next_conn += 1;
        let b = ConnId(self.next_conn);
        self.routes.insert((n.clone(), a), (target.clone(), b));
        self.routes.insert((target.clone(), b), (n.clone(), a));
        self.nodes.get_mut(&target).unwrap().on_connected(b, None, now);
        self.flush(&target);
        self.nodes.get_mut(n).unwrap().on_connected(a, Some(&peer), now);
        self.flush(n);
    }

    /// Next virtual time at which anything happens.
    pub fn next_time(&self) -> Option<u64> {
        let q = self.queue.keys().next().map(|k| k.0);
        let d = self
            .nodes
            .values()
            .filter_map(Node::next_deadline)
            .map(|t| (t.millis() - Timestamp::SIM_EPOCH.millis()).max(0) as u64)
            .min();
        q.into_iter().chain(d).min()
    }

    /// Processes everything due up to and including virtual `until`.
    pub fn run_until(&mut self, until: u64) {
        while let Some(t) = self.next_time().filter(|t| *t <= until) {
            self.clock = self.clock.max(t);
            let due: Vec<(u64, u64)> = self.queue.range(..=(self.clock, u64::MAX)).map(|(k, _)| *k).collect();
            for k in due {
                let (dest, d) = self.queue.remove(&k).unwrap();
                let now = self.now();
                let node = self.nodes.get_mut(&dest).unwrap();
                match d {
                    Delivery::Line(conn, line) => node.on_line(conn, &line, now),
                    Delivery::Closed(conn) => {
                        self.last_arrival.remove(&(dest.clone(), conn));
                        node.on_closed(conn, now)
                    }
                }
                self.flush(&dest);
            }
            let now = self.now();
            let ids: Vec<NodeId> = self.nodes.keys().cloned().collect();
            for n in ids {
                let node = self.nodes.get_mut(&n).unwrap();
                if node.next_deadline().is_some_and(|d| d <= now) {
                    node.on_tick(now);
                    self.flush(&n);
                }
            }
        }
        self.clock = self.clock.max(until);
    }

    pub fn run_for(&mut self, delta: u64) {
        self.run_until(self.clock + delta);
    }
}
