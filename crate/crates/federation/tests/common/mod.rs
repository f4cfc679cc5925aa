#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dims_core::config::{PeerConfig, Timeouts};
use dims_core::model::ModuleKind;
use dims_core::{NodeId, Store, Timestamp};
use dims_federation::{ConnId, Node, NodeEvent, OpId, OpResult, Output};

pub fn id(name: &str) -> NodeId {
    NodeId::parse(&format!("{name}@dims")).unwrap()
}

pub fn ms(t: u64) -> Timestamp {
    Timestamp::SIM_EPOCH.plus_millis(t)
}

enum Delivery {
    Line(ConnId, Vec<u8>),
    Closed(ConnId),
}

pub type Tamper = Box<dyn FnMut(&NodeId, &NodeId, &mut Vec<u8>) -> bool>;

/// Minimal in-order, fixed-latency network for driving nodes in tests.
pub struct Pump {
    pub nodes: BTreeMap<NodeId, Node>,
    pub now: Timestamp,
    pub latency: u64,
    /// Directed pairs whose traffic is dropped.
    pub blocked: BTreeSet<(NodeId, NodeId)>,
    /// Rewrites a line in flight; returning false drops it.
    pub tamper: Option<Tamper>,
    /// Lines from the first node to the second are delivered twice.
    pub duplicate: BTreeSet<(NodeId, NodeId)>,
    pub completed: Vec<(NodeId, OpId, OpResult)>,
    pub events: Vec<(u64, NodeId, NodeEvent)>,
    routes: BTreeMap<(NodeId, ConnId), (NodeId, ConnId)>,
    queue: BTreeMap<(Timestamp, u64), (NodeId, Delivery)>,
    seq: u64,
    next_conn: u64,
}

impl Pump {
    pub fn new(names: &[&str], edges: &[(&str, &str)], timeouts: Timeouts) -> Self {
        let mut peers: BTreeMap<NodeId, Vec<PeerConfig>> =
            names.iter().map(|n| (id(n), Vec::new())).collect();
        for (a, b) in edges {
            peers.get_mut(&id(a)).unwrap().push(PeerConfig {
                node_id: id(b),
                address: id(b).to_string(),
            });
            peers.get_mut(&id(b)).unwrap().push(PeerConfig {
                node_id: id(a),
                address: id(a).to_string(),
            });
        }
        let nodes = peers
            .into_iter()
            .map(|(nid, p)| {
                let node = Node::new(Store::in_memory(nid.clone()), &p, timeouts, 0);
                (nid, node)
            })
            .collect();
        Self::from_nodes(nodes)
    }

    pub fn from_nodes(nodes: BTreeMap<NodeId, Node>) -> Self {
        Pump {
            nodes,
            now: Timestamp::SIM_EPOCH,
            latency: 10,
            blocked: BTreeSet::new(),
            tamper: None,
            duplicate: BTreeSet::new(),
            completed: Vec::new(),
            events: Vec::new(),
            routes: BTreeMap::new(),
            queue: BTreeMap::new(),
            seq: 0,
            next_conn: 0,
        }
    }

    pub fn node(&mut self, name: &str) -> &mut Node {
        self.nodes.get_mut(&id(name)).unwrap()
    }

    pub fn start(&mut self) {
        let ids: Vec<NodeId> = self.nodes.keys().cloned().collect();
        for n in ids {
            let now = self.now;
            self.nodes.get_mut(&n).unwrap().start(now);
            self.flush(&n);
        }
    }

    fn enqueue(&mut self, at: Timestamp, dest: NodeId, d: Delivery) {
        self.seq += 1;
        self.queue.insert((at, self.seq), (dest, d));
    }

    /// Collects outputs of `n` (and of anything they trigger).
    pub fn flush(&mut self, n: &NodeId) {
        let now = self.now;
        let outputs = self.nodes.get_mut(n).unwrap().drain_outputs();
        for ev in self.nodes.get_mut(n).unwrap().drain_events() {
            self.events.push((self.elapsed(), n.clone(), ev));
        }
        for out in outputs {
            match out {
                Output::Send { conn, mut line } => {
                    let Some((dest, rconn)) = self.routes.get(&(n.clone(), conn)).cloned() else {
                        continue;
                    };
                    if self.blocked.contains(&(n.clone(), dest.clone())) {
                        continue;
                    }
                    if let Some(t) = self.tamper.as_mut() {
                        if !t(n, &dest, &mut line) {
                            continue;
                        }
                    }
                    let at = now.plus_millis(self.latency);
                    if self.duplicate.contains(&(n.clone(), dest.clone())) {
                        self.enqueue(at, dest.clone(), Delivery::Line(rconn, line.clone()));
                    }
                    self.enqueue(at, dest, Delivery::Line(rconn, line));
                }
                Output::Close { conn } => {
                    if let Some((dest, rconn)) = self.routes.remove(&(n.clone(), conn)) {
                        self.routes.remove(&(dest.clone(), rconn));
                        let at = now.plus_millis(self.latency);
                        self.enqueue(at, dest, Delivery::Closed(rconn));
                    }
                }
                Output::Dial { peer, address } => {
                    let target = NodeId::parse(&address).ok().filter(|t| self.nodes.contains_key(t));
                    let Some(target) = target.filter(|t| !self.blocked.contains(&(n.clone(), t.clone()))) else {
                        self.nodes.get_mut(n).unwrap().on_dial_failed(&peer, now);
                        self.flush(n);
                        continue;
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
                Output::Completed { op, result } => self.completed.push((n.clone(), op, result)),
            }
        }
    }

    pub fn elapsed(&self) -> u64 {
        (self.now.millis() - Timestamp::SIM_EPOCH.millis()) as u64
    }

    fn next_time(&self) -> Option<Timestamp> {
        let q = self.queue.keys().next().map(|k| k.0);
        let d = self.nodes.values().filter_map(Node::next_deadline).min();
        q.into_iter().chain(d).min()
    }

    /// Runs every event up to and including virtual `until` (ms since start).
    pub fn run_until(&mut self, until: u64) {
        let limit = ms(until);
        while let Some(t) = self.next_time().filter(|t| *t <= limit) {
            self.now = self.now.max(t);
            let due: Vec<(Timestamp, u64)> =
                self.queue.range(..=(t, u64::MAX)).map(|(k, _)| *k).collect();
            for k in due {
                let (dest, d) = self.queue.remove(&k).unwrap();
                let now = self.now;
                let node = self.nodes.get_mut(&dest).unwrap();
                match d {
                    Delivery::Line(conn, line) => node.on_line(conn, &line, now),
                    Delivery::Closed(conn) => node.on_closed(conn, now),
                }
                self.flush(&dest);
            }
            let ids: Vec<NodeId> = self.nodes.keys().cloned().collect();
            for n in ids {
                let now = self.now;
                let node = self.nodes.get_mut(&n).unwrap();
                if node.next_deadline().is_some_and(|d| d <= now) {
                    node.on_tick(now);
                    self.flush(&n);
                }
            }
        }
        self.now = self.now.max(limit);
    }

    pub fn run_for(&mut self, delta: u64) {
        let until = self.elapsed() + delta;
        self.run_until(until);
    }

    /// Runs until `op` on `name` completes, returning its result.
    pub fn wait(&mut self, name: &str, op: OpId) -> OpResult {
        let n = id(name);
        for _ in 0..100_000 {
            if let Some(i) = self.completed.iter().position(|(who, o, _)| *who == n && *o == op) {
                return self.completed.remove(i).2;
            }
            let Some(t) = self.next_time() else { break };
            let until = (t.millis() - Timestamp::SIM_EPOCH.millis()) as u64;
            self.run_until(until);
        }
        panic!("op {op:?} on {name} never completed");
    }

    pub fn partition(&mut self, a: &str, b: &str) {
        self.blocked.insert((id(a), id(b)));
        self.blocked.insert((id(b), id(a)));
    }

    pub fn heal(&mut self, a: &str, b: &str) {
        self.blocked.remove(&(id(a), id(b)));
        self.blocked.remove(&(id(b), id(a)));
    }

    pub fn count_events(&self, name: &str, event: &str, kind: Option<&str>) -> usize {
        self.events
            .iter()
            .filter(|(_, n, e)| {
                *n == id(name)
                    && e.event == event
                    && kind.is_none_or(|k| e.detail.get("type").and_then(|t| t.as_str()) == Some(k))
            })
            .count()
    }
}

/// Workspace "main" with a CONTENT module "notes" and a DOCUMENTS module
/// "docs"; returns the two module ids.
pub fn seed_workspace(node: &mut Node) -> (String, String) {
    let store = node.store_mut();
    let at = Timestamp::SIM_EPOCH;
    let ws = store.create_workspace(at, "main", "Main", "alice").unwrap();
    store.add_member(at, &ws.id, "alice", "bob").unwrap();
    let notes = store.create_module(at, &ws.id, ModuleKind::Content, "notes", false).unwrap();
    let docs = store.create_module(at, &ws.id, ModuleKind::Documents, "docs", false).unwrap();
    (notes.id, docs.id)
}
