//! The federated node as a pure state machine.
//!
//! Transports feed it connection events and lines; timers are driven by
//! `on_tick` with whatever clock the caller owns. Everything the node wants
//! to do comes back through [`Node::drain_outputs`], so the same engine runs
//! under tokio and under the deterministic simulator.

use std::collections::{BTreeMap, BTreeSet};

use dims_core::config::{PeerConfig, Timeouts};
use dims_core::docstore::content_hash;
use dims_core::query::parse_query;
use dims_core::{Error as CoreError, NodeId, Store, Timestamp};
use serde::Serialize;
use serde_json::{json, Value};

use crate::link::{ConnId, LinkState, Pending, PeerLink, RosterEntry, QUEUE_LIMIT};
use crate::ops::{
    Delivery, FedError, FederatedResultSet, FetchedVersion, LocateResult, NodeResults, OpId,
    OpResult, PeerStatus, PushOutcome,
};
use crate::stanza::{
    codes, decode, decode_b64, encode, encode_b64, CodecError, Empty, ErrorPayload, FetchRequest,
    FetchResponse, Hello, LocateHit, LocateRequest, LocateResponse, Message, Presence,
    PresenceState, PushRequest, PushResponse, Reply, SearchHit, SearchRequest, SearchResponse,
    Stanza, StanzaKind, MAX_RESULTS, PROTO_VERSION,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Send { conn: ConnId, line: Vec<u8> },
    Close { conn: ConnId },
    Dial { peer: NodeId, address: String },
    Completed { op: OpId, result: OpResult },
}

/// Something worth logging. `detail` is free-form JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeEvent {
    pub event: &'static str,
    pub detail: Value,
}

#[derive(Debug, Clone)]
struct Conn {
    peer: Option<NodeId>,
    accept_deadline: Option<Timestamp>,
}

#[derive(Debug, Clone)]
enum Op {
    Search {
        query: String,
        waiting: BTreeSet<NodeId>,
        per_node: BTreeMap<NodeId, NodeResults>,
    },
    Locate {
        selector: String,
        waiting: BTreeSet<NodeId>,
        hits: Vec<LocateHit>,
        per_node: BTreeMap<NodeId, PeerStatus>,
    },
    Fetch { doc_id: String },
    Push { doc_id: String },
}

enum Outcome<'a> {
    Stanza(&'a Stanza),
    Timeout,
    Unavailable,
}

pub struct Node {
    id: NodeId,
    timeouts: Timeouts,
    store: Store,
    boot: u64,
    seq: u64,
    next_op: u64,
    available: bool,
    links: BTreeMap<NodeId, PeerLink>,
    conns: BTreeMap<ConnId, Conn>,
    ops: BTreeMap<OpId, Op>,
    outputs: Vec<Output>,
    events: Vec<NodeEvent>,
}

fn ev(event: &'static str, detail: Value) -> NodeEvent {
    NodeEvent { event, detail }
}

impl Node {
    /// `boot` distinguishes stanza ids across restarts; any value that
    /// differs between runs of the same node will do.
    pub fn new(store: Store, peers: &[PeerConfig], timeouts: Timeouts, boot: u64) -> Self {
        let id = store.node().clone();
        let links = peers
            .iter()
            .map(|p| {
                let dialer = id < p.node_id;
                (p.node_id.clone(), PeerLink::new(p.node_id.clone(), p.address.clone(), dialer))
            })
            .collect();
        Node {
            id,
            timeouts,
            store,
            boot,
            seq: 0,
            next_op: 0,
            available: true,
            links,
            conns: BTreeMap::new(),
            ops: BTreeMap::new(),
            outputs: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut Store {
        &mut self.store
    }

    pub fn timeouts(&self) -> &Timeouts {
        &self.timeouts
    }

    pub fn is_available(&self) -> bool {
        self.available
    }

    pub fn link(&self, peer: &NodeId) -> Option<&PeerLink> {
        self.links.get(peer)
    }

    pub fn links(&self) -> impl Iterator<Item = &PeerLink> {
        self.links.values()
    }

    pub fn roster(&self) -> Vec<RosterEntry> {
        self.links
            .values()
            .map(|l| RosterEntry {
                peer: l.peer.clone(),
                address: l.address.clone(),
                state: l.state,
                last_seen: l.last_seen,
                queued: l.queue.len(),
            })
            .collect()
    }

    /// Requests sent and still waiting for a reply or a deadline.
    pub fn pending_requests(&self) -> usize {
        self.links.values().map(|l| l.pending.len()).sum()
    }

    pub fn open_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn drain_outputs(&mut self) -> Vec<Output> {
        std::mem::take(&mut self.outputs)
    }

    pub fn drain_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        let links = self.links.values().filter_map(PeerLink::next_deadline);
        let conns = self.conns.values().filter_map(|c| c.accept_deadline);
        links.chain(conns).min()
    }

    // ---- plumbing -----------------------------------------------------------

    fn next_stanza_id(&mut self) -> String {
        self.seq += 1;
        format!("{:x}-{}", self.boot, self.seq)
    }

    fn alloc_op(&mut self) -> OpId {
        self.next_op += 1;
        OpId(self.next_op)
    }

    fn emit(&mut self, event: NodeEvent) {
        self.events.push(event);
    }

    fn stanza(&mut self, kind: StanzaKind, to: &NodeId, now: Timestamp, payload: impl Serialize) -> Stanza {
        let id = self.next_stanza_id();
        Stanza::new(kind, id, self.id.clone(), to.clone(), now, payload)
    }

    fn write(&mut self, conn: ConnId, stanza: &Stanza) -> Vec<u8> {
        let line = encode(stanza);
        self.emit(ev(
            "stanza_sent",
            json!({"peer": stanza.to, "type": stanza.kind, "id": stanza.id}),
        ));
        self.outputs.push(Output::Send {
            conn,
            line: line.clone(),
        });
        line
    }

    /// Sends on the peer's current connection. Returns the encoded line.
    fn send(&mut self, peer: &NodeId, stanza: &Stanza) -> Option<Vec<u8>> {
        let conn = self.links.get(peer)?.conn?;
        Some(self.write(conn, stanza))
    }

    fn send_new(&mut self, peer: &NodeId, kind: StanzaKind, now: Timestamp, payload: impl Serialize) -> String {
        let stanza = self.stanza(kind, peer, now, payload);
        self.send(peer, &stanza);
        stanza.id
    }

    fn error_stanza(&mut self, to: &NodeId, in_reply_to: &str, code: &str, text: String, current_version: Option<u64>, now: Timestamp) -> Stanza {
        let payload = ErrorPayload {
            in_reply_to: in_reply_to.to_string(),
            code: code.to_string(),
            text,
            current_version,
        };
        self.stanza(StanzaKind::Error, to, now, payload)
    }

    fn close(&mut self, conn: ConnId) {
        if self.conns.remove(&conn).is_some() {
            self.outputs.push(Output::Close { conn });
        }
    }

    fn set_state(&mut self, peer: &NodeId, to: LinkState, now: Timestamp) {
        let Some(link) = self.links.get_mut(peer) else {
            return;
        };
        let from = link.state;
        if from == to {
            return;
        }
        link.state = to;
        if from == LinkState::Online {
            link.ping = None;
            link.next_ping = None;
        }
        let failed: Vec<Pending> = if from == LinkState::Online {
            std::mem::take(&mut link.pending).into_values().collect()
        } else {
            Vec::new()
        };
        self.emit(ev(
            "link_state",
            json!({"peer": peer, "from": from.as_str(), "to": to.as_str()}),
        ));
        if to.is_reported() {
            if let Err(e) = self.store.roster_change(now, peer, to.as_str()) {
                tracing::error!(%peer, error = %e, "could not journal roster change");
            }
        }
        for p in failed {
            self.resolve(p.op, peer, Outcome::Unavailable, now);
        }
    }

    fn go_online(&mut self, peer: &NodeId, now: Timestamp) {
        self.set_state(peer, LinkState::Online, now);
        let interval = self.timeouts.ping_interval_ms;
        let Some(link) = self.links.get_mut(peer) else {
            return;
        };
        link.hello_id = None;
        link.deadline = None;
        link.retry_at = None;
        link.strikes = 0;
        link.ping = None;
        link.next_ping = Some(now.plus_millis(interval));
        link.declared_unavailable = false;
        let queued: Vec<Message> = link.queue.drain(..).collect();
        let state = if self.available {
            PresenceState::Available
        } else {
            PresenceState::Unavailable
        };
        self.send_new(peer, StanzaKind::Presence, now, Presence { state });
        for m in queued {
            self.send_new(peer, StanzaKind::Message, now, m);
        }
    }

    /// Sends a fresh hello on the current connection and waits for its reply.
    fn send_hello(&mut self, peer: &NodeId, now: Timestamp) {
        let hello = Hello {
            node_id: self.id.clone(),
            proto_version: PROTO_VERSION,
            in_reply_to: None,
        };
        let id = self.send_new(peer, StanzaKind::Hello, now, hello);
        if let Some(link) = self.links.get_mut(peer) {
            link.hello_id = Some(id);
        }
    }

    fn rehandshake(&mut self, peer: &NodeId, now: Timestamp) {
        self.set_state(peer, LinkState::Handshaking, now);
        let deadline = now.plus_millis(self.timeouts.handshake_ms);
        if let Some(link) = self.links.get_mut(peer) {
            link.deadline = Some(deadline);
            link.retry_at = None;
        }
        self.send_hello(peer, now);
    }

    fn dial(&mut self, peer: &NodeId, now: Timestamp) {
        let deadline = now.plus_millis(self.timeouts.handshake_ms);
        let Some(link) = self.links.get_mut(peer) else {
            return;
        };
        link.retry_at = None;
        link.deadline = Some(deadline);
        let address = link.address.clone();
        self.set_state(peer, LinkState::Connecting, now);
        self.outputs.push(Output::Dial {
            peer: peer.clone(),
            address,
        });
    }

    /// Drops the link's connection and schedules a redial if we dial.
    fn disconnect(&mut self, peer: &NodeId, now: Timestamp) {
        let retry = now.plus_millis(self.timeouts.ping_interval_ms);
        let Some(link) = self.links.get_mut(peer) else {
            return;
        };
        let conn = link.conn.take();
        link.hello_id = None;
        link.deadline = None;
        link.retry_at = link.dialer.then_some(retry);
        if let Some(c) = conn {
            self.close(c);
        }
        self.set_state(peer, LinkState::Disconnected, now);
    }

    // ---- transport inputs ---------------------------------------------------

    pub fn start(&mut self, now: Timestamp) {
        let dialers: Vec<NodeId> = self
            .links
            .values()
            .filter(|l| l.dialer)
            .map(|l| l.peer.clone())
            .collect();
        for peer in dialers {
            self.dial(&peer, now);
        }
    }

    /// A connection is up. `dialed` names the peer when we initiated it.
    pub fn on_connected(&mut self, conn: ConnId, dialed: Option<&NodeId>, now: Timestamp) {
        match dialed {
            Some(peer) => {
                let Some(link) = self.links.get_mut(peer) else {
                    self.conns.insert(conn, Conn { peer: None, accept_deadline: None });
                    self.close(conn);
                    return;
                };
                let old = link.conn.replace(conn);
                self.conns.insert(
                    conn,
                    Conn {
                        peer: Some(peer.clone()),
                        accept_deadline: None,
                    },
                );
                if let Some(old) = old.filter(|c| *c != conn) {
                    self.close(old);
                }
                self.rehandshake(peer, now);
            }
            None => {
                let deadline = now.plus_millis(self.timeouts.handshake_ms);
                self.conns.insert(
                    conn,
                    Conn {
                        peer: None,
                        accept_deadline: Some(deadline),
                    },
                );
            }
        }
    }

    pub fn on_dial_failed(&mut self, peer: &NodeId, now: Timestamp) {
        self.emit(ev("dial_failed", json!({"peer": peer})));
        let retry = now.plus_millis(self.timeouts.ping_interval_ms);
        if let Some(link) = self.links.get_mut(peer) {
            link.deadline = None;
            link.retry_at = Some(retry);
        }
        self.set_state(peer, LinkState::Disconnected, now);
    }

    pub fn on_closed(&mut self, conn: ConnId, now: Timestamp) {
        let Some(c) = self.conns.remove(&conn) else {
            return;
        };
        if let Some(peer) = c.peer {
            if self.links.get(&peer).and_then(|l| l.conn) == Some(conn) {
                self.emit(ev("connection_closed", json!({"peer": peer})));
                self.disconnect(&peer, now);
            }
        }
    }

    pub fn on_line(&mut self, conn: ConnId, line: &[u8], now: Timestamp) {
        let Some(bound) = self.conns.get(&conn).map(|c| c.peer.clone()) else {
            return;
        };
        let stanza = match decode(line) {
            Ok(s) => s,
            Err(e) => return self.on_bad_line(conn, bound, e, now),
        };
        let is_hello = stanza.kind() == Some(StanzaKind::Hello);
        if stanza.to != self.id {
            self.emit(ev("misrouted", json!({"id": stanza.id, "to": stanza.to})));
            if is_hello && bound.is_none() {
                // someone dialed us thinking we are another node
                self.emit(ev("peer_id_mismatch", json!({"expected": stanza.to, "announced": self.id})));
                let reply = self.error_stanza(&stanza.from, &stanza.id, codes::UNSUPPORTED, format!("this is {}, not {}", self.id, stanza.to), None, now);
                self.write(conn, &reply);
                self.close(conn);
            }
            return;
        }
        if let Some(peer) = bound.as_ref().filter(|_| !is_hello) {
            if stanza.from != *peer {
                let handshaking = self
                    .links
                    .get(peer)
                    .is_some_and(|l| l.conn == Some(conn) && l.state == LinkState::Handshaking);
                if handshaking {
                    self.emit(ev("peer_id_mismatch", json!({"expected": peer, "announced": stanza.from})));
                    let peer = peer.clone();
                    return self.disconnect(&peer, now);
                }
                self.emit(ev("spoofed", json!({"expected": peer, "from": stanza.from})));
                return;
            }
        }
        self.emit(ev(
            "stanza_received",
            json!({"peer": stanza.from, "type": stanza.kind, "id": stanza.id}),
        ));
        if is_hello {
            return self.on_hello(conn, bound, &stanza, now);
        }
        match bound {
            Some(peer) => self.on_peer_stanza(&peer, &stanza, now),
            None => {
                self.emit(ev("stanza_before_hello", json!({"id": stanza.id})));
                self.close(conn);
            }
        }
    }

    fn on_bad_line(&mut self, conn: ConnId, bound: Option<NodeId>, err: CodecError, now: Timestamp) {
        tracing::warn!(error = %err, "rejected line");
        self.emit(ev("malformed", json!({"code": err.code(), "text": err.to_string()})));
        let teardown = matches!(err, CodecError::TooLong(_)) || bound.is_none();
        if let Some(peer) = &bound {
            let reply = self.error_stanza(peer, "", err.code(), err.to_string(), None, now);
            self.write(conn, &reply);
        }
        if teardown {
            match bound {
                Some(peer) => self.disconnect(&peer, now),
                None => self.close(conn),
            }
        }
    }

    fn on_hello(&mut self, conn: ConnId, bound: Option<NodeId>, stanza: &Stanza, now: Timestamp) {
        let hello: Hello = match stanza.payload_as() {
            Ok(h) => h,
            Err(e) => return self.on_bad_line(conn, bound, e, now),
        };
        if hello.proto_version != PROTO_VERSION {
            self.emit(ev(
                "unsupported_version",
                json!({"peer": stanza.from, "proto_version": hello.proto_version}),
            ));
            let reply = self.error_stanza(&stanza.from, &stanza.id, codes::UNSUPPORTED, format!("protocol version {} is not supported", hello.proto_version), None, now);
            self.write(conn, &reply);
            return match bound {
                Some(peer) => self.disconnect(&peer, now),
                None => self.close(conn),
            };
        }
        let announced = hello.node_id.clone();
        let dialer_side = bound
            .as_ref()
            .and_then(|p| self.links.get(p))
            .is_some_and(|l| l.dialer);
        if dialer_side {
            let peer = bound.expect("dialer connections are bound");
            if announced != peer || stanza.from != peer {
                self.emit(ev("peer_id_mismatch", json!({"expected": peer, "announced": announced})));
                return self.disconnect(&peer, now);
            }
            if let Some(link) = self.links.get_mut(&peer) {
                link.last_seen = Some(now);
            }
            let awaiting = self.links[&peer].hello_id.clone();
            match (&hello.in_reply_to, awaiting) {
                (Some(r), Some(ours)) if *r == ours => self.go_online(&peer, now),
                (None, _) if self.links[&peer].state != LinkState::Handshaking => {
                    self.rehandshake(&peer, now)
                }
                _ => self.emit(ev("stale_hello", json!({"peer": peer, "id": stanza.id}))),
            }
            return;
        }

        // responder side
        let known = self.links.get(&announced).is_some_and(|l| !l.dialer);
        if !known || announced != stanza.from || bound.as_ref().is_some_and(|b| *b != announced) {
            self.emit(ev("peer_id_mismatch", json!({"expected": bound, "announced": announced})));
            let reply = self.error_stanza(&stanza.from, &stanza.id, codes::UNSUPPORTED, format!("{announced} is not an expected peer"), None, now);
            self.write(conn, &reply);
            return self.close(conn);
        }
        let peer = announced;
        if let Some(c) = self.conns.get_mut(&conn) {
            c.peer = Some(peer.clone());
            c.accept_deadline = None;
        }
        let link = self.links.get_mut(&peer).expect("checked above");
        link.last_seen = Some(now);
        let old = link.conn.replace(conn);
        if let Some(old) = old.filter(|c| *c != conn) {
            self.close(old);
        }
        let reply = Hello {
            node_id: self.id.clone(),
            proto_version: PROTO_VERSION,
            in_reply_to: Some(stanza.id.clone()),
        };
        self.send_new(&peer, StanzaKind::Hello, now, reply);
        self.go_online(&peer, now);
    }

    fn on_peer_stanza(&mut self, peer: &NodeId, stanza: &Stanza, now: Timestamp) {
        let (state, declared) = {
            let link = self.links.get_mut(peer).expect("bound connections have links");
            link.last_seen = Some(now);
            (link.state, link.declared_unavailable)
        };
        let kind = stanza.kind();
        match state {
            LinkState::Online => {}
            LinkState::Unavailable if declared => {}
            LinkState::Unavailable => {
                if kind == Some(StanzaKind::Presence) {
                    if let Ok(Presence { state: PresenceState::Available }) = stanza.payload_as() {
                        return self.go_online(peer, now);
                    }
                }
                // the peer still thinks the link is up: get back in sync
                if self.links[peer].dialer {
                    self.rehandshake(peer, now);
                } else {
                    self.send_new(
                        peer,
                        StanzaKind::Hello,
                        now,
                        Hello {
                            node_id: self.id.clone(),
                            proto_version: PROTO_VERSION,
                            in_reply_to: None,
                        },
                    );
                }
                return;
            }
            _ => {
                self.emit(ev("dropped", json!({"peer": peer, "id": stanza.id, "state": state.as_str()})));
                return;
            }
        }

        match kind {
            Some(StanzaKind::Presence) => self.on_presence(peer, stanza, now),
            Some(StanzaKind::Ping) => {
                let reply = Reply {
                    in_reply_to: stanza.id.clone(),
                };
                self.send_new(peer, StanzaKind::Pong, now, reply);
            }
            Some(StanzaKind::Pong) => {
                let link = self.links.get_mut(peer).expect("checked above");
                if link.ping.as_ref().map(|p| p.0.as_str()) == stanza.in_reply_to() {
                    link.ping = None;
                    link.strikes = 0;
                }
            }
            Some(StanzaKind::Message) => self.on_message(peer, stanza, now),
            Some(k) if k.is_request() => self.on_request(peer, stanza, now),
            Some(
                StanzaKind::SearchResponse
                | StanzaKind::LocateResponse
                | StanzaKind::FetchResponse
                | StanzaKind::PushResponse
                | StanzaKind::Error,
            ) => self.on_response(peer, stanza, now),
            _ => {
                let reply = self.error_stanza(peer, &stanza.id, codes::UNSUPPORTED, format!("unknown stanza type {:?}", stanza.kind), None, now);
                self.send(peer, &reply);
            }
        }
    }

    fn on_presence(&mut self, peer: &NodeId, stanza: &Stanza, now: Timestamp) {
        let Ok(Presence { state }) = stanza.payload_as() else {
            self.emit(ev("malformed", json!({"peer": peer, "id": stanza.id})));
            return;
        };
        match state {
            PresenceState::Available => {
                if let Some(link) = self.links.get_mut(peer) {
                    link.declared_unavailable = false;
                }
                if self.links[peer].state == LinkState::Unavailable {
                    self.go_online(peer, now);
                }
            }
            PresenceState::Unavailable => {
                if let Some(link) = self.links.get_mut(peer) {
                    link.declared_unavailable = true;
                    link.retry_at = None;
                }
                self.set_state(peer, LinkState::Unavailable, now);
            }
        }
    }

    fn on_message(&mut self, peer: &NodeId, stanza: &Stanza, now: Timestamp) {
        if self.links[peer].seen.get(&stanza.id).is_some() {
            self.emit(ev("duplicate_message", json!({"peer": peer, "id": stanza.id})));
            return;
        }
        let Ok(m) = stanza.payload_as::<Message>() else {
            let reply = self.error_stanza(peer, &stanza.id, codes::MALFORMED, "bad message payload".into(), None, now);
            self.send(peer, &reply);
            return;
        };
        self.links
            .get_mut(peer)
            .expect("checked above")
            .seen
            .insert(&stanza.id, Vec::new());
        match self
            .store
            .deliver_message(now, peer, m.from_actor.as_deref(), m.to_actor.as_deref(), &m.body)
        {
            Ok(entry) => self.emit(ev(
                "message_delivered",
                json!({"peer": peer, "id": stanza.id, "inbox_id": entry.id}),
            )),
            Err(e) => tracing::error!(%peer, error = %e, "could not deliver message"),
        }
    }

    fn on_request(&mut self, peer: &NodeId, stanza: &Stanza, now: Timestamp) {
        if let Some(cached) = self.links[peer].seen.get(&stanza.id).map(<[u8]>::to_vec) {
            self.emit(ev(
                "duplicate_request",
                json!({"peer": peer, "type": stanza.kind, "id": stanza.id}),
            ));
            if let Some(conn) = self.links[peer].conn {
                if let Ok(reply) = decode(&cached) {
                    self.emit(ev(
                        "stanza_sent",
                        json!({"peer": reply.to, "type": reply.kind, "id": reply.id, "cached": true}),
                    ));
                }
                self.outputs.push(Output::Send { conn, line: cached });
            }
            return;
        }
        let reply = self.handle_request(stanza, now);
        if let Some(line) = self.send(peer, &reply) {
            self.links
                .get_mut(peer)
                .expect("checked above")
                .seen
                .insert(&stanza.id, line);
        }
    }

    /// Answers one request against the local store. Never forwards.
    fn handle_request(&mut self, stanza: &Stanza, now: Timestamp) -> Stanza {
        let from = stanza.from.clone();
        self.emit(ev(
            "request_processed",
            json!({"peer": from, "type": stanza.kind, "id": stanza.id}),
        ));
        let malformed = |node: &mut Node, e: CodecError| {
            node.error_stanza(&from, &stanza.id, codes::MALFORMED, e.to_string(), None, now)
        };
        match stanza.kind() {
            Some(StanzaKind::SearchRequest) => {
                let req: SearchRequest = match stanza.payload_as() {
                    Ok(r) => r,
                    Err(e) => return malformed(self, e),
                };
                let ast = match parse_query(&req.query) {
                    Ok(a) => a,
                    Err(e) => {
                        return self.error_stanza(&from, &stanza.id, codes::MALFORMED, e.to_string(), None, now)
                    }
                };
                let limit = req.max_results.min(MAX_RESULTS);
                let hits = self.store.state().search_ast(&ast);
                let truncated = hits.len() > limit;
                let results = hits
                    .into_iter()
                    .take(limit)
                    .map(|h| SearchHit {
                        object_ref: h.object_ref,
                        title: h.title,
                        snippet: h.snippet,
                        score: h.score,
                    })
                    .collect();
                let payload = SearchResponse {
                    in_reply_to: stanza.id.clone(),
                    results,
                    truncated,
                };
                self.stanza(StanzaKind::SearchResponse, &from, now, payload)
            }
            Some(StanzaKind::LocateRequest) => {
                let req: LocateRequest = match stanza.payload_as() {
                    Ok(r) => r,
                    Err(e) => return malformed(self, e),
                };
                let hits = self.local_locate(&req.selector);
                let payload = LocateResponse {
                    in_reply_to: stanza.id.clone(),
                    hits,
                };
                self.stanza(StanzaKind::LocateResponse, &from, now, payload)
            }
            Some(StanzaKind::FetchRequest) => {
                let req: FetchRequest = match stanza.payload_as() {
                    Ok(r) => r,
                    Err(e) => return malformed(self, e),
                };
                let found = self
                    .store
                    .get_version(now, &req.doc_id, req.version, Some((&from, &req.actor)))
                    .and_then(|v| Ok((v, self.store.state().document(&req.doc_id)?.clone())));
                match found {
                    Ok((v, doc)) => {
                        let payload = FetchResponse {
                            in_reply_to: stanza.id.clone(),
                            doc_id: v.doc_id,
                            name: doc.name,
                            version: v.version,
                            current_version: doc.current_version,
                            author: v.author,
                            content_b64: encode_b64(&v.content),
                            content_hash: v.content_hash,
                        };
                        self.stanza(StanzaKind::FetchResponse, &from, now, payload)
                    }
                    Err(e) => self.store_error(&from, &stanza.id, e, now),
                }
            }
            Some(StanzaKind::PushRequest) => {
                let req: PushRequest = match stanza.payload_as() {
                    Ok(r) => r,
                    Err(e) => return malformed(self, e),
                };
                let content = match decode_b64(&req.content_b64) {
                    Ok(c) if content_hash(&c) == req.content_hash => c,
                    _ => {
                        self.emit(ev("transfer_corrupt", json!({"peer": from, "id": stanza.id, "doc_id": req.doc_id})));
                        return self.error_stanza(&from, &stanza.id, codes::CORRUPT, format!("content of {} does not match its hash", req.doc_id), None, now);
                    }
                };
                match self.store.push_version(now, &req.origin, &req.doc_id, req.base_version, content, &req.author, &from) {
                    Ok((doc, _)) => {
                        let payload = PushResponse {
                            in_reply_to: stanza.id.clone(),
                            doc_id: doc.doc_id,
                            current_version: doc.current_version,
                        };
                        self.stanza(StanzaKind::PushResponse, &from, now, payload)
                    }
                    Err(e) => self.store_error(&from, &stanza.id, e, now),
                }
            }
            _ => self.error_stanza(&from, &stanza.id, codes::UNSUPPORTED, format!("{} is not a request", stanza.kind), None, now),
        }
    }

    fn store_error(&mut self, to: &NodeId, in_reply_to: &str, err: CoreError, now: Timestamp) -> Stanza {
        let (code, current) = match &err {
            CoreError::VersionConflict { current_version } => (codes::CONFLICT, Some(*current_version)),
            CoreError::NotOrigin(_) => (codes::NOT_ORIGIN, None),
            CoreError::UnknownDocument(_) => (codes::UNKNOWN_DOCUMENT, None),
            CoreError::UnknownVersion { .. } => (codes::UNKNOWN_VERSION, None),
            _ => (codes::INTERNAL, None),
        };
        self.error_stanza(to, in_reply_to, code, err.to_string(), current, now)
    }

    fn local_locate(&self, selector: &str) -> Vec<LocateHit> {
        self.store
            .state()
            .locate(selector)
            .into_iter()
            .map(|d| LocateHit {
                origin_node: d.origin_node.clone(),
                doc_id: d.doc_id.clone(),
                name: d.name.clone(),
                current_version: d.current_version,
            })
            .collect()
    }

    fn on_response(&mut self, peer: &NodeId, stanza: &Stanza, now: Timestamp) {
        let Some(rid) = stanza.in_reply_to() else {
            self.emit(ev("uncorrelated_error", json!({"peer": peer, "id": stanza.id, "payload": stanza.payload})));
            return;
        };
        let Some(pending) = self.links.get_mut(peer).and_then(|l| l.pending.remove(rid)) else {
            self.emit(ev("unmatched_response", json!({"peer": peer, "in_reply_to": rid})));
            return;
        };
        self.resolve(pending.op, peer, Outcome::Stanza(stanza), now);
    }

    // ---- timers -------------------------------------------------------------

    pub fn on_tick(&mut self, now: Timestamp) {
        let expired: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| c.accept_deadline.is_some_and(|d| d <= now))
            .map(|(id, _)| *id)
            .collect();
        for conn in expired {
            self.emit(ev("handshake_timeout", json!({"conn": conn.0})));
            self.close(conn);
        }

        let peers: Vec<NodeId> = self.links.keys().cloned().collect();
        for peer in peers {
            self.tick_link(&peer, now);
        }
    }

    fn tick_link(&mut self, peer: &NodeId, now: Timestamp) {
        let t = self.timeouts;
        let timed_out: Vec<(String, Pending)> = {
            let link = self.links.get_mut(peer).expect("iterating known peers");
            let ids: Vec<String> = link
                .pending
                .iter()
                .filter(|(_, p)| p.deadline <= now)
                .map(|(id, _)| id.clone())
                .collect();
            ids.into_iter()
                .map(|id| {
                    let p = link.pending.remove(&id).expect("just listed");
                    (id, p)
                })
                .collect()
        };
        for (id, p) in timed_out {
            self.emit(ev(
                "request_timeout",
                json!({"peer": peer, "id": id, "type": p.kind.as_str()}),
            ));
            self.resolve(p.op, peer, Outcome::Timeout, now);
        }

        let link = &self.links[peer];
        match link.state {
            LinkState::Connecting | LinkState::Handshaking => {
                if link.deadline.is_some_and(|d| d <= now) {
                    self.emit(ev("handshake_timeout", json!({"peer": peer})));
                    self.disconnect(peer, now);
                }
            }
            LinkState::Disconnected => {
                if link.dialer && link.retry_at.is_some_and(|r| r <= now) {
                    self.dial(peer, now);
                }
            }
            LinkState::Unavailable => {
                let due = link.retry_at.is_some_and(|r| r <= now);
                if link.dialer && !link.declared_unavailable && due {
                    let next = now.plus_millis(t.ping_interval_ms);
                    self.links.get_mut(peer).expect("known").retry_at = Some(next);
                    self.send_hello(peer, now);
                }
            }
            LinkState::Online => {
                let missed = link.ping.as_ref().is_some_and(|p| p.1 <= now);
                if missed {
                    let link = self.links.get_mut(peer).expect("known");
                    link.ping = None;
                    link.strikes += 1;
                    let strikes = link.strikes;
                    self.emit(ev("ping_missed", json!({"peer": peer, "strikes": strikes})));
                    if strikes >= t.missed_pings {
                        let retry = now.plus_millis(t.ping_interval_ms);
                        let link = self.links.get_mut(peer).expect("known");
                        link.retry_at = link.dialer.then_some(retry);
                        self.set_state(peer, LinkState::Unavailable, now);
                        return;
                    }
                }
                let link = &self.links[peer];
                if link.next_ping.is_some_and(|n| n <= now) {
                    let id = self.send_new(peer, StanzaKind::Ping, now, Empty {});
                    let link = self.links.get_mut(peer).expect("known");
                    link.ping = Some((id, now.plus_millis(t.pong_deadline_ms)));
                    link.next_ping = link.next_ping.map(|n| n.plus_millis(t.ping_interval_ms));
                }
            }
        }
    }

    // ---- client operations --------------------------------------------------

    /// Changes our own presence and tells every online peer.
    pub fn set_presence(&mut self, available: bool, now: Timestamp) {
        if self.available == available {
            return;
        }
        self.available = available;
        let state = if available {
            PresenceState::Available
        } else {
            PresenceState::Unavailable
        };
        let online: Vec<NodeId> = self
            .links
            .values()
            .filter(|l| l.state == LinkState::Online || (l.state == LinkState::Unavailable && l.declared_unavailable))
            .map(|l| l.peer.clone())
            .collect();
        for peer in online {
            self.send_new(&peer, StanzaKind::Presence, now, Presence { state });
        }
    }

    pub fn send_message(
        &mut self,
        to: &NodeId,
        from_actor: Option<&str>,
        to_actor: Option<&str>,
        body: &str,
        now: Timestamp,
    ) -> Result<Delivery, FedError> {
        let link = self
            .links
            .get_mut(to)
            .ok_or_else(|| FedError::UnknownPeer(to.clone()))?;
        let message = Message {
            from_actor: from_actor.map(str::to_string),
            to_actor: to_actor.map(str::to_string),
            body: body.to_string(),
        };
        if link.state == LinkState::Online {
            self.send_new(to, StanzaKind::Message, now, message);
            return Ok(Delivery::Sent);
        }
        if link.queue.len() >= QUEUE_LIMIT {
            return Err(FedError::QueueFull(to.clone()));
        }
        link.queue.push_back(message);
        self.emit(ev("message_queued", json!({"peer": to})));
        Ok(Delivery::Queued)
    }

    fn request(&mut self, op: OpId, peer: &NodeId, kind: StanzaKind, timeout_ms: u64, now: Timestamp, payload: impl Serialize) {
        let id = self.send_new(peer, kind, now, payload);
        let link = self.links.get_mut(peer).expect("caller checked");
        link.pending.insert(
            id,
            Pending {
                op,
                kind,
                deadline: now.plus_millis(timeout_ms),
            },
        );
    }

    fn online_peers(&self) -> Vec<NodeId> {
        self.links
            .values()
            .filter(|l| l.state == LinkState::Online)
            .map(|l| l.peer.clone())
            .collect()
    }

    /// Fans `raw_query` out to every online peer. Parse errors surface here,
    /// before anything is sent.
    pub fn federated_search(&mut self, raw_query: &str, include_local: bool, timeout_ms: Option<u64>, now: Timestamp) -> Result<OpId, FedError> {
        parse_query(raw_query)?;
        let timeout = timeout_ms.unwrap_or(self.timeouts.search_ms);
        let op = self.alloc_op();
        let online = self.online_peers();
        let mut per_node = BTreeMap::new();
        for link in self.links.values().filter(|l| l.state != LinkState::Online) {
            per_node.insert(
                link.peer.clone(),
                NodeResults::failed(PeerStatus::Timeout, Some(format!("peer is {}", link.state))),
            );
        }
        self.ops.insert(
            op,
            Op::Search {
                query: raw_query.to_string(),
                waiting: online.iter().cloned().collect(),
                per_node,
            },
        );
        let request = SearchRequest {
            query: raw_query.to_string(),
            max_results: MAX_RESULTS,
        };
        for peer in &online {
            self.request(op, peer, StanzaKind::SearchRequest, timeout, now, &request);
        }
        if include_local {
            let me = self.id.clone();
            let local = self.stanza(StanzaKind::SearchRequest, &me, now, &request);
            let reply = self.handle_request(&local, now);
            if let Some(Op::Search { waiting, .. }) = self.ops.get_mut(&op) {
                waiting.insert(me.clone());
            }
            self.resolve(op, &me, Outcome::Stanza(&reply), now);
        } else {
            self.maybe_finish(op);
        }
        Ok(op)
    }

    pub fn locate(&mut self, selector: &str, timeout_ms: Option<u64>, now: Timestamp) -> Result<OpId, FedError> {
        if selector.trim().is_empty() {
            return Err(FedError::EmptySelector);
        }
        let timeout = timeout_ms.unwrap_or(self.timeouts.search_ms);
        let op = self.alloc_op();
        let online = self.online_peers();
        let mut per_node: BTreeMap<NodeId, PeerStatus> = self
            .links
            .values()
            .filter(|l| l.state != LinkState::Online)
            .map(|l| (l.peer.clone(), PeerStatus::Timeout))
            .collect();
        per_node.insert(self.id.clone(), PeerStatus::Ok);
        self.ops.insert(
            op,
            Op::Locate {
                selector: selector.to_string(),
                waiting: online.iter().cloned().collect(),
                hits: self.local_locate(selector),
                per_node,
            },
        );
        let request = LocateRequest {
            selector: selector.to_string(),
        };
        for peer in &online {
            self.request(op, peer, StanzaKind::LocateRequest, timeout, now, &request);
        }
        self.maybe_finish(op);
        Ok(op)
    }

    fn remote_target(&self, origin: &NodeId) -> Result<(), FedError> {
        let link = self
            .links
            .get(origin)
            .ok_or_else(|| FedError::UnknownPeer(origin.clone()))?;
        if link.state != LinkState::Online {
            return Err(FedError::PeerUnavailable(origin.clone()));
        }
        Ok(())
    }

    fn complete_now(&mut self, result: OpResult) -> OpId {
        let op = self.alloc_op();
        self.outputs.push(Output::Completed { op, result });
        op
    }

    /// Fetches a version from its origin; our own node is served locally.
    pub fn remote_fetch(&mut self, origin: &NodeId, doc_id: &str, version: Option<u64>, actor: &str, now: Timestamp) -> Result<OpId, FedError> {
        if *origin == self.id {
            let found = self
                .store
                .get_version(now, doc_id, version, None)
                .and_then(|v| Ok((v, self.store.state().document(doc_id)?.clone())))
                .map(|(v, d)| FetchedVersion {
                    origin: origin.clone(),
                    doc_id: v.doc_id,
                    name: d.name,
                    version: v.version,
                    current_version: d.current_version,
                    author: v.author,
                    content: v.content,
                    content_hash: v.content_hash,
                })
                .map_err(FedError::from);
            return Ok(self.complete_now(OpResult::Fetch(found)));
        }
        self.remote_target(origin)?;
        let op = self.alloc_op();
        self.ops.insert(op, Op::Fetch { doc_id: doc_id.to_string() });
        let request = FetchRequest {
            doc_id: doc_id.to_string(),
            version,
            actor: actor.to_string(),
        };
        let timeout = self.timeouts.fetch_ms;
        self.request(op, origin, StanzaKind::FetchRequest, timeout, now, request);
        Ok(op)
    }

    /// Sends a new version back to the document's origin.
    pub fn remote_push(&mut self, origin: &NodeId, doc_id: &str, base_version: u64, content: Vec<u8>, author: &str, now: Timestamp) -> Result<OpId, FedError> {
        if *origin == self.id {
            let me = self.id.clone();
            let pushed = self
                .store
                .push_version(now, &me, doc_id, base_version, content, author, &me)
                .map(|(d, _)| PushOutcome {
                    origin: me.clone(),
                    doc_id: d.doc_id,
                    current_version: d.current_version,
                })
                .map_err(FedError::from);
            return Ok(self.complete_now(OpResult::Push(pushed)));
        }
        self.remote_target(origin)?;
        let op = self.alloc_op();
        self.ops.insert(op, Op::Push { doc_id: doc_id.to_string() });
        let request = PushRequest {
            origin: origin.clone(),
            doc_id: doc_id.to_string(),
            base_version,
            author: author.to_string(),
            content_hash: content_hash(&content),
            content_b64: encode_b64(&content),
        };
        let timeout = self.timeouts.push_ms;
        self.request(op, origin, StanzaKind::PushRequest, timeout, now, request);
        Ok(op)
    }

    // ---- completion ---------------------------------------------------------

    fn remote_error(peer: &NodeId, stanza: &Stanza) -> FedError {
        match stanza.payload_as::<ErrorPayload>() {
            Ok(e) => FedError::Remote {
                peer: peer.clone(),
                code: e.code,
                text: e.text,
                current_version: e.current_version,
            },
            Err(e) => FedError::Remote {
                peer: peer.clone(),
                code: codes::MALFORMED.into(),
                text: e.to_string(),
                current_version: None,
            },
        }
    }

    fn resolve(&mut self, op: OpId, peer: &NodeId, reply: Outcome<'_>, _now: Timestamp) {
        let Some(state) = self.ops.get_mut(&op) else {
            return;
        };
        match state {
            Op::Search { waiting, per_node, .. } => {
                let result = match reply {
                    Outcome::Stanza(s) if s.kind() == Some(StanzaKind::SearchResponse) => {
                        match s.payload_as::<SearchResponse>() {
                            Ok(r) => NodeResults {
                                status: PeerStatus::Ok,
                                results: r.results,
                                truncated: r.truncated,
                                error: None,
                            },
                            Err(e) => NodeResults::failed(PeerStatus::Error, Some(e.to_string())),
                        }
                    }
                    Outcome::Stanza(s) => NodeResults::failed(PeerStatus::Error, Some(Self::remote_error(peer, s).to_string())),
                    Outcome::Timeout => NodeResults::failed(PeerStatus::Timeout, Some("no reply before the deadline".into())),
                    Outcome::Unavailable => NodeResults::failed(PeerStatus::Timeout, Some("link went down".into())),
                };
                waiting.remove(peer);
                per_node.insert(peer.clone(), result);
            }
            Op::Locate { waiting, hits, per_node, .. } => {
                let status = match reply {
                    Outcome::Stanza(s) if s.kind() == Some(StanzaKind::LocateResponse) => {
                        match s.payload_as::<LocateResponse>() {
                            Ok(r) => {
                                hits.extend(r.hits);
                                PeerStatus::Ok
                            }
                            Err(_) => PeerStatus::Error,
                        }
                    }
                    Outcome::Stanza(_) => PeerStatus::Error,
                    Outcome::Timeout | Outcome::Unavailable => PeerStatus::Timeout,
                };
                waiting.remove(peer);
                per_node.insert(peer.clone(), status);
            }
            Op::Fetch { doc_id } => {
                let doc_id = doc_id.clone();
                let result = match reply {
                    Outcome::Stanza(s) if s.kind() == Some(StanzaKind::FetchResponse) => {
                        Self::verify_fetch(peer, s)
                    }
                    Outcome::Stanza(s) => Err(Self::relay(peer, &doc_id, s)),
                    Outcome::Timeout => Err(FedError::RequestTimeout(peer.clone())),
                    Outcome::Unavailable => Err(FedError::PeerUnavailable(peer.clone())),
                };
                if let Err(FedError::TransferCorrupt { doc_id }) = &result {
                    self.events.push(ev("transfer_corrupt", json!({"peer": peer, "doc_id": doc_id})));
                }
                self.ops.remove(&op);
                self.finish(op, OpResult::Fetch(result));
                return;
            }
            Op::Push { doc_id } => {
                let doc_id = doc_id.clone();
                let result = match reply {
                    Outcome::Stanza(s) if s.kind() == Some(StanzaKind::PushResponse) => s
                        .payload_as::<PushResponse>()
                        .map(|r| PushOutcome {
                            origin: peer.clone(),
                            doc_id: r.doc_id,
                            current_version: r.current_version,
                        })
                        .map_err(|e| FedError::Remote {
                            peer: peer.clone(),
                            code: codes::MALFORMED.into(),
                            text: e.to_string(),
                            current_version: None,
                        }),
                    Outcome::Stanza(s) => Err(Self::relay(peer, &doc_id, s)),
                    Outcome::Timeout => Err(FedError::RequestTimeout(peer.clone())),
                    Outcome::Unavailable => Err(FedError::PeerUnavailable(peer.clone())),
                };
                self.ops.remove(&op);
                self.finish(op, OpResult::Push(result));
                return;
            }
        }
        self.maybe_finish(op);
    }

    /// Error stanzas become typed errors; `corrupt` means the origin saw a
    /// hash mismatch on what we sent.
    fn relay(peer: &NodeId, doc_id: &str, stanza: &Stanza) -> FedError {
        match Self::remote_error(peer, stanza) {
            FedError::Remote { code, .. } if code == codes::CORRUPT => FedError::TransferCorrupt {
                doc_id: doc_id.to_string(),
            },
            other => other,
        }
    }

    fn verify_fetch(peer: &NodeId, stanza: &Stanza) -> Result<FetchedVersion, FedError> {
        let r: FetchResponse = stanza.payload_as().map_err(|e| FedError::Remote {
            peer: peer.clone(),
            code: codes::MALFORMED.into(),
            text: e.to_string(),
            current_version: None,
        })?;
        let corrupt = || FedError::TransferCorrupt {
            doc_id: r.doc_id.clone(),
        };
        let content = decode_b64(&r.content_b64).map_err(|_| corrupt())?;
        if content_hash(&content) != r.content_hash {
            return Err(corrupt());
        }
        Ok(FetchedVersion {
            origin: peer.clone(),
            doc_id: r.doc_id,
            name: r.name,
            version: r.version,
            current_version: r.current_version,
            author: r.author,
            content,
            content_hash: r.content_hash,
        })
    }

    fn maybe_finish(&mut self, op: OpId) {
        let done = match self.ops.get(&op) {
            Some(Op::Search { waiting, .. }) | Some(Op::Locate { waiting, .. }) => waiting.is_empty(),
            _ => false,
        };
        if !done {
            return;
        }
        let result = match self.ops.remove(&op) {
            Some(Op::Search { query, per_node, .. }) => {
                OpResult::Search(FederatedResultSet::assemble(query, per_node))
            }
            Some(Op::Locate { selector, hits, per_node, .. }) => {
                OpResult::Locate(LocateResult::assemble(selector, hits, per_node))
            }
            _ => unreachable!("only fan-out ops wait on several peers"),
        };
        self.finish(op, result);
    }

    fn finish(&mut self, op: OpId, result: OpResult) {
        let kind = match &result {
            OpResult::Search(_) => "search",
            OpResult::Locate(_) => "locate",
            OpResult::Fetch(_) => "fetch",
            OpResult::Push(_) => "push",
        };
        self.emit(ev("op_completed", json!({"op": op.0, "kind": kind})));
        self.outputs.push(Output::Completed { op, result });
    }
}
