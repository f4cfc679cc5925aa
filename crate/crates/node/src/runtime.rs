//! Owns the [`Node`] on one task and feeds it commands, socket traffic and
//! clock ticks. Everything else talks to it through a [`NodeHandle`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use dims_core::{NodeId, Timestamp};
use dims_federation::{ConnId, FedError, Node, OpId, OpResult, Output};
use tokio::sync::{mpsc, oneshot};
use tokio::task::AbortHandle;

use crate::transport;

pub const TICK: Duration = Duration::from_millis(100);

type Job = Box<dyn FnOnce(&mut Node, Timestamp) + Send>;
type Start = Box<dyn FnOnce(&mut Node, Timestamp) -> Result<OpId, FedError> + Send>;

pub(crate) enum Input {
    Job(Job),
    Op(Start, oneshot::Sender<Result<OpResult, FedError>>),
    Connected {
        conn: ConnId,
        dialed: Option<NodeId>,
        writer: mpsc::UnboundedSender<Vec<u8>>,
        reader: AbortHandle,
    },
    Line(ConnId, Vec<u8>),
    Closed(ConnId),
    DialFailed(NodeId),
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stopped;

#[derive(Clone)]
pub struct NodeHandle {
    tx: mpsc::UnboundedSender<Input>,
    conns: Arc<AtomicU64>,
    node_id: NodeId,
    handshake: Duration,
}

impl NodeHandle {
    pub fn node_id(&self) -> &NodeId {
        &self.node_id
    }

    /// Runs `f` on the node task and returns its result.
    pub async fn call<R, F>(&self, f: F) -> Result<R, Stopped>
    where
        R: Send + 'static,
        F: FnOnce(&mut Node, Timestamp) -> R + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        let job: Job = Box::new(move |node, now| {
            let _ = tx.send(f(node, now));
        });
        self.tx.send(Input::Job(job)).map_err(|_| Stopped)?;
        rx.await.map_err(|_| Stopped)
    }

    /// Starts a federated operation and waits for it to complete.
    pub async fn op<F>(&self, start: F) -> Result<Result<OpResult, FedError>, Stopped>
    where
        F: FnOnce(&mut Node, Timestamp) -> Result<OpId, FedError> + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        self.tx.send(Input::Op(Box::new(start), tx)).map_err(|_| Stopped)?;
        rx.await.map_err(|_| Stopped)
    }

    /// Stops the node task; open connections are dropped with it.
    pub fn shutdown(&self) {
        let _ = self.tx.send(Input::Shutdown);
    }

    pub(crate) fn next_conn(&self) -> ConnId {
        ConnId(self.conns.fetch_add(1, Ordering::Relaxed))
    }

    pub(crate) fn send(&self, input: Input) -> bool {
        self.tx.send(input).is_ok()
    }

    pub(crate) fn handshake_timeout(&self) -> Duration {
        self.handshake
    }
}

struct Connection {
    writer: mpsc::UnboundedSender<Vec<u8>>,
    reader: AbortHandle,
}

struct Actor {
    node: Node,
    handle: NodeHandle,
    conns: HashMap<ConnId, Connection>,
    waiters: HashMap<OpId, oneshot::Sender<Result<OpResult, FedError>>>,
    last: Timestamp,
}

impl Actor {
    fn now(&mut self) -> Timestamp {
        self.last = self.last.max(Timestamp::now());
        self.last
    }

    fn handle(&mut self, input: Input) {
        let now = self.now();
        match input {
            Input::Job(job) => job(&mut self.node, now),
            Input::Op(start, reply) => match start(&mut self.node, now) {
                Ok(op) => {
                    self.waiters.insert(op, reply);
                }
                Err(e) => {
                    let _ = reply.send(Err(e));
                }
            },
            Input::Connected { conn, dialed, writer, reader } => {
                self.conns.insert(conn, Connection { writer, reader });
                self.node.on_connected(conn, dialed.as_ref(), now);
            }
            Input::Line(conn, line) => self.node.on_line(conn, &line, now),
            Input::Closed(conn) => {
                self.conns.remove(&conn);
                self.node.on_closed(conn, now);
            }
            Input::DialFailed(peer) => self.node.on_dial_failed(&peer, now),
            Input::Shutdown => {}
        }
    }

    fn flush(&mut self) {
        for event in self.node.drain_events() {
            tracing::debug!(event = event.event, detail = %event.detail);
        }
        for out in self.node.drain_outputs() {
            match out {
                Output::Send { conn, line } => {
                    if let Some(c) = self.conns.get(&conn) {
                        let _ = c.writer.send(line);
                    }
                }
                Output::Close { conn } => {
                    if let Some(c) = self.conns.remove(&conn) {
                        c.reader.abort();
                    }
                }
                Output::Dial { peer, address } => {
                    transport::dial(self.handle.clone(), peer, address);
                }
                Output::Completed { op, result } => {
                    let result = match result {
                        OpResult::Fetch(Err(e)) | OpResult::Push(Err(e)) => Err(e),
                        other => Ok(other),
                    };
                    if let Some(w) = self.waiters.remove(&op) {
                        let _ = w.send(result);
                    }
                }
            }
        }
    }
}

/// Spawns the node task. The node starts dialing its peers right away.
pub fn spawn(node: Node) -> NodeHandle {
    let (tx, mut rx) = mpsc::unbounded_channel();
    let handle = NodeHandle {
        tx,
        conns: Arc::new(AtomicU64::new(1)),
        node_id: node.id().clone(),
        handshake: Duration::from_millis(node.timeouts().handshake_ms),
    };
    let mut actor = Actor {
        node,
        handle: handle.clone(),
        conns: HashMap::new(),
        waiters: HashMap::new(),
        last: Timestamp::now(),
    };
    tokio::spawn(async move {
        let now = actor.now();
        actor.node.start(now);
        actor.flush();
        let mut tick = tokio::time::interval(TICK);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                input = rx.recv() => match input {
                    Some(Input::Shutdown) | None => break,
                    Some(input) => actor.handle(input),
                },
                _ = tick.tick() => {
                    let now = actor.now();
                    actor.node.on_tick(now);
                }
            }
            actor.flush();
        }
        for (_, c) in actor.conns.drain() {
            c.reader.abort();
        }
    });
    handle
}
