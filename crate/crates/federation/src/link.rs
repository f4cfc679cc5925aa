use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use dims_core::{NodeId, Timestamp};
use serde::{Deserialize, Serialize};

use crate::dedup::DedupCache;
use crate::ops::OpId;
use crate::stanza::{Message, StanzaKind};

/// Upper bound on messages waiting for one peer.
pub const QUEUE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LinkState {
    Disconnected,
    Connecting,
    Handshaking,
    Online,
    Unavailable,
}

impl LinkState {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkState::Disconnected => "DISCONNECTED",
            LinkState::Connecting => "CONNECTING",
            LinkState::Handshaking => "HANDSHAKING",
            LinkState::Online => "ONLINE",
            LinkState::Unavailable => "UNAVAILABLE",
        }
    }

    /// States worth telling clients about.
    pub fn is_reported(self) -> bool {
        matches!(self, LinkState::Disconnected | LinkState::Online | LinkState::Unavailable)
    }
}

impl fmt::Display for LinkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Transport connection handle, chosen by whoever drives the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConnId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Pending {
    pub op: OpId,
    pub kind: StanzaKind,
    pub deadline: Timestamp,
}

/// One roster peer and the session with it.
#[derive(Debug, Clone)]
pub struct PeerLink {
    pub peer: NodeId,
    pub address: String,
    pub state: LinkState,
    pub last_seen: Option<Timestamp>,
    /// The lower node id dials.
    pub(crate) dialer: bool,
    pub(crate) conn: Option<ConnId>,
    /// Our outstanding hello, if we are waiting for its reply.
    pub(crate) hello_id: Option<String>,
    /// Connect or handshake deadline.
    pub(crate) deadline: Option<Timestamp>,
    pub(crate) retry_at: Option<Timestamp>,
    pub(crate) next_ping: Option<Timestamp>,
    pub(crate) ping: Option<(String, Timestamp)>,
    pub(crate) strikes: u32,
    pub(crate) declared_unavailable: bool,
    pub(crate) pending: BTreeMap<String, Pending>,
    pub(crate) queue: VecDeque<Message>,
    pub(crate) seen: DedupCache,
}

impl PeerLink {
    pub(crate) fn new(peer: NodeId, address: String, dialer: bool) -> Self {
        PeerLink {
            peer,
            address,
            state: LinkState::Disconnected,
            last_seen: None,
            dialer,
            conn: None,
            hello_id: None,
            deadline: None,
            retry_at: None,
            next_ping: None,
            ping: None,
            strikes: 0,
            declared_unavailable: false,
            pending: BTreeMap::new(),
            queue: VecDeque::new(),
            seen: DedupCache::default(),
        }
    }

    pub fn is_dialer(&self) -> bool {
        self.dialer
    }

    pub fn pending_ids(&self) -> impl Iterator<Item = &str> {
        self.pending.keys().map(String::as_str)
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn missed_pings(&self) -> u32 {
        self.strikes
    }

    pub fn declared_unavailable(&self) -> bool {
        self.declared_unavailable
    }

    /// Earliest timer this link is waiting on.
    pub(crate) fn next_deadline(&self) -> Option<Timestamp> {
        [
            self.deadline,
            self.retry_at,
            self.next_ping,
            self.ping.as_ref().map(|p| p.1),
            self.pending.values().map(|p| p.deadline).min(),
        ]
        .into_iter()
        .flatten()
        .min()
    }
}

/// Client view of one roster entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub peer: NodeId,
    pub address: String,
    pub state: LinkState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_seen: Option<Timestamp>,
    pub queued: usize,
}
