//! Per-actor notification inbox. Entries addressed to [`EVERYONE`] are
//! node-wide (peer messages without a target actor, roster changes).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::ids::Timestamp;

pub const EVERYONE: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InboxKind {
    WatchNotification,
    PeerMessage,
    RosterChange,
    ActionAssigned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InboxEntry {
    pub id: String,
    pub owner: String,
    pub kind: InboxKind,
    pub body: serde_json::Map<String, serde_json::Value>,
    pub created_at: Timestamp,
    pub acknowledged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inbox {
    entries: BTreeMap<String, InboxEntry>,
}

impl Inbox {
    pub fn deliver(
        &mut self,
        id: String,
        owner: &str,
        kind: InboxKind,
        body: serde_json::Map<String, serde_json::Value>,
        created_at: Timestamp,
    ) -> InboxEntry {
        let entry = InboxEntry {
            id: id.clone(),
            owner: owner.to_string(),
            kind,
            body,
            created_at,
            acknowledged: false,
        };
        self.entries.insert(id, entry.clone());
        entry
    }

    /// Acknowledging twice is fine.
    pub fn ack(&mut self, id: &str) -> Result<InboxEntry, Error> {
        let entry = self
            .entries
            .get_mut(id)
            .ok_or_else(|| Error::UnknownInboxEntry(id.to_string()))?;
        entry.acknowledged = true;
        Ok(entry.clone())
    }

    pub fn get(&self, id: &str) -> Option<&InboxEntry> {
        self.entries.get(id)
    }

    /// Entries visible to `actor` in id order.
    pub fn for_actor<'a>(&'a self, actor: &'a str) -> impl Iterator<Item = &'a InboxEntry> + 'a {
        self.entries
            .values()
            .filter(move |e| e.owner == actor || e.owner == EVERYONE)
    }

    pub fn all(&self) -> impl Iterator<Item = &InboxEntry> {
        self.entries.values()
    }

    pub fn unacknowledged(&self, actor: &str) -> usize {
        self.for_actor(actor).filter(|e| !e.acknowledged).count()
    }
}
