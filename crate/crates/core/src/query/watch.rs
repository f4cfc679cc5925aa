use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ast::QueryAst;
use super::index::IndexedDoc;
use super::parser::{parse_query, ParseError};
use crate::ids::{ObjectRef, Timestamp};

/// Standing query. The AST is never stored; it is re-parsed from
/// `raw_query` whenever a watch is loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WatchRecord", into = "WatchRecord")]
pub struct WatchQuery {
    pub id: String,
    pub owner: String,
    pub raw_query: String,
    pub ast: QueryAst,
    pub created_at: Timestamp,
}

#[derive(Serialize, Deserialize)]
struct WatchRecord {
    id: String,
    owner: String,
    raw_query: String,
    created_at: Timestamp,
}

impl TryFrom<WatchRecord> for WatchQuery {
    type Error = ParseError;
    fn try_from(r: WatchRecord) -> Result<Self, ParseError> {
        Ok(WatchQuery {
            ast: parse_query(&r.raw_query)?,
            id: r.id,
            owner: r.owner,
            raw_query: r.raw_query,
            created_at: r.created_at,
        })
    }
}

impl From<WatchQuery> for WatchRecord {
    fn from(w: WatchQuery) -> Self {
        WatchRecord {
            id: w.id,
            owner: w.owner,
            raw_query: w.raw_query,
            created_at: w.created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub id: String,
    pub watch_id: String,
    pub object_ref: ObjectRef,
    pub fired_at: Timestamp,
    pub delivered: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchRegistry {
    watches: BTreeMap<String, WatchQuery>,
    notifications: BTreeMap<String, Notification>,
    fired: BTreeSet<(String, ObjectRef)>,
}

impl WatchRegistry {
    pub fn register(
        &mut self,
        id: String,
        owner: &str,
        raw_query: &str,
        created_at: Timestamp,
    ) -> Result<WatchQuery, ParseError> {
        let watch = WatchQuery {
            ast: parse_query(raw_query)?,
            id: id.clone(),
            owner: owner.to_string(),
            raw_query: raw_query.to_string(),
            created_at,
        };
        self.watches.insert(id, watch.clone());
        Ok(watch)
    }

    pub fn watches(&self) -> impl Iterator<Item = &WatchQuery> {
        self.watches.values()
    }

    pub fn get(&self, id: &str) -> Option<&WatchQuery> {
        self.watches.get(id)
    }

    pub fn notifications(&self) -> impl Iterator<Item = &Notification> {
        self.notifications.values()
    }

    /// Fires every watch matching `doc` that has not already fired for
    /// `object_ref`. Ids come from `next_id`, one per new notification.
    pub fn evaluate(
        &mut self,
        object_ref: &ObjectRef,
        doc: &IndexedDoc,
        fired_at: Timestamp,
        mut next_id: impl FnMut() -> String,
    ) -> Vec<(Notification, String)> {
        let mut out = Vec::new();
        for watch in self.watches.values() {
            let key = (watch.id.clone(), object_ref.clone());
            if self.fired.contains(&key) || !doc.matches(&watch.ast) {
                continue;
            }
            let notification = Notification {
                id: next_id(),
                watch_id: watch.id.clone(),
                object_ref: object_ref.clone(),
                fired_at,
                delivered: true,
            };
            self.fired.insert(key);
            self.notifications
                .insert(notification.id.clone(), notification.clone());
            out.push((notification, watch.owner.clone()));
        }
        out
    }
}
