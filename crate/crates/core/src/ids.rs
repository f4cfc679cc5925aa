//! Identity types shared by every layer: node ids, object references,
//! millisecond timestamps and the node-local id counter.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// JID-style node identity, `name@domain`, lowercase.
///
/// Ordering is the byte order of the text form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(String);

impl NodeId {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let invalid = || Error::InvalidNodeId(text.to_string());
        let (name, domain) = text.split_once('@').ok_or_else(invalid)?;
        let name_ok = !name.is_empty()
            && name
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b"._-".contains(&b));
        let domain_ok = !domain.is_empty()
            && domain
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b".-".contains(&b));
        if name_ok && domain_ok {
            Ok(NodeId(text.to_string()))
        } else {
            Err(invalid())
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for NodeId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        NodeId::parse(s)
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        NodeId::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Globally qualified reference to an information object:
/// `node_id/workspace_slug/module_slug/object_id`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectRef {
    pub node: NodeId,
    pub workspace: String,
    pub module: String,
    pub object: String,
}

impl ObjectRef {
    pub fn new(node: NodeId, workspace: &str, module: &str, object: &str) -> Self {
        ObjectRef {
            node,
            workspace: workspace.to_string(),
            module: module.to_string(),
            object: object.to_string(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let invalid = || Error::InvalidObjectRef(text.to_string());
        let parts: Vec<&str> = text.split('/').collect();
        let [node, workspace, module, object] = parts.as_slice() else {
            return Err(invalid());
        };
        if workspace.is_empty() || module.is_empty() || object.is_empty() {
            return Err(invalid());
        }
        Ok(ObjectRef {
            node: NodeId::parse(node).map_err(|_| invalid())?,
            workspace: workspace.to_string(),
            module: module.to_string(),
            object: object.to_string(),
        })
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.node, self.workspace, self.module, self.object)
    }
}

impl Serialize for ObjectRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ObjectRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        ObjectRef::parse(&text).map_err(serde::de::Error::custom)
    }
}

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.3fZ";

/// UTC instant with millisecond resolution.
///
/// Text form is ISO-8601 with exactly three fractional digits and a `Z`
/// suffix; parsing is strict so that the text form is canonical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    /// 2025-01-01T00:00:00.000Z, the origin of simulated time.
    pub const SIM_EPOCH: Timestamp = Timestamp(1_735_689_600_000);

    pub fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp_millis())
    }

    pub fn plus_millis(self, ms: u64) -> Self {
        Timestamp(self.0.saturating_add(ms as i64))
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let invalid = || Error::InvalidTimestamp(text.to_string());
        let naive = NaiveDateTime::parse_from_str(text, TS_FORMAT).map_err(|_| invalid())?;
        let ts = Timestamp(Utc.from_utc_datetime(&naive).timestamp_millis());
        if ts.to_string() != text {
            return Err(invalid());
        }
        Ok(ts)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match DateTime::<Utc>::from_timestamp_millis(self.0) {
            Some(dt) => write!(f, "{}", dt.format(TS_FORMAT)),
            None => write!(f, "invalid-timestamp({})", self.0),
        }
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Timestamp::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Node-local id counter. Ids are the counter value as 8 lowercase hex
/// digits, so they sort in allocation order.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct IdGen {
    next: u64,
}

impl IdGen {
    pub fn next_id(&mut self) -> String {
        self.next += 1;
        format!("{:08x}", self.next)
    }
}
