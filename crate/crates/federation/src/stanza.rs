//! Wire format: one canonical JSON object per newline-terminated line.
//!
//! Top-level fields are always written in the order
//! `v, type, id, from, to, ts, payload`; payload keys are sorted. That makes
//! `encode` byte-stable, which the golden fixtures rely on.

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use dims_core::{NodeId, Timestamp};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const PROTO_VERSION: u64 = 1;
/// Longest accepted line, newline excluded.
pub const MAX_LINE: usize = 16 * 1024 * 1024;
/// Results per search.response.
pub const MAX_RESULTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed stanza: {0}")]
    Malformed(String),
    #[error("line of {0} bytes exceeds the 16 MiB limit")]
    TooLong(usize),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(String),
}

impl CodecError {
    pub fn code(&self) -> &'static str {
        match self {
            CodecError::Malformed(_) | CodecError::TooLong(_) => "malformed",
            CodecError::UnsupportedVersion(_) => "unsupported",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stanza {
    pub v: u64,
    #[serde(rename = "type")]
    pub kind: String,
    pub id: String,
    pub from: NodeId,
    pub to: NodeId,
    pub ts: Timestamp,
    pub payload: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StanzaKind {
    Hello,
    Presence,
    Ping,
    Pong,
    Message,
    SearchRequest,
    SearchResponse,
    LocateRequest,
    LocateResponse,
    FetchRequest,
    FetchResponse,
    PushRequest,
    PushResponse,
    Error,
}

impl StanzaKind {
    pub const ALL: [StanzaKind; 14] = [
        StanzaKind::Hello,
        StanzaKind::Presence,
        StanzaKind::Ping,
        StanzaKind::Pong,
        StanzaKind::Message,
        StanzaKind::SearchRequest,
        StanzaKind::SearchResponse,
        StanzaKind::LocateRequest,
        StanzaKind::LocateResponse,
        StanzaKind::FetchRequest,
        StanzaKind::FetchResponse,
        StanzaKind::PushRequest,
        StanzaKind::PushResponse,
        StanzaKind::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StanzaKind::Hello => "hello",
            StanzaKind::Presence => "presence",
            StanzaKind::Ping => "ping",
            StanzaKind::Pong => "pong",
            StanzaKind::Message => "message",
            StanzaKind::SearchRequest => "search.request",
            StanzaKind::SearchResponse => "search.response",
            StanzaKind::LocateRequest => "locate.request",
            StanzaKind::LocateResponse => "locate.response",
            StanzaKind::FetchRequest => "fetch.request",
            StanzaKind::FetchResponse => "fetch.response",
            StanzaKind::PushRequest => "push.request",
            StanzaKind::PushResponse => "push.response",
            StanzaKind::Error => "error",
        }
    }

    /// Correlated requests that expect exactly one terminal reply.
    pub fn is_request(self) -> bool {
        matches!(
            self,
            StanzaKind::SearchRequest
                | StanzaKind::LocateRequest
                | StanzaKind::FetchRequest
                | StanzaKind::PushRequest
        )
    }
}

impl fmt::Display for StanzaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StanzaKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        StanzaKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or(())
    }
}

fn to_map(payload: impl Serialize) -> Map<String, Value> {
    match serde_json::to_value(payload).expect("payloads always serialize") {
        Value::Object(m) => m,
        Value::Null => Map::new(),
        other => panic!("payload must serialize to an object, got {other}"),
    }
}

impl Stanza {
    pub fn new(kind: StanzaKind, id: impl Into<String>, from: NodeId, to: NodeId, ts: Timestamp, payload: impl Serialize) -> Self {
        Stanza {
            v: PROTO_VERSION,
            kind: kind.as_str().to_string(),
            id: id.into(),
            from,
            to,
            ts,
            payload: to_map(payload),
        }
    }

    /// `None` for a type this node does not know.
    pub fn kind(&self) -> Option<StanzaKind> {
        self.kind.parse().ok()
    }

    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T, CodecError> {
        serde_json::from_value(Value::Object(self.payload.clone()))
            .map_err(|e| CodecError::Malformed(format!("{} payload: {e}", self.kind)))
    }

    pub fn in_reply_to(&self) -> Option<&str> {
        self.payload.get("in_reply_to").and_then(Value::as_str)
    }
}

/// Canonical bytes of `stanza`, newline included.
pub fn encode(stanza: &Stanza) -> Vec<u8> {
    let mut line = serde_json::to_vec(stanza).expect("stanzas always serialize");
    line.push(b'\n');
    line
}

/// Parses one line; a trailing `\n` (or `\r\n`) is optional.
pub fn decode(line: &[u8]) -> Result<Stanza, CodecError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    if line.len() > MAX_LINE {
        return Err(CodecError::TooLong(line.len()));
    }
    let value: Value =
        serde_json::from_slice(line).map_err(|e| CodecError::Malformed(e.to_string()))?;
    let Some(obj) = value.as_object() else {
        return Err(CodecError::Malformed("not a JSON object".into()));
    };
    match obj.get("v") {
        Some(Value::Number(n)) if n.as_u64() == Some(PROTO_VERSION) => {}
        Some(Value::Number(n)) => return Err(CodecError::UnsupportedVersion(n.to_string())),
        Some(_) => return Err(CodecError::Malformed("v must be a number".into())),
        None => return Err(CodecError::Malformed("missing field `v`".into())),
    }
    serde_json::from_value(value).map_err(|e| CodecError::Malformed(e.to_string()))
}

/// Outcome of checking one golden-file line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    /// Decodes, and re-encodes to exactly the same bytes.
    Canonical(Stanza),
    /// Decodes, but the canonical encoding differs.
    NonCanonical { stanza: Stanza, canonical: Vec<u8> },
    Rejected(CodecError),
}

pub fn check_line(line: &[u8]) -> Verdict {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    match decode(line) {
        Err(e) => Verdict::Rejected(e),
        Ok(stanza) => {
            let canonical = encode(&stanza);
            if canonical[..canonical.len() - 1] == *line {
                Verdict::Canonical(stanza)
            } else {
                Verdict::NonCanonical { stanza, canonical }
            }
        }
    }
}

pub fn encode_b64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn decode_b64(text: &str) -> Result<Vec<u8>, CodecError> {
    STANDARD
        .decode(text)
        .map_err(|e| CodecError::Malformed(format!("content_b64: {e}")))
}

// ---- payloads --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub node_id: NodeId,
    pub proto_version: u64,
    /// Set on the responder's reply, naming the hello it answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresenceState {
    Available,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presence {
    pub state: PresenceState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Empty {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    pub in_reply_to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_actor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_actor: Option<String>,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    pub max_results: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SearchHit {
    pub object_ref: dims_core::ObjectRef,
    pub title: String,
    pub snippet: String,
    pub score: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub in_reply_to: String,
    pub results: Vec<SearchHit>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocateRequest {
    pub selector: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocateHit {
    pub origin_node: NodeId,
    pub doc_id: String,
    pub name: String,
    pub current_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocateResponse {
    pub in_reply_to: String,
    pub hits: Vec<LocateHit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchRequest {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    pub actor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchResponse {
    pub in_reply_to: String,
    pub doc_id: String,
    pub name: String,
    pub version: u64,
    pub current_version: u64,
    pub author: String,
    pub content_b64: String,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushRequest {
    pub origin: NodeId,
    pub doc_id: String,
    pub base_version: u64,
    pub author: String,
    pub content_b64: String,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushResponse {
    pub in_reply_to: String,
    pub doc_id: String,
    pub current_version: u64,
}

/// Stable error codes carried by error stanzas.
pub mod codes {
    pub const UNSUPPORTED: &str = "unsupported";
    pub const MALFORMED: &str = "malformed";
    pub const TIMEOUT: &str = "timeout";
    pub const CONFLICT: &str = "conflict";
    pub const NOT_ORIGIN: &str = "not_origin";
    pub const UNKNOWN_DOCUMENT: &str = "unknown_document";
    pub const UNKNOWN_VERSION: &str = "unknown_version";
    pub const CORRUPT: &str = "corrupt";
    pub const UNAVAILABLE: &str = "unavailable";
    pub const INTERNAL: &str = "internal";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub in_reply_to: String,
    pub code: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_version: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Stanza {
        Stanza::new(
            StanzaKind::Ping,
            "1",
            NodeId::parse("a@dims").unwrap(),
            NodeId::parse("b@dims").unwrap(),
            Timestamp::SIM_EPOCH,
            Empty {},
        )
    }

    #[test]
    fn field_order_is_fixed() {
        let line = String::from_utf8(encode(&sample())).unwrap();
        assert_eq!(
            line,
            "{\"v\":1,\"type\":\"ping\",\"id\":\"1\",\"from\":\"a@dims\",\"to\":\"b@dims\",\"ts\":\"2025-01-01T00:00:00.000Z\",\"payload\":{}}\n"
        );
    }

    #[test]
    fn rejects() {
        assert!(matches!(decode(b"not json"), Err(CodecError::Malformed(_))));
        let v2 = String::from_utf8(encode(&sample())).unwrap().replace("\"v\":1", "\"v\":2");
        assert_eq!(decode(v2.as_bytes()), Err(CodecError::UnsupportedVersion("2".into())));
        let bad_id = String::from_utf8(encode(&sample())).unwrap().replace("a@dims", "A@dims");
        assert!(matches!(decode(bad_id.as_bytes()), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn oversize_line() {
        let mut line = vec![b' '; MAX_LINE + 1];
        line.push(b'\n');
        assert_eq!(decode(&line), Err(CodecError::TooLong(MAX_LINE + 1)));
    }

    #[test]
    fn kinds_round_trip() {
        for k in StanzaKind::ALL {
            assert_eq!(k.as_str().parse::<StanzaKind>(), Ok(k));
        }
        assert!("iq".parse::<StanzaKind>().is_err());
    }
}
