//! Client-initiated federated operations and their results.

use std::collections::BTreeMap;

use dims_core::query::ParseError;
use dims_core::NodeId;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stanza::{LocateHit, SearchHit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PeerStatus {
    Ok,
    Timeout,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeResults {
    pub status: PeerStatus,
    pub results: Vec<SearchHit>,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl NodeResults {
    pub fn failed(status: PeerStatus, error: Option<String>) -> Self {
        NodeResults {
            status,
            results: Vec::new(),
            truncated: false,
            error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederatedResultSet {
    pub query: String,
    pub per_node: BTreeMap<NodeId, NodeResults>,
    pub merged: Vec<SearchHit>,
    pub partial: bool,
}

impl FederatedResultSet {
    pub fn assemble(query: String, per_node: BTreeMap<NodeId, NodeResults>) -> Self {
        let mut merged: Vec<SearchHit> = per_node
            .values()
            .filter(|r| r.status == PeerStatus::Ok)
            .flat_map(|r| r.results.iter().cloned())
            .collect();
        merged.sort_by(|a, b| {
            b.score
                .cmp(&a.score)
                .then_with(|| a.object_ref.node.cmp(&b.object_ref.node))
                .then_with(|| a.object_ref.to_string().cmp(&b.object_ref.to_string()))
        });
        let partial = per_node.values().any(|r| r.status != PeerStatus::Ok);
        FederatedResultSet {
            query,
            per_node,
            merged,
            partial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocateResult {
    pub selector: String,
    pub hits: Vec<LocateHit>,
    pub per_node: BTreeMap<NodeId, PeerStatus>,
    pub partial: bool,
}

impl LocateResult {
    pub fn assemble(selector: String, mut hits: Vec<LocateHit>, per_node: BTreeMap<NodeId, PeerStatus>) -> Self {
        hits.sort_by(|a, b| {
            b.current_version
                .cmp(&a.current_version)
                .then_with(|| a.origin_node.cmp(&b.origin_node))
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
        hits.dedup();
        let partial = per_node.values().any(|s| *s != PeerStatus::Ok);
        LocateResult {
            selector,
            hits,
            per_node,
            partial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchedVersion {
    pub origin: NodeId,
    pub doc_id: String,
    pub name: String,
    pub version: u64,
    pub current_version: u64,
    pub author: String,
    #[serde(skip)]
    pub content: Vec<u8>,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushOutcome {
    pub origin: NodeId,
    pub doc_id: String,
    pub current_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FedError {
    #[error(transparent)]
    Query(#[from] ParseError),
    #[error("selector must not be empty")]
    EmptySelector,
    #[error("{0} is not a roster peer")]
    UnknownPeer(NodeId),
    #[error("peer {0} is unavailable")]
    PeerUnavailable(NodeId),
    #[error("request to {0} timed out")]
    RequestTimeout(NodeId),
    #[error("content of {doc_id} failed hash verification in transit")]
    TransferCorrupt { doc_id: String },
    #[error("{peer} answered {code}: {text}")]
    Remote {
        peer: NodeId,
        code: String,
        text: String,
        current_version: Option<u64>,
    },
    #[error("outbound queue for {0} is full")]
    QueueFull(NodeId),
    #[error(transparent)]
    Store(#[from] dims_core::Error),
}

impl FedError {
    pub fn code(&self) -> &str {
        match self {
            FedError::Query(e) => e.code(),
            FedError::EmptySelector => "empty_selector",
            FedError::UnknownPeer(_) => "unknown_peer",
            FedError::PeerUnavailable(_) => "peer_unavailable",
            FedError::RequestTimeout(_) => "request_timeout",
            FedError::TransferCorrupt { .. } => "transfer_corrupt",
            FedError::Remote { code, .. } => code,
            FedError::QueueFull(_) => "queue_full",
            FedError::Store(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpResult {
    Search(FederatedResultSet),
    Locate(LocateResult),
    Fetch(Result<FetchedVersion, FedError>),
    Push(Result<PushOutcome, FedError>),
}

/// Whether a message went out now or waits for the peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delivery {
    Sent,
    Queued,
}
