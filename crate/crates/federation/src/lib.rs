//! Federation between Dims nodes: a line-framed JSON stanza protocol with
//! presence, asynchronous messages and correlated requests for distributed
//! search, locate, fetch and push-back.

pub mod dedup;
pub mod link;
pub mod node;
pub mod ops;
pub mod stanza;

pub use link::{ConnId, LinkState, PeerLink, RosterEntry};
pub use node::{Node, NodeEvent, Output};
pub use ops::{
    Delivery, FedError, FederatedResultSet, FetchedVersion, LocateResult, NodeResults, OpId,
    OpResult, PeerStatus, PushOutcome,
};
pub use stanza::{decode, encode, CodecError, Stanza, StanzaKind};
