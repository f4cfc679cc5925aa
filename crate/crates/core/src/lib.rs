//! Domain core of a Dims node: the information model, the boolean query
//! engine, the origin-authoritative document store and the journaled store
//! that ties them together.

pub mod config;
pub mod docstore;
pub mod error;
pub mod ids;
pub mod inbox;
pub mod journal;
pub mod model;
pub mod query;
pub mod store;

pub use error::{Error, ErrorKind, Result};
pub use ids::{NodeId, ObjectRef, Timestamp};
pub use store::{State, Store};
