//! Versioned documents whose origin node is the only place a new version
//! can be committed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::ids::{NodeId, Timestamp};

/// Lowercase hex SHA-256.
pub fn content_hash(content: &[u8]) -> String {
    hex::encode(Sha256::digest(content))
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub origin_node: NodeId,
    pub module_id: String,
    pub name: String,
    pub current_version: u64,
    pub linked_object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentVersion {
    pub doc_id: String,
    pub version: u64,
    #[serde(with = "b64")]
    pub content: Vec<u8>,
    pub content_hash: String,
    pub author: String,
    pub source_node: NodeId,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProvenanceKind {
    Created,
    Pushed,
    FetchedBy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEvent {
    pub seq: u64,
    pub doc_id: String,
    pub version: u64,
    pub kind: ProvenanceKind,
    pub actor: String,
    pub node: NodeId,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocStore {
    node: NodeId,
    documents: BTreeMap<String, Document>,
    versions: BTreeMap<String, Vec<DocumentVersion>>,
    provenance: BTreeMap<String, Vec<ProvenanceEvent>>,
    next_seq: u64,
}

impl DocStore {
    pub fn new(node: NodeId) -> Self {
        DocStore {
            node,
            documents: BTreeMap::new(),
            versions: BTreeMap::new(),
            provenance: BTreeMap::new(),
            next_seq: 0,
        }
    }

    pub fn document(&self, doc_id: &str) -> Result<&Document, Error> {
        self.documents
            .get(doc_id)
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    fn record(&mut self, doc_id: &str, version: u64, kind: ProvenanceKind, actor: &str, node: &NodeId, at: Timestamp) {
        self.next_seq += 1;
        self.provenance
            .entry(doc_id.to_string())
            .or_default()
            .push(ProvenanceEvent {
                seq: self.next_seq,
                doc_id: doc_id.to_string(),
                version,
                kind,
                actor: actor.to_string(),
                node: node.clone(),
                at,
            });
    }

    #[allow(clippy::too_many_arguments)]
    pub fn create(
        &mut self,
        doc_id: String,
        module_id: &str,
        name: &str,
        content: Vec<u8>,
        author: &str,
        linked_object: &str,
        at: Timestamp,
    ) -> Document {
        let node = self.node.clone();
        let doc = Document {
            doc_id: doc_id.clone(),
            origin_node: node.clone(),
            module_id: module_id.to_string(),
            name: name.to_string(),
            current_version: 1,
            linked_object: linked_object.to_string(),
        };
        self.versions.insert(
            doc_id.clone(),
            vec![DocumentVersion {
                doc_id: doc_id.clone(),
                version: 1,
                content_hash: content_hash(&content),
                content,
                author: author.to_string(),
                source_node: node.clone(),
                created_at: at,
            }],
        );
        self.documents.insert(doc_id.clone(), doc.clone());
        self.record(&doc_id, 1, ProvenanceKind::Created, author, &node, at);
        doc
    }

    /// Returns `version`, or the current one; the stored hash is re-checked.
    pub fn get_version(&self, doc_id: &str, version: Option<u64>) -> Result<&DocumentVersion, Error> {
        let doc = self.document(doc_id)?;
        let wanted = version.unwrap_or(doc.current_version);
        let stored = wanted
            .checked_sub(1)
            .and_then(|i| self.versions.get(doc_id)?.get(i as usize))
            .ok_or_else(|| Error::UnknownVersion {
                doc_id: doc_id.to_string(),
                version: wanted,
            })?;
        if content_hash(&stored.content) != stored.content_hash {
            return Err(Error::CorruptContent {
                doc_id: doc_id.to_string(),
                version: wanted,
            });
        }
        Ok(stored)
    }

    /// Logs a FETCHED_BY event for a read served to another node.
    pub fn record_fetch(&mut self, doc_id: &str, version: u64, actor: &str, node: &NodeId, at: Timestamp) -> Result<(), Error> {
        self.get_version(doc_id, Some(version))?;
        self.record(doc_id, version, ProvenanceKind::FetchedBy, actor, node, at);
        Ok(())
    }

    /// Compare-and-set on `base_version`; only the origin may commit.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        origin: &NodeId,
        doc_id: &str,
        base_version: u64,
        content: Vec<u8>,
        author: &str,
        source_node: &NodeId,
        at: Timestamp,
    ) -> Result<Document, Error> {
        if *origin != self.node {
            return Err(Error::NotOrigin(doc_id.to_string()));
        }
        let current = self.document(doc_id)?.current_version;
        if base_version != current {
            return Err(Error::VersionConflict {
                current_version: current,
            });
        }
        let version = current + 1;
        self.versions
            .get_mut(doc_id)
            .expect("versions exist for every document")
            .push(DocumentVersion {
                doc_id: doc_id.to_string(),
                version,
                content_hash: content_hash(&content),
                content,
                author: author.to_string(),
                source_node: source_node.clone(),
                created_at: at,
            });
        let doc = self.documents.get_mut(doc_id).expect("checked above");
        doc.current_version = version;
        let doc = doc.clone();
        self.record(doc_id, version, ProvenanceKind::Pushed, author, source_node, at);
        Ok(doc)
    }

    /// Provenance oldest first, ordered by `(at, seq)`.
    pub fn history(&self, doc_id: &str) -> Result<Vec<ProvenanceEvent>, Error> {
        self.document(doc_id)?;
        let mut events = self.provenance.get(doc_id).cloned().unwrap_or_default();
        events.sort_by_key(|e| (e.at, e.seq));
        Ok(events)
    }

    /// Simulates storage damage; the next read of that version must fail.
    pub fn damage_stored_content(&mut self, doc_id: &str, version: u64) -> bool {
        let Some(stored) = self
            .versions
            .get_mut(doc_id)
            .and_then(|vs| vs.get_mut(version.saturating_sub(1) as usize))
        else {
            return false;
        };
        match stored.content.first_mut() {
            Some(b) => *b ^= 0x01,
            None => stored.content.push(0),
        }
        true
    }
}
