//! Network topology files.

use std::collections::{BTreeMap, BTreeSet};

use dims_core::config::Timeouts;
use dims_core::NodeId;
use serde::{Deserialize, Serialize};

use crate::SimError;

fn default_latency() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub timeouts: Timeouts,
    /// Latency of every link not overridden in `links`.
    #[serde(default = "default_latency")]
    pub latency_ms: u64,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    #[serde(default)]
    pub peers: Vec<NodeId>,
}

/// Fault settings for one direction of a link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub from: NodeId,
    pub to: NodeId,
    #[serde(default)]
    pub latency_ms: Option<u64>,
    #[serde(default)]
    pub drop: bool,
    #[serde(default)]
    pub duplicate_prob: f64,
    #[serde(default)]
    pub corrupt_prob: f64,
}

impl NetworkSpec {
    /// Nodes named by id with an undirected edge list.
    pub fn new(ids: &[&str], edges: &[(&str, &str)]) -> Result<Self, SimError> {
        let parse = |s: &str| NodeId::parse(s).map_err(|e| SimError::SpecInvalid(e.to_string()));
        let mut peers: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for id in ids {
            peers.insert(parse(id)?, Vec::new());
        }
        for (a, b) in edges {
            let (a, b) = (parse(a)?, parse(b)?);
            peers.entry(a.clone()).or_default().push(b.clone());
            peers.entry(b).or_default().push(a);
        }
        Ok(NetworkSpec {
            nodes: peers.into_iter().map(|(id, peers)| NodeSpec { id, peers }).collect(),
            timeouts: Timeouts::default(),
            latency_ms: default_latency(),
            links: Vec::new(),
        })
    }

    /// Every node peers with every other.
    pub fn mesh(ids: &[&str]) -> Result<Self, SimError> {
        let mut edges = Vec::new();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                edges.push((*a, *b));
            }
        }
        Self::new(ids, &edges)
    }

    pub fn parse(text: &str) -> Result<Self, SimError> {
        let spec: NetworkSpec = serde_json::from_str(text).map_err(|e| SimError::SpecInvalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::SpecInvalid(m));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        let mut edges = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(&n.id) {
                return bad(format!("{} listed twice", n.id));
            }
            for p in &n.peers {
                if *p == n.id {
                    return bad(format!("{} lists itself", n.id));
                }
                edges.insert((&n.id, p));
            }
        }
        for (a, b) in &edges {
            if !ids.contains(b) {
                return bad(format!("{a} lists unknown peer {b}"));
            }
            if !edges.contains(&(*b, *a)) {
                return bad(format!("{a} lists {b} but not vice versa"));
            }
        }
        for l in &self.links {
            if !edges.contains(&(&l.from, &l.to)) {
                return bad(format!("link {} -> {} is not in the roster", l.from, l.to));
            }
            for p in [l.duplicate_prob, l.corrupt_prob] {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("probability {p} out of range"));
                }
            }
        }
        Ok(())
    }
}
