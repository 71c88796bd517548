//! The exported graph manifest.
//!
//! A manifest lists every node of a finalized graph by id, with crossing
//! directions and codec names, so that a client built without the program
//! (such as a browser client) can route and decode wire messages. The text
//! form is canonical JSON: keys sorted, no whitespace, nodes ordered by id.
//! Struct fields below are declared in key order so that serialization is
//! canonical regardless of the JSON map implementation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Direction, NodeId, NodeKind, ProgramGraph, Tier};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestNode {
    /// Codec name; `value|delta` for incremental crossings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codec: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    pub id: NodeId,
    pub kind: NodeKind,
    pub op: String,
    pub tier: Tier,
}

impl ManifestNode {
    /// Value and delta codec names of a network crossing.
    pub fn codec_names(&self) -> Option<(&str, Option<&str>)> {
        let codec = self.codec.as_deref()?;
        Some(match codec.split_once('|') {
            Some((v, d)) => (v, Some(d)),
            None => (codec, None),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "mainView")]
    pub main_view: Option<NodeId>,
    pub nodes: Vec<ManifestNode>,
    pub version: u64,
}

impl Manifest {
    pub fn from_graph(graph: &ProgramGraph) -> Self {
        let mut m = Self::unversioned(graph);
        m.version = graph.manifest_version();
        m
    }

    fn unversioned(graph: &ProgramGraph) -> Self {
        let nodes = graph
            .nodes()
            .map(|n| {
                let crossing = n.crossing().filter(|c| c.dir.is_network());
                let codec = crossing.and_then(|c| {
                    let value = c.codecs.value_name.clone()?;
                    Some(match &c.codecs.delta_name {
                        Some(d) => format!("{value}|{d}"),
                        None => value,
                    })
                });
                ManifestNode {
                    codec,
                    direction: n.direction(),
                    id: n.id(),
                    kind: n.kind(),
                    op: n.op_name().to_string(),
                    tier: n.tier(),
                }
            })
            .collect();
        Manifest {
            main_view: graph.main_view(),
            nodes,
            version: 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn node(&self, id: NodeId) -> Option<&ManifestNode> {
        self.nodes.get(id.index()).filter(|n| n.id == id)
    }

    pub fn crossings(&self, direction: Direction) -> impl Iterator<Item = &ManifestNode> {
        self.nodes
            .iter()
            .filter(move |n| n.direction == Some(direction))
    }
}

pub const MANIFEST_FORMAT: &str = "application/json";

/// Version number of a graph: the leading 32 bits of the SHA-256 digest of
/// its unversioned manifest. Fits exactly in a JSON number on every platform.
pub(crate) fn fingerprint(graph: &ProgramGraph) -> u64 {
    let text = Manifest::unversioned(graph).to_json();
    let digest = Sha256::digest(text.as_bytes());
    u32::from_be_bytes([digest[0], digest[1], digest[2], digest[3]]) as u64
}
