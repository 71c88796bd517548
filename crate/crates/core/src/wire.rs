//! Wire format, funnel and router.
//!
//! Everything one cycle sends to one peer travels as a single [`Batch`]; the
//! receiver injects a batch as one cycle or rejects it whole. Frames are
//! UTF-8 JSON texts:
//!
//! ```text
//! {"t":"batch","c":<cycle>,"m":[{"n":<node>,"p":<payload>}]}
//! {"t":"boot","client":"<token>","v":<manifest version>,"vals":[{"n":<node>,"p":<payload>}]}
//! ```
//!
//! On raw byte streams each text is preceded by its length as a 4-byte
//! big-endian integer; WebSocket messages and HTTP bodies carry one text
//! each without a prefix.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;
use crate::graph::{Direction, NodeId, NodeKind, ProgramGraph};
use crate::value::{ClientToken, Val};

pub const DEFAULT_MAX_PAYLOAD: usize = 4 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    #[serde(rename = "n")]
    pub node: NodeId,
    #[serde(rename = "p")]
    pub payload: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Batch {
    /// Sender cycle; diagnostic only.
    pub cycle: u64,
    pub messages: Vec<WireMessage>,
}

impl Batch {
    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn encode(&self) -> String {
        Frame::Batch(self.clone()).encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Batch, WireError> {
        match Frame::decode(bytes)? {
            Frame::Batch(b) => Ok(b),
            Frame::Boot(_) => Err(WireError::UnexpectedFrame("boot")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bootstrap {
    pub client: ClientToken,
    pub version: u64,
    pub values: Vec<WireMessage>,
}

impl Bootstrap {
    pub fn encode(&self) -> String {
        Frame::Boot(self.clone()).encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Bootstrap, WireError> {
        match Frame::decode(bytes)? {
            Frame::Boot(b) => Ok(b),
            Frame::Batch(_) => Err(WireError::UnexpectedFrame("batch")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    Batch(Batch),
    Boot(Bootstrap),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "t")]
enum RawFrame {
    #[serde(rename = "batch")]
    Batch { c: u64, m: Vec<WireMessage> },
    #[serde(rename = "boot")]
    Boot {
        client: ClientToken,
        v: u64,
        vals: Vec<WireMessage>,
    },
}

impl Frame {
    pub fn encode(&self) -> String {
        let raw = match self.clone() {
            Frame::Batch(b) => RawFrame::Batch {
                c: b.cycle,
                m: b.messages,
            },
            Frame::Boot(b) => RawFrame::Boot {
                client: b.client,
                v: b.version,
                vals: b.values,
            },
        };
        serde_json::to_string(&raw).expect("frame serialization is infallible")
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
        Self::decode_limited(bytes, DEFAULT_MAX_PAYLOAD)
    }

    pub fn decode_limited(bytes: &[u8], max: usize) -> Result<Frame, WireError> {
        if bytes.len() > max {
            return Err(WireError::Oversize {
                len: bytes.len(),
                max,
            });
        }
        let raw: RawFrame =
            serde_json::from_slice(bytes).map_err(|e| WireError::Malformed(e.to_string()))?;
        Ok(match raw {
            RawFrame::Batch { c, m } => Frame::Batch(Batch {
                cycle: c,
                messages: m,
            }),
            RawFrame::Boot { client, v, vals } => Frame::Boot(Bootstrap {
                client,
                version: v,
                values: vals,
            }),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unexpected `{0}` frame")]
    UnexpectedFrame(&'static str),
    #[error("frame of {len} bytes exceeds the {max} byte limit")]
    Oversize { len: usize, max: usize },
    #[error("truncated frame")]
    Truncated,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node} is not a {expected:?} crossing")]
    WrongDirection { node: NodeId, expected: Direction },
    #[error("node {0} appears twice in one batch")]
    DuplicateNode(NodeId),
    #[error("node {0} is not provisioned by bootstrapping")]
    NotBootstrapped(NodeId),
    #[error("payload of {node}: {source}")]
    Codec { node: NodeId, source: CodecError },
    #[error("manifest version mismatch: expected {expected}, got {found}")]
    VersionMismatch { expected: u64, found: u64 },
}

/// Appends the length-prefixed form of `payload` to a byte stream.
pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too long"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)
}

/// Reads one length-prefixed frame; `Ok(None)` at a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R, max: usize) -> Result<Option<Vec<u8>>, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated),
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(WireError::Malformed(e.to_string())),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > max {
        return Err(WireError::Oversize { len, max });
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Malformed(e.to_string()),
    })?;
    Ok(Some(buf))
}

/// Encodes outgoing crossing values and decodes incoming batches for one
/// engine role.
#[derive(Clone, Debug)]
pub struct Router {
    graph: Arc<ProgramGraph>,
    incoming: Direction,
}

impl Router {
    /// A router accepting crossings in direction `incoming`.
    pub fn new(graph: Arc<ProgramGraph>, incoming: Direction) -> Self {
        Router { graph, incoming }
    }

    pub fn for_server(graph: Arc<ProgramGraph>) -> Self {
        Self::new(graph, Direction::ClientToSession)
    }

    pub fn for_client(graph: Arc<ProgramGraph>) -> Self {
        Self::new(graph, Direction::SessionToClient)
    }

    pub fn graph(&self) -> &Arc<ProgramGraph> {
        &self.graph
    }

    fn outgoing(&self) -> Direction {
        match self.incoming {
            Direction::ClientToSession => Direction::SessionToClient,
            _ => Direction::ClientToSession,
        }
    }

    /// Funnel: one batch carrying a cycle's port outputs.
    pub fn funnel(&self, cycle: u64, outputs: &[(NodeId, Val)]) -> Result<Batch, WireError> {
        let dir = self.outgoing();
        let messages = outputs
            .iter()
            .map(|(node, v)| {
                let n = self.crossing(*node, dir)?;
                let codec = n.wire_codec().expect("network crossing has a codec");
                let payload = codec.encode(v).map_err(|source| WireError::Codec {
                    node: *node,
                    source,
                })?;
                Ok(WireMessage {
                    node: *node,
                    payload,
                })
            })
            .collect::<Result<_, WireError>>()?;
        Ok(Batch { cycle, messages })
    }

    /// Router: decodes a whole batch, or nothing.
    pub fn route(&self, batch: &Batch) -> Result<Vec<(NodeId, Val)>, WireError> {
        let mut seen = BTreeSet::new();
        batch
            .messages
            .iter()
            .map(|m| {
                let n = self.crossing(m.node, self.incoming)?;
                if !seen.insert(m.node) {
                    return Err(WireError::DuplicateNode(m.node));
                }
                let codec = n.wire_codec().expect("network crossing has a codec");
                let v = codec.decode(&m.payload).map_err(|source| WireError::Codec {
                    node: m.node,
                    source,
                })?;
                Ok((m.node, v))
            })
            .collect()
    }

    /// Encodes full values of session-to-client behavior crossings.
    pub fn bootstrap(
        &self,
        client: ClientToken,
        values: &[(NodeId, Val)],
    ) -> Result<Bootstrap, WireError> {
        let values = values
            .iter()
            .map(|(node, v)| {
                let n = self.crossing(*node, Direction::SessionToClient)?;
                let codec = n.value_codec().expect("network crossing has a codec");
                let payload = codec.encode(v).map_err(|source| WireError::Codec {
                    node: *node,
                    source,
                })?;
                Ok(WireMessage {
                    node: *node,
                    payload,
                })
            })
            .collect::<Result<_, WireError>>()?;
        Ok(Bootstrap {
            client,
            version: self.graph.manifest_version(),
            values,
        })
    }

    /// Decodes a bootstrap payload after checking the manifest version.
    pub fn route_bootstrap(&self, boot: &Bootstrap) -> Result<BTreeMap<NodeId, Val>, WireError> {
        if boot.version != self.graph.manifest_version() {
            return Err(WireError::VersionMismatch {
                expected: self.graph.manifest_version(),
                found: boot.version,
            });
        }
        let mut out = BTreeMap::new();
        for m in &boot.values {
            let n = self.crossing(m.node, Direction::SessionToClient)?;
            if !n.needs_bootstrap() {
                return Err(WireError::NotBootstrapped(m.node));
            }
            let codec = n.value_codec().expect("network crossing has a codec");
            let v = codec.decode(&m.payload).map_err(|source| WireError::Codec {
                node: m.node,
                source,
            })?;
            if out.insert(m.node, v).is_some() {
                return Err(WireError::DuplicateNode(m.node));
            }
        }
        Ok(out)
    }

    fn crossing(
        &self,
        node: NodeId,
        dir: Direction,
    ) -> Result<&crate::graph::GraphNode, WireError> {
        let n = self.graph.get(node).ok_or(WireError::UnknownNode(node))?;
        if n.direction() != Some(dir) || n.kind() == NodeKind::Behavior {
            return Err(WireError::WrongDirection {
                node,
                expected: dir,
            });
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn batch_text_is_exact() {
        let b = Batch {
            cycle: 3,
            messages: vec![WireMessage {
                node: NodeId(4),
                payload: json!({"name": "bob", "message": "hi"}),
            }],
        };
        assert_eq!(
            b.encode(),
            r#"{"t":"batch","c":3,"m":[{"n":4,"p":{"message":"hi","name":"bob"}}]}"#
        );
        assert_eq!(Batch::decode(b.encode().as_bytes()).unwrap(), b);
    }

    #[test]
    fn bootstrap_text_is_exact() {
        let b = Bootstrap {
            client: ClientToken::new("c1"),
            version: 77,
            values: vec![WireMessage {
                node: NodeId(9),
                payload: json!([]),
            }],
        };
        assert_eq!(
            b.encode(),
            r#"{"t":"boot","client":"c1","v":77,"vals":[{"n":9,"p":[]}]}"#
        );
        assert_eq!(Bootstrap::decode(b.encode().as_bytes()).unwrap(), b);
        assert_eq!(
            Batch::decode(b.encode().as_bytes()),
            Err(WireError::UnexpectedFrame("boot"))
        );
    }

    #[test]
    fn truncated_text_is_malformed() {
        let text = Batch::default().encode();
        let cut = &text.as_bytes()[..text.len() - 2];
        assert!(matches!(Batch::decode(cut), Err(WireError::Malformed(_))));
    }

    #[test]
    fn oversize_is_distinct() {
        let text = Batch::default().encode();
        assert_eq!(
            Frame::decode_limited(text.as_bytes(), 4),
            Err(WireError::Oversize {
                len: text.len(),
                max: 4
            })
        );
    }

    #[test]
    fn length_prefix_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"abc").unwrap();
        write_frame(&mut buf, b"").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 3]);
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r, 16).unwrap(), Some(b"abc".to_vec()));
        assert_eq!(read_frame(&mut r, 16).unwrap(), Some(Vec::new()));
        assert_eq!(read_frame(&mut r, 16).unwrap(), None);
        let mut short = &buf[..5];
        assert_eq!(read_frame(&mut short, 16), Err(WireError::Truncated));
        let mut big = &buf[..];
        assert!(matches!(
            read_frame(&mut big, 2),
            Err(WireError::Oversize { len: 3, max: 2 })
        ));
    }
}
