//! Transport mode inference.
//!
//! Every node is tagged request/response or bidirectional. A node is
//! bidirectional when its updates can originate on the server without a
//! client request: server timers and sources, async results on the server,
//! and application state fanned out to sessions. Tags flow along
//! dependencies; a snapshot takes only the tag of its sampling side. The
//! program needs a WebSocket exactly when some session-to-client crossing is
//! bidirectional.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Direction, NodeId, Op, ProgramGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ModeTag {
    RequestResponse,
    Bidirectional,
}

/// The transport backend a program runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transport {
    #[serde(rename = "xhr")]
    Xhr,
    #[serde(rename = "websocket")]
    WebSocket,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Xhr => "xhr",
            Transport::WebSocket => "websocket",
        })
    }
}

/// Transport requested by configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ModeRequest {
    #[default]
    Auto,
    Xhr,
    WebSocket,
}

impl std::str::FromStr for ModeRequest {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(ModeRequest::Auto),
            "xhr" => Ok(ModeRequest::Xhr),
            "ws" | "websocket" => Ok(ModeRequest::WebSocket),
            other => Err(format!("unknown mode `{other}` (expected auto, ws or xhr)")),
        }
    }
}

/// A bidirectional node that must not be, with a shortest dependency path
/// from a bidirectional origin to it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub node: NodeId,
    pub path: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModeReport {
    pub tags: Vec<ModeTag>,
    pub verdict: Transport,
    /// Bidirectional session-to-client crossings, with witness paths.
    pub bidirectional_outputs: Vec<Violation>,
    /// Failed xhr-asserts.
    pub violations: Vec<Violation>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModeError {
    #[error("xhr-assert violated: {}", describe(.0))]
    AssertViolated(Vec<Violation>),
    #[error("xhr mode requested but the program needs bidirectional transport: {}", describe(.0))]
    XhrNotPossible(Vec<Violation>),
}

fn describe(vs: &[Violation]) -> String {
    vs.iter()
        .map(|v| {
            let path: Vec<String> = v.path.iter().map(|n| n.to_string()).collect();
            format!("{} via {}", v.node, path.join(" -> "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

impl ModeReport {
    pub fn tag(&self, id: NodeId) -> ModeTag {
        self.tags[id.index()]
    }

    /// Fails if any xhr-assert node is bidirectional.
    pub fn check_xhr_asserts(&self) -> Result<(), ModeError> {
        if self.violations.is_empty() {
            Ok(())
        } else {
            Err(ModeError::AssertViolated(self.violations.clone()))
        }
    }

    /// Resolves a configured mode against the verdict. Forcing WebSocket is
    /// always possible; forcing XHR is not when the verdict is WebSocket.
    pub fn choose(&self, request: ModeRequest) -> Result<Transport, ModeError> {
        self.check_xhr_asserts()?;
        match request {
            ModeRequest::Auto => Ok(self.verdict),
            ModeRequest::WebSocket => Ok(Transport::WebSocket),
            ModeRequest::Xhr if self.verdict == Transport::Xhr => Ok(Transport::Xhr),
            ModeRequest::Xhr => Err(ModeError::XhrNotPossible(self.bidirectional_outputs.clone())),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization is infallible")
    }
}

impl fmt::Display for ModeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verdict: {}", self.verdict)?;
        let bidi: Vec<String> = self
            .tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == ModeTag::Bidirectional)
            .map(|(i, _)| format!("#{i}"))
            .collect();
        writeln!(f, "bidirectional nodes: [{}]", bidi.join(", "))?;
        for v in &self.bidirectional_outputs {
            writeln!(f, "server push: {}", describe(std::slice::from_ref(v)))?;
        }
        for v in &self.violations {
            writeln!(f, "assert violated: {}", describe(std::slice::from_ref(v)))?;
        }
        Ok(())
    }
}

/// Whether a node is bidirectional by itself, regardless of its inputs.
fn is_origin(graph: &ProgramGraph, id: NodeId) -> bool {
    let n = graph.node(id);
    let server = n.tier().is_server();
    match &n.op {
        Op::Source { .. } | Op::Timer { .. } | Op::Execute { .. } | Op::ExecuteErrors => server,
        Op::Cross(c) => c.dir == Direction::AppToSession,
        _ => false,
    }
}

/// Inputs whose tag a node inherits.
fn inherited(graph: &ProgramGraph, id: NodeId) -> &[NodeId] {
    let n = graph.node(id);
    match &n.op {
        Op::Snapshot(_) | Op::SnapshotD(_) => &n.deps()[1..2],
        Op::Source { .. }
        | Op::Timer { .. }
        | Op::ClientChanges
        | Op::Constant(_)
        | Op::SessionClient
        | Op::Poll(_)
        | Op::Sink { .. }
        | Op::ExecuteErrors => &[],
        _ => n.deps(),
    }
}

/// Tags every node and derives the verdict.
pub fn infer_modes(graph: &ProgramGraph) -> ModeReport {
    let n = graph.len();
    let mut tags = vec![ModeTag::RequestResponse; n];
    // Fixed point; delayed edges may point backwards in rank order.
    loop {
        let mut changed = false;
        for &id in graph.topological_order() {
            if tags[id.index()] == ModeTag::Bidirectional {
                continue;
            }
            let bidi = is_origin(graph, id)
                || inherited(graph, id)
                    .iter()
                    .any(|d| tags[d.index()] == ModeTag::Bidirectional);
            if bidi {
                tags[id.index()] = ModeTag::Bidirectional;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let witness = |target: NodeId| Violation {
        node: target,
        path: witness_path(graph, &tags, target),
    };
    let bidirectional_outputs: Vec<Violation> = graph
        .crossings(Direction::SessionToClient)
        .filter(|c| tags[c.id().index()] == ModeTag::Bidirectional)
        .map(|c| witness(c.id()))
        .collect();
    let violations = graph
        .nodes()
        .filter(|x| x.xhr_assert() && tags[x.id().index()] == ModeTag::Bidirectional)
        .map(|x| witness(x.id()))
        .collect();
    let verdict = if bidirectional_outputs.is_empty() {
        Transport::Xhr
    } else {
        Transport::WebSocket
    };
    ModeReport {
        tags,
        verdict,
        bidirectional_outputs,
        violations,
    }
}

/// Shortest path, origin first, from a bidirectional origin to `target`
/// along inherited edges.
fn witness_path(graph: &ProgramGraph, tags: &[ModeTag], target: NodeId) -> Vec<NodeId> {
    let mut parent: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut queue = VecDeque::from([target]);
    let mut seen = vec![false; graph.len()];
    seen[target.index()] = true;
    while let Some(id) = queue.pop_front() {
        if is_origin(graph, id) {
            let mut path = vec![id];
            let mut cur = id;
            while let Some(&next) = parent.get(&cur) {
                path.push(next);
                cur = next;
            }
            return path;
        }
        for &d in inherited(graph, id) {
            if tags[d.index()] == ModeTag::Bidirectional && !seen[d.index()] {
                seen[d.index()] = true;
                parent.insert(d, id);
                queue.push_back(d);
            }
        }
    }
    vec![target]
}
