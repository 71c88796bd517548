//! The multi-tier program graph.
//!
//! A [`ProgramBuilder`] records a first-order dataflow program spanning the
//! client, session and application tiers. [`ProgramBuilder::finalize`] validates
//! it and produces an immutable [`ProgramGraph`] that both engine roles and the
//! exported manifest agree on: node ids are dense and assigned in construction
//! order, so building the same program twice yields the same ids.

mod builder;
mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Codec, CodecRegistry};
use crate::value::{ClientChange, ClientToken, Fn1, Fn2, Thunk, Val, ValueType};

pub use builder::{
    AppDelta, Behavior, BehaviorSink, DBehavior, Event, EventSource, ForwardDBehavior, IBehavior,
    ProgramBuilder,
};
pub use manifest::{Manifest, ManifestNode, MANIFEST_FORMAT};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Execution locus of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    /// Browser side, one instance per connection.
    Client,
    /// Server side, replicated per connection.
    Session,
    /// Server side singleton.
    Application,
}

impl Tier {
    pub fn is_server(self) -> bool {
        !matches!(self, Tier::Client)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Event,
    Behavior,
    DBehavior,
    IBehavior,
}

impl NodeKind {
    /// Event and discrete kinds push changes; plain behaviors are only read.
    pub fn is_pushed(self) -> bool {
        !matches!(self, NodeKind::Behavior)
    }

    pub fn has_value(self) -> bool {
        matches!(self, NodeKind::DBehavior | NodeKind::IBehavior)
    }
}

/// Direction of a tier crossing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "c2s")]
    ClientToSession,
    #[serde(rename = "s2c")]
    SessionToClient,
    #[serde(rename = "s2a")]
    SessionToApp,
    #[serde(rename = "a2s")]
    AppToSession,
}

impl Direction {
    pub fn source(self) -> Tier {
        match self {
            Direction::ClientToSession => Tier::Client,
            Direction::SessionToClient | Direction::SessionToApp => Tier::Session,
            Direction::AppToSession => Tier::Application,
        }
    }

    pub fn target(self) -> Tier {
        match self {
            Direction::ClientToSession | Direction::AppToSession => Tier::Session,
            Direction::SessionToClient => Tier::Client,
            Direction::SessionToApp => Tier::Application,
        }
    }

    /// Client/session crossings travel over the wire; the others stay in
    /// server memory.
    pub fn is_network(self) -> bool {
        matches!(self, Direction::ClientToSession | Direction::SessionToClient)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ClientToSession => "c2s",
            Direction::SessionToClient => "s2c",
            Direction::SessionToApp => "s2a",
            Direction::AppToSession => "a2s",
        }
    }
}

pub(crate) type Firer = Arc<dyn Fn(Val) + Send + Sync>;
pub(crate) type Installer = Arc<dyn Fn(Firer) + Send + Sync>;
pub(crate) type Job = Box<dyn FnOnce() -> Result<Val, String> + Send>;
pub(crate) type TaskRunner = Arc<dyn Fn(&Val) -> Job + Send + Sync>;
pub(crate) type Gather = Arc<dyn Fn(Vec<(ClientToken, Val)>) -> Val + Send + Sync>;
pub(crate) type GatherDelta =
    Arc<dyn Fn(Vec<(ClientToken, Val)>, Option<ClientChange>) -> Val + Send + Sync>;

/// Codec names declared on a network crossing, and their resolution.
#[derive(Clone, Default)]
pub(crate) struct CrossCodecs {
    pub value_name: Option<String>,
    pub delta_name: Option<String>,
    pub value: Option<Codec>,
    pub delta: Option<Codec>,
}

#[derive(Clone)]
pub(crate) struct Crossing {
    pub dir: Direction,
    pub codecs: CrossCodecs,
    /// Session-to-application: builds the per-client map from replica values.
    pub gather: Option<Gather>,
    /// Session-to-application incremental deltas.
    pub gather_delta: Option<GatherDelta>,
}

#[derive(Clone)]
pub(crate) enum Op {
    Source { installer: Option<Installer> },
    Timer { period: Duration },
    ClientChanges,
    MapE(Fn1),
    Snapshot(Fn2),
    Changes,
    Deltas,
    Execute { run: TaskRunner, errors: Option<NodeId> },
    ExecuteErrors,
    Constant(Val),
    Fold { init: Val, f: Fn2 },
    Hold { init: Val },
    MapD(Fn1),
    Map2(Fn2),
    SnapshotD(Fn2),
    ToDb,
    SessionClient,
    Forward,
    FoldI { init: Val, f: Fn2 },
    AsIb,
    Poll(Thunk),
    Sink { default: Val },
    Delayed,
    Cross(Box<Crossing>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Source { installer: None } => "source",
            Op::Source { installer: Some(_) } => "effect-source",
            Op::Timer { .. } => "timer",
            Op::ClientChanges => "client-changes",
            Op::MapE(_) | Op::MapD(_) => "map",
            Op::Snapshot(_) => "snapshot",
            Op::Changes => "changes",
            Op::Deltas => "deltas",
            Op::Execute { .. } => "execute",
            Op::ExecuteErrors => "execute-errors",
            Op::Constant(_) => "constant",
            Op::Fold { .. } => "fold",
            Op::Hold { .. } => "hold",
            Op::Map2(_) => "map2",
            Op::SnapshotD(_) => "snapshot-db",
            Op::ToDb => "to-db",
            Op::SessionClient => "client",
            Op::Forward => "forward",
            Op::FoldI { .. } => "fold-i",
            Op::AsIb => "as-ib",
            Op::Poll(_) => "poll",
            Op::Sink { .. } => "sink",
            Op::Delayed => "delayed",
            Op::Cross(_) => "cross",
        }
    }
}

/// One node of a finalized program.
#[derive(Clone)]
pub struct GraphNode {
    pub(crate) id: NodeId,
    pub(crate) tier: Tier,
    pub(crate) kind: NodeKind,
    pub(crate) op: Op,
    pub(crate) deps: Vec<NodeId>,
    pub(crate) ty: ValueType,
    pub(crate) delta_ty: Option<ValueType>,
    /// Fold function of incremental nodes.
    pub(crate) fold: Option<Fn2>,
    pub(crate) xhr_assert: bool,
    pub(crate) probe: Option<String>,
    pub(crate) label: Option<String>,
}

impl GraphNode {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    pub fn deps(&self) -> &[NodeId] {
        &self.deps
    }

    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn value_type(&self) -> ValueType {
        self.ty
    }

    pub fn delta_type(&self) -> Option<ValueType> {
        self.delta_ty
    }

    pub fn direction(&self) -> Option<Direction> {
        match &self.op {
            Op::Cross(c) => Some(c.dir),
            _ => None,
        }
    }

    pub fn is_network_crossing(&self) -> bool {
        self.direction().is_some_and(Direction::is_network)
    }

    pub fn xhr_assert(&self) -> bool {
        self.xhr_assert
    }

    pub fn probe(&self) -> Option<&str> {
        self.probe.as_deref()
    }

    pub fn is_delayed(&self) -> bool {
        matches!(self.op, Op::Delayed)
    }

    pub fn timer_period(&self) -> Option<Duration> {
        match self.op {
            Op::Timer { period } => Some(period),
            _ => None,
        }
    }

    pub fn is_source(&self) -> bool {
        matches!(self.op, Op::Source { .. })
    }

    pub(crate) fn crossing(&self) -> Option<&Crossing> {
        match &self.op {
            Op::Cross(c) => Some(c),
            _ => None,
        }
    }

    /// Codec for the payload carried by wire messages of this crossing:
    /// the value for events and discrete behaviors, the delta for
    /// incremental behaviors.
    pub fn wire_codec(&self) -> Option<&Codec> {
        let c = self.crossing()?;
        match self.kind {
            NodeKind::IBehavior => c.codecs.delta.as_ref(),
            _ => c.codecs.value.as_ref(),
        }
    }

    /// Codec for the full value sent when a client bootstraps.
    pub fn value_codec(&self) -> Option<&Codec> {
        self.crossing()?.codecs.value.as_ref()
    }

    /// Whether bootstrapping must provision this node: a session-to-client
    /// crossing of a discrete or incremental behavior.
    pub fn needs_bootstrap(&self) -> bool {
        self.direction() == Some(Direction::SessionToClient) && self.kind.has_value()
    }
}

impl fmt::Debug for GraphNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GraphNode")
            .field("id", &self.id)
            .field("tier", &self.tier)
            .field("kind", &self.kind)
            .field("op", &self.op_name())
            .field("deps", &self.deps)
            .finish()
    }
}

fn fmt_ids(ids: &[NodeId]) -> String {
    ids.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Finalization diagnostics. Every variant names the offending node ids.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("forward reference {node} was never resolved")]
    UnresolvedForward { node: NodeId },
    #[error("dependency cycle without a delayed node through {}", fmt_ids(.nodes))]
    UndelayedCycle { nodes: Vec<NodeId> },
    #[error("{node} on tier {node_tier:?} depends on {dep} on tier {dep_tier:?} without a crossing")]
    TierMismatch {
        node: NodeId,
        node_tier: Tier,
        dep: NodeId,
        dep_tier: Tier,
    },
    #[error("crossing {node} ({direction:?}) expects a {expected:?} input but {dep} is on {found:?}")]
    CrossingFromWrongTier {
        node: NodeId,
        direction: Direction,
        dep: NodeId,
        expected: Tier,
        found: Tier,
    },
    #[error("non-discrete behavior cannot cross between client and session ({node})")]
    BehaviorCrossesNetwork { node: NodeId },
    #[error("crossing {node} has no codec `{codec}`")]
    MissingCodec { node: NodeId, codec: String },
    #[error("crossing {node}: codec `{codec}` handles {found} but the payload is {expected}")]
    CodecTypeMismatch {
        node: NodeId,
        codec: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("{node}: `{op}` is not available on tier {tier:?}")]
    InvalidTier {
        node: NodeId,
        op: &'static str,
        tier: Tier,
    },
    #[error("delayed node {node} must target a discrete behavior on its own tier, got {target}")]
    InvalidDelayedTarget { node: NodeId, target: NodeId },
    #[error("program has no main view")]
    MissingMainView,
    #[error("program declares several main views: {}", fmt_ids(.nodes))]
    DuplicateMainView { nodes: Vec<NodeId> },
    #[error("main view {node} must be a discrete behavior on the client tier")]
    InvalidMainView { node: NodeId },
}

/// A finalized, immutable program.
pub struct ProgramGraph {
    pub(crate) nodes: Vec<GraphNode>,
    pub(crate) dependents: Vec<Vec<NodeId>>,
    pub(crate) topo: Vec<NodeId>,
    pub(crate) rank: Vec<u32>,
    pub(crate) main_view: Option<NodeId>,
    pub(crate) manifest_version: u64,
    pub(crate) codecs: CodecRegistry,
    pub(crate) static_initials: Vec<Option<Val>>,
}

impl fmt::Debug for ProgramGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProgramGraph")
            .field("nodes", &self.nodes.len())
            .field("main_view", &self.main_view)
            .field("manifest_version", &self.manifest_version)
            .finish()
    }
}

impl ProgramGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.index()]
    }

    pub fn get(&self, id: NodeId) -> Option<&GraphNode> {
        self.nodes.get(id.index())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter()
    }

    pub fn main_view(&self) -> Option<NodeId> {
        self.main_view
    }

    pub fn manifest_version(&self) -> u64 {
        self.manifest_version
    }

    pub fn codecs(&self) -> &CodecRegistry {
        &self.codecs
    }

    /// Node ids in propagation order (dependencies first, delayed edges
    /// ignored).
    pub fn topological_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub(crate) fn rank(&self, id: NodeId) -> u32 {
        self.rank[id.index()]
    }

    pub fn dependents(&self, id: NodeId) -> &[NodeId] {
        &self.dependents[id.index()]
    }

    /// Initial value of a discrete or incremental node when no client is
    /// connected and every crossing carries its source's initial value.
    pub fn static_initial(&self, id: NodeId) -> Option<&Val> {
        self.static_initials[id.index()].as_ref()
    }

    pub fn crossings(&self, direction: Direction) -> impl Iterator<Item = &GraphNode> {
        self.nodes
            .iter()
            .filter(move |n| n.direction() == Some(direction))
    }

    pub fn probes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(|n| n.probe.is_some())
    }

    pub fn find_label(&self, label: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.label.as_deref() == Some(label))
            .map(|n| n.id)
    }

    /// Initial value of a non-crossing node given its dependencies' values.
    pub(crate) fn initial_from(&self, id: NodeId, dep: impl Fn(NodeId) -> Val) -> Option<Val> {
        let n = self.node(id);
        let d = |i: usize| dep(n.deps[i]);
        Some(match &n.op {
            Op::Constant(v) => v.clone(),
            Op::Fold { init, .. } | Op::Hold { init } | Op::FoldI { init, .. } => init.clone(),
            Op::MapD(f) => f(&d(0)),
            Op::Map2(f) | Op::SnapshotD(f) => f(&d(0), &d(1)),
            Op::ToDb | Op::AsIb | Op::Forward => d(0),
            _ => return None,
        })
    }

    pub(crate) fn finalize(
        nodes: Vec<GraphNode>,
        main_views: Vec<NodeId>,
        codecs: CodecRegistry,
        require_view: bool,
    ) -> Result<ProgramGraph, GraphError> {
        let mut nodes = nodes;
        for n in &nodes {
            if matches!(n.op, Op::Forward) && n.deps.is_empty() {
                return Err(GraphError::UnresolvedForward { node: n.id });
            }
        }
        validate_tiers(&nodes)?;
        resolve_codecs(&mut nodes, &codecs)?;

        let main_view = match main_views.as_slice() {
            [] if require_view => return Err(GraphError::MissingMainView),
            [] => None,
            [v] => {
                let n = &nodes[v.index()];
                if n.tier != Tier::Client || n.kind != NodeKind::DBehavior {
                    return Err(GraphError::InvalidMainView { node: *v });
                }
                Some(*v)
            }
            many => {
                return Err(GraphError::DuplicateMainView {
                    nodes: many.to_vec(),
                })
            }
        };

        let mut dependents = vec![Vec::new(); nodes.len()];
        for n in &nodes {
            for d in &n.deps {
                if !dependents[d.index()].contains(&n.id) {
                    dependents[d.index()].push(n.id);
                }
            }
        }
        let topo = topological_order(&nodes)?;
        let mut rank = vec![0u32; nodes.len()];
        for (r, id) in topo.iter().enumerate() {
            rank[id.index()] = r as u32;
        }

        let mut graph = ProgramGraph {
            nodes,
            dependents,
            topo,
            rank,
            main_view,
            manifest_version: 0,
            codecs,
            static_initials: Vec::new(),
        };
        graph.static_initials = graph.compute_static_initials();
        graph.manifest_version = manifest::fingerprint(&graph);
        Ok(graph)
    }

    fn compute_static_initials(&self) -> Vec<Option<Val>> {
        let mut init: Vec<Option<Val>> = vec![None; self.nodes.len()];
        for &id in &self.topo {
            let n = self.node(id);
            if !n.kind.has_value() {
                continue;
            }
            let value = match &n.op {
                Op::SessionClient => Some(Val::new(ClientToken::placeholder())),
                Op::Cross(c) => match c.dir {
                    Direction::SessionToApp => c.gather.as_ref().map(|g| g(Vec::new())),
                    _ => init[n.deps[0].index()].clone(),
                },
                _ => self.initial_from(id, |d| {
                    init[d.index()]
                        .clone()
                        .expect("dependency initial computed in topological order")
                }),
            };
            init[id.index()] = value;
        }
        init
    }
}

fn validate_tiers(nodes: &[GraphNode]) -> Result<(), GraphError> {
    for n in nodes {
        match &n.op {
            Op::SessionClient if n.tier != Tier::Session => {
                return Err(GraphError::InvalidTier {
                    node: n.id,
                    op: n.op.name(),
                    tier: n.tier,
                })
            }
            Op::ClientChanges if n.tier != Tier::Application => {
                return Err(GraphError::InvalidTier {
                    node: n.id,
                    op: n.op.name(),
                    tier: n.tier,
                })
            }
            Op::Delayed => {
                let t = &nodes[n.deps[0].index()];
                if t.kind != NodeKind::DBehavior || t.tier != n.tier {
                    return Err(GraphError::InvalidDelayedTarget {
                        node: n.id,
                        target: t.id,
                    });
                }
            }
            Op::Cross(c) => {
                let dep = &nodes[n.deps[0].index()];
                if dep.tier != c.dir.source() {
                    return Err(GraphError::CrossingFromWrongTier {
                        node: n.id,
                        direction: c.dir,
                        dep: dep.id,
                        expected: c.dir.source(),
                        found: dep.tier,
                    });
                }
                if c.dir.is_network() && n.kind == NodeKind::Behavior {
                    return Err(GraphError::BehaviorCrossesNetwork { node: n.id });
                }
                continue;
            }
            _ => {}
        }
        for d in &n.deps {
            let dep = &nodes[d.index()];
            if dep.tier != n.tier {
                return Err(GraphError::TierMismatch {
                    node: n.id,
                    node_tier: n.tier,
                    dep: dep.id,
                    dep_tier: dep.tier,
                });
            }
        }
    }
    Ok(())
}

fn resolve_codecs(nodes: &mut [GraphNode], codecs: &CodecRegistry) -> Result<(), GraphError> {
    for n in nodes.iter_mut() {
        let id = n.id;
        let (ty, delta_ty, kind) = (n.ty, n.delta_ty, n.kind);
        let Op::Cross(c) = &mut n.op else { continue };
        if !c.dir.is_network() {
            continue;
        }
        let resolve = |name: &Option<String>, expected: ValueType| -> Result<Codec, GraphError> {
            let name = name.clone().unwrap_or_default();
            let codec = codecs.get(&name).map_err(|_| GraphError::MissingCodec {
                node: id,
                codec: name.clone(),
            })?;
            if codec.value_type() != expected {
                return Err(GraphError::CodecTypeMismatch {
                    node: id,
                    codec: name,
                    expected: expected.name,
                    found: codec.value_type().name,
                });
            }
            Ok(codec.clone())
        };
        c.codecs.value = Some(resolve(&c.codecs.value_name, ty)?);
        if kind == NodeKind::IBehavior {
            let dt = delta_ty.expect("incremental nodes carry a delta type");
            c.codecs.delta = Some(resolve(&c.codecs.delta_name, dt)?);
        }
    }
    Ok(())
}

/// Kahn's algorithm over non-delayed edges, smallest id first.
fn topological_order(nodes: &[GraphNode]) -> Result<Vec<NodeId>, GraphError> {
    let mut indegree = vec![0usize; nodes.len()];
    let mut out: Vec<Vec<NodeId>> = vec![Vec::new(); nodes.len()];
    for n in nodes {
        if matches!(n.op, Op::Delayed) {
            continue;
        }
        for d in &n.deps {
            indegree[n.id.index()] += 1;
            out[d.index()].push(n.id);
        }
    }
    let mut ready: BTreeSet<NodeId> = nodes
        .iter()
        .filter(|n| indegree[n.id.index()] == 0)
        .map(|n| n.id)
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(id) = ready.pop_first() {
        order.push(id);
        for &next in &out[id.index()] {
            indegree[next.index()] -= 1;
            if indegree[next.index()] == 0 {
                ready.insert(next);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck: Vec<NodeId> = nodes
            .iter()
            .filter(|n| indegree[n.id.index()] > 0)
            .map(|n| n.id)
            .collect();
        return Err(GraphError::UndelayedCycle {
            nodes: cycle_members(nodes, &stuck),
        });
    }
    Ok(order)
}

/// Narrows the nodes left over by Kahn's algorithm to those on a cycle.
fn cycle_members(nodes: &[GraphNode], stuck: &[NodeId]) -> Vec<NodeId> {
    let stuck_set: BTreeSet<NodeId> = stuck.iter().copied().collect();
    let edges: BTreeMap<NodeId, Vec<NodeId>> = stuck
        .iter()
        .map(|&id| {
            let n = &nodes[id.index()];
            let deps = if matches!(n.op, Op::Delayed) {
                Vec::new()
            } else {
                n.deps
                    .iter()
                    .copied()
                    .filter(|d| stuck_set.contains(d))
                    .collect()
            };
            (id, deps)
        })
        .collect();
    let reaches = |from: NodeId, to: NodeId| {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(x) = stack.pop() {
            for &d in &edges[&x] {
                if d == to {
                    return true;
                }
                if seen.insert(d) {
                    stack.push(d);
                }
            }
        }
        false
    };
    stuck.iter().copied().filter(|&id| reaches(id, id)).collect()
}

impl GraphError {
    /// Ids named by the diagnostic.
    pub fn nodes(&self) -> Vec<NodeId> {
        match self {
            GraphError::UnresolvedForward { node }
            | GraphError::BehaviorCrossesNetwork { node }
            | GraphError::MissingCodec { node, .. }
            | GraphError::CodecTypeMismatch { node, .. }
            | GraphError::InvalidTier { node, .. }
            | GraphError::InvalidMainView { node } => vec![*node],
            GraphError::TierMismatch { node, dep, .. }
            | GraphError::CrossingFromWrongTier { node, dep, .. } => vec![*node, *dep],
            GraphError::InvalidDelayedTarget { node, target } => vec![*node, *target],
            GraphError::UndelayedCycle { nodes } | GraphError::DuplicateMainView { nodes } => {
                nodes.clone()
            }
            GraphError::MissingMainView => Vec::new(),
        }
    }
}
