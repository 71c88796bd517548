//! Reference evaluator for single-tier programs.
//!
//! A direct reading of the synchronous semantics with no propagation
//! machinery: each cycle, every node is evaluated on demand from its
//! definition, with results memoized for the cycle. Discrete behaviors
//! keep their value from the end of the previous cycle unless their
//! definition says they step; delayed behaviors read that previous value.
//! It shares nothing with [`crate::engine`] beyond the graph itself.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::trace::{Trace, TraceEntry};
use crate::engine::Pulse;
use crate::graph::{NodeId, NodeKind, Op, ProgramGraph};
use crate::value::Val;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReferenceError {
    #[error("{0} uses `{1}`, which the reference evaluator does not model")]
    Unsupported(NodeId, &'static str),
    #[error("program spans several tiers")]
    MultiTier,
    #[error("pulse for {0}, which is not a source")]
    NotASource(NodeId),
}

struct Cycle<'a> {
    g: &'a ProgramGraph,
    prev: &'a [Option<Val>],
    pulses: &'a HashMap<NodeId, Val>,
    events: HashMap<NodeId, Option<Val>>,
    /// Value at the end of this cycle and whether it stepped.
    values: HashMap<NodeId, (Val, bool)>,
    deltas: HashMap<NodeId, Option<Val>>,
    reads: HashMap<NodeId, Val>,
}

impl Cycle<'_> {
    fn event(&mut self, id: NodeId) -> Option<Val> {
        if let Some(v) = self.events.get(&id) {
            return v.clone();
        }
        let n = self.g.node(id);
        let d = n.deps().to_vec();
        let out = match &n.op {
            Op::Source { .. } | Op::Timer { .. } => self.pulses.get(&id).cloned(),
            Op::MapE(f) => self.event(d[0]).map(|v| f(&v)),
            Op::Snapshot(f) => match self.event(d[1]) {
                Some(ev) => {
                    let b = self.read(d[0]);
                    Some(f(&b, &ev))
                }
                None => None,
            },
            Op::Changes => {
                let (v, stepped) = self.value(d[0]);
                stepped.then_some(v)
            }
            Op::Deltas => self.delta(d[0]),
            _ => unreachable!("not an event operator"),
        };
        self.events.insert(id, out.clone());
        out
    }

    fn prev(&self, id: NodeId) -> Val {
        self.prev[id.index()].clone().expect("previous value exists")
    }

    fn value(&mut self, id: NodeId) -> (Val, bool) {
        if let Some(v) = self.values.get(&id) {
            return v.clone();
        }
        let n = self.g.node(id);
        let d = n.deps().to_vec();
        let prev = self.prev(id);
        let (v, stepped) = match &n.op {
            Op::Constant(_) => (prev, false),
            Op::Fold { f, .. } => match self.event(d[0]) {
                Some(e) => (f(&prev, &e), true),
                None => (prev, false),
            },
            Op::Hold { .. } => match self.event(d[0]) {
                Some(e) => (e, true),
                None => (prev, false),
            },
            Op::FoldI { f, .. } => match self.event(d[0]) {
                Some(e) => (f(&prev, &e), true),
                None => (prev, false),
            },
            Op::MapD(f) => match self.value(d[0]) {
                (a, true) => (f(&a), true),
                _ => (prev, false),
            },
            Op::Map2(f) => {
                let (a, sa) = self.value(d[0]);
                let (b, sb) = self.value(d[1]);
                if sa || sb {
                    (f(&a, &b), true)
                } else {
                    (prev, false)
                }
            }
            Op::SnapshotD(f) => {
                let (b, sb) = self.value(d[1]);
                if sb {
                    let (a, _) = self.value(d[0]);
                    (f(&a, &b), true)
                } else {
                    (prev, false)
                }
            }
            Op::ToDb | Op::Forward | Op::AsIb => match self.value(d[0]) {
                (a, true) => (a, true),
                _ => (prev, false),
            },
            _ => unreachable!("not a discrete operator"),
        };
        self.values.insert(id, (v.clone(), stepped));
        (v, stepped)
    }

    fn delta(&mut self, id: NodeId) -> Option<Val> {
        if let Some(v) = self.deltas.get(&id) {
            return v.clone();
        }
        let n = self.g.node(id);
        let out = match &n.op {
            Op::FoldI { .. } => self.event(n.deps()[0]),
            Op::AsIb => {
                let (v, stepped) = self.value(id);
                stepped.then_some(v)
            }
            _ => unreachable!("not an incremental operator"),
        };
        self.deltas.insert(id, out.clone());
        out
    }

    fn read(&mut self, id: NodeId) -> Val {
        let n = self.g.node(id);
        if n.kind().has_value() {
            return self.value(id).0;
        }
        if let Some(v) = self.reads.get(&id) {
            return v.clone();
        }
        let v = match &n.op {
            Op::Poll(f) => f(),
            Op::Sink { default } => default.clone(),
            Op::Delayed => self.prev(n.deps()[0]),
            _ => unreachable!("not a behavior operator"),
        };
        self.reads.insert(id, v.clone());
        v
    }
}

fn initial(g: &ProgramGraph, id: NodeId, memo: &mut [Option<Val>]) -> Val {
    if let Some(v) = &memo[id.index()] {
        return v.clone();
    }
    let n = g.node(id);
    let d = n.deps().to_vec();
    let v = match &n.op {
        Op::Constant(v) => v.clone(),
        Op::Fold { init, .. } | Op::Hold { init } | Op::FoldI { init, .. } => init.clone(),
        Op::MapD(f) => f(&initial(g, d[0], memo)),
        Op::Map2(f) | Op::SnapshotD(f) => {
            let a = initial(g, d[0], memo);
            let b = initial(g, d[1], memo);
            f(&a, &b)
        }
        Op::ToDb | Op::Forward | Op::AsIb => initial(g, d[0], memo),
        _ => unreachable!("not a discrete operator"),
    };
    memo[id.index()] = Some(v.clone());
    v
}

/// Evaluates `script` (one list of simultaneous pulses per cycle) against a
/// single-tier program. Cycle `k` of the result is `script[k - 1]`.
pub fn reference_eval(g: &ProgramGraph, script: &[Vec<Pulse>]) -> Result<Trace, ReferenceError> {
    let tier = g.nodes().next().map(|n| n.tier());
    for n in g.nodes() {
        if Some(n.tier()) != tier {
            return Err(ReferenceError::MultiTier);
        }
        match &n.op {
            Op::Cross(_)
            | Op::Execute { .. }
            | Op::ExecuteErrors
            | Op::ClientChanges
            | Op::SessionClient => return Err(ReferenceError::Unsupported(n.id(), n.op_name())),
            _ => {}
        }
    }

    let mut trace = Trace::default();
    let mut prev: Vec<Option<Val>> = vec![None; g.len()];
    for n in g.nodes() {
        if n.kind().has_value() {
            let v = initial(g, n.id(), &mut prev);
            trace.push(entry(0, n.id(), format!("step {v:?}")));
        }
    }

    for (k, pulses) in script.iter().enumerate() {
        let cycle = k as u64 + 1;
        let mut by_node = HashMap::new();
        for p in pulses {
            if !matches!(g.node(p.node).op, Op::Source { .. } | Op::Timer { .. }) {
                return Err(ReferenceError::NotASource(p.node));
            }
            by_node.insert(p.node, p.value.clone());
        }
        let mut c = Cycle {
            g,
            prev: &prev,
            pulses: &by_node,
            events: HashMap::new(),
            values: HashMap::new(),
            deltas: HashMap::new(),
            reads: HashMap::new(),
        };
        let mut next: BTreeMap<NodeId, Val> = BTreeMap::new();
        for n in g.nodes() {
            match n.kind() {
                NodeKind::Event => {
                    if let Some(v) = c.event(n.id()) {
                        trace.push(entry(cycle, n.id(), format!("fire {v:?}")));
                    }
                }
                NodeKind::DBehavior | NodeKind::IBehavior => {
                    let (v, stepped) = c.value(n.id());
                    if stepped {
                        trace.push(entry(cycle, n.id(), format!("step {v:?}")));
                    }
                    next.insert(n.id(), v);
                }
                NodeKind::Behavior => {}
            }
        }
        for (id, v) in next {
            prev[id.index()] = Some(v);
        }
    }
    trace.sort();
    Ok(trace)
}

fn entry(cycle: u64, node: NodeId, obs: String) -> TraceEntry {
    TraceEntry {
        engine: "local".to_string(),
        cycle,
        node,
        scope: "local".to_string(),
        obs,
    }
}
