use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, Observation, ObservedAt, Scope};
use crate::graph::NodeId;

/// One recorded observation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TraceEntry {
    /// `server`, or the client's token.
    pub engine: String,
    pub cycle: u64,
    pub node: NodeId,
    /// `local`, or the token of a session replica.
    pub scope: String,
    /// `fire <value>` or `step <value>`, values in `Debug` form.
    pub obs: String,
}

/// Observations of one or more engines, ordered by engine, cycle, node and
/// scope. Cycle 0 holds initial values.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn push(&mut self, entry: TraceEntry) {
        self.entries.push(entry);
    }

    pub fn sort(&mut self) {
        self.entries.sort();
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Entries of one engine and node, in cycle order.
    pub fn of<'a>(&'a self, engine: &'a str, node: NodeId) -> impl Iterator<Item = &'a TraceEntry> {
        self.entries
            .iter()
            .filter(move |e| e.engine == engine && e.node == node)
    }

    /// The first differing entry index, if any.
    pub fn first_difference(&self, other: &Trace) -> Option<usize> {
        let n = self.entries.len().min(other.entries.len());
        (0..n)
            .find(|&i| self.entries[i] != other.entries[i])
            .or((self.entries.len() != other.entries.len()).then_some(n))
    }

    /// One line per entry: `engine cycle node scope obs`.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{} {} {} {} {}", e.engine, e.cycle, e.node, e.scope, e.obs)?;
        }
        Ok(())
    }
}

pub(crate) fn render_observation(o: &Observation) -> String {
    match o {
        Observation::Fired(v) => format!("fire {v:?}"),
        Observation::Stepped(v) => format!("step {v:?}"),
    }
}

pub(crate) fn scope_label(engine: &Engine, scope: Scope) -> String {
    match engine.client_of(scope) {
        Some(t) => t.to_string(),
        None => "local".to_string(),
    }
}

pub(crate) fn record(
    trace: &mut Trace,
    label: &str,
    engine: &Engine,
    cycle: u64,
    obs: &[ObservedAt],
) {
    for o in obs {
        trace.push(TraceEntry {
            engine: label.to_string(),
            cycle,
            node: o.node,
            scope: scope_label(engine, o.scope),
            obs: render_observation(&o.what),
        });
    }
}
