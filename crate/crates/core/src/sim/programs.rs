//! Small canned programs and random scripts for consistency checks.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gen::{ProgramGen, Unary};
use super::{Action, Cause, CycleInfo, Scenario};
use crate::engine::Observation;
use crate::graph::{
    AppDelta, DBehavior, Event, IBehavior, NodeId, ProgramBuilder, ProgramGraph, Tier,
};
use crate::server::ServerEngine;
use crate::value::{ClientChange, ClientToken};

/// A program with one integer client source and one boolean probe.
pub struct ProbeProgram {
    pub graph: Arc<ProgramGraph>,
    pub source: NodeId,
    pub probe: NodeId,
}

/// `x` and `y = x + 1` both cross to the session, which checks `x < y`.
/// Both crossings fire in the same client cycle, so the session sees them
/// change together.
pub fn crossed_together() -> ProbeProgram {
    let b = ProgramBuilder::new();
    let src = b.event_source::<i64>(Tier::Client);
    let x = src.hold(0);
    let y = x.map(|v| v + 1);
    let xs = x.to_session("i64");
    let ys = y.to_session("i64");
    let t = xs.map2(&ys, |a, b| a < b);
    b.probe("x<y", &t);
    ProbeProgram {
        graph: b.finalize_standalone().expect("valid program"),
        source: src.id(),
        probe: t.id(),
    }
}

/// `x` goes to the session and back; the client compares the echo with its
/// own `y = x + 1`. The echo lags by a round trip, so the comparison can
/// see an old `x` next to a new `y`.
pub fn round_trip() -> ProbeProgram {
    let b = ProgramBuilder::new();
    let src = b.event_source::<i64>(Tier::Client);
    let x = src.hold(0);
    let y = x.map(|v| v + 1);
    let echo = x.to_session("i64").to_client("i64");
    let t = echo.map2(&y, |a, b| a < b);
    b.probe("echo<y", &t);
    ProbeProgram {
        graph: b.finalize_standalone().expect("valid program"),
        source: src.id(),
        probe: t.id(),
    }
}

/// A random script over integer client sources: a few clients connect
/// at random times with random link latencies, push random values, and
/// have their latencies changed along the way.
pub fn jittery_script(seed: u64, sources: &[NodeId], clients: usize, pushes: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actions = Vec::new();
    for _ in 0..clients {
        let at = rng.random_range(0..200);
        let latency = rng.random_range(1..200);
        actions.push((at, Action::Connect {
            latency_ms: Some(latency),
        }));
    }
    // Connects come first at equal times, so client indices follow the
    // sorted connect order.
    actions.sort_by_key(|(at, _)| *at);
    // Pushes start once every client has connected.
    let mut t = 200u64;
    for _ in 0..pushes {
        t += rng.random_range(0..60);
        let client = rng.random_range(0..clients);
        if rng.random_bool(0.15) {
            actions.push((t, Action::SetLatency {
                client,
                up_ms: rng.random_range(1..300),
                down_ms: rng.random_range(1..300),
            }));
        }
        let value: i64 = rng.random_range(-100..=100);
        let node = sources[rng.random_range(0..sources.len())];
        actions.push((t, Action::PushClient {
            client,
            node,
            value: value.into(),
        }));
    }
    actions.sort_by_key(|(at, _)| *at);
    let mut s = Scenario::new();
    for (at, a) in actions {
        s = s.at(at, a);
    }
    let end = s.end_ms + 2_000;
    s.until(end)
}

/// The same random client program twice, differing only in the order of
/// a crossing and a map at the end: `toSession(x.map(f))` in
/// `send_after_map`, `toSession(x).map(f)` in `map_after_send`.
pub struct CommutePair {
    pub send_after_map: Arc<ProgramGraph>,
    pub map_after_send: Arc<ProgramGraph>,
    /// The session-tier node observed in each program.
    pub target_a: NodeId,
    pub target_b: NodeId,
    pub sources: Vec<NodeId>,
    pub f: Unary,
}

pub fn commutation_pair(seed: u64, budget: usize) -> CommutePair {
    let build = |map_first: bool| {
        let mut g = ProgramGen::new(seed, ProgramBuilder::new(), Tier::Client);
        g.grow(budget);
        if g.dbs.is_empty() {
            let e = g.events[0].clone();
            g.dbs.push(e.hold(0));
        }
        let x = g.dbs.choose(&mut g.rng).expect("nonempty").clone();
        let f = Unary::random(&mut g.rng);
        let target = if map_first {
            x.map(f.func()).to_session("i64")
        } else {
            x.to_session("i64").map(f.func())
        };
        let sources = g.sources.iter().map(|s| s.id()).collect::<Vec<_>>();
        let graph = g.builder.finalize_standalone().expect("valid program");
        (graph, target.id(), sources, f)
    };
    let (a, target_a, sources, f) = build(true);
    let (b, target_b, sources_b, f_b) = build(false);
    debug_assert_eq!((sources.clone(), f), (sources_b, f_b));
    CommutePair {
        send_after_map: a,
        map_after_send: b,
        target_a,
        target_b,
        sources,
        f,
    }
}

/// A program exercising every lifecycle-driven node: the application's
/// client set, a gathered session behavior, and a gathered incremental
/// per-client counter.
pub struct LifecycleProgram {
    pub graph: Arc<ProgramGraph>,
    /// Client-tier integer source feeding the counter.
    pub source: NodeId,
    pub app_clients: IBehavior<BTreeSet<ClientToken>, ClientChange>,
    pub tokens: DBehavior<BTreeMap<ClientToken, ClientToken>>,
    pub counts: IBehavior<BTreeMap<ClientToken, i64>, AppDelta<i64>>,
    pub count_deltas: Event<AppDelta<i64>>,
}

pub fn lifecycle_program() -> LifecycleProgram {
    let b = ProgramBuilder::new();
    let src = b.event_source::<i64>(Tier::Client);
    let counts = src
        .fold_i(0i64, |a, d| a + d)
        .to_session("i64", "i64")
        .to_app();
    let tokens = b.session_client().to_app();
    let app_clients = b.clients();
    let count_deltas = counts.deltas();
    LifecycleProgram {
        graph: b.finalize_standalone().expect("valid program"),
        source: src.id(),
        app_clients,
        tokens,
        counts,
        count_deltas,
    }
}

impl LifecycleProgram {
    /// Checks the lifecycle invariants after one server cycle.
    pub fn check(&self, server: &ServerEngine, info: &CycleInfo<'_>) -> Result<(), String> {
        let engine = server.engine();
        let live: BTreeSet<ClientToken> = engine.clients().cloned().collect();
        let app = engine.ivalue(&self.app_clients);
        if app != live {
            return Err(format!("app clients {app:?} != replicas {live:?}"));
        }
        let tokens = engine.value(&self.tokens);
        if !tokens.keys().eq(live.iter()) || tokens.iter().any(|(k, v)| k != v) {
            return Err(format!("gathered session tokens {tokens:?} != {live:?}"));
        }
        let counts = engine.ivalue(&self.counts);
        if !counts.keys().eq(live.iter()) {
            return Err(format!("gathered counts {counts:?} != {live:?}"));
        }
        let delta = info.outputs.observations.iter().find_map(|o| match &o.what {
            Observation::Fired(v) if o.node == self.count_deltas.id() => {
                Some(v.get::<AppDelta<i64>>())
            }
            _ => None,
        });
        let expected = match &info.cause {
            Cause::Connect(t) => Some(ClientChange::Connected(t.clone())),
            Cause::Disconnect(t) => Some(ClientChange::Disconnected(t.clone())),
            _ => None,
        };
        match (delta, expected) {
            (None, None) => Ok(()),
            (None, Some(e)) => Err(format!("no delta in a {e:?} cycle")),
            (Some((_, change)), expected) if change != expected => Err(format!(
                "delta change {change:?}, expected {expected:?} ({:?})",
                info.cause
            )),
            (Some((per_client, _)), _) => match per_client.keys().find(|k| !live.contains(*k)) {
                Some(k) => Err(format!("delta for departed client {k}")),
                None => Ok(()),
            },
        }
    }
}

/// A random connect/disconnect/push script with at most `max_open`
/// clients open at once.
pub fn lifecycle_script(seed: u64, source: NodeId, steps: usize, max_open: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Scenario::new();
    let mut open: Vec<usize> = Vec::new();
    let mut next = 0usize;
    let mut t = 0u64;
    for _ in 0..steps {
        t += rng.random_range(0..40);
        let roll = rng.random_range(0..10);
        if open.is_empty() || (roll < 3 && open.len() < max_open) {
            let latency = rng.random_range(1..80);
            s = s.at(t, Action::Connect {
                latency_ms: Some(latency),
            });
            open.push(next);
            next += 1;
        } else if roll < 5 {
            let i = rng.random_range(0..open.len());
            s = s.disconnect(t, open.swap_remove(i));
        } else {
            let client = open[rng.random_range(0..open.len())];
            let v: i64 = rng.random_range(-9..=9);
            s = s.push_client(t, client, source, v);
        }
    }
    let end = t + 1_000;
    s.until(end)
}
