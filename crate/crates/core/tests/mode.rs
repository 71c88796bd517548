//! Mode inference against a direct fixpoint over random multi-tier programs.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tierflow::graph::{Direction, ProgramGraph};
use tierflow::mode::{infer_modes, ModeError, ModeRequest, ModeTag, Transport};
use tierflow::server::{ServerEngine, ServerError};
use tierflow::{DBehavior, Event, NodeId, ProgramBuilder, Tier};

const TIERS: [Tier; 3] = [Tier::Client, Tier::Session, Tier::Application];

/// Grows a random program over `i64` events and discrete behaviors on all
/// three tiers, crossing between adjacent tiers.
fn random_program(seed: u64, steps: usize) -> std::sync::Arc<ProgramGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = ProgramBuilder::new();
    let mut events: BTreeMap<Tier, Vec<Event<i64>>> = BTreeMap::new();
    let mut dbs: BTreeMap<Tier, Vec<DBehavior<i64>>> = BTreeMap::new();
    for t in TIERS {
        events.entry(t).or_default().push(b.event_source::<i64>(t).event().clone());
        dbs.entry(t).or_default().push(b.constant(t, 1i64));
    }
    for _ in 0..steps {
        let t = TIERS[rng.random_range(0..3)];
        let es = events[&t].clone();
        let ds = dbs[&t].clone();
        let e = es[rng.random_range(0..es.len())].clone();
        let d = ds[rng.random_range(0..ds.len())].clone();
        let d2 = ds[rng.random_range(0..ds.len())].clone();
        match rng.random_range(0..12) {
            0 => events.get_mut(&t).unwrap().push(e.map(|x| x + 1)),
            1 => dbs.get_mut(&t).unwrap().push(e.hold(0)),
            2 => dbs.get_mut(&t).unwrap().push(d.map2(&d2, |a, b| a + b)),
            3 => events.get_mut(&t).unwrap().push(d.snapshot(&e, |a, b| a + b)),
            4 => dbs.get_mut(&t).unwrap().push(d.snapshot_db(&d2, |a, b| a - b)),
            5 if t.is_server() => {
                let tick = b.server_tick(t, Duration::from_millis(100));
                events.get_mut(&t).unwrap().push(tick.map(|n| *n as i64));
            }
            6 => events.get_mut(&t).unwrap().push(b.event_source::<i64>(t).event().clone()),
            7 | 8 => match t {
                Tier::Client => {
                    if rng.random_bool(0.5) {
                        events.get_mut(&Tier::Session).unwrap().push(e.to_session("i64"));
                    } else {
                        dbs.get_mut(&Tier::Session).unwrap().push(d.to_session("i64"));
                    }
                }
                Tier::Session => {
                    if rng.random_bool(0.5) {
                        dbs.get_mut(&Tier::Client).unwrap().push(d.to_client("i64"));
                    } else {
                        let sum = d.to_app().map(|m| m.values().sum::<i64>());
                        dbs.get_mut(&Tier::Application).unwrap().push(sum);
                    }
                }
                Tier::Application => {
                    if rng.random_bool(0.5) {
                        dbs.get_mut(&Tier::Session).unwrap().push(d.to_sessions());
                    } else {
                        events.get_mut(&Tier::Session).unwrap().push(e.to_sessions());
                    }
                }
            },
            9 => dbs.get_mut(&t).unwrap().push(d.map(|x| x * 2)),
            10 => events.get_mut(&t).unwrap().push(d.changes()),
            _ => {
                let p = b.from_poll(t, || 3i64);
                events.get_mut(&t).unwrap().push(p.snapshot(&e, |a, b| a * b));
            }
        }
    }
    b.finalize_standalone().unwrap()
}

fn is_origin(g: &ProgramGraph, id: NodeId) -> bool {
    let n = g.node(id);
    match n.op_name() {
        "source" | "effect-source" | "timer" | "execute" | "execute-errors" => n.tier().is_server(),
        "cross" => n.direction() == Some(Direction::AppToSession),
        _ => false,
    }
}

fn inherits_from(g: &ProgramGraph, id: NodeId) -> Vec<NodeId> {
    let n = g.node(id);
    match n.op_name() {
        "snapshot" | "snapshot-db" => vec![n.deps()[1]],
        _ => n.deps().to_vec(),
    }
}

/// Least fixpoint of the tagging rules by plain iteration.
fn oracle_tags(g: &ProgramGraph) -> Vec<bool> {
    let mut bidi = vec![false; g.len()];
    loop {
        let mut changed = false;
        for n in g.nodes() {
            let v = is_origin(g, n.id())
                || inherits_from(g, n.id()).iter().any(|d| bidi[d.index()]);
            if v && !bidi[n.id().index()] {
                bidi[n.id().index()] = true;
                changed = true;
            }
        }
        if !changed {
            return bidi;
        }
    }
}

fn shortest_from_origin(g: &ProgramGraph, bidi: &[bool], target: NodeId) -> usize {
    // Backwards BFS from the target over inherited edges within bidi nodes.
    let mut dist = BTreeMap::new();
    let mut q = VecDeque::from([(target, 1usize)]);
    dist.insert(target, 1);
    while let Some((id, d)) = q.pop_front() {
        if is_origin(g, id) {
            return d;
        }
        for p in inherits_from(g, id) {
            if bidi[p.index()] && !dist.contains_key(&p) {
                dist.insert(p, d + 1);
                q.push_back((p, d + 1));
            }
        }
    }
    panic!("{target} is bidirectional without an origin");
}

fn check(seed: u64) -> Result<(), String> {
    let g = random_program(seed, 40);
    let r = infer_modes(&g);
    let bidi = oracle_tags(&g);
    for n in g.nodes() {
        let expect = if bidi[n.id().index()] {
            ModeTag::Bidirectional
        } else {
            ModeTag::RequestResponse
        };
        if r.tag(n.id()) != expect {
            return Err(format!("seed {seed}: {} ({}) tagged {:?}", n.id(), n.op_name(), r.tag(n.id())));
        }
    }
    let pushing: Vec<NodeId> = g
        .crossings(Direction::SessionToClient)
        .map(|n| n.id())
        .filter(|id| bidi[id.index()])
        .collect();
    let expected_verdict = if pushing.is_empty() {
        Transport::Xhr
    } else {
        Transport::WebSocket
    };
    if r.verdict != expected_verdict {
        return Err(format!("seed {seed}: verdict {}", r.verdict));
    }
    let reported: Vec<NodeId> = r.bidirectional_outputs.iter().map(|v| v.node).collect();
    if reported != pushing {
        return Err(format!("seed {seed}: outputs {reported:?} != {pushing:?}"));
    }
    for v in &r.bidirectional_outputs {
        let path = &v.path;
        if !is_origin(&g, path[0]) || *path.last().unwrap() != v.node {
            return Err(format!("seed {seed}: bad witness endpoints {path:?}"));
        }
        for w in path.windows(2) {
            if !inherits_from(&g, w[1]).contains(&w[0]) {
                return Err(format!("seed {seed}: {:?} is not an edge", w));
            }
        }
        if path.len() != shortest_from_origin(&g, &bidi, v.node) {
            return Err(format!("seed {seed}: witness {path:?} is not shortest"));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tags_match_the_fixpoint(seed in any::<u64>()) {
        check(seed).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn both_verdicts_occur_among_random_programs() {
    let verdicts: Vec<Transport> = (0..200).map(|s| infer_modes(&random_program(s, 40)).verdict).collect();
    assert!(verdicts.contains(&Transport::Xhr));
    assert!(verdicts.contains(&Transport::WebSocket));
}

#[test]
fn forcing_modes() {
    let b = ProgramBuilder::new();
    let tick = b.server_tick(Tier::Session, Duration::from_millis(10));
    let shown = tick.map(|n| *n as i64).hold(0).to_client("i64");
    b.set_main_view(&shown);
    let g = b.finalize().unwrap();
    assert!(matches!(
        ServerEngine::start(g.clone(), ModeRequest::Xhr),
        Err(ServerError::Mode(ModeError::XhrNotPossible(_)))
    ));
    let s = ServerEngine::start(g.clone(), ModeRequest::WebSocket).unwrap();
    assert_eq!(s.transport(), Transport::WebSocket);

    let b = ProgramBuilder::new();
    let src = b.event_source::<i64>(Tier::Client);
    let back = src.to_session("i64").hold(0).to_client("i64");
    b.set_main_view(&back);
    let g = b.finalize().unwrap();
    let s = ServerEngine::start(g.clone(), ModeRequest::Auto).unwrap();
    assert_eq!(s.transport(), Transport::Xhr);
    let s = ServerEngine::start(g, ModeRequest::WebSocket).unwrap();
    assert_eq!(s.transport(), Transport::WebSocket);
}

#[test]
fn violated_assert_fails_start_even_when_websocket_is_forced() {
    let b = ProgramBuilder::new();
    let tick = b.server_tick(Tier::Application, Duration::from_millis(10));
    tick.map(|n| *n as i64).assert_xhr();
    let g = b.finalize_standalone().unwrap();
    for m in [ModeRequest::Auto, ModeRequest::WebSocket, ModeRequest::Xhr] {
        assert!(matches!(
            ServerEngine::start(g.clone(), m),
            Err(ServerError::Mode(ModeError::AssertViolated(_)))
        ));
    }
}

#[test]
fn mode_requests_parse() {
    assert_eq!("ws".parse::<ModeRequest>(), Ok(ModeRequest::WebSocket));
    assert_eq!("websocket".parse::<ModeRequest>(), Ok(ModeRequest::WebSocket));
    assert_eq!("xhr".parse::<ModeRequest>(), Ok(ModeRequest::Xhr));
    assert_eq!("auto".parse::<ModeRequest>(), Ok(ModeRequest::Auto));
    assert!("tcp".parse::<ModeRequest>().is_err());
}

#[test]
fn report_json_names_the_verdict() {
    let r = infer_modes(&random_program(1, 10));
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(v["verdict"], r.verdict.to_string());
}
