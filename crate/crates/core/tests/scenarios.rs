//! Multi-tier runs under the virtual-time harness.

use tierflow::sim::programs::{crossed_together, jittery_script, round_trip};
use tierflow::sim::{run_scenario, Action, Scenario, SimConfig, SimError};

fn config() -> SimConfig {
    SimConfig::default()
}

#[test]
fn crossed_together_holds_under_random_latency() {
    let p = crossed_together();
    for seed in 0..60 {
        let s = jittery_script(seed, &[p.source], 3, 40);
        let report = run_scenario(p.graph.clone(), &s, config())
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let seen = report.trace.entries.iter().filter(|e| e.node == p.probe).count();
        assert!(seen > 3, "seed {seed}: probe hardly exercised");
    }
}

#[test]
fn round_trip_comparison_can_fail() {
    let p = round_trip();
    let violations = (0..20)
        .filter(|&seed| {
            let s = jittery_script(seed, &[p.source], 2, 40);
            matches!(
                run_scenario(p.graph.clone(), &s, config()),
                Err(SimError::ProbeViolated { .. })
            )
        })
        .count();
    assert!(violations > 0);
}

#[test]
fn split_batches_break_the_cross_tier_probe() {
    let p = crossed_together();
    let mut cfg = config();
    cfg.split_batches = true;
    let s = Scenario::new()
        .connect(0)
        .push_client(500, 0, p.source, 10i64)
        .until(2_000);
    let err = run_scenario(p.graph.clone(), &s, cfg).unwrap_err();
    let SimError::ProbeViolated { engine, scope, .. } = err else {
        panic!("expected a probe violation, got {err}");
    };
    assert_eq!(engine, "server");
    assert_eq!(scope, "c1");
}

#[test]
fn identical_scripts_give_identical_traces() {
    let p = crossed_together();
    let s = jittery_script(99, &[p.source], 4, 60);
    let a = run_scenario(p.graph.clone(), &s, config()).unwrap();
    let b = run_scenario(p.graph.clone(), &s, config()).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.frames, b.frames);
}

#[test]
fn empty_script_gives_empty_trace() {
    let p = crossed_together();
    let r = run_scenario(p.graph, &Scenario::new(), config()).unwrap();
    assert!(r.trace.is_empty());
    assert!(r.frames.is_empty());
}

#[test]
fn unknown_client_is_a_setup_error() {
    let p = crossed_together();
    let s = Scenario::new().push_client(0, 3, p.source, 1i64);
    assert!(matches!(
        run_scenario(p.graph, &s, config()),
        Err(SimError::Setup(_))
    ));
}

#[test]
fn pushing_a_derived_node_is_a_setup_error() {
    let p = crossed_together();
    let s = Scenario::new().connect(0).at(
        10,
        Action::PushServer {
            node: p.probe,
            value: true.into(),
            client: None,
        },
    );
    assert!(matches!(
        run_scenario(p.graph, &s, config()),
        Err(SimError::Setup(_))
    ));
}

#[test]
fn unsorted_actions_are_rejected() {
    let p = crossed_together();
    let mut s = Scenario::new().connect(10);
    s.actions.push(tierflow::sim::TimedAction {
        at_ms: 5,
        action: Action::Connect { latency_ms: None },
    });
    assert!(matches!(
        run_scenario(p.graph, &s, config()),
        Err(SimError::Setup(_))
    ));
}

#[test]
fn scenario_json_round_trips() {
    let p = crossed_together();
    let s = jittery_script(5, &[p.source], 2, 10);
    assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
}

#[test]
fn frames_follow_link_latency() {
    let p = crossed_together();
    let s = Scenario::new()
        .at(0, Action::Connect { latency_ms: Some(70) })
        .push_client(200, 0, p.source, 4i64)
        .until(1_000);
    let r = run_scenario(p.graph, &s, config()).unwrap();
    let boot = &r.frames[0];
    assert!(boot.boot);
    assert_eq!(boot.at_ms, 0);
    let up = r.frames.iter().find(|f| !f.boot).unwrap();
    assert_eq!(up.at_ms, 200);
    assert_eq!(up.messages, 2);
    // Delivered at 270: the server's exchange cycle is its second.
    let step = r
        .trace
        .entries
        .iter()
        .find(|e| e.engine == "server" && e.node == p.probe && e.obs.starts_with("step"))
        .unwrap();
    assert_eq!(step.cycle, 2);
}

#[test]
fn crossing_comparison_graph_has_six_nodes() {
    // source, x, y, two crossings and the session comparison.
    assert_eq!(crossed_together().graph.len(), 6);
}
