use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};

use super::*;
use crate::graph::{ProgramBuilder, Tier};
use crate::value::Task;

fn client(b: &ProgramBuilder) -> Engine {
    let mut e = Engine::new(b.finalize_standalone().unwrap(), Role::Client);
    e.start();
    e
}

#[test]
fn task_results_arrive_in_completion_order_each_in_its_own_cycle() {
    let b = ProgramBuilder::new();
    let src = b.event_source::<i64>(Tier::Client);
    let done = src.map(|&x| Task::new(move || Ok(x * 10))).execute();
    let last = done.hold(0);
    let mut e = client(&b);
    let exec = ManualExecutor::new();
    e.set_executor(exec.clone());

    let r1 = e.fire(&[src.pulse(1)]).unwrap();
    assert!(!r1.fired_nodes().contains(&done.id()));
    e.fire(&[src.pulse(2)]).unwrap();
    assert_eq!(exec.pending(), 2);

    assert!(exec.run(1));
    let r3 = e.run_queued().unwrap();
    assert_eq!(r3.cycle, 3);
    assert_eq!(e.value(&last), 20);
    assert!(e.run_queued().is_none());

    assert!(exec.run(0));
    let r4 = e.run_queued().unwrap();
    assert_eq!(r4.cycle, 4);
    assert_eq!(e.value(&last), 10);
}

#[test]
fn task_failures_go_to_the_error_event() {
    let b = ProgramBuilder::new();
    let src = b.event_source::<i64>(Tier::Client);
    let (ok, err) = src
        .map(|&x| {
            if x < 0 {
                Task::failing("negative")
            } else {
                Task::ready(x)
            }
        })
        .execute_with_errors();
    let ok_seen = ok.hold(0);
    let err_seen = err.hold(String::new());
    let mut e = client(&b);
    let exec = ManualExecutor::new();
    e.set_executor(exec.clone());
    e.fire(&[src.pulse(-1)]).unwrap();
    exec.run_all();
    let r = e.run_queued().unwrap();
    assert!(r.fired_nodes().contains(&err.id()));
    assert!(!r.fired_nodes().contains(&ok.id()));
    assert_eq!(e.value(&err_seen), "negative");
    assert_eq!(e.value(&ok_seen), 0);
}

#[test]
fn polls_are_evaluated_once_per_cycle() {
    let b = ProgramBuilder::new();
    let src = b.event_source::<i64>(Tier::Client);
    let calls = Arc::new(AtomicI64::new(0));
    let c = calls.clone();
    let poll = b.from_poll(Tier::Client, move || c.fetch_add(1, Ordering::SeqCst));
    let a = poll.snapshot(&src, |p, _| *p).hold(-1);
    let z = poll.snapshot(&src.map(|x| x + 1), |p, _| *p).hold(-2);
    let mut e = client(&b);
    e.fire(&[src.pulse(0)]).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 1);
    assert_eq!(e.value(&a), e.value(&z));
    e.fire(&[src.pulse(0)]).unwrap();
    assert_eq!(e.value(&a), 1);
}

#[test]
fn sinks_read_their_default_until_installed() {
    let b = ProgramBuilder::new();
    let src = b.event_source::<()>(Tier::Client);
    let sink = b.sink(Tier::Client, 7i64);
    let seen = sink.sampled_by(&src).hold(0);
    let mut e = client(&b);
    e.fire(&[src.pulse(())]).unwrap();
    assert_eq!(e.value(&seen), 7);
    e.set_sink(&sink, Some(|| 42i64));
    e.fire(&[src.pulse(())]).unwrap();
    assert_eq!(e.value(&seen), 42);
    e.set_sink(&sink, None::<fn() -> i64>);
    e.fire(&[src.pulse(())]).unwrap();
    assert_eq!(e.value(&seen), 7);
}

#[test]
fn effect_sources_fire_through_the_queue() {
    let b = ProgramBuilder::new();
    type Firer = Arc<dyn Fn(i64) + Send + Sync>;
    let firer: Arc<Mutex<Option<Firer>>> = Arc::default();
    let slot = firer.clone();
    let src = b.source_with_engine_effect::<i64>(Tier::Client, move |f| {
        *slot.lock().unwrap() = Some(f);
    });
    let held = src.hold(0);
    let mut e = client(&b);
    let fire = firer.lock().unwrap().clone().expect("installed on start");
    fire(4);
    fire(5);
    assert_eq!(e.queue().len(), 2);
    assert_eq!(e.run_queued().unwrap().cycle, 1);
    assert_eq!(e.value(&held), 4);
    assert_eq!(e.run_queued().unwrap().cycle, 2);
    assert_eq!(e.value(&held), 5);
    assert!(e.run_queued().is_none());
}

#[test]
fn queued_pulses_each_get_a_cycle() {
    let b = ProgramBuilder::new();
    let src = b.event_source::<i64>(Tier::Client);
    let sum = src.fold(0i64, |a, x| a + x);
    let mut e = client(&b);
    e.queue().push(src.pulse(1));
    e.queue().push(src.pulse(2));
    let mut cycles = Vec::new();
    while let Some(r) = e.run_queued() {
        cycles.push(r.cycle);
    }
    assert_eq!(cycles, [1, 2]);
    assert_eq!(e.value(&sum), 3);
}

#[test]
fn bad_pulses_are_rejected() {
    let b = ProgramBuilder::new();
    let src = b.event_source::<i64>(Tier::Client);
    let derived = src.map(|x| x + 1);
    let server_src = b.event_source::<i64>(Tier::Application);
    let mut e = client(&b);
    assert!(matches!(
        e.fire(&[server_src.pulse(1)]),
        Err(EngineError::ForeignNode(_))
    ));
    assert!(matches!(
        e.fire(&[Pulse::new(derived.id(), Val::new(1i64))]),
        Err(EngineError::NotAnInput(_))
    ));
    assert!(matches!(
        e.fire(&[Pulse::new(src.id(), Val::new("x".to_string()))]),
        Err(EngineError::TypeMismatch { .. })
    ));
    assert!(matches!(
        e.fire(&[src.pulse(1), src.pulse(2)]),
        Err(EngineError::DuplicatePulse(_))
    ));
    assert_eq!(e.cycle(), 0);
}

#[test]
fn crossings_become_output_ports_of_the_sending_role() {
    let b = ProgramBuilder::new();
    let src = b.event_source::<i64>(Tier::Client);
    let up = src.to_session("i64");
    let mut e = client(&b);
    assert!(e.is_output_port(up.id()));
    let r = e.fire(&[src.pulse(3)]).unwrap();
    let sent = &r.outputs[&Scope::Local];
    assert_eq!(sent.len(), 1);
    assert_eq!(sent[0].0, up.id());
    assert_eq!(sent[0].1.get::<i64>(), 3);
}

#[test]
fn observations_only_while_recording() {
    let b = ProgramBuilder::new();
    let src = b.event_source::<i64>(Tier::Client);
    src.hold(0);
    let mut e = client(&b);
    assert!(e.fire(&[src.pulse(1)]).unwrap().observations.is_empty());
    e.set_recording(true);
    assert_eq!(e.fire(&[src.pulse(2)]).unwrap().observations.len(), 2);
}

#[test]
fn replicas_initialize_session_state_independently() {
    let b = ProgramBuilder::new();
    let tick = b.event_source::<i64>(Tier::Session);
    let count = tick.fold(0i64, |a, _| a + 1);
    let mut e = Engine::new(b.finalize_standalone().unwrap(), Role::Server);
    e.start();
    let c1 = ClientToken::new("c1");
    let c2 = ClientToken::new("c2");
    e.add_replica(c1.clone()).unwrap();
    e.fire(&[tick.pulse(0)]).unwrap();
    e.add_replica(c2.clone()).unwrap();
    e.fire(&[tick.pulse(0).for_client(c2.clone())]).unwrap();
    e.fire(&[tick.pulse(0)]).unwrap();
    assert_eq!(e.value_for(&count, &c1), Some(2));
    assert_eq!(e.value_for(&count, &c2), Some(2));
    assert!(matches!(
        e.add_replica(c1.clone()),
        Err(EngineError::DuplicateClient(_))
    ));
    assert!(e.remove_replica(&c1).is_some());
    assert_eq!(e.value_for(&count, &c1), None);
}
