//! The chat program under the simulator and over loopback sockets.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use demo_chat::{build_chat_program, ChatLog, ChatOptions, ChatProgram, Message, Variant};
use proptest::prelude::*;
use tierflow::graph::Manifest;
use tierflow::mode::{infer_modes, ModeError, ModeRequest, Transport};
use tierflow::server::ServerError;
use tierflow::sim::{Scenario, SimConfig, Simulation};
use tierflow_net::{serve, ClientRuntime, ServerConfig};

const VARIANTS: [Variant; 3] = [Variant::Push, Variant::Polled, Variant::PushFullState];

fn chat(variant: Variant) -> ChatProgram {
    build_chat_program(ChatOptions {
        poll: Duration::from_millis(100),
        ..ChatOptions::new(variant)
    })
}

fn msg(name: &str, text: &str) -> Message {
    Message::new(name, text)
}

#[test]
fn messages_render_with_the_author() {
    assert_eq!(msg("bob", "hi").to_string(), "bob says hi");
}

proptest! {
    #[test]
    fn logs_keep_newest_first_order(texts in prop::collection::vec("[a-z]{0,6}", 0..40)) {
        let ms: Vec<Message> = texts.iter().map(|t| msg("n", t)).collect();
        let log = ChatLog::new().prepend_all(&ms);
        let mut newest_first = ms.clone();
        newest_first.reverse();
        prop_assert_eq!(log.len(), ms.len());
        prop_assert_eq!(log.to_vec(), newest_first.clone());
        prop_assert_eq!(newest_first.iter().cloned().collect::<ChatLog>(), log.clone());

        let json = serde_json::to_string(&log).unwrap();
        prop_assert_eq!(&json, &serde_json::to_string(&newest_first).unwrap());
        prop_assert_eq!(serde_json::from_str::<ChatLog>(&json).unwrap(), log);
    }
}

#[test]
fn long_logs_drop_without_recursion() {
    let mut log = ChatLog::new();
    for i in 0..300_000 {
        log = log.prepend(msg("n", &i.to_string()));
    }
    let shared = log.clone();
    drop(log);
    assert_eq!(shared.len(), 300_000);
    drop(shared);
}

#[test]
fn verdicts_per_variant() {
    let verdict = |o: ChatOptions| infer_modes(&build_chat_program(o).graph).verdict;
    assert_eq!(verdict(ChatOptions::new(Variant::Push)), Transport::WebSocket);
    assert_eq!(verdict(ChatOptions::new(Variant::PushFullState)), Transport::WebSocket);
    assert_eq!(verdict(ChatOptions::new(Variant::Polled)), Transport::Xhr);
    let clocked = ChatOptions {
        clock: Some(Duration::from_secs(1)),
        ..ChatOptions::new(Variant::Polled)
    };
    assert_eq!(verdict(clocked), Transport::WebSocket);
}

#[test]
fn programs_are_identical_across_builds() {
    for v in VARIANTS {
        let a = Manifest::from_graph(&chat(v).graph).to_json();
        let b = Manifest::from_graph(&chat(v).graph).to_json();
        assert_eq!(a, b);
    }
    let versions: std::collections::BTreeSet<u64> =
        VARIANTS.iter().map(|v| chat(*v).graph.manifest_version()).collect();
    assert_eq!(versions.len(), 3);
}

fn views(sim: &Simulation, clients: usize) -> Vec<Vec<String>> {
    (0..clients)
        .map(|i| sim.client(i).unwrap().view::<ChatLog>().unwrap().lines())
        .collect()
}

#[test]
fn two_posts_reach_both_clients_newest_first() {
    for v in VARIANTS {
        let c = chat(v);
        let script = Scenario::new()
            .connect(0)
            .connect(0)
            .push_client(300, 0, c.input_node(), msg("ann", "hello"))
            .push_client(600, 1, c.input_node(), msg("bob", "hi"))
            .until(2_000);
        let mut sim = Simulation::new(c.graph.clone(), SimConfig::default()).unwrap();
        sim.load(&script).unwrap();
        sim.run_until(2_000).unwrap();
        let want = vec!["bob says hi".to_string(), "ann says hello".to_string()];
        assert_eq!(views(&sim, 2), [want.clone(), want], "{v:?}");
        let server_log = sim.server().engine().value(&c.log);
        assert_eq!(server_log.lines(), ["bob says hi", "ann says hello"]);
    }
}

#[test]
fn concurrent_posts_converge() {
    let c = chat(Variant::Push);
    let script = Scenario::new()
        .connect(0)
        .connect(0)
        .push_client(300, 0, c.input_node(), msg("ann", "a"))
        .push_client(300, 1, c.input_node(), msg("bob", "b"))
        .until(1_000);
    let mut sim = Simulation::new(c.graph.clone(), SimConfig::default()).unwrap();
    sim.load(&script).unwrap();
    sim.run_until(1_000).unwrap();
    // Both arrive at 350 ms in separate exchanges, so separate cycles.
    let v = views(&sim, 2);
    assert_eq!(v[0], v[1]);
    assert_eq!(v[0], ["bob says b", "ann says a"]);
}

#[test]
fn zero_posts_show_an_empty_log() {
    for v in VARIANTS {
        let c = chat(v);
        let script = Scenario::new().connect(0).until(1_000);
        let mut sim = Simulation::new(c.graph.clone(), SimConfig::default()).unwrap();
        sim.load(&script).unwrap();
        sim.run_until(1_000).unwrap();
        assert!(sim.client(0).unwrap().view::<ChatLog>().unwrap().is_empty());
    }
}

#[test]
fn late_joiners_boot_with_the_full_log() {
    for v in VARIANTS {
        let c = chat(v);
        let mut script = Scenario::new().connect(0);
        for i in 0..5 {
            script = script.push_client(100 + i * 100, 0, c.input_node(), msg("ann", &i.to_string()));
        }
        let script = script.connect(1_000).until(1_060);
        let mut sim = Simulation::new(c.graph.clone(), SimConfig::default()).unwrap();
        let booted = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
        let b = booted.clone();
        sim.set_boot_observer(move |i, engine| {
            b.borrow_mut().push((i, engine.view::<ChatLog>().unwrap()));
        });
        sim.load(&script).unwrap();
        sim.run_until(1_060).unwrap();
        let booted = booted.borrow();
        assert_eq!(booted.len(), 2);
        assert_eq!(booted[1].1.lines(), ["ann says 4", "ann says 3", "ann says 2", "ann says 1", "ann says 0"], "{v:?}");
    }
}

#[test]
fn forced_request_response_on_the_push_variant_is_refused() {
    let c = chat(Variant::Push);
    let err = tierflow::server::ServerEngine::start(c.graph.clone(), ModeRequest::Xhr).unwrap_err();
    assert!(
        matches!(err, ServerError::Mode(ModeError::XhrNotPossible(_))),
        "{err}"
    );
}

async fn converge(variant: Variant) {
    let c = chat(variant);
    let server = serve(c.graph.clone(), ServerConfig::default()).await.unwrap();
    let mut clients = Vec::new();
    for _ in 0..3 {
        clients.push(
            ClientRuntime::new(c.graph.clone(), server.base_url())
                .connect()
                .await
                .unwrap(),
        );
    }
    let input = c.input_node();
    for (i, cl) in clients.iter().enumerate() {
        let m = msg(&format!("user{i}"), "hi");
        cl.fire(vec![tierflow::Pulse::new(input, tierflow::Val::new(m))]).unwrap();
    }
    for cl in &clients {
        let log = cl
            .wait_view::<ChatLog>(Duration::from_secs(5), |l| l.len() == 3)
            .await
            .unwrap();
        let server_log = server.inspect({
            let log_id = c.log.id();
            move |s| s.engine().value_at(log_id, tierflow::Scope::Local).unwrap().get::<ChatLog>()
        });
        assert_eq!(log, server_log.await.unwrap());
    }
    for cl in clients {
        cl.close().await;
    }
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn clients_converge_over_websocket() {
    converge(Variant::Push).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn clients_converge_over_request_response() {
    converge(Variant::Polled).await;
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn wait_listening(port: u16) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while std::net::TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "server never listened");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn cli_refuses_forced_request_response_on_push() {
    let out = Command::new(env!("CARGO_BIN_EXE_demo-chat"))
        .args(["serve", "--mode", "xhr", "--port", &free_port().to_string()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn cli_clients_see_each_other() {
    for variant in ["push", "polled"] {
        let port = free_port();
        let _server = Killed(
            Command::new(env!("CARGO_BIN_EXE_demo-chat"))
                .args(["serve", "--port", &port.to_string(), "--variant", variant, "--poll-ms", "50"])
                .stdout(Stdio::null())
                .spawn()
                .unwrap(),
        );
        wait_listening(port);
        let url = format!("http://127.0.0.1:{port}");

        // A watcher that stays connected, then a poster that leaves.
        let mut watcher = Killed(
            Command::new(env!("CARGO_BIN_EXE_demo-chat"))
                .args(["client", "--url", &url, "--name", "eve", "--poll-ms", "50"])
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::null())
                .spawn()
                .unwrap(),
        );
        let mut lines = BufReader::new(watcher.0.stdout.take().unwrap()).lines();
        assert_eq!(lines.next().unwrap().unwrap(), "--- 0 messages");

        let mut poster = Command::new(env!("CARGO_BIN_EXE_demo-chat"))
            .args(["client", "--url", &url, "--name", "bob", "--poll-ms", "50"])
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        poster.stdin.take().unwrap().write_all(b"hi\n").unwrap();
        assert!(poster.wait().unwrap().success());

        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            for l in lines.map_while(Result::ok) {
                if tx.send(l).is_err() {
                    break;
                }
            }
        });
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let line = rx.recv_timeout(left).unwrap_or_else(|_| panic!("{variant}: watcher never showed the post"));
            if line == "bob says hi" {
                break;
            }
        }
    }
}
