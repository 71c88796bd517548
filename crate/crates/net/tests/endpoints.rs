//! End-to-end runs over real sockets on localhost.

use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tierflow::graph::{Manifest, ProgramGraph};
use tierflow::mode::{ModeRequest, Transport};
use tierflow::server::ServerError;
use tierflow::wire::{Batch, Frame, WireMessage};
use tierflow::{EventSource, NodeId, ProgramBuilder, Tier};
use tierflow_net::{serve, ClientRuntime, NetError, RunningServer, ServerConfig};
use tokio_tungstenite::tungstenite::Message;

const WAIT: Duration = Duration::from_secs(5);

struct Counter {
    graph: Arc<ProgramGraph>,
    add: EventSource<i64>,
}

/// Every client adds to one application-wide total shown on all clients.
fn counter() -> Counter {
    let b = ProgramBuilder::new();
    let add = b.event_source::<i64>(Tier::Client);
    let total = add
        .to_session("i64")
        .to_app()
        .fold(0i64, |acc, m| acc + m.values().sum::<i64>());
    let shown = total.to_sessions().to_client("i64");
    b.set_main_view(&shown);
    Counter {
        graph: b.finalize().unwrap(),
        add,
    }
}

struct Echo {
    graph: Arc<ProgramGraph>,
    line: EventSource<String>,
    up: NodeId,
}

/// A client's lines are counted in its session and the count comes back.
fn echo() -> Echo {
    let b = ProgramBuilder::new();
    let line = b.event_source::<String>(Tier::Client);
    let up = line.to_session("string");
    let count = up.fold(0i64, |n, _| n + 1).to_client("i64");
    b.set_main_view(&count);
    Echo {
        graph: b.finalize().unwrap(),
        line,
        up: up.id(),
    }
}

fn config(mode: ModeRequest) -> ServerConfig {
    ServerConfig {
        mode,
        ..ServerConfig::default()
    }
}

async fn start(graph: &Arc<ProgramGraph>, mode: ModeRequest) -> RunningServer {
    serve(graph.clone(), config(mode)).await.unwrap()
}

fn ws_url(s: &RunningServer) -> String {
    format!("ws://{}/frp/ws", s.local_addr())
}

#[tokio::test(flavor = "multi_thread")]
async fn websocket_clients_share_application_state() {
    let c = counter();
    let server = start(&c.graph, ModeRequest::Auto).await;
    assert_eq!(server.transport(), Transport::WebSocket);
    let a = ClientRuntime::new(c.graph.clone(), server.base_url()).connect().await.unwrap();
    let b = ClientRuntime::new(c.graph.clone(), server.base_url()).connect().await.unwrap();
    assert_eq!((a.token().as_str(), b.token().as_str()), ("c1", "c2"));
    assert_eq!(a.transport(), Transport::WebSocket);

    a.fire(vec![c.add.pulse(5)]).unwrap();
    b.fire(vec![c.add.pulse(7)]).unwrap();
    assert_eq!(a.wait_view::<i64>(WAIT, |v| *v == 12).await.unwrap(), 12);
    assert_eq!(b.wait_view::<i64>(WAIT, |v| *v == 12).await.unwrap(), 12);

    // A late joiner boots at the current total.
    let late = ClientRuntime::new(c.graph.clone(), server.base_url()).connect().await.unwrap();
    assert_eq!(late.view::<i64>().await.unwrap(), Some(12));

    let stats = server.stats();
    assert_eq!(stats.connects, 3);
    assert_eq!(stats.messages_in, 2);
    assert_eq!(stats.protocol_errors, 0);
    assert_eq!(a.stats().messages_out, 1);
    assert!(a.stats().messages_in >= 2);
    a.close().await;
    b.close().await;
    late.close().await;
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn request_response_round_trip() {
    let e = echo();
    let server = start(&e.graph, ModeRequest::Auto).await;
    assert_eq!(server.transport(), Transport::Xhr);
    let rendered = Arc::new(std::sync::Mutex::new(Vec::new()));
    let r = rendered.clone();
    let client = ClientRuntime::new(e.graph.clone(), server.base_url())
        .on_render(move |v| r.lock().unwrap().push(v.get::<i64>()))
        .connect()
        .await
        .unwrap();
    assert_eq!(client.transport(), Transport::Xhr);
    for i in 0..3 {
        client.fire(vec![e.line.pulse(format!("line {i}"))]).unwrap();
    }
    assert_eq!(client.wait_view::<i64>(WAIT, |v| *v == 3).await.unwrap(), 3);
    assert_eq!(*rendered.lock().unwrap(), [0, 1, 2, 3]);
    let s = client.stats();
    assert_eq!((s.frames_out, s.frames_in, s.messages_out, s.messages_in), (3, 3, 3, 3));
    client.close().await;
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn exchange_answers_empty_batches_and_rejects_unknown_tokens() {
    let e = echo();
    let server = start(&e.graph, ModeRequest::Auto).await;
    let http = reqwest::Client::new();
    let base = server.base_url();

    let boot = http.post(format!("{base}/frp/bootstrap")).send().await.unwrap();
    assert_eq!(boot.status(), 200);
    let boot: Value = serde_json::from_str(&boot.text().await.unwrap()).unwrap();
    assert_eq!(boot["t"], "boot");
    assert_eq!(boot["client"], "c1");
    assert_eq!(boot["v"], json!(e.graph.manifest_version()));

    let empty = Frame::Batch(Batch { cycle: 1, messages: vec![] }).encode();
    let r = http
        .post(format!("{base}/frp/exchange?client=c1"))
        .body(empty.clone())
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);
    let v: Value = serde_json::from_str(&r.text().await.unwrap()).unwrap();
    assert_eq!(v["t"], "batch");
    assert_eq!(v["m"], json!([]));

    let line = Frame::Batch(Batch {
        cycle: 2,
        messages: vec![WireMessage { node: e.up, payload: json!("hi") }],
    })
    .encode();
    let r = http
        .post(format!("{base}/frp/exchange?client=c1"))
        .body(line)
        .send()
        .await
        .unwrap();
    let v: Value = serde_json::from_str(&r.text().await.unwrap()).unwrap();
    assert_eq!(v["m"][0]["p"], 1);

    let r = http
        .post(format!("{base}/frp/exchange?client=c9"))
        .body(empty.clone())
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 404);

    let r = http
        .post(format!("{base}/frp/exchange?client=c1"))
        .body("{\"t\":\"batch\"")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);

    let r = http.get(format!("{base}/frp/ws")).send().await.unwrap();
    assert_eq!(r.status(), 409);
    assert_eq!(server.stats().protocol_errors, 1);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn idle_request_response_clients_are_disconnected() {
    let e = echo();
    let server = serve(
        e.graph.clone(),
        ServerConfig {
            xhr_timeout: Duration::from_millis(100),
            ..ServerConfig::default()
        },
    )
    .await
    .unwrap();
    let client = ClientRuntime::new(e.graph.clone(), server.base_url()).connect().await.unwrap();
    let deadline = tokio::time::Instant::now() + WAIT;
    while server.stats().disconnects == 0 {
        assert!(tokio::time::Instant::now() < deadline, "never reaped");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let r = reqwest::Client::new()
        .post(format!("{}/frp/exchange?client=c1", server.base_url()))
        .body(Frame::Batch(Batch { cycle: 1, messages: vec![] }).encode())
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 404);

    // The stale client learns on its next exchange.
    client.fire(vec![e.line.pulse("late".into())]).unwrap();
    let mut state = client.state();
    tokio::time::timeout(WAIT, state.wait_for(|s| matches!(s, tierflow::client::ConnectionState::Closed(_))))
        .await
        .unwrap()
        .unwrap();
    assert!(!client.is_live());
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn manifest_and_mode_endpoints() {
    let c = counter();
    let server = start(&c.graph, ModeRequest::Auto).await;
    let http = reqwest::Client::new();
    let r = http.get(format!("{}/frp/manifest", server.base_url())).send().await.unwrap();
    assert_eq!(r.headers()["content-type"], "application/json");
    let body = r.text().await.unwrap();
    let m = Manifest::from_graph(&c.graph);
    assert_eq!(body, m.to_json());

    let mode: Value = http
        .get(format!("{}/frp/mode", server.base_url()))
        .send()
        .await
        .unwrap()
        .json_text()
        .await;
    assert_eq!(mode, json!({"transport": "websocket", "version": m.version}));
    server.shutdown().await;
}

trait JsonText {
    async fn json_text(self) -> Value;
}

impl JsonText for reqwest::Response {
    async fn json_text(self) -> Value {
        serde_json::from_str(&self.text().await.unwrap()).unwrap()
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn bootstrap_is_the_first_websocket_frame() {
    let b = ProgramBuilder::new();
    let tick = b.server_tick(Tier::Session, Duration::from_millis(1));
    let shown = tick.hold(0).to_client("u64");
    b.set_main_view(&shown);
    let graph = b.finalize().unwrap();
    let server = start(&graph, ModeRequest::Auto).await;
    tokio::time::sleep(Duration::from_millis(20)).await;
    for _ in 0..5 {
        let (mut ws, _) = tokio_tungstenite::connect_async(ws_url(&server)).await.unwrap();
        let first = ws.next().await.unwrap().unwrap().into_text().unwrap();
        assert!(matches!(Frame::decode(first.as_bytes()).unwrap(), Frame::Boot(_)));
        let second = ws.next().await.unwrap().unwrap().into_text().unwrap();
        assert!(matches!(Frame::decode(second.as_bytes()).unwrap(), Frame::Batch(_)));
    }
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn idle_websocket_connections_exchange_nothing() {
    let e = echo();
    let server = start(&e.graph, ModeRequest::WebSocket).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(ws_url(&server)).await.unwrap();
    let first = ws.next().await.unwrap().unwrap();
    assert!(first.is_text());
    let more = tokio::time::timeout(Duration::from_millis(300), ws.next()).await;
    assert!(more.is_err(), "unexpected frame {more:?}");
    let stats = server.stats();
    assert_eq!((stats.messages_in, stats.messages_out), (0, 0));
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn websocket_protocol_errors_close_the_connection() {
    let e = echo();
    let server = start(&e.graph, ModeRequest::WebSocket).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(ws_url(&server)).await.unwrap();
    ws.next().await.unwrap().unwrap();
    ws.send(Message::Text("not a frame".into())).await.unwrap();
    let closed = tokio::time::timeout(WAIT, async {
        loop {
            match ws.next().await {
                Some(Ok(Message::Close(f))) => break f.map(|f| u16::from(f.code)),
                Some(Ok(_)) => continue,
                _ => break None,
            }
        }
    })
    .await
    .unwrap();
    assert_eq!(closed, Some(1008));
    let deadline = tokio::time::Instant::now() + WAIT;
    while server.stats().disconnects == 0 {
        assert!(tokio::time::Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(server.stats().protocol_errors, 1);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn oversized_bodies_are_refused() {
    let e = echo();
    let server = serve(
        e.graph.clone(),
        ServerConfig {
            max_payload: 256,
            ..ServerConfig::default()
        },
    )
    .await
    .unwrap();
    let http = reqwest::Client::new();
    http.post(format!("{}/frp/bootstrap", server.base_url())).send().await.unwrap();
    let r = http
        .post(format!("{}/frp/exchange?client=c1", server.base_url()))
        .body("x".repeat(1024))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 413);
    server.shutdown().await;
}

fn asserting_program() -> Arc<ProgramGraph> {
    let b = ProgramBuilder::new();
    let tick = b.server_tick(Tier::Session, Duration::from_millis(10));
    let shown = tick.hold(0).assert_xhr().to_client("u64");
    b.set_main_view(&shown);
    b.finalize().unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn violated_assert_stops_startup_before_binding() {
    // The port is taken, so reaching the bind step would report Bind.
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap();
    let err = serve(asserting_program(), ServerConfig { addr, ..ServerConfig::default() })
        .await
        .err()
        .unwrap();
    assert!(
        matches!(err, NetError::Startup(ServerError::Mode(_))),
        "{err}"
    );

    // And with the port free, it is still free afterwards.
    drop(taken);
    let err = serve(asserting_program(), ServerConfig { addr, ..ServerConfig::default() })
        .await
        .err()
        .unwrap();
    assert!(matches!(err, NetError::Startup(_)));
    TcpListener::bind(addr).unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn busy_ports_are_reported() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr: SocketAddr = taken.local_addr().unwrap();
    let err = serve(echo().graph, ServerConfig { addr, ..ServerConfig::default() })
        .await
        .err()
        .unwrap();
    assert!(matches!(err, NetError::Bind { .. }), "{err}");
}

#[tokio::test(flavor = "multi_thread")]
async fn server_timers_push_to_websocket_clients() {
    let b = ProgramBuilder::new();
    let tick = b.server_tick(Tier::Application, Duration::from_millis(10));
    let shown = tick.hold(0).to_sessions().to_client("u64");
    b.set_main_view(&shown);
    let graph = b.finalize().unwrap();
    let server = start(&graph, ModeRequest::Auto).await;
    let client = ClientRuntime::new(graph.clone(), server.base_url()).connect().await.unwrap();
    let v = client.wait_view::<u64>(WAIT, |v| *v >= 50).await.unwrap();
    assert_eq!(v % 10, 0);
    client.close().await;
    server.shutdown().await;
}
