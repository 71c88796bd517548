use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::ws::rejection::WebSocketUpgradeRejection;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use serde::Deserialize;
use tokio::sync::{mpsc, oneshot};
use tower_http::services::ServeDir;

use tierflow::engine::Pulse;
use tierflow::graph::{Manifest, ProgramGraph};
use tierflow::mode::{ModeRequest, Transport};
use tierflow::server::{ServerEngine, ServerError, ServerOutputs, ServerStats};
use tierflow::wire::{Batch, Bootstrap, DEFAULT_MAX_PAYLOAD};
use tierflow::{ClientToken, Val};

use crate::error::NetError;
use crate::{PATH_BOOTSTRAP, PATH_EXCHANGE, PATH_MANIFEST, PATH_MODE, PATH_WS};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub addr: SocketAddr,
    pub mode: ModeRequest,
    /// Request/response clients idle this long are disconnected.
    pub xhr_timeout: Duration,
    pub max_payload: usize,
    /// Served at `/` when set, for a browser client.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            mode: ModeRequest::Auto,
            xhr_timeout: Duration::from_secs(30),
            max_payload: DEFAULT_MAX_PAYLOAD,
            static_dir: None,
        }
    }
}

enum Outbound {
    Text(String),
    Close(String),
}

type Inspect = Box<dyn FnOnce(&mut ServerEngine) + Send>;

enum Stimulus {
    /// WebSocket connections pass their outbound channel; the bootstrap is
    /// pushed on it ahead of anything else.
    Connect {
        outbound: Option<mpsc::UnboundedSender<Outbound>>,
        reply: oneshot::Sender<Result<Bootstrap, ServerError>>,
    },
    Disconnect(ClientToken),
    Exchange {
        client: ClientToken,
        body: Bytes,
        reply: Option<oneshot::Sender<Result<Batch, ServerError>>>,
    },
    Tick {
        node: tierflow::NodeId,
        elapsed_ms: u64,
    },
    Fire(Vec<Pulse>),
    Wake,
    Reap,
    Inspect(Inspect),
    Shutdown,
}

/// Sending side of the engine's stimulus channel, tracking its depth.
#[derive(Clone)]
struct Stimuli {
    tx: mpsc::UnboundedSender<Stimulus>,
    depth: Arc<AtomicUsize>,
}

impl Stimuli {
    fn send(&self, s: Stimulus) -> bool {
        self.depth.fetch_add(1, Ordering::SeqCst);
        if self.tx.send(s).is_err() {
            self.depth.fetch_sub(1, Ordering::SeqCst);
            return false;
        }
        true
    }
}

struct Core {
    server: ServerEngine,
    sinks: HashMap<ClientToken, mpsc::UnboundedSender<Outbound>>,
    xhr_seen: HashMap<ClientToken, Instant>,
    xhr_timeout: Duration,
    max_payload: usize,
    stats: Arc<Mutex<ServerStats>>,
}

impl Core {
    fn run(mut self, mut rx: mpsc::UnboundedReceiver<Stimulus>, depth: Arc<AtomicUsize>) {
        while let Some(s) = rx.blocking_recv() {
            let stop = matches!(s, Stimulus::Shutdown);
            self.handle(s);
            *self.stats.lock().unwrap() = self.server.stats();
            depth.fetch_sub(1, Ordering::SeqCst);
            if stop {
                break;
            }
        }
        for (_, sink) in self.sinks.drain() {
            let _ = sink.send(Outbound::Close("server shutting down".into()));
        }
    }

    fn handle(&mut self, s: Stimulus) {
        match s {
            Stimulus::Connect { outbound, reply } => match self.server.connect() {
                Ok(c) => {
                    log::info!("connect {} (cycle {})", c.client, c.outputs.cycle);
                    match outbound {
                        Some(tx) => {
                            let _ = tx.send(Outbound::Text(c.bootstrap.encode()));
                            self.sinks.insert(c.client.clone(), tx);
                        }
                        None => {
                            self.xhr_seen.insert(c.client.clone(), Instant::now());
                        }
                    }
                    self.distribute(c.outputs, None);
                    let _ = reply.send(Ok(c.bootstrap));
                }
                Err(e) => {
                    log::error!("connect failed: {e}");
                    let _ = reply.send(Err(e));
                }
            },
            Stimulus::Disconnect(client) => self.disconnect(&client),
            Stimulus::Exchange {
                client,
                body,
                reply,
            } => {
                if self.xhr_seen.contains_key(&client) {
                    self.xhr_seen.insert(client.clone(), Instant::now());
                }
                match self.server.exchange_frame(&client, &body, self.max_payload) {
                    Ok(out) => {
                        log::debug!("cycle {}: exchange from {client}", out.cycle);
                        let own = self.distribute(out, reply.is_some().then_some(&client));
                        if let Some(r) = reply {
                            let _ = r.send(Ok(own.unwrap_or_default()));
                        }
                    }
                    Err(e) => {
                        log::warn!("protocol error from {client}: {e}");
                        // A WebSocket peer that breaks the protocol is dropped
                        // at once, without waiting for its close handshake.
                        if let Some(sink) = self.sinks.get(&client) {
                            let _ = sink.send(Outbound::Close(e.to_string()));
                            self.disconnect(&client);
                        }
                        if let Some(r) = reply {
                            let _ = r.send(Err(e));
                        }
                    }
                }
            }
            Stimulus::Tick { node, elapsed_ms } => {
                match self.server.fire(&[Pulse::new(node, Val::new(elapsed_ms))]) {
                    Ok(out) => {
                        self.distribute(out, None);
                    }
                    Err(e) => log::error!("tick of {node}: {e}"),
                }
            }
            Stimulus::Fire(pulses) => match self.server.fire(&pulses) {
                Ok(out) => {
                    self.distribute(out, None);
                }
                Err(e) => log::error!("fire rejected: {e}"),
            },
            Stimulus::Wake => self.drain_queue(),
            Stimulus::Reap => {
                let now = Instant::now();
                let stale: Vec<ClientToken> = self
                    .xhr_seen
                    .iter()
                    .filter(|(_, t)| now.duration_since(**t) > self.xhr_timeout)
                    .map(|(c, _)| c.clone())
                    .collect();
                for c in stale {
                    log::info!("{c} idle for over {:?}", self.xhr_timeout);
                    self.disconnect(&c);
                }
            }
            Stimulus::Inspect(f) => f(&mut self.server),
            Stimulus::Shutdown => {}
        }
    }

    fn drain_queue(&mut self) {
        while let Some(r) = self.server.run_queued() {
            match r {
                Ok(out) => {
                    self.distribute(out, None);
                }
                Err(e) => log::error!("queued cycle: {e}"),
            }
        }
    }

    fn disconnect(&mut self, client: &ClientToken) {
        self.sinks.remove(client);
        self.xhr_seen.remove(client);
        if let Some(out) = self.server.disconnect(client) {
            log::info!("disconnect {client} (cycle {})", out.cycle);
            self.distribute(out, None);
        }
    }

    /// Pushes per-client batches to WebSocket sinks; returns the
    /// requester's batch instead of pushing it.
    fn distribute(&mut self, mut out: ServerOutputs, requester: Option<&ClientToken>) -> Option<Batch> {
        let own = requester.and_then(|c| out.per_client.remove(c));
        for (client, batch) in out.per_client {
            match self.sinks.get(&client) {
                Some(sink) => {
                    let _ = sink.send(Outbound::Text(batch.encode()));
                }
                None => log::warn!("cycle {}: no connection for {client}", out.cycle),
            }
        }
        own
    }
}

#[derive(Clone)]
struct App {
    stimuli: Stimuli,
    transport: Transport,
    manifest: Arc<String>,
    mode_json: Arc<String>,
    max_payload: usize,
}

/// A server started by [`serve`].
pub struct RunningServer {
    addr: SocketAddr,
    transport: Transport,
    stimuli: Stimuli,
    stats: Arc<Mutex<ServerStats>>,
    stop_http: Option<oneshot::Sender<()>>,
    http: tokio::task::JoinHandle<()>,
    background: Vec<tokio::task::JoinHandle<()>>,
    engine: Option<thread::JoinHandle<()>>,
}

impl RunningServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    /// Counters as of the last completed stimulus.
    pub fn stats(&self) -> ServerStats {
        *self.stats.lock().unwrap()
    }

    /// Stimuli enqueued and not yet processed.
    pub fn queue_depth(&self) -> usize {
        self.stimuli.depth.load(Ordering::SeqCst)
    }

    /// Fires server-side sources in one cycle.
    pub fn fire(&self, pulses: Vec<Pulse>) {
        self.stimuli.send(Stimulus::Fire(pulses));
    }

    /// Runs `f` on the engine thread between cycles.
    pub async fn inspect<R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut ServerEngine) -> R + Send + 'static,
    ) -> Result<R, NetError> {
        let (tx, rx) = oneshot::channel();
        let sent = self.stimuli.send(Stimulus::Inspect(Box::new(move |s| {
            let _ = tx.send(f(s));
        })));
        if !sent {
            return Err(NetError::Closed);
        }
        rx.await.map_err(|_| NetError::Closed)
    }

    pub async fn shutdown(mut self) {
        self.stop();
        let _ = (&mut self.http).await;
        if let Some(engine) = self.engine.take() {
            let _ = tokio::task::spawn_blocking(move || engine.join()).await;
        }
    }

    fn stop(&mut self) {
        if let Some(tx) = self.stop_http.take() {
            let _ = tx.send(());
        }
        for t in &self.background {
            t.abort();
        }
        self.stimuli.send(Stimulus::Shutdown);
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Analyzes the program, then binds and serves it. Mode errors (a violated
/// xhr-assert, or XHR forced on a program that pushes) are reported before
/// the listener is bound.
pub async fn serve(graph: Arc<ProgramGraph>, config: ServerConfig) -> Result<RunningServer, NetError> {
    let server = ServerEngine::start(graph.clone(), config.mode).map_err(NetError::Startup)?;
    let transport = server.transport();
    let listener = tokio::net::TcpListener::bind(config.addr)
        .await
        .map_err(|source| NetError::Bind {
            addr: config.addr,
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| NetError::Bind {
        addr: config.addr,
        source,
    })?;

    let (tx, rx) = mpsc::unbounded_channel();
    let stimuli = Stimuli {
        tx,
        depth: Arc::new(AtomicUsize::new(0)),
    };
    let waker = stimuli.clone();
    server.engine().queue().set_waker(move || {
        waker.send(Stimulus::Wake);
    });
    let timers = server.engine().timers();
    let stats = Arc::new(Mutex::new(server.stats()));
    let core = Core {
        server,
        sinks: HashMap::new(),
        xhr_seen: HashMap::new(),
        xhr_timeout: config.xhr_timeout,
        max_payload: config.max_payload,
        stats: stats.clone(),
    };
    let depth = stimuli.depth.clone();
    let engine = thread::Builder::new()
        .name("tierflow-server".into())
        .spawn(move || core.run(rx, depth))
        .expect("spawn engine thread");

    let mut background = Vec::new();
    for (node, period) in timers {
        let s = stimuli.clone();
        background.push(tokio::spawn(async move {
            let start = tokio::time::Instant::now();
            let mut iv = tokio::time::interval_at(start + period, period);
            iv.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
            loop {
                let at = iv.tick().await;
                let elapsed_ms = (at - start).as_millis() as u64;
                if !s.send(Stimulus::Tick { node, elapsed_ms }) {
                    break;
                }
            }
        }));
    }
    if transport == Transport::Xhr {
        let s = stimuli.clone();
        let every = (config.xhr_timeout / 4).clamp(Duration::from_millis(10), Duration::from_secs(1));
        background.push(tokio::spawn(async move {
            let mut iv = tokio::time::interval(every);
            loop {
                iv.tick().await;
                if !s.send(Stimulus::Reap) {
                    break;
                }
            }
        }));
    }

    let manifest = Manifest::from_graph(&graph);
    let app = App {
        stimuli: stimuli.clone(),
        transport,
        manifest: Arc::new(manifest.to_json()),
        mode_json: Arc::new(
            serde_json::json!({"transport": transport, "version": manifest.version}).to_string(),
        ),
        max_payload: config.max_payload,
    };
    let mut router = Router::new()
        .route(PATH_MANIFEST, get(manifest_handler))
        .route(PATH_MODE, get(mode_handler))
        .route(PATH_BOOTSTRAP, post(bootstrap_handler))
        .route(PATH_EXCHANGE, post(exchange_handler))
        .route(PATH_WS, get(ws_handler))
        .layer(DefaultBodyLimit::max(config.max_payload))
        .with_state(app);
    if let Some(dir) = &config.static_dir {
        router = router.fallback_service(ServeDir::new(dir));
    }
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let http = tokio::spawn(async move {
        let r = axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = stop_rx.await;
            })
            .await;
        if let Err(e) = r {
            log::error!("http server: {e}");
        }
    });
    log::info!("serving on {addr} in {transport} mode");
    Ok(RunningServer {
        addr,
        transport,
        stimuli,
        stats,
        stop_http: Some(stop_tx),
        http,
        background,
        engine: Some(engine),
    })
}

fn json_response(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn wrong_mode(transport: Transport) -> Response {
    (
        StatusCode::CONFLICT,
        format!("this server runs in {transport} mode"),
    )
        .into_response()
}

fn error_response(e: &ServerError) -> Response {
    let status = match e {
        ServerError::UnknownClient(_) => StatusCode::NOT_FOUND,
        ServerError::Wire(tierflow::wire::WireError::Oversize { .. }) => StatusCode::PAYLOAD_TOO_LARGE,
        _ => StatusCode::BAD_REQUEST,
    };
    (status, e.to_string()).into_response()
}

fn gone() -> Response {
    (StatusCode::SERVICE_UNAVAILABLE, "server shutting down").into_response()
}

async fn manifest_handler(State(app): State<App>) -> Response {
    json_response(app.manifest.to_string())
}

async fn mode_handler(State(app): State<App>) -> Response {
    json_response(app.mode_json.to_string())
}

async fn bootstrap_handler(State(app): State<App>) -> Response {
    if app.transport != Transport::Xhr {
        return wrong_mode(app.transport);
    }
    let (reply, rx) = oneshot::channel();
    if !app.stimuli.send(Stimulus::Connect {
        outbound: None,
        reply,
    }) {
        return gone();
    }
    match rx.await {
        Ok(Ok(boot)) => json_response(boot.encode()),
        Ok(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        Err(_) => gone(),
    }
}

#[derive(Deserialize)]
struct ExchangeQuery {
    client: String,
}

async fn exchange_handler(
    State(app): State<App>,
    Query(q): Query<ExchangeQuery>,
    body: Bytes,
) -> Response {
    if app.transport != Transport::Xhr {
        return wrong_mode(app.transport);
    }
    let (reply, rx) = oneshot::channel();
    if !app.stimuli.send(Stimulus::Exchange {
        client: ClientToken::new(q.client),
        body,
        reply: Some(reply),
    }) {
        return gone();
    }
    match rx.await {
        Ok(Ok(batch)) => json_response(batch.encode()),
        Ok(Err(e)) => error_response(&e),
        Err(_) => gone(),
    }
}

async fn ws_handler(
    State(app): State<App>,
    ws: Result<WebSocketUpgrade, WebSocketUpgradeRejection>,
) -> Response {
    if app.transport != Transport::WebSocket {
        return wrong_mode(app.transport);
    }
    let ws = match ws {
        Ok(ws) => ws,
        Err(r) => return r.into_response(),
    };
    let max = app.max_payload;
    ws.max_message_size(max)
        .max_frame_size(max)
        .on_upgrade(move |socket| ws_session(socket, app))
}

async fn ws_session(socket: WebSocket, app: App) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel();
    let (reply, boot) = oneshot::channel();
    if !app.stimuli.send(Stimulus::Connect {
        outbound: Some(tx),
        reply,
    }) {
        return;
    }
    let client = match boot.await {
        Ok(Ok(b)) => b.client,
        _ => return,
    };
    // Per-connection send order is the order the engine thread pushed in.
    let writer = tokio::spawn(async move {
        while let Some(o) = rx.recv().await {
            match o {
                Outbound::Text(t) => {
                    if sink.send(Message::Text(t.into())).await.is_err() {
                        break;
                    }
                }
                Outbound::Close(reason) => {
                    let frame = CloseFrame {
                        code: 1008,
                        reason: reason.chars().take(120).collect::<String>().into(),
                    };
                    let _ = sink.send(Message::Close(Some(frame))).await;
                    break;
                }
            }
        }
    });
    while let Some(msg) = stream.next().await {
        let body = match msg {
            Ok(Message::Text(t)) => Bytes::from(t.as_str().to_owned()),
            Ok(Message::Binary(b)) => b,
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        app.stimuli.send(Stimulus::Exchange {
            client: client.clone(),
            body,
            reply: None,
        });
    }
    app.stimuli.send(Stimulus::Disconnect(client));
    let _ = writer.await;
}
