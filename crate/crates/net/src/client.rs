use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot, watch, Notify};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use tierflow::client::{ClientCycle, ClientEngine, ConnectionState};
use tierflow::engine::{FireQueue, Pulse};
use tierflow::graph::ProgramGraph;
use tierflow::mode::Transport;
use tierflow::wire::{Batch, Bootstrap, Frame, DEFAULT_MAX_PAYLOAD};
use tierflow::{ClientToken, Val};

use crate::error::NetError;
use crate::{PATH_BOOTSTRAP, PATH_EXCHANGE, PATH_MODE, PATH_WS};

#[derive(Clone, Debug)]
pub struct ClientConfig {
    /// `http://host:port` of the server.
    pub base_url: String,
    pub max_payload: usize,
}

impl ClientConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        ClientConfig {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

/// Traffic counters of one client connection, bootstrap excluded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub frames_in: u64,
    pub frames_out: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub messages_in: u64,
    pub messages_out: u64,
}

type Render = Box<dyn FnMut(&Val) + Send>;
type Inspect = Box<dyn FnOnce(&mut ClientEngine) + Send>;

enum Command {
    Fire(Vec<Pulse>),
    Inspect(Inspect),
    Close,
}

/// Runs the client role of a program against a server.
pub struct ClientRuntime {
    graph: Arc<ProgramGraph>,
    config: ClientConfig,
    render: Option<Render>,
}

impl ClientRuntime {
    pub fn new(graph: Arc<ProgramGraph>, base_url: impl Into<String>) -> Self {
        Self::with_config(graph, ClientConfig::new(base_url))
    }

    pub fn with_config(graph: Arc<ProgramGraph>, config: ClientConfig) -> Self {
        ClientRuntime {
            graph,
            config,
            render: None,
        }
    }

    /// Called with the main view after boot and whenever it steps.
    pub fn on_render(mut self, render: impl FnMut(&Val) + Send + 'static) -> Self {
        self.render = Some(Box::new(render));
        self
    }

    /// Asks the server for its transport, connects over it and boots the
    /// client engine from the bootstrap payload.
    pub async fn connect(self) -> Result<ClientHandle, NetError> {
        let http = reqwest::Client::new();
        let transport = fetch_mode_with(&http, &self.config.base_url).await?.transport;
        let (link, boot) = match transport {
            Transport::WebSocket => {
                let url = format!("{}{}", ws_base(&self.config.base_url), PATH_WS);
                let (mut ws, _) = tokio_tungstenite::connect_async(url).await?;
                let first = loop {
                    match ws.next().await {
                        Some(Ok(Message::Text(t))) => break t.as_bytes().to_vec(),
                        Some(Ok(Message::Binary(b))) => break b.to_vec(),
                        Some(Ok(Message::Close(_))) | None => return Err(NetError::Closed),
                        Some(Ok(_)) => continue,
                        Some(Err(e)) => return Err(e.into()),
                    }
                };
                match Frame::decode_limited(&first, self.config.max_payload)? {
                    Frame::Boot(b) => (Link::Ws(Box::new(ws)), b),
                    Frame::Batch(_) => {
                        return Err(NetError::Protocol("first frame was not a bootstrap".into()))
                    }
                }
            }
            Transport::Xhr => {
                let url = format!("{}{}", self.config.base_url, PATH_BOOTSTRAP);
                let body = checked(http.post(url).send().await?).await?;
                let boot = Bootstrap::decode(body.as_bytes())?;
                let exchange = format!(
                    "{}{}?client={}",
                    self.config.base_url,
                    PATH_EXCHANGE,
                    boot.client.as_str()
                );
                (Link::Xhr { http, exchange }, boot)
            }
        };

        let mut engine = ClientEngine::boot(self.graph.clone(), &boot)?;
        if let Some(r) = self.render {
            engine.set_render(r);
        }
        let notify = Arc::new(Notify::new());
        let queue = engine.queue();
        let n = notify.clone();
        queue.set_waker(move || n.notify_one());
        engine.start();

        let token = boot.client.clone();
        let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
        let (state_tx, state_rx) = watch::channel(ConnectionState::Live(token.clone()));
        let stats = Arc::new(Mutex::new(ClientStats::default()));

        let mut timers = Vec::new();
        for (node, period) in engine.timers() {
            let q = queue.clone();
            timers.push(tokio::spawn(async move {
                let start = tokio::time::Instant::now();
                let mut iv = tokio::time::interval_at(start + period, period);
                iv.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
                loop {
                    let at = iv.tick().await;
                    q.push(Pulse::new(node, Val::new((at - start).as_millis() as u64)));
                }
            }));
        }

        let driver = Driver {
            engine,
            link,
            max_payload: self.config.max_payload,
            stats: stats.clone(),
            pending: VecDeque::new(),
        };
        let task = tokio::spawn(driver.run(cmd_rx, notify, state_tx));
        log::info!("{token} connected over {transport}");
        Ok(ClientHandle {
            token,
            transport,
            queue,
            commands: cmd_tx,
            state: state_rx,
            stats,
            task: Some(task),
            timers,
        })
    }
}

/// What `GET /frp/mode` reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize)]
pub struct ServerMode {
    pub transport: Transport,
    /// Manifest version of the served program.
    pub version: u64,
}

/// Asks a server which transport it runs and which program it serves.
pub async fn fetch_mode(base_url: &str) -> Result<ServerMode, NetError> {
    fetch_mode_with(&reqwest::Client::new(), base_url.trim_end_matches('/')).await
}

async fn fetch_mode_with(http: &reqwest::Client, base: &str) -> Result<ServerMode, NetError> {
    let body = checked(http.get(format!("{base}{PATH_MODE}")).send().await?).await?;
    serde_json::from_str(&body).map_err(|e| NetError::Protocol(e.to_string()))
}

fn ws_base(base: &str) -> String {
    if let Some(rest) = base.strip_prefix("https://") {
        format!("wss://{rest}")
    } else if let Some(rest) = base.strip_prefix("http://") {
        format!("ws://{rest}")
    } else {
        base.to_string()
    }
}

async fn checked(resp: reqwest::Response) -> Result<String, NetError> {
    let status = resp.status();
    let body = resp.text().await?;
    if status.is_success() {
        Ok(body)
    } else {
        Err(NetError::Status {
            status: status.as_u16(),
            body,
        })
    }
}

enum Link {
    Ws(Box<WebSocketStream<MaybeTlsStream<TcpStream>>>),
    Xhr {
        http: reqwest::Client,
        exchange: String,
    },
}

struct Driver {
    engine: ClientEngine,
    link: Link,
    max_payload: usize,
    stats: Arc<Mutex<ClientStats>>,
    /// Request/response mode: batches awaiting their exchange, in order.
    pending: VecDeque<Batch>,
}

impl Driver {
    async fn run(
        mut self,
        mut commands: mpsc::UnboundedReceiver<Command>,
        notify: Arc<Notify>,
        state: watch::Sender<ConnectionState>,
    ) {
        let end = loop {
            let step = match &mut self.link {
                Link::Ws(ws) => tokio::select! {
                    msg = ws.next() => Step::Incoming(msg),
                    _ = notify.notified() => Step::Queued,
                    cmd = commands.recv() => Step::Command(cmd),
                },
                Link::Xhr { .. } => tokio::select! {
                    _ = notify.notified() => Step::Queued,
                    cmd = commands.recv() => Step::Command(cmd),
                },
            };
            let r = match step {
                Step::Incoming(msg) => self.incoming(msg).await,
                Step::Queued => self.drain_queue().await,
                Step::Command(None) | Step::Command(Some(Command::Close)) => {
                    break "closed by client".to_string()
                }
                Step::Command(Some(Command::Fire(pulses))) => {
                    let c = self.engine.fire(&pulses).map_err(NetError::from);
                    match c {
                        Ok(c) => self.send(c).await,
                        Err(e) => {
                            log::warn!("{}: fire rejected: {e}", self.engine.token());
                            Ok(())
                        }
                    }
                }
                Step::Command(Some(Command::Inspect(f))) => {
                    f(&mut self.engine);
                    Ok(())
                }
            };
            if let Err(e) = r {
                log::warn!("{}: {e}", self.engine.token());
                break e.to_string();
            }
        };
        if let Link::Ws(ws) = &mut self.link {
            let _ = SinkExt::close(ws.as_mut()).await;
        }
        let _ = state.send(ConnectionState::Closed(end));
    }

    async fn incoming(
        &mut self,
        msg: Option<Result<Message, tokio_tungstenite::tungstenite::Error>>,
    ) -> Result<(), NetError> {
        let bytes = match msg {
            Some(Ok(Message::Text(t))) => t.as_bytes().to_vec(),
            Some(Ok(Message::Binary(b))) => b.to_vec(),
            Some(Ok(Message::Close(frame))) => {
                return Err(NetError::Protocol(
                    frame.map(|f| f.reason.to_string()).unwrap_or_else(|| "closed by server".into()),
                ))
            }
            Some(Ok(_)) => return Ok(()),
            Some(Err(e)) => return Err(e.into()),
            None => return Err(NetError::Closed),
        };
        self.receive(&bytes).await
    }

    async fn receive(&mut self, bytes: &[u8]) -> Result<(), NetError> {
        let batch = match Frame::decode_limited(bytes, self.max_payload)? {
            Frame::Batch(b) => b,
            Frame::Boot(_) => return Err(NetError::Protocol("unexpected bootstrap".into())),
        };
        {
            let mut s = self.stats.lock().unwrap();
            s.frames_in += 1;
            s.bytes_in += bytes.len() as u64;
            s.messages_in += batch.messages.len() as u64;
        }
        if let Some(c) = self.engine.apply(&batch)? {
            self.send(c).await?;
        }
        Ok(())
    }

    async fn drain_queue(&mut self) -> Result<(), NetError> {
        while let Some(r) = self.engine.run_queued() {
            match r {
                Ok(c) => self.send(c).await?,
                Err(e) => log::warn!("{}: queued cycle: {e}", self.engine.token()),
            }
        }
        Ok(())
    }

    async fn send(&mut self, cycle: ClientCycle) -> Result<(), NetError> {
        let Some(batch) = cycle.outgoing else {
            return Ok(());
        };
        match &mut self.link {
            Link::Ws(ws) => {
                let text = batch.encode();
                count_out(&self.stats, &text, &batch);
                ws.send(Message::Text(text.into())).await?;
                Ok(())
            }
            Link::Xhr { .. } => {
                // Exchanges are strictly sequential; a response that makes
                // the client send again queues the follow-up here.
                let draining = !self.pending.is_empty();
                self.pending.push_back(batch);
                if draining {
                    return Ok(());
                }
                while let Some(b) = self.pending.front().cloned() {
                    let text = b.encode();
                    count_out(&self.stats, &text, &b);
                    let Link::Xhr { http, exchange } = &self.link else {
                        unreachable!()
                    };
                    let resp = http.post(exchange.as_str()).body(text).send().await?;
                    let body = checked(resp).await?;
                    self.pending.pop_front();
                    Box::pin(self.receive(body.as_bytes())).await?;
                }
                Ok(())
            }
        }
    }

}

fn count_out(stats: &Mutex<ClientStats>, text: &str, batch: &Batch) {
    let mut s = stats.lock().unwrap();
    s.frames_out += 1;
    s.bytes_out += text.len() as u64;
    s.messages_out += batch.messages.len() as u64;
}

enum Step {
    Incoming(Option<Result<Message, tokio_tungstenite::tungstenite::Error>>),
    Queued,
    Command(Option<Command>),
}

/// A live client connection.
pub struct ClientHandle {
    token: ClientToken,
    transport: Transport,
    queue: FireQueue,
    commands: mpsc::UnboundedSender<Command>,
    state: watch::Receiver<ConnectionState>,
    stats: Arc<Mutex<ClientStats>>,
    task: Option<tokio::task::JoinHandle<()>>,
    timers: Vec<tokio::task::JoinHandle<()>>,
}

impl ClientHandle {
    pub fn token(&self) -> &ClientToken {
        &self.token
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    /// Fires client sources in one cycle.
    pub fn fire(&self, pulses: Vec<Pulse>) -> Result<(), NetError> {
        self.commands
            .send(Command::Fire(pulses))
            .map_err(|_| NetError::Closed)
    }

    /// Queue for firing from other threads; each pulse gets its own cycle.
    pub fn queue(&self) -> FireQueue {
        self.queue.clone()
    }

    pub fn state(&self) -> watch::Receiver<ConnectionState> {
        self.state.clone()
    }

    pub fn is_live(&self) -> bool {
        matches!(*self.state.borrow(), ConnectionState::Live(_))
    }

    pub fn stats(&self) -> ClientStats {
        *self.stats.lock().unwrap()
    }

    /// Runs `f` on the client engine between cycles.
    pub async fn inspect<R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut ClientEngine) -> R + Send + 'static,
    ) -> Result<R, NetError> {
        let (tx, rx) = oneshot::channel();
        self.commands
            .send(Command::Inspect(Box::new(move |e| {
                let _ = tx.send(f(e));
            })))
            .map_err(|_| NetError::Closed)?;
        rx.await.map_err(|_| NetError::Closed)
    }

    pub async fn view<V: tierflow::Data>(&self) -> Result<Option<V>, NetError> {
        self.inspect(|e| e.view::<V>()).await
    }

    /// Polls the main view until `pred` holds or `timeout` passes.
    pub async fn wait_view<V: tierflow::Data>(
        &self,
        timeout: Duration,
        mut pred: impl FnMut(&V) -> bool,
    ) -> Result<V, NetError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            if let Some(v) = self.view::<V>().await? {
                if pred(&v) {
                    return Ok(v);
                }
            }
            if tokio::time::Instant::now() >= deadline {
                return Err(NetError::Protocol("timed out waiting for the view".into()));
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }

    /// Closes the connection and waits for the driver to stop.
    pub async fn close(mut self) {
        let _ = self.commands.send(Command::Close);
        if let Some(t) = self.task.take() {
            let _ = t.await;
        }
    }
}

impl Drop for ClientHandle {
    fn drop(&mut self) {
        for t in &self.timers {
            t.abort();
        }
        let _ = self.commands.send(Command::Close);
    }
}
