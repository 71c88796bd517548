//! Deterministic simulation of a server and its clients under virtual time.
//!
//! A [`Simulation`] runs a [`ServerEngine`] and any number of
//! [`ClientEngine`]s connected by reliable FIFO links with per-direction
//! latency. Frames travel as encoded text, so every delivery goes through
//! the real wire codec. Time advances only through scheduled events, which
//! are processed in a fixed order: at equal times, deliveries (by link
//! creation order, then send order) precede timers, which precede script
//! actions.
//!
//! Glitch probes (boolean discrete behaviors marked with
//! [`ProgramBuilder::probe`](crate::graph::ProgramBuilder::probe)) are
//! checked after every cycle of every engine; a false probe aborts the run.

pub mod gen;
pub mod programs;
mod reference;
mod trace;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientEngine, ClientError};
use crate::engine::{Engine, ManualExecutor, ObservedAt, Pulse, Scope};
use crate::graph::{NodeId, ProgramGraph};
use crate::mode::ModeRequest;
use crate::server::{ServerEngine, ServerError, ServerOutputs, ServerStats};
use crate::value::{ClientToken, Val};
use crate::wire::{Batch, Frame};

pub use reference::{reference_eval, ReferenceError};
pub use trace::{Trace, TraceEntry};

/// A scripted stimulus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case")]
pub enum Action {
    /// Opens a new client; clients are numbered from 0 in connect order.
    Connect {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latency_ms: Option<u64>,
    },
    Disconnect {
        client: usize,
    },
    /// Fires a client-tier source on one client.
    PushClient {
        client: usize,
        node: NodeId,
        value: serde_json::Value,
    },
    /// Fires a server-side source, optionally in one replica only.
    PushServer {
        node: NodeId,
        value: serde_json::Value,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client: Option<usize>,
    },
    SetLatency {
        client: usize,
        up_ms: u64,
        down_ms: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: Action,
}

/// A script of timed actions and the virtual time at which the run stops.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub actions: Vec<TimedAction>,
    pub end_ms: u64,
}

impl Scenario {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn at(mut self, at_ms: u64, action: Action) -> Self {
        self.actions.push(TimedAction { at_ms, action });
        self.end_ms = self.end_ms.max(at_ms);
        self
    }

    pub fn until(mut self, end_ms: u64) -> Self {
        self.end_ms = end_ms;
        self
    }

    pub fn connect(self, at_ms: u64) -> Self {
        self.at(at_ms, Action::Connect { latency_ms: None })
    }

    pub fn disconnect(self, at_ms: u64, client: usize) -> Self {
        self.at(at_ms, Action::Disconnect { client })
    }

    pub fn push_client<A: Serialize>(self, at_ms: u64, client: usize, node: NodeId, v: A) -> Self {
        let value = serde_json::to_value(v).expect("scenario values serialize");
        self.at(
            at_ms,
            Action::PushClient {
                client,
                node,
                value,
            },
        )
    }

    pub fn push_server<A: Serialize>(self, at_ms: u64, node: NodeId, v: A) -> Self {
        let value = serde_json::to_value(v).expect("scenario values serialize");
        self.at(
            at_ms,
            Action::PushServer {
                node,
                value,
                client: None,
            },
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    fn check(&self) -> Result<(), SimError> {
        let sorted = self.actions.windows(2).all(|w| w[0].at_ms <= w[1].at_ms);
        if sorted {
            Ok(())
        } else {
            Err(SimError::Setup("action times must be non-decreasing".into()))
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub mode: ModeRequest,
    /// Latency of both directions of a new link.
    pub latency_ms: u64,
    /// Fault injection: sends every multi-message batch as one batch per
    /// message. Breaks cross-tier atomicity on purpose.
    pub split_batches: bool,
    /// Records a full trace of every engine.
    pub record: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mode: ModeRequest::Auto,
            latency_ms: 50,
            split_batches: false,
            record: true,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("scenario setup: {0}")]
    Setup(String),
    #[error("probe `{name}` ({node}) false on {engine}/{scope} in cycle {cycle} at {at_ms} ms")]
    ProbeViolated {
        name: String,
        node: NodeId,
        engine: String,
        scope: String,
        cycle: u64,
        at_ms: u64,
    },
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkDir {
    Up,
    Down,
}

/// One frame put on a link.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub at_ms: u64,
    pub client: usize,
    pub dir: LinkDir,
    pub boot: bool,
    pub bytes: usize,
    pub messages: usize,
}

/// What triggered a server cycle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Cause {
    Connect(ClientToken),
    Disconnect(ClientToken),
    Exchange(ClientToken),
    Timer(NodeId),
    Push,
    Queued,
}

/// Passed to the server observer after every server cycle.
pub struct CycleInfo<'a> {
    pub at_ms: u64,
    pub cause: Cause,
    pub outputs: &'a ServerOutputs,
}

type Observer = Box<dyn FnMut(&ServerEngine, &CycleInfo<'_>)>;
type BootObserver = Box<dyn FnMut(usize, &ClientEngine)>;

#[derive(Debug)]
pub struct SimReport {
    pub trace: Trace,
    pub frames: Vec<FrameRecord>,
    pub server: ServerStats,
    /// Client pushes scripted while the client was not live.
    pub dropped_pushes: u64,
    /// Frames arriving for a closed connection.
    pub dropped_frames: u64,
}

struct Link {
    latency: u64,
    last: u64,
}

struct SimClient {
    token: Option<ClientToken>,
    engine: Option<ClientEngine>,
    exec: Arc<ManualExecutor>,
    up: usize,
    down: usize,
    open: bool,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
enum EvKind {
    Deliver { link: usize, text: String },
    ServerTimer { node: NodeId, period: u64, n: u64 },
    ClientTimer { client: usize, node: NodeId, period: u64, n: u64 },
    Script(usize),
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Scheduled {
    time: u64,
    class: u8,
    order: u64,
    seq: u64,
    kind: EvKind,
}

pub struct Simulation {
    config: SimConfig,
    now: u64,
    server: ServerEngine,
    server_exec: Arc<ManualExecutor>,
    clients: Vec<SimClient>,
    by_token: BTreeMap<ClientToken, usize>,
    links: Vec<Link>,
    link_owner: Vec<(usize, LinkDir)>,
    heap: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    script: Vec<TimedAction>,
    end_ms: u64,
    trace: Trace,
    frames: Vec<FrameRecord>,
    observer: Option<Observer>,
    boot_observer: Option<BootObserver>,
    dropped_pushes: u64,
    dropped_frames: u64,
}

impl Simulation {
    pub fn new(graph: Arc<ProgramGraph>, config: SimConfig) -> Result<Self, SimError> {
        let mut server = ServerEngine::start(graph, config.mode)?;
        let server_exec = ManualExecutor::new();
        server.engine_mut().set_executor(server_exec.clone());
        server.engine_mut().set_recording(config.record);
        let mut sim = Simulation {
            config,
            now: 0,
            server,
            server_exec,
            clients: Vec::new(),
            by_token: BTreeMap::new(),
            links: Vec::new(),
            link_owner: Vec::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            script: Vec::new(),
            end_ms: 0,
            trace: Trace::default(),
            frames: Vec::new(),
            observer: None,
            boot_observer: None,
            dropped_pushes: 0,
            dropped_frames: 0,
        };
        for (node, period) in sim.server.engine().timers() {
            let period = period.as_millis().max(1) as u64;
            sim.schedule(period, 1, node.0 as u64, EvKind::ServerTimer { node, period, n: 1 });
        }
        Ok(sim)
    }

    /// Installs a callback run after every server cycle.
    pub fn set_observer(&mut self, f: impl FnMut(&ServerEngine, &CycleInfo<'_>) + 'static) {
        self.observer = Some(Box::new(f));
    }

    /// Installs a callback run when a client has booted from its bootstrap,
    /// before it applies any batch.
    pub fn set_boot_observer(&mut self, f: impl FnMut(usize, &ClientEngine) + 'static) {
        self.boot_observer = Some(Box::new(f));
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn server(&self) -> &ServerEngine {
        &self.server
    }

    pub fn client(&self, index: usize) -> Option<&ClientEngine> {
        self.clients.get(index)?.engine.as_ref()
    }

    pub fn client_token(&self, index: usize) -> Option<&ClientToken> {
        self.clients.get(index)?.token.as_ref()
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    fn schedule(&mut self, time: u64, class: u8, order: u64, kind: EvKind) {
        self.seq += 1;
        self.heap.push(Reverse(Scheduled {
            time,
            class,
            order,
            seq: self.seq,
            kind,
        }));
    }

    /// Adds a scenario's actions to the schedule.
    pub fn load(&mut self, scenario: &Scenario) -> Result<(), SimError> {
        scenario.check()?;
        for a in &scenario.actions {
            if a.at_ms < self.now {
                return Err(SimError::Setup(format!(
                    "action at {} ms is in the past",
                    a.at_ms
                )));
            }
            let idx = self.script.len();
            self.script.push(a.clone());
            self.schedule(a.at_ms, 2, idx as u64, EvKind::Script(idx));
        }
        self.end_ms = self.end_ms.max(scenario.end_ms);
        Ok(())
    }

    /// Processes every event scheduled at or before `end_ms`.
    pub fn run_until(&mut self, end_ms: u64) -> Result<(), SimError> {
        while let Some(Reverse(top)) = self.heap.peek() {
            if top.time > end_ms {
                break;
            }
            let Reverse(ev) = self.heap.pop().expect("peeked");
            self.now = ev.time;
            self.handle(ev.kind)?;
            self.pump()?;
        }
        self.now = self.now.max(end_ms);
        Ok(())
    }

    pub fn finish(mut self) -> Result<SimReport, SimError> {
        let end = self.end_ms;
        self.run_until(end)?;
        self.trace.sort();
        Ok(SimReport {
            trace: self.trace,
            frames: self.frames,
            server: self.server.stats(),
            dropped_pushes: self.dropped_pushes,
            dropped_frames: self.dropped_frames,
        })
    }

    fn handle(&mut self, kind: EvKind) -> Result<(), SimError> {
        match kind {
            EvKind::Deliver { link, text } => self.deliver(link, text),
            EvKind::ServerTimer { node, period, n } => {
                let elapsed = period * n;
                self.schedule(
                    elapsed + period,
                    1,
                    node.0 as u64,
                    EvKind::ServerTimer {
                        node,
                        period,
                        n: n + 1,
                    },
                );
                let out = self.server.fire(&[Pulse::new(node, Val::new(elapsed))])?;
                self.after_server(Cause::Timer(node), out)
            }
            EvKind::ClientTimer {
                client,
                node,
                period,
                n,
            } => {
                let c = &mut self.clients[client];
                let Some(engine) = c.engine.as_mut().filter(|_| c.open) else {
                    return Ok(());
                };
                let cycle = engine.fire(&[Pulse::new(node, Val::new(period * n))])?;
                let t = self.now;
                self.schedule(
                    t + period,
                    1,
                    1_000_000 + (client as u64) * 10_000 + node.0 as u64,
                    EvKind::ClientTimer {
                        client,
                        node,
                        period,
                        n: n + 1,
                    },
                );
                self.after_client(client, cycle.result.cycle, &cycle.result.observations)?;
                self.send_up(client, cycle.outgoing);
                Ok(())
            }
            EvKind::Script(idx) => {
                let action = self.script[idx].action.clone();
                self.act(action)
            }
        }
    }

    fn act(&mut self, action: Action) -> Result<(), SimError> {
        match action {
            Action::Connect { latency_ms } => self.connect(latency_ms),
            Action::Disconnect { client } => {
                let token = self.token_of(client)?;
                let c = &mut self.clients[client];
                c.open = false;
                c.engine = None;
                if let Some(out) = self.server.disconnect(&token) {
                    self.after_server(Cause::Disconnect(token), out)?;
                }
                Ok(())
            }
            Action::PushClient {
                client,
                node,
                value,
            } => {
                self.token_of(client)?;
                let v = self.decode_value(node, &value)?;
                let c = &mut self.clients[client];
                let Some(engine) = c.engine.as_mut().filter(|_| c.open) else {
                    self.dropped_pushes += 1;
                    return Ok(());
                };
                let cycle = engine.fire(&[Pulse::new(node, v)])?;
                self.after_client(client, cycle.result.cycle, &cycle.result.observations)?;
                self.send_up(client, cycle.outgoing);
                Ok(())
            }
            Action::PushServer {
                node,
                value,
                client,
            } => {
                let v = self.decode_value(node, &value)?;
                let mut pulse = Pulse::new(node, v);
                if let Some(c) = client {
                    pulse = pulse.for_client(self.token_of(c)?);
                }
                let out = self.server.fire(&[pulse])?;
                self.after_server(Cause::Push, out)
            }
            Action::SetLatency {
                client,
                up_ms,
                down_ms,
            } => {
                let c = self
                    .clients
                    .get(client)
                    .ok_or_else(|| SimError::Setup(format!("unknown client {client}")))?;
                let (up, down) = (c.up, c.down);
                self.links[up].latency = up_ms;
                self.links[down].latency = down_ms;
                Ok(())
            }
        }
    }

    fn token_of(&self, client: usize) -> Result<ClientToken, SimError> {
        self.clients
            .get(client)
            .and_then(|c| c.token.clone())
            .ok_or_else(|| SimError::Setup(format!("unknown client {client}")))
    }

    fn decode_value(&self, node: NodeId, value: &serde_json::Value) -> Result<Val, SimError> {
        let graph = self.server.graph();
        let n = graph
            .get(node)
            .ok_or_else(|| SimError::Setup(format!("unknown node {node}")))?;
        if !n.is_source() && n.timer_period().is_none() {
            return Err(SimError::Setup(format!("{node} is not a source")));
        }
        let codec = graph
            .codecs()
            .for_type(n.value_type())
            .ok_or_else(|| SimError::Setup(format!("no codec for {:?}", n.value_type())))?;
        codec
            .decode(value)
            .map_err(|e| SimError::Setup(e.to_string()))
    }

    fn connect(&mut self, latency: Option<u64>) -> Result<(), SimError> {
        let index = self.clients.len();
        let latency = latency.unwrap_or(self.config.latency_ms);
        let up = self.links.len();
        self.links.push(Link { latency, last: 0 });
        self.link_owner.push((index, LinkDir::Up));
        self.links.push(Link { latency, last: 0 });
        self.link_owner.push((index, LinkDir::Down));
        let connected = self.server.connect()?;
        let token = connected.client.clone();
        self.clients.push(SimClient {
            token: Some(token.clone()),
            engine: None,
            exec: ManualExecutor::new(),
            up,
            down: up + 1,
            open: true,
        });
        self.by_token.insert(token.clone(), index);
        if self.config.record {
            let scope = self.server.engine().scope_of(&token).expect("new replica");
            let cycle = connected.outputs.cycle;
            for o in self.server.engine().snapshot_values() {
                if o.scope == scope {
                    let crate::engine::Observation::Stepped(v) = &o.what else {
                        continue;
                    };
                    self.trace.push(TraceEntry {
                        engine: "server".into(),
                        cycle,
                        node: o.node,
                        scope: token.to_string(),
                        obs: format!("init {v:?}"),
                    });
                }
            }
        }
        let text = connected.bootstrap.encode();
        self.put(up + 1, text, true, connected.bootstrap.values.len());
        self.after_server(Cause::Connect(token), connected.outputs)
    }

    fn put(&mut self, link: usize, text: String, boot: bool, messages: usize) {
        let (client, dir) = self.link_owner[link];
        self.frames.push(FrameRecord {
            at_ms: self.now,
            client,
            dir,
            boot,
            bytes: text.len(),
            messages,
        });
        let l = &mut self.links[link];
        let at = (self.now + l.latency).max(l.last);
        l.last = at;
        self.schedule(at, 0, link as u64, EvKind::Deliver { link, text });
    }

    fn send_batch(&mut self, link: usize, batch: Batch) {
        if self.config.split_batches && batch.messages.len() > 1 {
            for m in batch.messages {
                let single = Batch {
                    cycle: batch.cycle,
                    messages: vec![m],
                };
                self.put(link, single.encode(), false, 1);
            }
        } else {
            let n = batch.messages.len();
            self.put(link, batch.encode(), false, n);
        }
    }

    fn send_up(&mut self, client: usize, batch: Option<Batch>) {
        if let Some(b) = batch {
            let link = self.clients[client].up;
            self.send_batch(link, b);
        }
    }

    fn deliver(&mut self, link: usize, text: String) -> Result<(), SimError> {
        let (client, dir) = self.link_owner[link];
        if !self.clients[client].open {
            self.dropped_frames += 1;
            return Ok(());
        }
        match dir {
            LinkDir::Up => {
                let token = self.clients[client].token.clone().expect("open client has a token");
                let batch = Batch::decode(text.as_bytes()).map_err(ServerError::from)?;
                match self.server.exchange(&token, &batch) {
                    Ok(out) => self.after_server(Cause::Exchange(token), out),
                    Err(ServerError::UnknownClient(_)) => {
                        self.dropped_frames += 1;
                        Ok(())
                    }
                    Err(e) => Err(e.into()),
                }
            }
            LinkDir::Down => match Frame::decode(text.as_bytes()).map_err(ClientError::from)? {
                Frame::Boot(boot) => self.boot(client, &boot),
                Frame::Batch(batch) => {
                    let c = &mut self.clients[client];
                    let engine = c
                        .engine
                        .as_mut()
                        .ok_or_else(|| SimError::Setup("batch before bootstrap".into()))?;
                    if let Some(cycle) = engine.apply(&batch)? {
                        self.after_client(client, cycle.result.cycle, &cycle.result.observations)?;
                        self.send_up(client, cycle.outgoing);
                    }
                    Ok(())
                }
            },
        }
    }

    fn boot(&mut self, client: usize, boot: &crate::wire::Bootstrap) -> Result<(), SimError> {
        let graph = self.server.graph().clone();
        let mut engine = ClientEngine::boot(graph, boot)?;
        let exec = self.clients[client].exec.clone();
        engine.engine_mut().set_executor(exec);
        engine.engine_mut().set_recording(self.config.record);
        engine.start();
        let timers = engine.timers();
        if self.config.record {
            let init = engine.engine().snapshot_values();
            trace::record(&mut self.trace, boot.client.as_str(), engine.engine(), 0, &init);
        }
        if let Some(f) = self.boot_observer.as_mut() {
            f(client, &engine);
        }
        self.clients[client].engine = Some(engine);
        self.check_client_probes(client, 0)?;
        let now = self.now;
        for (node, period) in timers {
            let period = period.as_millis().max(1) as u64;
            self.schedule(
                now + period,
                1,
                1_000_000 + (client as u64) * 10_000 + node.0 as u64,
                EvKind::ClientTimer {
                    client,
                    node,
                    period,
                    n: 1,
                },
            );
        }
        Ok(())
    }

    fn after_client(
        &mut self,
        client: usize,
        cycle: u64,
        obs: &[ObservedAt],
    ) -> Result<(), SimError> {
        if self.config.record {
            let c = &self.clients[client];
            let engine = c.engine.as_ref().expect("client engine exists");
            let label = c.token.as_ref().expect("token").to_string();
            trace::record(&mut self.trace, &label, engine.engine(), cycle, obs);
        }
        self.check_client_probes(client, cycle)
    }

    fn check_client_probes(&self, client: usize, cycle: u64) -> Result<(), SimError> {
        let c = &self.clients[client];
        let engine = c.engine.as_ref().expect("client engine exists");
        let label = c.token.as_ref().expect("token").to_string();
        check_probes(engine.engine(), &label, cycle, self.now)
    }

    fn after_server(&mut self, cause: Cause, out: ServerOutputs) -> Result<(), SimError> {
        if self.config.record {
            trace::record(
                &mut self.trace,
                "server",
                self.server.engine(),
                out.cycle,
                &out.observations,
            );
        }
        if let Some(obs) = self.observer.as_mut() {
            obs(
                &self.server,
                &CycleInfo {
                    at_ms: self.now,
                    cause,
                    outputs: &out,
                },
            );
        }
        check_probes(self.server.engine(), "server", out.cycle, self.now)?;
        for (token, batch) in out.per_client {
            let Some(&client) = self.by_token.get(&token) else {
                continue;
            };
            if batch.is_empty() || !self.clients[client].open {
                continue;
            }
            let link = self.clients[client].down;
            self.send_batch(link, batch);
        }
        Ok(())
    }

    /// Runs completed tasks and queued fires until every engine is idle.
    fn pump(&mut self) -> Result<(), SimError> {
        loop {
            let mut progressed = self.server_exec.run_all() > 0;
            for c in &self.clients {
                progressed |= c.exec.run_all() > 0;
            }
            while let Some(out) = self.server.run_queued() {
                progressed = true;
                self.after_server(Cause::Queued, out?)?;
            }
            for i in 0..self.clients.len() {
                loop {
                    let c = &mut self.clients[i];
                    let Some(engine) = c.engine.as_mut().filter(|_| c.open) else {
                        break;
                    };
                    let Some(cycle) = engine.run_queued() else {
                        break;
                    };
                    progressed = true;
                    let cycle = cycle?;
                    self.after_client(i, cycle.result.cycle, &cycle.result.observations)?;
                    self.send_up(i, cycle.outgoing);
                }
            }
            if !progressed {
                return Ok(());
            }
        }
    }
}

fn check_probes(engine: &Engine, label: &str, cycle: u64, at_ms: u64) -> Result<(), SimError> {
    for p in engine.graph().probes() {
        for scope in engine.scopes_of(p.id()) {
            let Some(v) = engine.value_at(p.id(), scope) else {
                continue;
            };
            if !v.get::<bool>() {
                return Err(SimError::ProbeViolated {
                    name: p.probe().unwrap_or_default().to_string(),
                    node: p.id(),
                    engine: label.to_string(),
                    scope: match scope {
                        Scope::Local => "local".to_string(),
                        Scope::Replica(_) => engine
                            .client_of(scope)
                            .map(ToString::to_string)
                            .unwrap_or_default(),
                    },
                    cycle,
                    at_ms,
                });
            }
        }
    }
    Ok(())
}

/// Runs a scenario to its end and returns the sorted trace and frame log.
pub fn run_scenario(
    graph: Arc<ProgramGraph>,
    scenario: &Scenario,
    config: SimConfig,
) -> Result<SimReport, SimError> {
    let mut sim = Simulation::new(graph, config)?;
    sim.load(scenario)?;
    sim.finish()
}

/// Runs a single-tier program on an engine and records its trace in the
/// same form as [`reference_eval`].
pub fn engine_trace(graph: Arc<ProgramGraph>, script: &[Vec<Pulse>]) -> Result<Trace, SimError> {
    let tier = graph
        .nodes()
        .next()
        .map(|n| n.tier())
        .unwrap_or(crate::graph::Tier::Client);
    let role = if tier.is_server() {
        crate::engine::Role::Server
    } else {
        crate::engine::Role::Client
    };
    let mut engine = Engine::new(graph, role);
    engine.set_recording(true);
    let mut trace = Trace::default();
    let rec = |trace: &mut Trace, cycle: u64, obs: &[ObservedAt]| {
        for o in obs {
            trace.push(TraceEntry {
                engine: "local".into(),
                cycle,
                node: o.node,
                scope: "local".into(),
                obs: trace::render_observation(&o.what),
            });
        }
    };
    rec(&mut trace, 0, &engine.snapshot_values());
    for pulses in script {
        let r = engine
            .fire(pulses)
            .map_err(|e| SimError::Setup(e.to_string()))?;
        rec(&mut trace, r.cycle, &r.observations);
    }
    trace.sort();
    Ok(trace)
}
