//! The server engine role.
//!
//! [`ServerEngine`] owns the application instance and one session replica
//! per connected client, and turns every stimulus (a client batch, a
//! lifecycle change, a timer tick, a queued fire) into exactly one cycle.
//! It is transport-agnostic: callers hand in decoded requests and get back
//! per-client batches.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::engine::{Engine, EngineError, FireResult, Input, ObservedAt, Pulse, Role, Scope};
use crate::graph::{Direction, NodeId, NodeKind, Op, ProgramGraph};
use crate::mode::{infer_modes, ModeError, ModeReport, ModeRequest, Transport};
use crate::value::{ClientChange, ClientToken, Val};
use crate::wire::{Batch, Bootstrap, Frame, Router, WireError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error("unknown client {0}")]
    UnknownClient(ClientToken),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Mode(#[from] ModeError),
}

/// Batches produced by one server cycle, per destination client.
#[derive(Clone, Debug, Default)]
pub struct ServerOutputs {
    pub cycle: u64,
    pub per_client: BTreeMap<ClientToken, Batch>,
    /// Per-node observations of the cycle, while the engine records.
    pub observations: Vec<ObservedAt>,
}

impl ServerOutputs {
    pub fn message_count(&self) -> usize {
        self.per_client.values().map(|b| b.messages.len()).sum()
    }
}

/// Counters for diagnostics and load tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub cycles: u64,
    pub connects: u64,
    pub disconnects: u64,
    /// Messages ingested from client batches.
    pub messages_in: u64,
    /// Messages handed out in per-client batches.
    pub messages_out: u64,
    /// Request/response mode: messages for clients other than the requester.
    pub dropped_unsolicited: u64,
    pub protocol_errors: u64,
}

/// Result of a connection.
#[derive(Clone, Debug)]
pub struct Connected {
    pub client: ClientToken,
    pub bootstrap: Bootstrap,
    /// Outputs of the connect cycle, excluding behavior values for the new
    /// client (its bootstrap carries them).
    pub outputs: ServerOutputs,
}

pub struct ServerEngine {
    engine: Engine,
    router: Router,
    transport: Transport,
    report: ModeReport,
    next_token: u64,
    client_changes: Option<NodeId>,
    /// Session-to-application behavior crossings; their maps change on
    /// every connect and disconnect.
    lifecycle_nodes: Vec<NodeId>,
    bootstrap_nodes: Vec<NodeId>,
    stats: ServerStats,
}

impl std::fmt::Debug for ServerEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerEngine")
            .field("transport", &self.transport)
            .field("engine", &self.engine)
            .finish()
    }
}

impl ServerEngine {
    /// Runs mode analysis and prepares the application instance. Fails
    /// before anything else happens if an xhr-assert is violated or the
    /// requested mode is impossible.
    pub fn start(graph: Arc<ProgramGraph>, mode: ModeRequest) -> Result<Self, ServerError> {
        let report = infer_modes(&graph);
        let transport = report.choose(mode)?;
        let client_changes = graph
            .nodes()
            .find(|n| matches!(n.op, Op::ClientChanges))
            .map(|n| n.id());
        let lifecycle_nodes = graph
            .crossings(Direction::SessionToApp)
            .filter(|n| n.kind().has_value())
            .map(|n| n.id())
            .collect();
        let bootstrap_nodes = graph
            .crossings(Direction::SessionToClient)
            .filter(|n| n.needs_bootstrap())
            .map(|n| n.id())
            .collect();
        let mut engine = Engine::new(graph.clone(), Role::Server);
        engine.start();
        Ok(ServerEngine {
            engine,
            router: Router::for_server(graph),
            transport,
            report,
            next_token: 1,
            client_changes,
            lifecycle_nodes,
            bootstrap_nodes,
            stats: ServerStats::default(),
        })
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    pub fn mode_report(&self) -> &ModeReport {
        &self.report
    }

    pub fn graph(&self) -> &Arc<ProgramGraph> {
        self.engine.graph()
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn stats(&self) -> ServerStats {
        self.stats
    }

    pub fn clients(&self) -> Vec<ClientToken> {
        self.engine.clients().cloned().collect()
    }

    /// Admits a new client in one cycle: creates its replica, fires
    /// `Connected`, and snapshots the bootstrap values after the cycle.
    pub fn connect(&mut self) -> Result<Connected, ServerError> {
        let token = ClientToken::new(format!("c{}", self.next_token));
        self.next_token += 1;
        let scope = self.engine.add_replica(token.clone())?;
        let change = ClientChange::Connected(token.clone());
        let result = self.lifecycle_cycle(change);
        self.stats.connects += 1;

        let values: Vec<(NodeId, Val)> = self
            .bootstrap_nodes
            .iter()
            .map(|&id| {
                let dep = self.graph().node(id).deps()[0];
                let v = self
                    .engine
                    .value_at(dep, scope)
                    .expect("bootstrapped session node has a value")
                    .clone();
                (id, v)
            })
            .collect();
        let bootstrap = self.router.bootstrap(token.clone(), &values)?;
        let graph = self.graph().clone();
        let outputs = self.collect(result, None, |id, s| {
            s == scope && graph.node(id).kind() != NodeKind::Event
        })?;
        Ok(Connected {
            client: token,
            bootstrap,
            outputs,
        })
    }

    /// Removes a client in one cycle firing `Disconnected`. Unknown tokens
    /// are ignored.
    pub fn disconnect(&mut self, client: &ClientToken) -> Option<ServerOutputs> {
        if self.engine.remove_replica(client).is_none() {
            log::info!("disconnect of unknown client {client} ignored");
            return None;
        }
        let result = self.lifecycle_cycle(ClientChange::Disconnected(client.clone()));
        self.stats.disconnects += 1;
        match self.collect(result, None, |_, _| false) {
            Ok(out) => Some(out),
            Err(e) => {
                log::error!("encoding outputs after disconnect of {client}: {e}");
                Some(ServerOutputs::default())
            }
        }
    }

    fn lifecycle_cycle(&mut self, change: ClientChange) -> FireResult {
        let inputs = self
            .client_changes
            .map(|node| Input {
                node,
                scope: Scope::Local,
                value: Val::new(change.clone()),
            })
            .into_iter()
            .collect();
        let extra = self
            .lifecycle_nodes
            .iter()
            .map(|&id| (id, Scope::Local))
            .collect();
        log::debug!("server cycle {}: {:?}", self.engine.cycle() + 1, change);
        self.engine.run_cycle(inputs, extra, Some(change))
    }

    /// Injects a client batch as one cycle. In request/response mode only
    /// the requester's batch is returned (possibly empty).
    pub fn exchange(
        &mut self,
        client: &ClientToken,
        batch: &Batch,
    ) -> Result<ServerOutputs, ServerError> {
        let scope = self
            .engine
            .scope_of(client)
            .ok_or_else(|| ServerError::UnknownClient(client.clone()))?;
        let values = self.router.route(batch).inspect_err(|_| {
            self.stats.protocol_errors += 1;
        })?;
        self.stats.messages_in += values.len() as u64;
        let inputs = values
            .into_iter()
            .map(|(node, value)| Input { node, scope, value })
            .collect();
        let result = self.engine.run_cycle(inputs, Vec::new(), None);
        let mut out = self.collect(result, Some(client), |_, _| false)?;
        if self.transport == Transport::Xhr {
            out.per_client.entry(client.clone()).or_insert_with(|| Batch {
                cycle: out.cycle,
                messages: Vec::new(),
            });
        }
        Ok(out)
    }

    /// Decodes a client frame of at most `max` bytes and injects it like
    /// [`exchange`](Self::exchange). Undecodable frames count as protocol
    /// errors and run no cycle.
    pub fn exchange_frame(
        &mut self,
        client: &ClientToken,
        bytes: &[u8],
        max: usize,
    ) -> Result<ServerOutputs, ServerError> {
        if self.engine.scope_of(client).is_none() {
            return Err(ServerError::UnknownClient(client.clone()));
        }
        let decoded = match Frame::decode_limited(bytes, max) {
            Ok(Frame::Batch(b)) => Ok(b),
            Ok(Frame::Boot(_)) => Err(WireError::UnexpectedFrame("boot")),
            Err(e) => Err(e),
        };
        let batch = decoded.inspect_err(|_| self.stats.protocol_errors += 1)?;
        self.exchange(client, &batch)
    }

    /// Runs one cycle with external pulses (timer ticks, server sources).
    pub fn fire(&mut self, pulses: &[Pulse]) -> Result<ServerOutputs, ServerError> {
        let result = self.engine.fire(pulses)?;
        self.collect(result, None, |_, _| false)
    }

    /// Runs one cycle for the oldest queued stimulus.
    pub fn run_queued(&mut self) -> Option<Result<ServerOutputs, ServerError>> {
        let result = self.engine.run_queued()?;
        Some(self.collect(result, None, |_, _| false))
    }

    fn collect(
        &mut self,
        result: FireResult,
        requester: Option<&ClientToken>,
        suppress: impl Fn(NodeId, Scope) -> bool,
    ) -> Result<ServerOutputs, ServerError> {
        self.stats.cycles += 1;
        let mut out = ServerOutputs {
            cycle: result.cycle,
            per_client: BTreeMap::new(),
            observations: result.observations,
        };
        for (scope, payloads) in result.outputs {
            let Some(token) = self.engine.client_of(scope).cloned() else {
                continue;
            };
            let payloads: Vec<(NodeId, Val)> = payloads
                .into_iter()
                .filter(|(id, _)| !suppress(*id, scope))
                .collect();
            if payloads.is_empty() {
                continue;
            }
            if self.transport == Transport::Xhr && requester != Some(&token) {
                log::warn!(
                    "cycle {}: {} message(s) for {token} outside its exchange dropped",
                    result.cycle,
                    payloads.len()
                );
                self.stats.dropped_unsolicited += payloads.len() as u64;
                continue;
            }
            let batch = self.router.funnel(result.cycle, &payloads)?;
            self.stats.messages_out += batch.messages.len() as u64;
            out.per_client.insert(token, batch);
        }
        Ok(out)
    }
}
