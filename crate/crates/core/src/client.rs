//! The client engine role.
//!
//! A [`ClientEngine`] is created from a bootstrap payload, so every
//! session-to-client behavior starts at its connection-time server value.
//! Each local cycle that produces crossing payloads yields exactly one
//! outgoing [`Batch`]; each incoming batch is injected as one cycle.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::engine::{Engine, EngineError, FireQueue, FireResult, Input, Pulse, Role, Scope};
use crate::graph::{DBehavior, NodeId, ProgramGraph};
use crate::value::{ClientToken, Data, Val};
use crate::wire::{Batch, Bootstrap, Router, WireError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Connection state as seen by a host.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConnectionState {
    Connecting,
    Live(ClientToken),
    Closed(String),
}

type Render = Box<dyn FnMut(&Val) + Send>;

/// One client cycle: what it did, and the batch it sends, if any.
#[derive(Debug)]
pub struct ClientCycle {
    pub result: FireResult,
    pub outgoing: Option<Batch>,
}

pub struct ClientEngine {
    engine: Engine,
    router: Router,
    token: ClientToken,
    render: Option<Render>,
}

impl std::fmt::Debug for ClientEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientEngine")
            .field("token", &self.token)
            .field("engine", &self.engine)
            .finish()
    }
}

impl ClientEngine {
    /// Creates the client side of a connection. Fails on a manifest version
    /// mismatch or an undecodable payload.
    pub fn boot(graph: Arc<ProgramGraph>, bootstrap: &Bootstrap) -> Result<Self, ClientError> {
        let router = Router::for_client(graph.clone());
        let values: BTreeMap<NodeId, Val> = router.route_bootstrap(bootstrap)?;
        let engine = Engine::with_inputs(graph, Role::Client, &values);
        Ok(ClientEngine {
            engine,
            router,
            token: bootstrap.client.clone(),
            render: None,
        })
    }

    pub fn token(&self) -> &ClientToken {
        &self.token
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn queue(&self) -> FireQueue {
        self.engine.queue()
    }

    pub fn timers(&self) -> Vec<(NodeId, Duration)> {
        self.engine.timers()
    }

    /// Installs the view callback, invoked on the engine thread after every
    /// cycle in which the main view steps.
    pub fn set_render(&mut self, render: impl FnMut(&Val) + Send + 'static) {
        self.render = Some(Box::new(render));
    }

    /// Runs effect-source installers and renders the initial view.
    pub fn start(&mut self) {
        self.engine.start();
        if let Some(view) = self.view_val() {
            if let Some(r) = self.render.as_mut() {
                r(&view);
            }
        }
    }

    pub fn view_val(&self) -> Option<Val> {
        let id = self.engine.graph().main_view()?;
        self.engine.value_at(id, Scope::Local).cloned()
    }

    pub fn view<V: Data>(&self) -> Option<V> {
        self.view_val().map(|v| v.get::<V>())
    }

    pub fn value<A: Data>(&self, db: &DBehavior<A>) -> A {
        self.engine.value(db)
    }

    /// Injects a server batch as one cycle. An empty batch runs no cycle.
    pub fn apply(&mut self, batch: &Batch) -> Result<Option<ClientCycle>, ClientError> {
        if batch.is_empty() {
            return Ok(None);
        }
        let values = self.router.route(batch)?;
        let inputs = values
            .into_iter()
            .map(|(node, value)| Input {
                node,
                scope: Scope::Local,
                value,
            })
            .collect();
        let result = self.engine.run_cycle(inputs, Vec::new(), None);
        self.finish(result).map(Some)
    }

    /// Runs one local cycle with external pulses; returns the batch to send.
    pub fn fire(&mut self, pulses: &[Pulse]) -> Result<ClientCycle, ClientError> {
        let result = self.engine.fire(pulses)?;
        self.finish(result)
    }

    /// Runs one cycle for the oldest queued stimulus.
    pub fn run_queued(&mut self) -> Option<Result<ClientCycle, ClientError>> {
        let result = self.engine.run_queued()?;
        Some(self.finish(result))
    }

    fn finish(&mut self, result: FireResult) -> Result<ClientCycle, ClientError> {
        if let Some(view) = self.engine.graph().main_view() {
            if result.stepped.contains(&(view, Scope::Local)) {
                let v = self
                    .engine
                    .value_at(view, Scope::Local)
                    .expect("main view has a value")
                    .clone();
                if let Some(r) = self.render.as_mut() {
                    r(&v);
                }
            }
        }
        let outgoing = match result.outputs.get(&Scope::Local) {
            Some(payloads) if !payloads.is_empty() => {
                Some(self.router.funnel(result.cycle, payloads)?)
            }
            _ => None,
        };
        Ok(ClientCycle { result, outgoing })
    }

    pub fn cycle(&self) -> u64 {
        self.engine.cycle()
    }
}
