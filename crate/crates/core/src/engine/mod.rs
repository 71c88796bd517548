//! The synchronous propagation machine.
//!
//! An [`Engine`] hosts the nodes of one side of a program: the client tier,
//! or the session and application tiers together. Session nodes exist once
//! per connected client (a *replica*); every other hosted node exists once.
//!
//! A cycle injects a set of simultaneous pulses, then evaluates affected
//! nodes in topological rank order, so every node runs at most once per cycle
//! and only after all of its same-cycle inputs are final. Network crossings
//! whose input is hosted here act as output ports: their payloads are
//! collected per replica and handed to the caller at the end of the cycle.

mod exec;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::graph::{
    BehaviorSink, DBehavior, Direction, IBehavior, NodeId, NodeKind, Op, ProgramGraph, Tier,
};
use crate::value::{ClientChange, ClientToken, Data, Thunk, Val};

pub use exec::{Executor, FireQueue, ManualExecutor, ThreadExecutor, Work};
use exec::Queued;

/// Which side of the program an engine hosts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Client,
    Server,
}

impl Role {
    pub fn hosts(self, tier: Tier) -> bool {
        match self {
            Role::Client => tier == Tier::Client,
            Role::Server => tier.is_server(),
        }
    }
}

/// Instance of a hosted node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    /// The single instance of a client or application node.
    Local,
    /// A session replica.
    Replica(u32),
}

/// A value fired into a source or timer node.
#[derive(Clone, Debug)]
pub struct Pulse {
    pub node: NodeId,
    pub value: Val,
    /// Target replica of a session node; `None` fires in every replica.
    pub client: Option<ClientToken>,
}

impl Pulse {
    pub fn new(node: NodeId, value: Val) -> Self {
        Pulse {
            node,
            value,
            client: None,
        }
    }

    pub fn for_client(mut self, client: ClientToken) -> Self {
        self.client = Some(client);
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("node {0} is not hosted by this engine")]
    ForeignNode(NodeId),
    #[error("node {0} cannot be fired directly")]
    NotAnInput(NodeId),
    #[error("node {0} pulsed twice in one cycle")]
    DuplicatePulse(NodeId),
    #[error("pulse for {node} carries {found:?}, expected {expected}")]
    TypeMismatch {
        node: NodeId,
        expected: &'static str,
        found: String,
    },
    #[error("unknown client {0}")]
    UnknownClient(ClientToken),
    #[error("client {0} is already connected")]
    DuplicateClient(ClientToken),
}

/// What a cycle observed at one node instance.
#[derive(Clone, Debug)]
pub enum Observation {
    Fired(Val),
    Stepped(Val),
}

#[derive(Clone, Debug)]
pub struct ObservedAt {
    pub node: NodeId,
    pub scope: Scope,
    pub what: Observation,
}

/// Result of one propagation cycle.
#[derive(Debug, Default)]
pub struct FireResult {
    pub cycle: u64,
    /// Event instances that fired.
    pub fired: BTreeSet<(NodeId, Scope)>,
    /// Discrete and incremental instances that stepped.
    pub stepped: BTreeSet<(NodeId, Scope)>,
    /// Output-port payloads per sending instance, in evaluation order. For
    /// incremental crossings the payload is the delta.
    pub outputs: BTreeMap<Scope, Vec<(NodeId, Val)>>,
    /// Populated only while recording is enabled.
    pub observations: Vec<ObservedAt>,
}

impl FireResult {
    pub fn fired_nodes(&self) -> BTreeSet<NodeId> {
        self.fired.iter().map(|(n, _)| *n).collect()
    }
}

/// One pending input of a cycle.
#[derive(Clone, Debug)]
pub(crate) struct Input {
    pub node: NodeId,
    pub scope: Scope,
    pub value: Val,
}

struct Replica {
    token: ClientToken,
    values: Vec<Option<Val>>,
}

#[derive(Default)]
struct CycleState {
    fired: HashMap<(NodeId, Scope), Val>,
    stepped: BTreeSet<(NodeId, Scope)>,
    deltas: HashMap<(NodeId, Scope), Val>,
    /// Values before their first step this cycle; delayed reads use them.
    pre: HashMap<(NodeId, Scope), Val>,
    memo: HashMap<(NodeId, Scope), Val>,
    queue: BTreeSet<(u32, NodeId, Scope)>,
    change: Option<ClientChange>,
    outputs: BTreeMap<Scope, Vec<(NodeId, Val)>>,
    observations: Vec<ObservedAt>,
}

/// A propagation engine for one side of a program.
pub struct Engine {
    graph: Arc<ProgramGraph>,
    role: Role,
    hosted: Vec<bool>,
    port: Vec<bool>,
    local: Vec<Option<Val>>,
    replicas: BTreeMap<u32, Replica>,
    tokens: BTreeMap<ClientToken, u32>,
    next_replica: u32,
    cycle: u64,
    sinks: HashMap<NodeId, Thunk>,
    queue: FireQueue,
    executor: Arc<dyn Executor>,
    record: bool,
    started: bool,
    cyc: CycleState,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("role", &self.role)
            .field("cycle", &self.cycle)
            .field("replicas", &self.replicas.len())
            .finish()
    }
}

impl Engine {
    pub fn new(graph: Arc<ProgramGraph>, role: Role) -> Self {
        Self::with_inputs(graph, role, &BTreeMap::new())
    }

    /// Creates an engine whose network input nodes start at the given values
    /// instead of their static initial values.
    pub fn with_inputs(
        graph: Arc<ProgramGraph>,
        role: Role,
        inputs: &BTreeMap<NodeId, Val>,
    ) -> Self {
        let n = graph.len();
        let mut hosted = vec![false; n];
        let mut port = vec![false; n];
        for node in graph.nodes() {
            hosted[node.id().index()] = role.hosts(node.tier());
            if node.is_network_crossing() {
                let dep = graph.node(node.deps()[0]);
                port[node.id().index()] = role.hosts(dep.tier()) && !role.hosts(node.tier());
            }
        }
        let mut local: Vec<Option<Val>> = vec![None; n];
        for &id in graph.topological_order() {
            let node = graph.node(id);
            if !hosted[id.index()] || !node.kind().has_value() || node.tier() == Tier::Session {
                continue;
            }
            let v = match inputs.get(&id) {
                Some(v) if node.is_network_crossing() => Some(v.clone()),
                _ if node.is_network_crossing() => graph.static_initial(id).cloned(),
                _ if matches!(node.op, Op::Cross(_)) => graph.static_initial(id).cloned(),
                _ => graph.initial_from(id, |d| {
                    local[d.index()]
                        .clone()
                        .expect("dependency initialized in topological order")
                }),
            };
            local[id.index()] = v;
        }
        Engine {
            graph,
            role,
            hosted,
            port,
            local,
            replicas: BTreeMap::new(),
            tokens: BTreeMap::new(),
            next_replica: 0,
            cycle: 0,
            sinks: HashMap::new(),
            queue: FireQueue::new(),
            executor: Arc::new(ThreadExecutor),
            record: false,
            started: false,
            cyc: CycleState::default(),
        }
    }

    pub fn graph(&self) -> &Arc<ProgramGraph> {
        &self.graph
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Number of the last completed cycle; 0 before the first.
    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn hosts(&self, id: NodeId) -> bool {
        self.hosted.get(id.index()).copied().unwrap_or(false)
    }

    /// Whether `id` is a network crossing whose input runs here.
    pub fn is_output_port(&self, id: NodeId) -> bool {
        self.port.get(id.index()).copied().unwrap_or(false)
    }

    pub fn queue(&self) -> FireQueue {
        self.queue.clone()
    }

    pub fn set_queue(&mut self, queue: FireQueue) {
        self.queue = queue;
    }

    pub fn set_executor(&mut self, executor: Arc<dyn Executor>) {
        self.executor = executor;
    }

    /// Enables collection of per-node observations in [`FireResult`].
    pub fn set_recording(&mut self, record: bool) {
        self.record = record;
    }

    /// Sets or clears the poll function of a sink.
    pub fn set_sink<A: Data>(
        &mut self,
        sink: &BehaviorSink<A>,
        poll: Option<impl Fn() -> A + Send + Sync + 'static>,
    ) {
        match poll {
            Some(f) => {
                self.sinks
                    .insert(sink.id(), Arc::new(move || Val::new(f())));
            }
            None => {
                self.sinks.remove(&sink.id());
            }
        }
    }

    /// Runs the installers of hosted effect sources. Replicas created later
    /// run their session installers on creation.
    pub fn start(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        let graph = self.graph.clone();
        for node in graph.nodes() {
            if self.hosts(node.id()) && node.tier() != Tier::Session {
                self.install(node.id(), Scope::Local);
            }
        }
        let scopes: Vec<u32> = self.replicas.keys().copied().collect();
        for r in scopes {
            self.install_replica(r);
        }
    }

    fn install(&self, id: NodeId, scope: Scope) {
        if let Op::Source {
            installer: Some(install),
        } = &self.graph.node(id).op
        {
            let queue = self.queue.clone();
            install(Arc::new(move |v| queue.push_scoped(id, scope, v)));
        }
    }

    fn install_replica(&self, r: u32) {
        for node in self.graph.nodes() {
            if node.tier() == Tier::Session {
                self.install(node.id(), Scope::Replica(r));
            }
        }
    }

    /// Hosted timers with their periods.
    pub fn timers(&self) -> Vec<(NodeId, Duration)> {
        self.graph
            .nodes()
            .filter(|n| self.hosts(n.id()))
            .filter_map(|n| n.timer_period().map(|p| (n.id(), p)))
            .collect()
    }

    pub fn clients(&self) -> impl Iterator<Item = &ClientToken> {
        self.tokens.keys()
    }

    pub fn scope_of(&self, client: &ClientToken) -> Option<Scope> {
        self.tokens.get(client).map(|r| Scope::Replica(*r))
    }

    pub fn client_of(&self, scope: Scope) -> Option<&ClientToken> {
        match scope {
            Scope::Local => None,
            Scope::Replica(r) => self.replicas.get(&r).map(|x| &x.token),
        }
    }

    /// All live instances of a hosted node.
    pub fn scopes_of(&self, id: NodeId) -> Vec<Scope> {
        if !self.hosts(id) {
            return Vec::new();
        }
        if self.graph.node(id).tier() == Tier::Session {
            self.replicas.keys().map(|r| Scope::Replica(*r)).collect()
        } else {
            vec![Scope::Local]
        }
    }

    /// Current value of a discrete or incremental instance.
    pub fn value_at(&self, id: NodeId, scope: Scope) -> Option<&Val> {
        if !self.hosts(id) {
            return None;
        }
        match scope {
            Scope::Local => self.local[id.index()].as_ref(),
            Scope::Replica(r) => self.replicas.get(&r)?.values[id.index()].as_ref(),
        }
    }

    /// Current value of a non-replicated discrete behavior.
    pub fn value<A: Data>(&self, db: &DBehavior<A>) -> A {
        self.value_at(db.id(), Scope::Local)
            .unwrap_or_else(|| panic!("{} has no local value on this engine", db.id()))
            .get::<A>()
    }

    pub fn ivalue<A: Data, DA: Data>(&self, ib: &IBehavior<A, DA>) -> A {
        self.value_at(ib.id(), Scope::Local)
            .unwrap_or_else(|| panic!("{} has no local value on this engine", ib.id()))
            .get::<A>()
    }

    /// Current value of a session discrete behavior in one replica.
    pub fn value_for<A: Data>(&self, db: &DBehavior<A>, client: &ClientToken) -> Option<A> {
        let scope = self.scope_of(client)?;
        self.value_at(db.id(), scope).map(Val::get::<A>)
    }

    /// Values of every hosted discrete and incremental instance, for
    /// recording the state before the first cycle.
    pub fn snapshot_values(&self) -> Vec<ObservedAt> {
        let mut out = Vec::new();
        for node in self.graph.nodes() {
            if !node.kind().has_value() {
                continue;
            }
            for scope in self.scopes_of(node.id()) {
                if let Some(v) = self.value_at(node.id(), scope) {
                    out.push(ObservedAt {
                        node: node.id(),
                        scope,
                        what: Observation::Stepped(v.clone()),
                    });
                }
            }
        }
        out
    }

    /// Reads any hosted node outside a cycle. Non-discrete behaviors are
    /// evaluated fresh.
    pub fn read(&mut self, id: NodeId, scope: Scope) -> Val {
        self.cyc.memo.clear();
        let v = self.read_node(id, scope);
        self.cyc.memo.clear();
        v
    }

    /// Runs one cycle with simultaneous external pulses.
    pub fn fire(&mut self, pulses: &[Pulse]) -> Result<FireResult, EngineError> {
        let mut inputs = Vec::new();
        for p in pulses {
            self.resolve_pulse(p, &mut inputs)?;
        }
        let mut seen = BTreeSet::new();
        for i in &inputs {
            if !seen.insert((i.node, i.scope)) {
                return Err(EngineError::DuplicatePulse(i.node));
            }
        }
        Ok(self.run_cycle(inputs, Vec::new(), None))
    }

    fn resolve_pulse(&self, p: &Pulse, inputs: &mut Vec<Input>) -> Result<(), EngineError> {
        if !self.hosts(p.node) {
            return Err(EngineError::ForeignNode(p.node));
        }
        let node = self.graph.node(p.node);
        if !matches!(node.op, Op::Source { .. } | Op::Timer { .. }) {
            return Err(EngineError::NotAnInput(p.node));
        }
        if p.value.type_id() != node.value_type().id {
            return Err(EngineError::TypeMismatch {
                node: p.node,
                expected: node.value_type().name,
                found: p.value.render(),
            });
        }
        let scopes = if node.tier() == Tier::Session {
            match &p.client {
                Some(c) => vec![self
                    .scope_of(c)
                    .ok_or_else(|| EngineError::UnknownClient(c.clone()))?],
                None => self.scopes_of(p.node),
            }
        } else {
            vec![Scope::Local]
        };
        inputs.extend(scopes.into_iter().map(|scope| Input {
            node: p.node,
            scope,
            value: p.value.clone(),
        }));
        Ok(())
    }

    /// Runs one cycle for the oldest queued stimulus, if any. Stimuli whose
    /// target no longer exists are dropped.
    pub fn run_queued(&mut self) -> Option<FireResult> {
        loop {
            let item = self.queue.pop()?;
            let inputs = match item {
                Queued::Pulse(p) => {
                    let mut inputs = Vec::new();
                    match self.resolve_pulse(&p, &mut inputs) {
                        Ok(()) => inputs,
                        Err(e) => {
                            log::warn!("dropping queued pulse: {e}");
                            continue;
                        }
                    }
                }
                Queued::Scoped { node, scope, value } => {
                    if let Scope::Replica(r) = scope {
                        if !self.replicas.contains_key(&r) {
                            log::debug!("dropping pulse for {node} of a closed replica");
                            continue;
                        }
                    }
                    vec![Input { node, scope, value }]
                }
            };
            return Some(self.run_cycle(inputs, Vec::new(), None));
        }
    }

    /// Creates a replica for a new client and initializes its session nodes.
    ///
    /// Application-to-session crossings take the application's current
    /// values. Client-to-session crossings take the value the client tier
    /// computes at startup, given session-to-client values from this
    /// replica; the client side is evaluated here for that purpose only.
    pub(crate) fn add_replica(&mut self, token: ClientToken) -> Result<Scope, EngineError> {
        if self.tokens.contains_key(&token) {
            return Err(EngineError::DuplicateClient(token));
        }
        let n = self.graph.len();
        let mut values: Vec<Option<Val>> = vec![None; n];
        let mut shadow: Vec<Option<Val>> = vec![None; n];
        let graph = self.graph.clone();
        let need = |v: &[Option<Val>], d: NodeId| {
            v[d.index()]
                .clone()
                .expect("dependency initialized in topological order")
        };
        for &id in graph.topological_order() {
            let node = graph.node(id);
            if !node.kind().has_value() {
                continue;
            }
            match node.tier() {
                Tier::Session => {
                    let v = match (&node.op, node.direction()) {
                        (Op::SessionClient, _) => Some(Val::new(token.clone())),
                        (_, Some(Direction::AppToSession)) => {
                            self.local[node.deps()[0].index()].clone()
                        }
                        (_, Some(Direction::ClientToSession)) => shadow[node.deps()[0].index()]
                            .clone()
                            .or_else(|| graph.static_initial(id).cloned()),
                        _ => graph.initial_from(id, |d| need(&values, d)),
                    };
                    values[id.index()] = v;
                }
                Tier::Client => {
                    let v = match node.direction() {
                        Some(Direction::SessionToClient) => values[node.deps()[0].index()].clone(),
                        _ => graph.initial_from(id, |d| need(&shadow, d)),
                    };
                    shadow[id.index()] = v;
                }
                Tier::Application => {}
            }
        }
        let r = self.next_replica;
        self.next_replica += 1;
        self.replicas.insert(
            r,
            Replica {
                token: token.clone(),
                values,
            },
        );
        self.tokens.insert(token, r);
        if self.started {
            self.install_replica(r);
        }
        Ok(Scope::Replica(r))
    }

    pub(crate) fn remove_replica(&mut self, token: &ClientToken) -> Option<Scope> {
        let r = self.tokens.remove(token)?;
        self.replicas.remove(&r);
        Some(Scope::Replica(r))
    }

    /// Runs one propagation cycle.
    ///
    /// `inputs` are injected as simultaneous pulses (network inputs step or
    /// fold); `extra` instances are evaluated even if no input reaches them;
    /// `change` is the lifecycle change handled by this cycle.
    pub(crate) fn run_cycle(
        &mut self,
        inputs: Vec<Input>,
        extra: Vec<(NodeId, Scope)>,
        change: Option<ClientChange>,
    ) -> FireResult {
        self.cycle += 1;
        self.cyc = CycleState {
            change,
            ..Default::default()
        };
        for input in inputs {
            self.inject(input);
        }
        for (id, scope) in extra {
            let rank = self.graph.rank(id);
            self.cyc.queue.insert((rank, id, scope));
        }
        while let Some((_, id, scope)) = self.cyc.queue.pop_first() {
            self.eval(id, scope);
        }
        let cyc = std::mem::take(&mut self.cyc);
        FireResult {
            cycle: self.cycle,
            fired: cyc.fired.into_keys().collect(),
            stepped: cyc.stepped,
            outputs: cyc.outputs,
            observations: cyc.observations,
        }
    }

    fn inject(&mut self, input: Input) {
        let Input { node, scope, value } = input;
        if let Scope::Replica(r) = scope {
            if !self.replicas.contains_key(&r) {
                return;
            }
        }
        let n = self.graph.node(node);
        match n.kind() {
            NodeKind::Event => self.fire_node(node, scope, value),
            NodeKind::DBehavior => self.step(node, scope, value),
            NodeKind::IBehavior => {
                let fold = n.fold.clone().expect("incremental node has a fold");
                let next = fold(self.slot(node, scope), &value);
                self.step_delta(node, scope, next, value);
            }
            NodeKind::Behavior => {}
        }
    }

    fn slot(&self, id: NodeId, scope: Scope) -> &Val {
        let v = match scope {
            Scope::Local => self.local[id.index()].as_ref(),
            Scope::Replica(r) => self.replicas[&r].values[id.index()].as_ref(),
        };
        v.unwrap_or_else(|| panic!("{id} has no value in {scope:?}"))
    }

    fn fired(&self, id: NodeId, scope: Scope) -> Option<Val> {
        self.cyc.fired.get(&(id, scope)).cloned()
    }

    fn stepped(&self, id: NodeId, scope: Scope) -> bool {
        self.cyc.stepped.contains(&(id, scope))
    }

    fn fire_node(&mut self, id: NodeId, scope: Scope, v: Val) {
        if self.record {
            self.cyc.observations.push(ObservedAt {
                node: id,
                scope,
                what: Observation::Fired(v.clone()),
            });
        }
        self.cyc.fired.insert((id, scope), v);
        self.notify(id, scope);
    }

    fn step(&mut self, id: NodeId, scope: Scope, v: Val) {
        if self.record {
            self.cyc.observations.push(ObservedAt {
                node: id,
                scope,
                what: Observation::Stepped(v.clone()),
            });
        }
        let slot = match scope {
            Scope::Local => &mut self.local[id.index()],
            Scope::Replica(r) => {
                &mut self
                    .replicas
                    .get_mut(&r)
                    .expect("replica exists during its cycle")
                    .values[id.index()]
            }
        };
        let old = slot.replace(v).expect("stepped node has a value");
        self.cyc.pre.entry((id, scope)).or_insert(old);
        self.cyc.stepped.insert((id, scope));
        self.notify(id, scope);
    }

    fn step_delta(&mut self, id: NodeId, scope: Scope, v: Val, delta: Val) {
        self.cyc.deltas.insert((id, scope), delta);
        self.step(id, scope, v);
    }

    fn notify(&mut self, id: NodeId, scope: Scope) {
        let graph = self.graph.clone();
        for &d in graph.dependents(id) {
            let dn = graph.node(d);
            if dn.kind() == NodeKind::Behavior {
                continue;
            }
            let rank = graph.rank(d);
            if self.port[d.index()] {
                self.cyc.queue.insert((rank, d, scope));
                continue;
            }
            if !self.hosted[d.index()] {
                continue;
            }
            match dn.direction() {
                Some(Direction::AppToSession) => {
                    for r in self.replicas.keys() {
                        self.cyc.queue.insert((rank, d, Scope::Replica(*r)));
                    }
                }
                Some(Direction::SessionToApp) => {
                    self.cyc.queue.insert((rank, d, Scope::Local));
                }
                _ => {
                    self.cyc.queue.insert((rank, d, scope));
                }
            }
        }
    }

    fn emit(&mut self, id: NodeId, scope: Scope, payload: Val) {
        self.cyc
            .outputs
            .entry(scope)
            .or_default()
            .push((id, payload));
    }

    fn replica_scopes(&self) -> Vec<(Scope, ClientToken)> {
        self.replicas
            .iter()
            .map(|(r, x)| (Scope::Replica(*r), x.token.clone()))
            .collect()
    }

    fn eval(&mut self, id: NodeId, scope: Scope) {
        let graph = self.graph.clone();
        let node = graph.node(id);
        let dep = |i: usize| node.deps()[i];
        match &node.op {
            Op::Source { .. }
            | Op::Timer { .. }
            | Op::ClientChanges
            | Op::ExecuteErrors
            | Op::Constant(_)
            | Op::SessionClient
            | Op::Poll(_)
            | Op::Sink { .. }
            | Op::Delayed => {}
            Op::Execute { run, errors } => {
                if let Some(task) = self.fired(dep(0), scope) {
                    self.submit(run(&task), id, *errors, scope);
                }
            }
            Op::MapE(f) => {
                if let Some(v) = self.fired(dep(0), scope) {
                    self.fire_node(id, scope, f(&v));
                }
            }
            Op::Snapshot(f) => {
                if let Some(ev) = self.fired(dep(1), scope) {
                    let b = self.read_node(dep(0), scope);
                    self.fire_node(id, scope, f(&b, &ev));
                }
            }
            Op::Changes => {
                if self.stepped(dep(0), scope) {
                    let v = self.slot(dep(0), scope).clone();
                    self.fire_node(id, scope, v);
                }
            }
            Op::Deltas => {
                if let Some(d) = self.cyc.deltas.get(&(dep(0), scope)).cloned() {
                    self.fire_node(id, scope, d);
                }
            }
            Op::Fold { f, .. } => {
                if let Some(v) = self.fired(dep(0), scope) {
                    let next = f(self.slot(id, scope), &v);
                    self.step(id, scope, next);
                }
            }
            Op::Hold { .. } => {
                if let Some(v) = self.fired(dep(0), scope) {
                    self.step(id, scope, v);
                }
            }
            Op::MapD(f) => {
                if self.stepped(dep(0), scope) {
                    let next = f(self.slot(dep(0), scope));
                    self.step(id, scope, next);
                }
            }
            Op::Map2(f) => {
                if self.stepped(dep(0), scope) || self.stepped(dep(1), scope) {
                    let next = f(self.slot(dep(0), scope), self.slot(dep(1), scope));
                    self.step(id, scope, next);
                }
            }
            Op::SnapshotD(f) => {
                if self.stepped(dep(1), scope) {
                    let next = f(self.slot(dep(0), scope), self.slot(dep(1), scope));
                    self.step(id, scope, next);
                }
            }
            Op::ToDb | Op::Forward => {
                if self.stepped(dep(0), scope) {
                    let v = self.slot(dep(0), scope).clone();
                    self.step(id, scope, v);
                }
            }
            Op::FoldI { f, .. } => {
                if let Some(d) = self.fired(dep(0), scope) {
                    let next = f(self.slot(id, scope), &d);
                    self.step_delta(id, scope, next, d);
                }
            }
            Op::AsIb => {
                if self.stepped(dep(0), scope) {
                    let v = self.slot(dep(0), scope).clone();
                    self.step_delta(id, scope, v.clone(), v);
                }
            }
            Op::Cross(c) => {
                if self.port[id.index()] {
                    let payload = match node.kind() {
                        NodeKind::Event => self.fired(dep(0), scope),
                        NodeKind::DBehavior => self
                            .stepped(dep(0), scope)
                            .then(|| self.slot(dep(0), scope).clone()),
                        NodeKind::IBehavior => self.cyc.deltas.get(&(dep(0), scope)).cloned(),
                        NodeKind::Behavior => None,
                    };
                    if let Some(p) = payload {
                        self.emit(id, scope, p);
                    }
                    return;
                }
                match c.dir {
                    Direction::AppToSession => self.eval_app_to_session(id, scope),
                    Direction::SessionToApp => self.eval_session_to_app(id, c),
                    _ => {}
                }
            }
        }
    }

    fn eval_app_to_session(&mut self, id: NodeId, scope: Scope) {
        let node = self.graph.node(id);
        let (kind, src) = (node.kind(), node.deps()[0]);
        match kind {
            NodeKind::Event => {
                if let Some(v) = self.fired(src, Scope::Local) {
                    self.fire_node(id, scope, v);
                }
            }
            NodeKind::DBehavior => {
                if self.stepped(src, Scope::Local) {
                    let v = self.slot(src, Scope::Local).clone();
                    self.step(id, scope, v);
                }
            }
            NodeKind::IBehavior => {
                if let Some(d) = self.cyc.deltas.get(&(src, Scope::Local)).cloned() {
                    let v = self.slot(src, Scope::Local).clone();
                    self.step_delta(id, scope, v, d);
                }
            }
            NodeKind::Behavior => {}
        }
    }

    fn eval_session_to_app(&mut self, id: NodeId, c: &crate::graph::Crossing) {
        let node = self.graph.node(id);
        let (kind, src) = (node.kind(), node.deps()[0]);
        let gather = c.gather.as_ref().expect("session-to-app crossing gathers");
        let replicas = self.replica_scopes();
        match kind {
            NodeKind::Event => {
                let hits: Vec<(ClientToken, Val)> = replicas
                    .into_iter()
                    .filter_map(|(s, t)| self.fired(src, s).map(|v| (t, v)))
                    .collect();
                if !hits.is_empty() {
                    self.fire_node(id, Scope::Local, gather(hits));
                }
            }
            NodeKind::DBehavior => {
                let any = replicas.iter().any(|(s, _)| self.stepped(src, *s));
                if any || self.cyc.change.is_some() {
                    let all = replicas
                        .into_iter()
                        .map(|(s, t)| (t, self.slot(src, s).clone()))
                        .collect();
                    self.step(id, Scope::Local, gather(all));
                }
            }
            NodeKind::IBehavior => {
                let deltas: Vec<(ClientToken, Val)> = replicas
                    .iter()
                    .filter_map(|(s, t)| {
                        self.cyc
                            .deltas
                            .get(&(src, *s))
                            .map(|d| (t.clone(), d.clone()))
                    })
                    .collect();
                let change = self.cyc.change.clone();
                if !deltas.is_empty() || change.is_some() {
                    let gd = c
                        .gather_delta
                        .as_ref()
                        .expect("incremental session-to-app crossing gathers deltas");
                    let delta = gd(deltas, change);
                    let all = replicas
                        .into_iter()
                        .map(|(s, t)| (t, self.slot(src, s).clone()))
                        .collect();
                    self.step_delta(id, Scope::Local, gather(all), delta);
                }
            }
            NodeKind::Behavior => {}
        }
    }

    fn read_node(&mut self, id: NodeId, scope: Scope) -> Val {
        let graph = self.graph.clone();
        let node = graph.node(id);
        if node.kind().has_value() {
            return self.slot(id, scope).clone();
        }
        if let Some(v) = self.cyc.memo.get(&(id, scope)) {
            return v.clone();
        }
        let v = match &node.op {
            Op::Poll(f) => f(),
            Op::Sink { default } => match self.sinks.get(&id) {
                Some(f) => f(),
                None => default.clone(),
            },
            Op::Delayed => {
                let target = node.deps()[0];
                match self.cyc.pre.get(&(target, scope)) {
                    Some(v) => v.clone(),
                    None => self.slot(target, scope).clone(),
                }
            }
            Op::Cross(c) if c.dir == Direction::AppToSession => {
                self.read_node(node.deps()[0], Scope::Local)
            }
            Op::Cross(c) if c.dir == Direction::SessionToApp => {
                let src = node.deps()[0];
                let all = self
                    .replica_scopes()
                    .into_iter()
                    .map(|(s, t)| (t, self.read_node(src, s)))
                    .collect();
                c.gather.as_ref().expect("session-to-app crossing gathers")(all)
            }
            _ => panic!("{id} ({}) cannot be read as a behavior", node.op_name()),
        };
        self.cyc.memo.insert((id, scope), v.clone());
        v
    }

    fn submit(&self, job: crate::graph::Job, node: NodeId, errors: Option<NodeId>, scope: Scope) {
        let queue = self.queue.clone();
        self.executor.spawn(Box::new(move || match job() {
            Ok(v) => queue.push_scoped(node, scope, v),
            Err(e) => match errors {
                Some(err_node) => queue.push_scoped(err_node, scope, Val::new(e)),
                None => log::warn!("task for {node} failed: {e}"),
            },
        }));
    }
}

#[cfg(test)]
mod tests;
