use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::marker::PhantomData;
use std::ops::Deref;
use std::rc::Rc;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use super::{
    CrossCodecs, Crossing, Direction, GraphError, GraphNode, NodeId, NodeKind, Op, ProgramGraph,
    Tier,
};
use crate::codec::{Codec, CodecError, CodecRegistry};
use crate::engine::Pulse;
use crate::value::{ClientChange, ClientToken, Data, Fn2, Task, Val, ValueType};

#[derive(Default)]
struct BuilderState {
    nodes: Vec<GraphNode>,
    codecs: CodecRegistry,
    main_views: Vec<NodeId>,
    client_changes: Option<NodeId>,
    clients: Option<NodeId>,
    session_client: Option<NodeId>,
    /// Session-to-application incremental folds need the session node's
    /// initial value, known only after finalization.
    pending_initials: Vec<(NodeId, Arc<OnceLock<Val>>)>,
}

/// Records a multi-tier program.
///
/// Handles returned by the builder share it, so combinators are available as
/// methods on the handles themselves. Construction is single-threaded; the
/// finalized [`ProgramGraph`] is immutable and `Send + Sync`.
#[derive(Clone)]
pub struct ProgramBuilder {
    state: Rc<RefCell<BuilderState>>,
}

impl Default for ProgramBuilder {
    fn default() -> Self {
        Self::new()
    }
}

struct NodeSpec {
    tier: Tier,
    kind: NodeKind,
    op: Op,
    deps: Vec<NodeId>,
    ty: ValueType,
    delta_ty: Option<ValueType>,
    fold: Option<Fn2>,
}

impl NodeSpec {
    fn new<A: Data>(tier: Tier, kind: NodeKind, op: Op, deps: Vec<NodeId>) -> Self {
        NodeSpec {
            tier,
            kind,
            op,
            deps,
            ty: ValueType::of::<A>(),
            delta_ty: None,
            fold: None,
        }
    }

    fn incremental<DA: Data>(mut self, fold: Fn2) -> Self {
        self.delta_ty = Some(ValueType::of::<DA>());
        self.fold = Some(fold);
        self
    }
}

fn keep_newest() -> Fn2 {
    Arc::new(|_, new| new.clone())
}

fn fn1<A: Data, B: Data>(f: impl Fn(&A) -> B + Send + Sync + 'static) -> crate::value::Fn1 {
    Arc::new(move |a| Val::new(f(a.downcast_ref::<A>())))
}

fn fn2<A: Data, B: Data, C: Data>(f: impl Fn(&A, &B) -> C + Send + Sync + 'static) -> Fn2 {
    Arc::new(move |a, b| Val::new(f(a.downcast_ref::<A>(), b.downcast_ref::<B>())))
}

fn gather<A: Data>() -> super::Gather {
    Arc::new(|entries| {
        let map: BTreeMap<ClientToken, A> = entries
            .into_iter()
            .map(|(c, v)| (c, v.get::<A>()))
            .collect();
        Val::new(map)
    })
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::with_codecs(CodecRegistry::with_defaults())
    }

    pub fn with_codecs(codecs: CodecRegistry) -> Self {
        ProgramBuilder {
            state: Rc::new(RefCell::new(BuilderState {
                codecs,
                ..Default::default()
            })),
        }
    }

    pub fn register_codec(&self, codec: Codec) -> Result<(), CodecError> {
        self.state.borrow_mut().codecs.register(codec)
    }

    pub fn node_count(&self) -> usize {
        self.state.borrow().nodes.len()
    }

    fn push(&self, spec: NodeSpec) -> NodeId {
        let mut st = self.state.borrow_mut();
        let id = NodeId(st.nodes.len() as u32);
        st.nodes.push(GraphNode {
            id,
            tier: spec.tier,
            kind: spec.kind,
            op: spec.op,
            deps: spec.deps,
            ty: spec.ty,
            delta_ty: spec.delta_ty,
            fold: spec.fold,
            xhr_assert: false,
            probe: None,
            label: None,
        });
        id
    }

    fn fold_of(&self, id: NodeId) -> Fn2 {
        self.state.borrow().nodes[id.index()]
            .fold
            .clone()
            .expect("incremental node without fold function")
    }

    fn with_node(&self, id: NodeId, f: impl FnOnce(&mut GraphNode)) {
        f(&mut self.state.borrow_mut().nodes[id.index()]);
    }

    fn event<A: Data>(&self, spec: NodeSpec) -> Event<A> {
        let tier = spec.tier;
        Event {
            h: Handle::new(self.clone(), self.push(spec), tier),
            _ty: PhantomData,
        }
    }

    fn dbehavior<A: Data>(&self, spec: NodeSpec) -> DBehavior<A> {
        let tier = spec.tier;
        DBehavior {
            h: Handle::new(self.clone(), self.push(spec), tier),
            _ty: PhantomData,
        }
    }

    fn ibehavior<A: Data, DA: Data>(&self, spec: NodeSpec) -> IBehavior<A, DA> {
        let tier = spec.tier;
        IBehavior {
            h: Handle::new(self.clone(), self.push(spec), tier),
            _ty: PhantomData,
        }
    }

    fn behavior<A: Data>(&self, spec: NodeSpec) -> Behavior<A> {
        let tier = spec.tier;
        Behavior {
            h: Handle::new(self.clone(), self.push(spec), tier),
            _ty: PhantomData,
        }
    }

    /// An open event fired from outside the program.
    pub fn event_source<A: Data>(&self, tier: Tier) -> EventSource<A> {
        EventSource {
            event: self.event(NodeSpec::new::<A>(
                tier,
                NodeKind::Event,
                Op::Source { installer: None },
                vec![],
            )),
        }
    }

    /// An event source whose `install` function runs once when an engine
    /// hosting it starts (once per replica for session sources). `install`
    /// receives a callback that queues a fire.
    pub fn source_with_engine_effect<A: Data>(
        &self,
        tier: Tier,
        install: impl Fn(Arc<dyn Fn(A) + Send + Sync>) + Send + Sync + 'static,
    ) -> EventSource<A> {
        let installer: super::Installer = Arc::new(move |fire: super::Firer| {
            install(Arc::new(move |a: A| fire(Val::new(a))));
        });
        EventSource {
            event: self.event(NodeSpec::new::<A>(
                tier,
                NodeKind::Event,
                Op::Source {
                    installer: Some(installer),
                },
                vec![],
            )),
        }
    }

    /// An engine-driven timer firing the elapsed milliseconds every `period`.
    pub fn timer(&self, tier: Tier, period: Duration) -> Event<u64> {
        self.event(NodeSpec::new::<u64>(
            tier,
            NodeKind::Event,
            Op::Timer { period },
            vec![],
        ))
    }

    /// Client-side interval timer.
    pub fn interval(&self, period: Duration) -> Event<u64> {
        self.timer(Tier::Client, period)
    }

    /// Server-driven tick. On the session tier it fires in every replica in
    /// the same cycle.
    pub fn server_tick(&self, tier: Tier, period: Duration) -> Event<u64> {
        debug_assert!(tier.is_server());
        self.timer(tier, period)
    }

    pub fn constant<A: Data>(&self, tier: Tier, value: A) -> DBehavior<A> {
        self.dbehavior(NodeSpec::new::<A>(
            tier,
            NodeKind::DBehavior,
            Op::Constant(Val::new(value)),
            vec![],
        ))
    }

    /// A behavior evaluated at most once per propagation cycle.
    pub fn from_poll<A: Data>(
        &self,
        tier: Tier,
        f: impl Fn() -> A + Send + Sync + 'static,
    ) -> Behavior<A> {
        self.behavior(NodeSpec::new::<A>(
            tier,
            NodeKind::Behavior,
            Op::Poll(Arc::new(move || Val::new(f()))),
            vec![],
        ))
    }

    /// A polled behavior whose poll function is set by the hosting engine;
    /// it reads `default` while none is set.
    pub fn sink<A: Data>(&self, tier: Tier, default: A) -> BehaviorSink<A> {
        BehaviorSink {
            behavior: self.behavior(NodeSpec::new::<A>(
                tier,
                NodeKind::Behavior,
                Op::Sink {
                    default: Val::new(default),
                },
                vec![],
            )),
        }
    }

    /// The session's own connection token.
    pub fn session_client(&self) -> DBehavior<ClientToken> {
        if let Some(id) = self.state.borrow().session_client {
            return DBehavior {
                h: Handle::new(self.clone(), id, Tier::Session),
                _ty: PhantomData,
            };
        }
        let db = self.dbehavior::<ClientToken>(NodeSpec::new::<ClientToken>(
            Tier::Session,
            NodeKind::DBehavior,
            Op::SessionClient,
            vec![],
        ));
        self.state.borrow_mut().session_client = Some(db.id());
        db
    }

    /// Application event firing on every connect and disconnect.
    pub fn client_changes(&self) -> Event<ClientChange> {
        if let Some(id) = self.state.borrow().client_changes {
            return Event {
                h: Handle::new(self.clone(), id, Tier::Application),
                _ty: PhantomData,
            };
        }
        let ev = self.event::<ClientChange>(NodeSpec::new::<ClientChange>(
            Tier::Application,
            NodeKind::Event,
            Op::ClientChanges,
            vec![],
        ));
        self.state.borrow_mut().client_changes = Some(ev.id());
        ev
    }

    /// The set of live clients, folded from [`client_changes`](Self::client_changes).
    pub fn clients(&self) -> IBehavior<BTreeSet<ClientToken>, ClientChange> {
        if let Some(id) = self.state.borrow().clients {
            return IBehavior {
                h: Handle::new(self.clone(), id, Tier::Application),
                _ty: PhantomData,
            };
        }
        let ib = self
            .client_changes()
            .fold_i(BTreeSet::new(), |set: &BTreeSet<ClientToken>, ch| ch.apply(set));
        self.state.borrow_mut().clients = Some(ib.id());
        ib
    }

    /// A discrete behavior defined later, for recursive definitions.
    pub fn forward<A: Data>(&self, tier: Tier) -> ForwardDBehavior<A> {
        ForwardDBehavior {
            db: self.dbehavior(NodeSpec::new::<A>(
                tier,
                NodeKind::DBehavior,
                Op::Forward,
                vec![],
            )),
        }
    }

    /// Declares the client behavior rendered by the host.
    pub fn set_main_view<V: Data>(&self, view: &DBehavior<V>) {
        self.state.borrow_mut().main_views.push(view.id());
    }

    /// Marks a boolean behavior as a glitch probe: test harnesses fail when
    /// it is ever observed false.
    pub fn probe(&self, name: &str, predicate: &DBehavior<bool>) {
        let name = name.to_string();
        self.with_node(predicate.id(), |n| n.probe = Some(name));
    }

    /// Validates the program and freezes it.
    pub fn finalize(&self) -> Result<Arc<ProgramGraph>, GraphError> {
        self.finalize_inner(true)
    }

    /// Like [`finalize`](Self::finalize) without requiring a main view; for
    /// programs driven directly through an [`Engine`](crate::engine::Engine).
    pub fn finalize_standalone(&self) -> Result<Arc<ProgramGraph>, GraphError> {
        self.finalize_inner(false)
    }

    fn finalize_inner(&self, require_view: bool) -> Result<Arc<ProgramGraph>, GraphError> {
        let st = self.state.borrow();
        let graph = ProgramGraph::finalize(
            st.nodes.clone(),
            st.main_views.clone(),
            st.codecs.clone(),
            require_view,
        )?;
        for (id, slot) in &st.pending_initials {
            if let Some(v) = graph.static_initial(*id) {
                let _ = slot.set(v.clone());
            }
        }
        Ok(Arc::new(graph))
    }
}

#[derive(Clone)]
struct Handle {
    b: ProgramBuilder,
    id: NodeId,
    tier: Tier,
}

impl Handle {
    fn new(b: ProgramBuilder, id: NodeId, tier: Tier) -> Self {
        Handle { b, id, tier }
    }
}

macro_rules! common_handle_methods {
    () => {
        pub fn id(&self) -> NodeId {
            self.h.id
        }

        pub fn tier(&self) -> Tier {
            self.h.tier
        }

        pub fn builder(&self) -> &ProgramBuilder {
            &self.h.b
        }

        /// Attaches a diagnostic label.
        pub fn label(self, label: &str) -> Self {
            let label = label.to_string();
            self.h.b.with_node(self.h.id, |n| n.label = Some(label));
            self
        }

        /// Requires this node to be computable in request/response mode;
        /// server start fails otherwise.
        pub fn assert_xhr(self) -> Self {
            self.h.b.with_node(self.h.id, |n| n.xhr_assert = true);
            self
        }
    };
}

/// A stream of pulses, at most one per propagation cycle.
pub struct Event<A> {
    h: Handle,
    _ty: PhantomData<fn() -> A>,
}

/// A value read on demand, without change notifications.
pub struct Behavior<A> {
    h: Handle,
    _ty: PhantomData<fn() -> A>,
}

/// A step function changing only at cycle boundaries.
pub struct DBehavior<A> {
    h: Handle,
    _ty: PhantomData<fn() -> A>,
}

/// A reified fold: a discrete behavior that also exposes its deltas.
pub struct IBehavior<A, DA> {
    h: Handle,
    _ty: PhantomData<fn() -> (A, DA)>,
}

macro_rules! handle_impls {
    ($name:ident < $($p:ident),+ >) => {
        impl<$($p),+> Clone for $name<$($p),+> {
            fn clone(&self) -> Self {
                $name { h: self.h.clone(), _ty: PhantomData }
            }
        }

        impl<$($p),+> std::fmt::Debug for $name<$($p),+> {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}({}, {:?})", stringify!($name), self.h.id, self.h.tier)
            }
        }
    };
}

handle_impls!(Event<A>);
handle_impls!(Behavior<A>);
handle_impls!(DBehavior<A>);
handle_impls!(IBehavior<A, DA>);

impl Handle {
    fn spec<A: Data>(&self, kind: NodeKind, op: Op, deps: Vec<NodeId>) -> NodeSpec {
        NodeSpec::new::<A>(self.tier, kind, op, deps)
    }

    fn cross<A: Data>(&self, kind: NodeKind, dir: Direction, codecs: CrossCodecs) -> NodeSpec {
        NodeSpec::new::<A>(
            dir.target(),
            kind,
            Op::Cross(Box::new(Crossing {
                dir,
                codecs,
                gather: None,
                gather_delta: None,
            })),
            vec![self.id],
        )
    }

    fn snapshot<A: Data, B: Data, C: Data>(
        &self,
        ev: &Event<B>,
        f: impl Fn(&A, &B) -> C + Send + Sync + 'static,
    ) -> Event<C> {
        self.b.event(self.spec::<C>(
            NodeKind::Event,
            Op::Snapshot(fn2(f)),
            vec![self.id, ev.id()],
        ))
    }

    fn to_app_gather<A: Data>(&self, kind: NodeKind) -> NodeSpec {
        let mut spec = self.cross::<BTreeMap<ClientToken, A>>(
            kind,
            Direction::SessionToApp,
            CrossCodecs::default(),
        );
        if let Op::Cross(c) = &mut spec.op {
            c.gather = Some(gather::<A>());
        }
        spec
    }
}

fn codec_names(value: &str, delta: Option<&str>) -> CrossCodecs {
    CrossCodecs {
        value_name: Some(value.to_string()),
        delta_name: delta.map(str::to_string),
        ..Default::default()
    }
}

impl<A: Data> Event<A> {
    common_handle_methods!();

    pub fn map<B: Data>(&self, f: impl Fn(&A) -> B + Send + Sync + 'static) -> Event<B> {
        self.h.b.event(
            self.h
                .spec::<B>(NodeKind::Event, Op::MapE(fn1(f)), vec![self.id()]),
        )
    }

    /// Steps from `init` to `f(previous, pulse)` on every pulse.
    pub fn fold<B: Data>(
        &self,
        init: B,
        f: impl Fn(&B, &A) -> B + Send + Sync + 'static,
    ) -> DBehavior<B> {
        self.h.b.dbehavior(self.h.spec::<B>(
            NodeKind::DBehavior,
            Op::Fold {
                init: Val::new(init),
                f: fn2(f),
            },
            vec![self.id()],
        ))
    }

    pub fn hold(&self, init: A) -> DBehavior<A> {
        self.h.b.dbehavior(self.h.spec::<A>(
            NodeKind::DBehavior,
            Op::Hold {
                init: Val::new(init),
            },
            vec![self.id()],
        ))
    }

    /// Incremental fold: the pulses become the deltas of the result.
    pub fn fold_i<B: Data>(
        &self,
        init: B,
        f: impl Fn(&B, &A) -> B + Send + Sync + 'static,
    ) -> IBehavior<B, A> {
        let f = fn2(f);
        self.h.b.ibehavior(
            self.h
                .spec::<B>(
                    NodeKind::IBehavior,
                    Op::FoldI {
                        init: Val::new(init),
                        f: f.clone(),
                    },
                    vec![self.id()],
                )
                .incremental::<A>(f),
        )
    }

    /// Client to session, serialized with the named codec.
    pub fn to_session(&self, codec: &str) -> Event<A> {
        self.h.b.event(self.h.cross::<A>(
            NodeKind::Event,
            Direction::ClientToSession,
            codec_names(codec, None),
        ))
    }

    /// Session to client, serialized with the named codec.
    pub fn to_client(&self, codec: &str) -> Event<A> {
        self.h.b.event(self.h.cross::<A>(
            NodeKind::Event,
            Direction::SessionToClient,
            codec_names(codec, None),
        ))
    }

    /// Session to application: fires when any replica fires, with the
    /// values of the replicas that fired.
    pub fn to_app(&self) -> Event<BTreeMap<ClientToken, A>> {
        self.h.b.event(self.h.to_app_gather::<A>(NodeKind::Event))
    }

    /// Application to session: fires in every live replica.
    pub fn to_sessions(&self) -> Event<A> {
        self.h.b.event(self.h.cross::<A>(
            NodeKind::Event,
            Direction::AppToSession,
            CrossCodecs::default(),
        ))
    }
}

impl<A: Data> Event<Task<A>> {
    /// Runs each task off-engine; results fire in later cycles, in
    /// completion order. Failed tasks are dropped with a log line.
    pub fn execute(&self) -> Event<A> {
        self.execute_inner()
    }

    /// Like [`execute`](Self::execute), routing failures to a companion event.
    pub fn execute_with_errors(&self) -> (Event<A>, Event<String>) {
        let results = self.execute_inner();
        let errors = self.h.b.event::<String>(NodeSpec::new::<String>(
            self.tier(),
            NodeKind::Event,
            Op::ExecuteErrors,
            vec![results.id()],
        ));
        let err_id = errors.id();
        self.h.b.with_node(results.id(), |n| {
            if let Op::Execute { errors, .. } = &mut n.op {
                *errors = Some(err_id);
            }
        });
        (results, errors)
    }

    fn execute_inner(&self) -> Event<A> {
        let run: super::TaskRunner = Arc::new(|v: &Val| {
            let task = v.get::<Task<A>>();
            let job: super::Job = Box::new(move || task.run().map(Val::new));
            job
        });
        self.h.b.event(self.h.spec::<A>(
            NodeKind::Event,
            Op::Execute { run, errors: None },
            vec![self.id()],
        ))
    }
}

impl<A: Data> DBehavior<A> {
    common_handle_methods!();

    /// Fires the new value on every step, including steps to an equal value.
    pub fn changes(&self) -> Event<A> {
        self.h
            .b
            .event(self.h.spec::<A>(NodeKind::Event, Op::Changes, vec![self.id()]))
    }

    pub fn map<B: Data>(&self, f: impl Fn(&A) -> B + Send + Sync + 'static) -> DBehavior<B> {
        self.h.b.dbehavior(
            self.h
                .spec::<B>(NodeKind::DBehavior, Op::MapD(fn1(f)), vec![self.id()]),
        )
    }

    pub fn map2<B: Data, C: Data>(
        &self,
        other: &DBehavior<B>,
        f: impl Fn(&A, &B) -> C + Send + Sync + 'static,
    ) -> DBehavior<C> {
        self.h.b.dbehavior(self.h.spec::<C>(
            NodeKind::DBehavior,
            Op::Map2(fn2(f)),
            vec![self.id(), other.id()],
        ))
    }

    /// Fires when `ev` fires, combining this behavior's value of the same
    /// cycle with the pulse.
    pub fn snapshot<B: Data, C: Data>(
        &self,
        ev: &Event<B>,
        f: impl Fn(&A, &B) -> C + Send + Sync + 'static,
    ) -> Event<C> {
        self.h.snapshot(ev, f)
    }

    pub fn sampled_by<B: Data>(&self, ev: &Event<B>) -> Event<A> {
        self.h.snapshot(ev, |a: &A, _: &B| a.clone())
    }

    /// Like `map2`, but the result steps only when `other` steps.
    pub fn snapshot_db<B: Data, C: Data>(
        &self,
        other: &DBehavior<B>,
        f: impl Fn(&A, &B) -> C + Send + Sync + 'static,
    ) -> DBehavior<C> {
        self.h.b.dbehavior(self.h.spec::<C>(
            NodeKind::DBehavior,
            Op::SnapshotD(fn2(f)),
            vec![self.id(), other.id()],
        ))
    }

    /// This behavior's value, stepping only when `other` steps.
    pub fn sampled_by_db<B: Data>(&self, other: &DBehavior<B>) -> DBehavior<A> {
        self.snapshot_db(other, |a: &A, _: &B| a.clone())
    }

    /// Reads the value as of the end of the previous cycle.
    pub fn delayed(&self) -> Behavior<A> {
        self.h
            .b
            .behavior(self.h.spec::<A>(NodeKind::Behavior, Op::Delayed, vec![self.id()]))
    }

    /// Views the behavior as incremental with deltas equal to its changes.
    pub fn as_ibehavior(&self) -> IBehavior<A, A> {
        self.h.b.ibehavior(
            self.h
                .spec::<A>(NodeKind::IBehavior, Op::AsIb, vec![self.id()])
                .incremental::<A>(keep_newest()),
        )
    }

    pub fn to_session(&self, codec: &str) -> DBehavior<A> {
        self.h.b.dbehavior(self.h.cross::<A>(
            NodeKind::DBehavior,
            Direction::ClientToSession,
            codec_names(codec, None),
        ))
    }

    pub fn to_client(&self, codec: &str) -> DBehavior<A> {
        self.h.b.dbehavior(self.h.cross::<A>(
            NodeKind::DBehavior,
            Direction::SessionToClient,
            codec_names(codec, None),
        ))
    }

    /// Session to application: the value of every live replica.
    pub fn to_app(&self) -> DBehavior<BTreeMap<ClientToken, A>> {
        self.h
            .b
            .dbehavior(self.h.to_app_gather::<A>(NodeKind::DBehavior))
    }

    pub fn to_sessions(&self) -> DBehavior<A> {
        self.h.b.dbehavior(self.h.cross::<A>(
            NodeKind::DBehavior,
            Direction::AppToSession,
            CrossCodecs::default(),
        ))
    }
}

/// Delta type of [`IBehavior::to_app`].
pub type AppDelta<DA> = (BTreeMap<ClientToken, DA>, Option<ClientChange>);

impl<A: Data, DA: Data> IBehavior<A, DA> {
    common_handle_methods!();

    pub fn changes(&self) -> Event<A> {
        self.h
            .b
            .event(self.h.spec::<A>(NodeKind::Event, Op::Changes, vec![self.id()]))
    }

    pub fn deltas(&self) -> Event<DA> {
        self.h
            .b
            .event(self.h.spec::<DA>(NodeKind::Event, Op::Deltas, vec![self.id()]))
    }

    /// Drops the delta information.
    pub fn to_dbehavior(&self) -> DBehavior<A> {
        self.h
            .b
            .dbehavior(self.h.spec::<A>(NodeKind::DBehavior, Op::ToDb, vec![self.id()]))
    }

    /// Client to session: the full value is known at connection time, only
    /// deltas travel afterwards.
    pub fn to_session(&self, value_codec: &str, delta_codec: &str) -> IBehavior<A, DA> {
        let fold = self.h.b.fold_of(self.id());
        self.h.b.ibehavior(
            self.h
                .cross::<A>(
                    NodeKind::IBehavior,
                    Direction::ClientToSession,
                    codec_names(value_codec, Some(delta_codec)),
                )
                .incremental::<DA>(fold),
        )
    }

    /// Session to client: bootstrapped with the full value, then deltas.
    pub fn to_client(&self, value_codec: &str, delta_codec: &str) -> IBehavior<A, DA> {
        let fold = self.h.b.fold_of(self.id());
        self.h.b.ibehavior(
            self.h
                .cross::<A>(
                    NodeKind::IBehavior,
                    Direction::SessionToClient,
                    codec_names(value_codec, Some(delta_codec)),
                )
                .incremental::<DA>(fold),
        )
    }

    pub fn to_sessions(&self) -> IBehavior<A, DA> {
        let fold = self.h.b.fold_of(self.id());
        self.h.b.ibehavior(
            self.h
                .cross::<A>(
                    NodeKind::IBehavior,
                    Direction::AppToSession,
                    CrossCodecs::default(),
                )
                .incremental::<DA>(fold),
        )
    }

    /// Session to application. Each delta carries the per-client deltas of
    /// the cycle and at most one connection change; a connect adds an entry
    /// at the session behavior's initial value.
    pub fn to_app(&self) -> IBehavior<BTreeMap<ClientToken, A>, AppDelta<DA>> {
        let session_fold = self.h.b.fold_of(self.id());
        let initial = Arc::new(OnceLock::new());
        self.h
            .b
            .state
            .borrow_mut()
            .pending_initials
            .push((self.id(), initial.clone()));

        let fold = fn2(
            move |map: &BTreeMap<ClientToken, A>, (deltas, change): &AppDelta<DA>| {
                let mut next = map.clone();
                match change {
                    Some(ClientChange::Connected(c)) => {
                        let init = initial
                            .get()
                            .expect("session initial value is set at finalization");
                        next.insert(c.clone(), init.get::<A>());
                    }
                    Some(ClientChange::Disconnected(c)) => {
                        next.remove(c);
                    }
                    None => {}
                }
                for (c, d) in deltas {
                    if let Some(cur) = next.get(c) {
                        let v = session_fold(&Val::new(cur.clone()), &Val::new(d.clone()));
                        next.insert(c.clone(), v.get::<A>());
                    }
                }
                next
            },
        );
        let mut spec = self
            .h
            .to_app_gather::<A>(NodeKind::IBehavior)
            .incremental::<AppDelta<DA>>(fold);
        if let Op::Cross(c) = &mut spec.op {
            c.gather_delta = Some(Arc::new(|entries, change| {
                let deltas: BTreeMap<ClientToken, DA> = entries
                    .into_iter()
                    .map(|(c, v)| (c, v.get::<DA>()))
                    .collect();
                Val::new((deltas, change))
            }));
        }
        self.h.b.ibehavior(spec)
    }
}

impl<A: Data> Behavior<A> {
    common_handle_methods!();

    pub fn snapshot<B: Data, C: Data>(
        &self,
        ev: &Event<B>,
        f: impl Fn(&A, &B) -> C + Send + Sync + 'static,
    ) -> Event<C> {
        self.h.snapshot(ev, f)
    }

    pub fn sampled_by<B: Data>(&self, ev: &Event<B>) -> Event<A> {
        self.h.snapshot(ev, |a: &A, _: &B| a.clone())
    }

    /// Session to application: reads every live replica.
    pub fn to_app(&self) -> Behavior<BTreeMap<ClientToken, A>> {
        self.h
            .b
            .behavior(self.h.to_app_gather::<A>(NodeKind::Behavior))
    }

    pub fn to_sessions(&self) -> Behavior<A> {
        self.h.b.behavior(self.h.cross::<A>(
            NodeKind::Behavior,
            Direction::AppToSession,
            CrossCodecs::default(),
        ))
    }

    #[doc(hidden)]
    pub fn to_session_unchecked(&self, codec: &str) -> Behavior<A> {
        self.h.b.behavior(self.h.cross::<A>(
            NodeKind::Behavior,
            Direction::ClientToSession,
            codec_names(codec, None),
        ))
    }
}

/// An event that external code fires through an engine.
pub struct EventSource<A> {
    event: Event<A>,
}

impl<A> Clone for EventSource<A> {
    fn clone(&self) -> Self {
        EventSource {
            event: self.event.clone(),
        }
    }
}

impl<A> std::fmt::Debug for EventSource<A> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EventSource({})", self.event.h.id)
    }
}

impl<A: Data> EventSource<A> {
    pub fn pulse(&self, value: A) -> Pulse {
        Pulse::new(self.event.id(), Val::new(value))
    }

    pub fn event(&self) -> &Event<A> {
        &self.event
    }
}

impl<A> Deref for EventSource<A> {
    type Target = Event<A>;

    fn deref(&self) -> &Event<A> {
        &self.event
    }
}

/// A behavior with a resettable poll function.
pub struct BehaviorSink<A> {
    behavior: Behavior<A>,
}

impl<A> Clone for BehaviorSink<A> {
    fn clone(&self) -> Self {
        BehaviorSink {
            behavior: self.behavior.clone(),
        }
    }
}

impl<A> Deref for BehaviorSink<A> {
    type Target = Behavior<A>;

    fn deref(&self) -> &Behavior<A> {
        &self.behavior
    }
}

/// A forward declaration of a discrete behavior.
pub struct ForwardDBehavior<A> {
    db: DBehavior<A>,
}

impl<A: Data> ForwardDBehavior<A> {
    /// The declared behavior; usable before it is defined.
    pub fn db(&self) -> DBehavior<A> {
        self.db.clone()
    }

    pub fn delayed(&self) -> Behavior<A> {
        self.db.delayed()
    }

    /// Defines the forward reference. Panics if already defined.
    pub fn resolve(&self, target: &DBehavior<A>) {
        let target = target.id();
        self.db.h.b.with_node(self.db.id(), |n| {
            assert!(n.deps.is_empty(), "forward reference {} resolved twice", n.id);
            n.deps.push(target);
        });
    }
}
