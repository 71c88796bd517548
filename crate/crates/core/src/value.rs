//! Type-erased values flowing through the engines.
//!
//! The program graph is shared by both engine roles and by the wire layer, so
//! node payloads are stored as [`Val`]: a cheaply clonable, thread-safe handle
//! around any [`Data`] value. Typed handles in [`crate::graph`] take care of
//! wrapping and unwrapping.

use std::any::{Any, TypeId};
use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Anything that may flow through a node.
pub trait Data: Clone + fmt::Debug + Send + Sync + 'static {}

impl<T: Clone + fmt::Debug + Send + Sync + 'static> Data for T {}

trait DynData: Any + Send + Sync {
    fn as_any(&self) -> &dyn Any;
    fn fmt_debug(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result;
}

impl<T: Data> DynData for T {
    fn as_any(&self) -> &dyn Any {
        self
    }

    fn fmt_debug(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A type-erased node value.
#[derive(Clone)]
pub struct Val(Arc<dyn DynData>);

impl Val {
    pub fn new<T: Data>(value: T) -> Self {
        Val(Arc::new(value))
    }

    pub fn type_id(&self) -> TypeId {
        self.0.as_any().type_id()
    }

    pub fn is<T: Data>(&self) -> bool {
        self.0.as_any().is::<T>()
    }

    /// Borrows the payload as `T`.
    ///
    /// Panics on a type mismatch; graph finalization type-checks every edge,
    /// so a mismatch here is an engine bug.
    pub fn downcast_ref<T: Data>(&self) -> &T {
        match self.0.as_any().downcast_ref::<T>() {
            Some(v) => v,
            None => panic!(
                "value type mismatch: expected {}, found {:?}",
                std::any::type_name::<T>(),
                self
            ),
        }
    }

    pub fn get<T: Data>(&self) -> T {
        self.downcast_ref::<T>().clone()
    }

    pub fn try_get<T: Data>(&self) -> Option<T> {
        self.0.as_any().downcast_ref::<T>().cloned()
    }

    /// Renders the payload with its `Debug` implementation. Traces compare
    /// observations through this rendering.
    pub fn render(&self) -> String {
        format!("{:?}", self)
    }
}

impl fmt::Debug for Val {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt_debug(f)
    }
}

/// Static description of a node's payload type.
#[derive(Clone, Copy)]
pub struct ValueType {
    pub id: TypeId,
    pub name: &'static str,
}

impl ValueType {
    pub fn of<T: Data>() -> Self {
        ValueType {
            id: TypeId::of::<T>(),
            name: std::any::type_name::<T>(),
        }
    }
}

impl PartialEq for ValueType {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for ValueType {}

impl fmt::Debug for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

/// Opaque identity of one live client connection, assigned by the server.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientToken(String);

impl ClientToken {
    pub fn new(id: impl Into<String>) -> Self {
        ClientToken(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Stand-in used when evaluating session nodes outside any replica.
    pub(crate) fn placeholder() -> Self {
        ClientToken(String::new())
    }
}

impl fmt::Debug for ClientToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ClientToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A connection lifecycle change.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClientChange {
    Connected(ClientToken),
    Disconnected(ClientToken),
}

impl ClientChange {
    pub fn client(&self) -> &ClientToken {
        match self {
            ClientChange::Connected(c) | ClientChange::Disconnected(c) => c,
        }
    }

    /// Applies the change to a set of live clients.
    pub fn apply(&self, clients: &BTreeSet<ClientToken>) -> BTreeSet<ClientToken> {
        let mut next = clients.clone();
        match self {
            ClientChange::Connected(c) => {
                next.insert(c.clone());
            }
            ClientChange::Disconnected(c) => {
                next.remove(c);
            }
        }
        next
    }
}

/// A deferred computation run off-engine by the async executor.
///
/// Tasks describe work rather than perform it: the same task value may be run
/// more than once.
#[derive(Clone)]
pub struct Task<A> {
    run: Arc<dyn Fn() -> Result<A, String> + Send + Sync>,
    label: Arc<str>,
}

impl<A: Data> Task<A> {
    pub fn new(f: impl Fn() -> Result<A, String> + Send + Sync + 'static) -> Self {
        Task {
            run: Arc::new(f),
            label: Arc::from("task"),
        }
    }

    /// A task that immediately yields `value`.
    pub fn ready(value: A) -> Self {
        let label: Arc<str> = Arc::from(format!("ready({:?})", value));
        Task {
            run: Arc::new(move || Ok(value.clone())),
            label,
        }
    }

    pub fn failing(message: impl Into<String>) -> Self {
        let message = message.into();
        Task {
            run: Arc::new(move || Err(message.clone())),
            label: Arc::from("failing"),
        }
    }

    pub fn labelled(mut self, label: impl Into<String>) -> Self {
        self.label = Arc::from(label.into());
        self
    }

    pub fn run(&self) -> Result<A, String> {
        (self.run)()
    }
}

impl<A> fmt::Debug for Task<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Task({})", self.label)
    }
}

pub(crate) type Fn1 = Arc<dyn Fn(&Val) -> Val + Send + Sync>;
pub(crate) type Fn2 = Arc<dyn Fn(&Val, &Val) -> Val + Send + Sync>;
pub(crate) type Thunk = Arc<dyn Fn() -> Val + Send + Sync>;
