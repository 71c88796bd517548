//! Stimulus queue and async task executors.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use super::{Pulse, Scope};
use crate::graph::NodeId;
use crate::value::Val;

pub(crate) enum Queued {
    /// An external pulse, validated when dequeued.
    Pulse(Pulse),
    /// A pulse bound to one node instance by an installer or a task.
    Scoped { node: NodeId, scope: Scope, value: Val },
}

type Waker = Arc<dyn Fn() + Send + Sync>;

#[derive(Default)]
struct QueueInner {
    items: Mutex<VecDeque<Queued>>,
    waker: Mutex<Option<Waker>>,
}

/// Multi-producer queue of pending stimuli. Each entry becomes its own
/// propagation cycle when the owning engine drains it.
#[derive(Clone, Default)]
pub struct FireQueue {
    inner: Arc<QueueInner>,
}

impl FireQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues an external pulse from any thread.
    pub fn push(&self, pulse: Pulse) {
        self.enqueue(Queued::Pulse(pulse));
    }

    pub(crate) fn push_scoped(&self, node: NodeId, scope: Scope, value: Val) {
        self.enqueue(Queued::Scoped { node, scope, value });
    }

    fn enqueue(&self, item: Queued) {
        self.inner.items.lock().unwrap().push_back(item);
        let waker = self.inner.waker.lock().unwrap().clone();
        if let Some(w) = waker {
            w();
        }
    }

    pub(crate) fn pop(&self) -> Option<Queued> {
        self.inner.items.lock().unwrap().pop_front()
    }

    pub fn len(&self) -> usize {
        self.inner.items.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Installs a callback run after every push, from the pushing thread.
    pub fn set_waker(&self, waker: impl Fn() + Send + Sync + 'static) {
        *self.inner.waker.lock().unwrap() = Some(Arc::new(waker));
    }
}

pub type Work = Box<dyn FnOnce() + Send>;

/// Runs task bodies off the engine thread.
pub trait Executor: Send + Sync {
    fn spawn(&self, work: Work);
}

/// One OS thread per task.
#[derive(Clone, Copy, Debug, Default)]
pub struct ThreadExecutor;

impl Executor for ThreadExecutor {
    fn spawn(&self, work: Work) {
        std::thread::spawn(work);
    }
}

/// Holds tasks until the caller runs them, in any order.
#[derive(Default)]
pub struct ManualExecutor {
    pending: Mutex<Vec<Work>>,
}

impl ManualExecutor {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn pending(&self) -> usize {
        self.pending.lock().unwrap().len()
    }

    /// Runs the task submitted `index`-th among those still pending.
    pub fn run(&self, index: usize) -> bool {
        let work = {
            let mut p = self.pending.lock().unwrap();
            if index >= p.len() {
                return false;
            }
            p.remove(index)
        };
        work();
        true
    }

    /// Runs every pending task in submission order; returns how many ran.
    pub fn run_all(&self) -> usize {
        let work: Vec<Work> = std::mem::take(&mut *self.pending.lock().unwrap());
        let n = work.len();
        for w in work {
            w();
        }
        n
    }
}

impl Executor for ManualExecutor {
    fn spawn(&self, work: Work) {
        self.pending.lock().unwrap().push(work);
    }
}

impl<E: Executor + ?Sized> Executor for Arc<E> {
    fn spawn(&self, work: Work) {
        (**self).spawn(work)
    }
}
