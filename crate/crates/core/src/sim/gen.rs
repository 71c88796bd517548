//! Seeded random programs over integer payloads.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Pulse;
use crate::graph::{Behavior, DBehavior, Event, EventSource, IBehavior, ProgramBuilder, Tier};

/// A pure unary integer function, printable for failure reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Add(i64),
    Mul(i64),
    Neg,
    Rem(i64),
    SubFrom(i64),
}

impl Unary {
    pub fn random(rng: &mut impl Rng) -> Self {
        let k = rng.random_range(-9..=9);
        match rng.random_range(0..5) {
            0 => Unary::Add(k),
            1 => Unary::Mul(k),
            2 => Unary::Neg,
            3 => Unary::Rem(k.abs().max(2)),
            _ => Unary::SubFrom(k),
        }
    }

    pub fn apply(self, x: i64) -> i64 {
        match self {
            Unary::Add(k) => x.wrapping_add(k),
            Unary::Mul(k) => x.wrapping_mul(k),
            Unary::Neg => x.wrapping_neg(),
            Unary::Rem(k) => x.rem_euclid(k),
            Unary::SubFrom(k) => k.wrapping_sub(x),
        }
    }

    pub fn func(self) -> impl Fn(&i64) -> i64 + Send + Sync + 'static {
        move |x| self.apply(*x)
    }
}

/// A pure binary integer function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Max,
    Min,
    Mul,
}

impl Binary {
    pub fn random(rng: &mut impl Rng) -> Self {
        *[Binary::Add, Binary::Sub, Binary::Max, Binary::Min, Binary::Mul]
            .choose(rng)
            .expect("nonempty")
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Binary::Add => a.wrapping_add(b),
            Binary::Sub => a.wrapping_sub(b),
            Binary::Max => a.max(b),
            Binary::Min => a.min(b),
            Binary::Mul => a.wrapping_mul(b).rem_euclid(1_000_003),
        }
    }

    pub fn func(self) -> impl Fn(&i64, &i64) -> i64 + Send + Sync + 'static {
        move |a, b| self.apply(*a, *b)
    }
}

/// Grows a random program on one tier of a builder.
///
/// Every payload is `i64` (incremental nodes use `i64` deltas), so any
/// node of the right kind can feed any combinator.
pub struct ProgramGen {
    pub rng: ChaCha8Rng,
    pub builder: ProgramBuilder,
    pub tier: Tier,
    pub sources: Vec<EventSource<i64>>,
    pub events: Vec<Event<i64>>,
    pub dbs: Vec<DBehavior<i64>>,
    pub ibs: Vec<IBehavior<i64, i64>>,
    pub behaviors: Vec<Behavior<i64>>,
    nodes: usize,
}

impl ProgramGen {
    pub fn new(seed: u64, builder: ProgramBuilder, tier: Tier) -> Self {
        ProgramGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            builder,
            tier,
            sources: Vec::new(),
            events: Vec::new(),
            dbs: Vec::new(),
            ibs: Vec::new(),
            behaviors: Vec::new(),
            nodes: 0,
        }
    }

    /// Nodes added by this generator.
    pub fn node_count(&self) -> usize {
        self.nodes
    }

    fn small(&mut self) -> i64 {
        self.rng.random_range(-5..=5)
    }

    fn pick<T: Clone>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
        xs.choose(rng).expect("pool is nonempty").clone()
    }

    fn add_source(&mut self) {
        let s = self.builder.event_source::<i64>(self.tier);
        self.events.push(s.event().clone());
        self.sources.push(s);
        self.nodes += 1;
    }

    /// Adds nodes until about `budget` nodes exist (never more).
    pub fn grow(&mut self, budget: usize) {
        let sources = self.rng.random_range(1..=3).min(budget.max(1));
        for _ in 0..sources {
            self.add_source();
        }
        if self.nodes < budget && self.rng.random_bool(0.7) {
            let v = self.small();
            self.dbs.push(self.builder.constant(self.tier, v));
            self.nodes += 1;
        }
        while self.nodes < budget {
            self.step(budget - self.nodes);
        }
    }

    fn step(&mut self, room: usize) {
        let choice = self.rng.random_range(0..19);
        let rng = &mut self.rng;
        match choice {
            0 | 1 => {
                let e = Self::pick(rng, &self.events);
                let f = Unary::random(rng);
                self.events.push(e.map(f.func()));
            }
            2 => {
                let e = Self::pick(rng, &self.events);
                let (f, init) = (Binary::random(rng), rng.random_range(-5..=5));
                self.dbs.push(e.fold(init, f.func()));
            }
            3 => {
                let e = Self::pick(rng, &self.events);
                let init = rng.random_range(-5..=5);
                self.dbs.push(e.hold(init));
            }
            4 if !self.dbs.is_empty() => {
                let d = Self::pick(rng, &self.dbs);
                let f = Unary::random(rng);
                self.dbs.push(d.map(f.func()));
            }
            5 if !self.dbs.is_empty() => {
                let a = Self::pick(rng, &self.dbs);
                let b = Self::pick(rng, &self.dbs);
                let f = Binary::random(rng);
                self.dbs.push(a.map2(&b, f.func()));
            }
            6 if !self.dbs.is_empty() => {
                let a = Self::pick(rng, &self.dbs);
                let b = Self::pick(rng, &self.dbs);
                let f = Binary::random(rng);
                self.dbs.push(a.snapshot_db(&b, f.func()));
            }
            7 if !self.dbs.is_empty() => {
                let d = Self::pick(rng, &self.dbs);
                self.events.push(d.changes());
            }
            8 if !self.dbs.is_empty() => {
                let d = Self::pick(rng, &self.dbs);
                let e = Self::pick(rng, &self.events);
                let f = Binary::random(rng);
                self.events.push(d.snapshot(&e, f.func()));
            }
            9 if !self.dbs.is_empty() => {
                let d = Self::pick(rng, &self.dbs);
                self.behaviors.push(d.delayed());
            }
            10 if !self.behaviors.is_empty() => {
                let b = Self::pick(rng, &self.behaviors);
                let e = Self::pick(rng, &self.events);
                let f = Binary::random(rng);
                self.events.push(b.snapshot(&e, f.func()));
            }
            11 => {
                let e = Self::pick(rng, &self.events);
                let init = rng.random_range(-5..=5);
                self.ibs.push(e.fold_i(init, |a, d| a.wrapping_add(*d)));
            }
            12 if !self.ibs.is_empty() => {
                let i = Self::pick(rng, &self.ibs);
                self.events.push(i.deltas());
            }
            13 if !self.ibs.is_empty() => {
                let i = Self::pick(rng, &self.ibs);
                self.dbs.push(i.to_dbehavior());
            }
            14 if !self.dbs.is_empty() => {
                let d = Self::pick(rng, &self.dbs);
                self.ibs.push(d.as_ibehavior());
            }
            15 => {
                // Call counter: nondeterministic unless memoized per cycle.
                let counter = Arc::new(AtomicI64::new(0));
                let b = self.builder.from_poll(self.tier, move || {
                    counter.fetch_add(1, Ordering::SeqCst)
                });
                self.behaviors.push(b);
            }
            16 => {
                let default = rng.random_range(-5..=5);
                self.behaviors.push((*self.builder.sink(self.tier, default)).clone());
            }
            17 if room >= 4 && !self.events.is_empty() => {
                // Recursion through a delayed read of a forward reference.
                let fwd = self.builder.forward::<i64>(self.tier);
                let e = Self::pick(rng, &self.events);
                let (f, g) = (Binary::random(rng), Binary::random(rng));
                let init = rng.random_range(-5..=5);
                let ev = fwd.delayed().snapshot(&e, f.func());
                let acc = ev.fold(init, g.func());
                fwd.resolve(&acc);
                self.events.push(ev);
                self.dbs.push(fwd.db());
                self.dbs.push(acc);
                self.nodes += 4;
                return;
            }
            18 if !self.ibs.is_empty() => {
                let i = Self::pick(rng, &self.ibs);
                self.events.push(i.changes());
            }
            _ => return,
        }
        self.nodes += 1;
    }

    /// A random pulse script: each cycle fires a random subset of sources.
    pub fn script(&mut self, cycles: usize) -> Vec<Vec<Pulse>> {
        let mut script = Vec::with_capacity(cycles);
        for _ in 0..cycles {
            let mut pulses = Vec::new();
            for s in &self.sources {
                if self.rng.random_bool(0.5) {
                    pulses.push(s.pulse(self.rng.random_range(-20..=20)));
                }
            }
            script.push(pulses);
        }
        script
    }
}
