//! A multi-tier functional reactive runtime.
//!
//! One program graph spans three tiers: the client, a per-connection session
//! tier and a singleton application tier on the server. The same graph
//! drives a client [`engine::Engine`] and a server engine; values crossing
//! between client and session travel in atomic per-cycle batches, so every
//! update produced by one cycle on one side is applied as one cycle on the
//! other.
//!
//! - [`graph`] builds and validates programs and exports their manifest.
//! - [`engine`] is the synchronous propagation machine.
//! - [`mode`] decides between request/response and bidirectional transport.
//! - [`wire`] defines the batch and bootstrap formats and the message router.
//! - [`server`] and [`client`] are the two transport-agnostic engine roles.
//! - [`sim`] runs both roles under virtual time and hosts the reference
//!   evaluator used as a semantic oracle.

pub mod client;
pub mod codec;
pub mod engine;
pub mod graph;
pub mod mode;
pub mod server;
pub mod sim;
pub mod value;
pub mod wire;

pub use codec::{Codec, CodecError, CodecRegistry};
pub use engine::{Engine, FireResult, Pulse, Role, Scope};
pub use graph::{
    Behavior, BehaviorSink, DBehavior, Direction, Event, EventSource, ForwardDBehavior,
    GraphError, IBehavior, NodeId, NodeKind, ProgramBuilder, ProgramGraph, Tier,
};
pub use value::{ClientChange, ClientToken, Data, Task, Val};
