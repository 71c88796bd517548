//! HTTP and WebSocket transports for tierflow programs.
//!
//! [`serve`] runs the server role of a program behind an HTTP listener.
//! A single engine thread owns the [`ServerEngine`](tierflow::server::ServerEngine)
//! and consumes a stimulus channel fed by connection handlers, timers and
//! completed tasks, so cycles never interleave. [`ClientRuntime`] runs the
//! client role against such a server over the backend the server chose.
//!
//! Endpoints:
//!
//! | method | path | body in | body out |
//! |---|---|---|---|
//! | GET | `/frp/manifest` | | manifest JSON |
//! | GET | `/frp/mode` | | `{"transport":..,"version":..}` |
//! | POST | `/frp/bootstrap` | empty | bootstrap frame (request/response mode) |
//! | POST | `/frp/exchange?client=<token>` | batch frame | batch frame (request/response mode) |
//! | GET | `/frp/ws` | batch frames | bootstrap frame, then batch frames (WebSocket mode) |

mod client;
mod error;
mod server;

pub use client::{fetch_mode, ClientConfig, ClientHandle, ClientRuntime, ClientStats, ServerMode};
pub use error::NetError;
pub use server::{serve, RunningServer, ServerConfig};

pub const PATH_MANIFEST: &str = "/frp/manifest";
pub const PATH_MODE: &str = "/frp/mode";
pub const PATH_BOOTSTRAP: &str = "/frp/bootstrap";
pub const PATH_EXCHANGE: &str = "/frp/exchange";
pub const PATH_WS: &str = "/frp/ws";
