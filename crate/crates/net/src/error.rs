use thiserror::Error;
use tierflow::client::ClientError;
use tierflow::server::ServerError;
use tierflow::wire::WireError;

#[derive(Debug, Error)]
pub enum NetError {
    /// Mode analysis or an xhr-assert rejected the program; nothing was bound.
    #[error("startup refused: {0}")]
    Startup(#[source] ServerError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: std::net::SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("connection closed")]
    Closed,
}
