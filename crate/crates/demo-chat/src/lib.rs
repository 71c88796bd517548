//! A multi-tier chat.
//!
//! Clients post [`Message`]s. Each session forwards its client's posts to
//! the application tier, which folds them into one [`ChatLog`], newest
//! first, and every client shows that log. [`build_chat_program`] builds
//! the program in one of three [`Variant`]s that differ only in how the log
//! gets back to the clients.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use tierflow::graph::ProgramGraph;
use tierflow::{Codec, DBehavior, EventSource, NodeId, ProgramBuilder, Tier};

/// One chat line. The author's name travels with every message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub name: String,
    pub message: String,
}

impl Message {
    pub fn new(name: impl Into<String>, message: impl Into<String>) -> Self {
        Message {
            name: name.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} says {}", self.name, self.message)
    }
}

struct Cell {
    head: Message,
    tail: Option<Arc<Cell>>,
}

/// Persistent newest-first message list. Cloning and prepending are O(1),
/// so every tier and replica can keep its own copy cheaply. Serialized as
/// a JSON array, newest first.
#[derive(Clone, Default)]
pub struct ChatLog {
    first: Option<Arc<Cell>>,
    len: usize,
}

impl ChatLog {
    pub fn new() -> Self {
        ChatLog::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The log with `m` on top.
    pub fn prepend(&self, m: Message) -> ChatLog {
        ChatLog {
            first: Some(Arc::new(Cell {
                head: m,
                tail: self.first.clone(),
            })),
            len: self.len + 1,
        }
    }

    /// Prepends a batch given oldest first, so its last message ends on top.
    pub fn prepend_all<'a>(&self, ms: impl IntoIterator<Item = &'a Message>) -> ChatLog {
        ms.into_iter().fold(self.clone(), |log, m| log.prepend(m.clone()))
    }

    /// Newest first.
    pub fn iter(&self) -> impl Iterator<Item = &Message> {
        let mut cur = self.first.as_deref();
        std::iter::from_fn(move || {
            let c = cur?;
            cur = c.tail.as_deref();
            Some(&c.head)
        })
    }

    pub fn to_vec(&self) -> Vec<Message> {
        self.iter().cloned().collect()
    }

    /// One rendered line per message, newest first.
    pub fn lines(&self) -> Vec<String> {
        self.iter().map(Message::to_string).collect()
    }
}

impl FromIterator<Message> for ChatLog {
    /// Collects a newest-first sequence.
    fn from_iter<I: IntoIterator<Item = Message>>(iter: I) -> Self {
        let mut v: Vec<Message> = iter.into_iter().collect();
        v.reverse();
        ChatLog::new().prepend_all(&v)
    }
}

impl PartialEq for ChatLog {
    fn eq(&self, other: &Self) -> bool {
        self.len == other.len && self.iter().eq(other.iter())
    }
}

impl Eq for ChatLog {}

impl fmt::Debug for ChatLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.iter()).finish()
    }
}

impl Drop for ChatLog {
    // Unlinks iteratively; the default recursive drop would overflow the
    // stack on long logs.
    fn drop(&mut self) {
        let mut next = self.first.take();
        while let Some(cell) = next {
            match Arc::try_unwrap(cell) {
                Ok(mut c) => next = c.tail.take(),
                Err(_) => break,
            }
        }
    }
}

impl Serialize for ChatLog {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.len))?;
        for m in self.iter() {
            seq.serialize_element(m)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for ChatLog {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Vec::<Message>::deserialize(d)?.into_iter().collect())
    }
}

/// How the log reaches the clients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// The log crosses as an incremental behavior: after the bootstrap, only
    /// new messages travel. Needs a WebSocket.
    Push,
    /// Clients poll on a timer and every post or poll is answered with the
    /// full log. Runs on request/response.
    Polled,
    /// The log crosses as a discrete behavior, resending the whole list on
    /// every change. A baseline for wire size.
    PushFullState,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "push" => Ok(Variant::Push),
            "polled" => Ok(Variant::Polled),
            "full-state" => Ok(Variant::PushFullState),
            _ => Err(format!("unknown variant {s:?} (push, polled, full-state)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChatOptions {
    pub variant: Variant,
    /// Client poll period of the polled variant.
    pub poll: Duration,
    /// Adds a session clock pushed to every client at this period.
    pub clock: Option<Duration>,
}

impl ChatOptions {
    pub fn new(variant: Variant) -> Self {
        ChatOptions {
            variant,
            poll: Duration::from_millis(500),
            clock: None,
        }
    }
}

pub struct ChatProgram {
    pub graph: Arc<ProgramGraph>,
    pub options: ChatOptions,
    /// Client-tier message source.
    pub input: EventSource<Message>,
    /// Application-tier log.
    pub log: DBehavior<ChatLog>,
    /// Client-tier log, the main view.
    pub view: DBehavior<ChatLog>,
    /// Client-tier session clock, when configured.
    pub clock: Option<NodeId>,
}

impl ChatProgram {
    pub fn input_node(&self) -> NodeId {
        self.input.event().id()
    }
}

pub const CODEC_MESSAGE: &str = "message";
pub const CODEC_MESSAGES: &str = "messages";
pub const CODEC_LOG: &str = "chat-log";

pub fn build_chat_program(options: ChatOptions) -> ChatProgram {
    let b = ProgramBuilder::new();
    b.register_codec(Codec::json::<Message>(CODEC_MESSAGE)).expect("fresh codec");
    b.register_codec(Codec::json::<Vec<Message>>(CODEC_MESSAGES)).expect("fresh codec");
    b.register_codec(Codec::json::<ChatLog>(CODEC_LOG)).expect("fresh codec");

    let input = b.event_source::<Message>(Tier::Client);
    let posted = input.to_session(CODEC_MESSAGE);
    // Posts of one server cycle, in client token order.
    let gathered = posted
        .to_app()
        .map(|per_client| per_client.values().cloned().collect::<Vec<Message>>());
    let log_i = gathered.fold_i(ChatLog::new(), |log, ms| log.prepend_all(ms));
    let log = log_i.to_dbehavior();

    let view = match options.variant {
        Variant::Push => log_i
            .to_sessions()
            .to_client(CODEC_LOG, CODEC_MESSAGES)
            .to_dbehavior(),
        Variant::PushFullState => log.to_sessions().to_client(CODEC_LOG),
        Variant::Polled => {
            let polls = b.interval(options.poll).to_session("u64");
            // Steps on every post and every poll of this session's client.
            let asked = posted
                .fold(0u64, |n, _| n + 1)
                .map2(&polls.hold(0), |p, q| (*p, *q));
            log_i
                .to_sessions()
                .to_dbehavior()
                .sampled_by_db(&asked)
                .to_client(CODEC_LOG)
        }
    };
    let clock = options.clock.map(|period| {
        b.server_tick(Tier::Session, period)
            .hold(0)
            .to_client("u64")
            .id()
    });
    b.set_main_view(&view);
    let graph = b.finalize().expect("the chat program is well formed");
    ChatProgram {
        graph,
        options,
        input,
        log,
        view,
        clock,
    }
}
