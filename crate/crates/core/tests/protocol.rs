//! Wire frames, routing, manifests and a request/response exchange driven
//! by hand.

use std::io::Cursor;

use proptest::prelude::*;
use serde_json::{json, Value};
use tierflow::client::ClientEngine;
use tierflow::graph::{Direction, Manifest};
use tierflow::mode::{ModeRequest, Transport};
use tierflow::server::{ServerEngine, ServerError};
use tierflow::wire::{
    read_frame, write_frame, Batch, Bootstrap, Frame, Router, WireError, WireMessage,
    DEFAULT_MAX_PAYLOAD,
};
use tierflow::{ClientToken, NodeId, ProgramBuilder, Tier, Val};

fn payload() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        any::<i64>().prop_map(Value::from),
        any::<bool>().prop_map(Value::from),
        ".{0,12}".prop_map(Value::from),
        Just(Value::Null),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::from),
            prop::collection::btree_map("[a-z]{1,4}", inner, 0..4)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn batch() -> impl Strategy<Value = Batch> {
    (
        any::<u64>(),
        prop::collection::vec((any::<u32>(), payload()), 0..6),
    )
        .prop_map(|(cycle, ms)| Batch {
            cycle,
            messages: ms
                .into_iter()
                .map(|(n, payload)| WireMessage {
                    node: NodeId(n),
                    payload,
                })
                .collect(),
        })
}

proptest! {
    #[test]
    fn batches_round_trip(b in batch()) {
        prop_assert_eq!(Batch::decode(b.encode().as_bytes()).unwrap(), b.clone());
        prop_assert_eq!(Frame::decode(Frame::Batch(b.clone()).encode().as_bytes()).unwrap(), Frame::Batch(b));
    }

    #[test]
    fn bootstraps_round_trip(b in batch(), version in any::<u64>(), tok in "[a-z0-9]{1,8}") {
        let boot = Bootstrap { client: ClientToken::new(tok), version, values: b.messages };
        prop_assert_eq!(Bootstrap::decode(boot.encode().as_bytes()).unwrap(), boot.clone());
        prop_assert_eq!(Frame::decode(Frame::Boot(boot.clone()).encode().as_bytes()).unwrap(), Frame::Boot(boot));
    }

    #[test]
    fn length_prefixed_streams_round_trip(bs in prop::collection::vec(batch(), 0..5)) {
        let mut stream = Vec::new();
        for b in &bs {
            write_frame(&mut stream, b.encode().as_bytes()).unwrap();
        }
        let mut r = Cursor::new(stream);
        let mut back = Vec::new();
        while let Some(bytes) = read_frame(&mut r, DEFAULT_MAX_PAYLOAD).unwrap() {
            back.push(Batch::decode(&bytes).unwrap());
        }
        prop_assert_eq!(back, bs);
    }

    #[test]
    fn cut_streams_are_truncated(b in batch(), cut in 1usize..8) {
        let mut stream = Vec::new();
        write_frame(&mut stream, b.encode().as_bytes()).unwrap();
        let keep = stream.len().saturating_sub(cut).max(1);
        stream.truncate(keep);
        prop_assert_eq!(read_frame(&mut Cursor::new(stream), DEFAULT_MAX_PAYLOAD), Err(WireError::Truncated));
    }
}

#[test]
fn limited_decode_rejects_oversize_frames() {
    let b = Batch {
        cycle: 1,
        messages: vec![WireMessage {
            node: NodeId(0),
            payload: json!("x".repeat(100)),
        }],
    };
    let text = Frame::Batch(b).encode();
    assert!(matches!(
        Frame::decode_limited(text.as_bytes(), 50),
        Err(WireError::Oversize { .. })
    ));
    assert!(Frame::decode_limited(text.as_bytes(), text.len()).is_ok());
}

struct Chat {
    graph: std::sync::Arc<tierflow::graph::ProgramGraph>,
    name: NodeId,
    line: NodeId,
    words: NodeId,
    echo: NodeId,
}

/// One client sends a name and a line; the session keeps its lines and
/// echoes their count back.
fn chat() -> Chat {
    let b = ProgramBuilder::new();
    let name = b.event_source::<String>(Tier::Client);
    let line = b.event_source::<String>(Tier::Client);
    let name_s = name.hold(String::new()).to_session("string");
    let line_s = line.to_session("string");
    let words = name_s
        .snapshot(&line_s, |n, l| format!("{n}: {l}"))
        .fold(Vec::<String>::new(), |acc: &Vec<String>, l| {
            let mut v = acc.clone();
            v.push(l.clone());
            v
        });
    let echo = words.map(|w| w.len() as i64).to_client("i64");
    b.set_main_view(&echo);
    let graph = b.finalize().unwrap();
    Chat {
        graph,
        name: name_s.id(),
        line: line_s.id(),
        words: words.id(),
        echo: echo.id(),
    }
}

#[test]
fn router_rejects_bad_batches_whole() {
    let c = chat();
    let server = Router::for_server(c.graph.clone());
    let good = WireMessage {
        node: c.line,
        payload: json!("hi"),
    };
    let routed = server
        .route(&Batch {
            cycle: 1,
            messages: vec![good.clone()],
        })
        .unwrap();
    assert_eq!(routed[0].1.get::<String>(), "hi");

    let cases = [
        (
            vec![good.clone(), WireMessage { node: NodeId(999), payload: json!(1) }],
            "unknown",
        ),
        (vec![good.clone(), good.clone()], "duplicate"),
        (
            vec![good.clone(), WireMessage { node: c.echo, payload: json!(1) }],
            "direction",
        ),
        (
            vec![good.clone(), WireMessage { node: c.name, payload: json!(5) }],
            "codec",
        ),
    ];
    for (messages, what) in cases {
        let err = server.route(&Batch { cycle: 1, messages }).unwrap_err();
        let ok = match what {
            "unknown" => matches!(err, WireError::UnknownNode(_)),
            "duplicate" => matches!(err, WireError::DuplicateNode(_)),
            "direction" => matches!(
                err,
                WireError::WrongDirection {
                    expected: Direction::ClientToSession,
                    ..
                }
            ),
            _ => matches!(err, WireError::Codec { .. }),
        };
        assert!(ok, "{what}: {err}");
    }
}

#[test]
fn manifests_are_byte_stable_and_versioned() {
    let c = chat();
    let a = Manifest::from_graph(&c.graph);
    let b = Manifest::from_graph(&chat().graph);
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(Manifest::from_json(&a.to_json()).unwrap(), a);
    assert!(a.nodes.windows(2).all(|w| w[0].id < w[1].id));
    assert_eq!(a.main_view, Some(c.echo));
    let up: Vec<NodeId> = a.crossings(Direction::ClientToSession).map(|n| n.id).collect();
    assert_eq!(up.len(), 2);

    let bigger = ProgramBuilder::new();
    let s = bigger.event_source::<String>(Tier::Client);
    let v = s.hold(String::new());
    bigger.set_main_view(&v);
    let other = Manifest::from_graph(&bigger.finalize().unwrap());
    assert_ne!(other.version, a.version);

    let v: Value = serde_json::from_str(&a.to_json()).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["mainView", "nodes", "version"]);
    assert_eq!(v["nodes"][0]["tier"], "client");
}

#[test]
fn request_response_exchange_by_hand() {
    let c = chat();
    let mut server = ServerEngine::start(c.graph.clone(), ModeRequest::Auto).unwrap();
    assert_eq!(server.transport(), Transport::Xhr);
    let conn = server.connect().unwrap();
    assert_eq!(conn.client.as_str(), "c1");
    assert_eq!(conn.bootstrap.version, c.graph.manifest_version());
    assert_eq!(conn.bootstrap.values.len(), 1);
    assert_eq!(conn.bootstrap.values[0].payload, json!(0));

    let mut client = ClientEngine::boot(c.graph.clone(), &conn.bootstrap).unwrap();
    client.start();
    assert_eq!(client.view::<i64>(), Some(0));

    // Pulses on both client sources in one cycle travel as one batch.
    let sources: Vec<_> = c.graph.nodes().filter(|n| n.is_source()).map(|n| n.id()).collect();
    let cycle = client
        .fire(&[
            tierflow::Pulse::new(sources[0], Val::new("ann".to_string())),
            tierflow::Pulse::new(sources[1], Val::new("hello".to_string())),
        ])
        .unwrap();
    let up = cycle.outgoing.unwrap();
    assert_eq!(up.messages.len(), 2);

    let out = server.exchange(&conn.client, &up).unwrap();
    let words = server.engine().value_at(c.words, server.engine().scope_of(&conn.client).unwrap());
    assert_eq!(words.unwrap().get::<Vec<String>>(), ["ann: hello"]);
    let down = &out.per_client[&conn.client];
    assert_eq!(down.messages.len(), 1);
    client.apply(down).unwrap().unwrap();
    assert_eq!(client.view::<i64>(), Some(1));

    // A request with nothing crossing back still gets an (empty) answer.
    let out = server
        .exchange(&conn.client, &Batch { cycle: 9, messages: vec![] })
        .unwrap();
    assert!(out.per_client[&conn.client].is_empty());
    assert!(client.apply(&out.per_client[&conn.client]).unwrap().is_none());

    assert!(matches!(
        server.exchange(&ClientToken::new("c77"), &up),
        Err(ServerError::UnknownClient(_))
    ));
    let stats = server.stats();
    assert_eq!((stats.connects, stats.messages_in, stats.messages_out), (1, 2, 1));
    assert_eq!(stats.dropped_unsolicited, 0);

    let mut stale = conn.bootstrap.clone();
    stale.version ^= 1;
    assert!(ClientEngine::boot(c.graph.clone(), &stale).is_err());
    assert!(server.disconnect(&conn.client).is_some());
    assert!(server.disconnect(&conn.client).is_none());
    assert!(server.clients().is_empty());
}

#[test]
fn protocol_errors_are_counted() {
    let c = chat();
    let mut server = ServerEngine::start(c.graph.clone(), ModeRequest::Auto).unwrap();
    let conn = server.connect().unwrap();
    let bad = Batch {
        cycle: 1,
        messages: vec![WireMessage {
            node: c.echo,
            payload: json!(1),
        }],
    };
    assert!(server.exchange(&conn.client, &bad).is_err());
    assert_eq!(server.stats().protocol_errors, 1);
    assert_eq!(server.engine().cycle(), 1);
}
