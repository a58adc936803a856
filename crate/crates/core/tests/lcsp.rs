use std::path::PathBuf;

use coins_core::lcsp::{
    decode, decode_request, decode_response, CallError, DecodeError, LcspClient, LcspRequest,
    LcspResponse, LcspServer, Message, Role, ServerLink, MAX_REQUEST_BODY, MAX_RESPONSE_BODY,
};
use proptest::prelude::*;
use serde_json::Value;

fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus/lcsp")
}

fn corpus() -> Vec<(String, Vec<u8>, Value)> {
    let mut out = Vec::new();
    let mut paths: Vec<_> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "wire"))
        .collect();
    paths.sort();
    for p in paths {
        let wire = std::fs::read(&p).unwrap();
        let exp: Value =
            serde_json::from_str(&std::fs::read_to_string(p.with_extension("json")).unwrap())
                .unwrap();
        out.push((
            p.file_stem().unwrap().to_string_lossy().into_owned(),
            wire,
            exp,
        ));
    }
    out
}

fn expected_message(v: &Value) -> Message {
    let body = || hex::decode(v["body_hex"].as_str().unwrap()).unwrap();
    match v["type"].as_str().unwrap() {
        "request" => {
            let res = v["resource"].as_str().unwrap();
            Message::Request(match v["method"].as_str().unwrap() {
                "GET" => LcspRequest::get(res).unwrap(),
                _ => LcspRequest::post(res, body()).unwrap(),
            })
        }
        "ok" => Message::Response(LcspResponse::ok(body()).unwrap()),
        _ => Message::Response(LcspResponse::error(v["reason"].as_str().unwrap()).unwrap()),
    }
}

fn error_kind(e: &DecodeError) -> &'static str {
    match e {
        DecodeError::NeedMoreData => "NeedMoreData",
        DecodeError::Malformed { .. } => "Malformed",
        DecodeError::FrameTooLarge { .. } => "FrameTooLarge",
    }
}

#[test]
fn corpus_matches_expected_messages() {
    let cases = corpus();
    assert!(cases.len() >= 20);
    for (name, wire, exp) in cases {
        let role = if exp["role"] == "server" {
            Role::Server
        } else {
            Role::Client
        };
        let got = decode(&wire, role);
        if let Some(kind) = exp.get("error") {
            let e = got.expect_err(&name);
            assert_eq!(error_kind(&e), kind.as_str().unwrap(), "{name}");
            continue;
        }
        let (msg, used) = got.unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(msg, expected_message(&exp["message"]), "{name}");
        assert_eq!(used as u64, exp["consumed"].as_u64().unwrap(), "{name}");
        assert_eq!(msg.encode(), wire[..used], "{name}: round trip");
    }
}

#[test]
fn encodes_grammar_examples() {
    assert_eq!(
        LcspRequest::get("/hello").unwrap().encode(),
        b"GET /hello\r\n"
    );
    assert_eq!(
        LcspRequest::post("/radio/tx", *b"abcde").unwrap().encode(),
        b"POST /radio/tx 5\r\nabcde"
    );
    assert_eq!(LcspResponse::ok(Vec::new()).unwrap().encode(), b"OK 0\r\n");
    assert_eq!(decode_request(b"GET /a"), Err(DecodeError::NeedMoreData));
    assert!(matches!(
        decode_request(b"POST /x 9999999\r\n"),
        Err(DecodeError::FrameTooLarge { .. })
    ));
}

#[test]
fn rejects_invalid_messages() {
    assert!(LcspRequest::get("hello").is_err());
    assert!(LcspRequest::get("/a b").is_err());
    assert!(LcspRequest::post("/x", vec![0; MAX_REQUEST_BODY + 1]).is_err());
    assert!(LcspResponse::ok(vec![0; MAX_RESPONSE_BODY + 1]).is_err());
    assert!(LcspResponse::error("").is_err());
}

#[test]
fn back_to_back_frames_decode_in_order() {
    let mut wire = LcspResponse::ok(*b"a").unwrap().encode();
    wire.extend(LcspResponse::error("busy").unwrap().encode());
    let (first, n) = decode_response(&wire).unwrap();
    let (second, m) = decode_response(&wire[n..]).unwrap();
    assert_eq!(first.body(), b"a");
    assert_eq!(second, LcspResponse::Error("busy".into()));
    assert_eq!(n + m, wire.len());
}

struct Target;

impl LcspServer for Target {
    fn handle(&mut self, r: &LcspRequest) -> LcspResponse {
        match r.resource() {
            "/status" => LcspResponse::ok(*b"idle").unwrap(),
            _ => LcspResponse::error("unknown resource").unwrap(),
        }
    }
}

#[test]
fn call_examples() {
    let mut target = Target;
    let mut client = LcspClient::new(ServerLink::new(&mut target));
    let r = client
        .call(&LcspRequest::get("/status").unwrap(), 1000)
        .unwrap();
    assert_eq!(r.body(), b"idle");
    let r = client
        .call(&LcspRequest::get("/nope").unwrap(), 1000)
        .unwrap();
    assert_eq!(r, LcspResponse::Error("unknown resource".into()));
    client.link_mut().close();
    assert_eq!(
        client.call(&LcspRequest::get("/status").unwrap(), 1000),
        Err(CallError::ChannelClosed)
    );
}

#[test]
fn late_reply_is_not_taken_for_the_next_answer() {
    struct Echo;
    impl LcspServer for Echo {
        fn handle(&mut self, r: &LcspRequest) -> LcspResponse {
            LcspResponse::ok(r.resource().as_bytes().to_vec()).unwrap()
        }
    }
    let mut echo = Echo;
    let mut client = LcspClient::new(ServerLink::new(&mut echo));
    client.link_mut().delay_responses(1);
    assert_eq!(
        client.call(&LcspRequest::get("/first").unwrap(), 1000),
        Err(CallError::Timeout)
    );
    let r = client
        .call(&LcspRequest::get("/second").unwrap(), 1000)
        .unwrap();
    assert_eq!(r.body(), b"/second");
}

fn resource() -> impl Strategy<Value = String> {
    "/[!-~]{0,40}"
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        resource().prop_map(|r| Message::Request(LcspRequest::get(&r).unwrap())),
        (
            resource(),
            proptest::collection::vec(any::<u8>(), 0..=MAX_REQUEST_BODY)
        )
            .prop_map(|(r, b)| Message::Request(LcspRequest::post(&r, b).unwrap())),
        proptest::collection::vec(any::<u8>(), 0..=MAX_RESPONSE_BODY)
            .prop_map(|b| Message::Response(LcspResponse::ok(b).unwrap())),
        "[ -~]{1,60}".prop_map(|s| Message::Response(LcspResponse::error(&s).unwrap())),
    ]
}

fn role_of(m: &Message) -> Role {
    match m {
        Message::Request(_) => Role::Server,
        Message::Response(_) => Role::Client,
    }
}

proptest! {
    #[test]
    fn round_trip(m in message(), tail in proptest::collection::vec(any::<u8>(), 0..16)) {
        let mut wire = m.encode();
        let n = wire.len();
        wire.extend(tail);
        let (back, used) = decode(&wire, role_of(&m)).unwrap();
        prop_assert_eq!(back, m);
        prop_assert_eq!(used, n);
    }

    #[test]
    fn strict_prefixes_need_more_data(m in message(), cut in any::<prop::sample::Index>()) {
        let wire = m.encode();
        let k = cut.index(wire.len());
        prop_assert_eq!(decode(&wire[..k], role_of(&m)), Err(DecodeError::NeedMoreData));
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
        for role in [Role::Client, Role::Server] {
            if let Ok((m, used)) = decode(&bytes, role) {
                prop_assert!(used <= bytes.len());
                prop_assert_eq!(m.encode(), &bytes[..used]);
            }
        }
    }
}
