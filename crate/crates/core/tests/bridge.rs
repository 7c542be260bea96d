use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::thread;

use diver_core::bridge::protocol::{decode_logprobs, decode_manifest, BridgeRequest, BridgeResponse};
use diver_core::bridge::{serve, BridgeLm};
use diver_core::{decode, DecoderConfig, LanguageModel, PromptTemplatePair, Strategy, TabularLm};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn toy() -> TabularLm {
    TabularLm::load(fixture("toy.json")).unwrap()
}

fn golden() -> Vec<String> {
    std::fs::read_to_string(fixture("bridge_golden.jsonl")).unwrap().lines().map(str::to_owned).collect()
}

/// Serves `toy()` on an ephemeral port for `connections` connections.
fn spawn_server(connections: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let model = toy();
        for stream in listener.incoming().take(connections) {
            let stream = stream.unwrap();
            stream.set_nodelay(true).unwrap();
            let reader = BufReader::new(stream.try_clone().unwrap());
            let _ = serve(&model, reader, stream);
        }
    });
    addr
}

#[test]
fn golden_messages_round_trip_byte_for_byte() {
    for line in golden() {
        let again = if line.contains("\"op\"") {
            BridgeRequest::decode(&line).unwrap().encode()
        } else {
            let resp = BridgeResponse::decode(&line).unwrap();
            if let Some(p) = resp.payload.clone().filter(|p| p.is_object()) {
                let typed = decode_manifest(p.clone()).unwrap();
                assert_eq!(serde_json::to_value(typed).unwrap(), p);
            }
            resp.encode()
        };
        assert_eq!(again, line);
    }
}

#[test]
fn reference_responder_reproduces_golden_payloads() {
    let lines = golden();
    let requests: String = lines.iter().filter(|l| l.contains("\"op\"")).map(|l| format!("{l}\n")).collect();
    let mut out = Vec::new();
    serve(&toy(), requests.as_bytes(), &mut out).unwrap();
    let replies: Vec<BridgeResponse> =
        String::from_utf8(out).unwrap().lines().map(|l| BridgeResponse::decode(l).unwrap()).collect();
    assert_eq!(replies.len(), 7);
    assert!(replies.iter().all(|r| r.ok));
    let want = |id: u64| {
        lines
            .iter()
            .filter(|l| !l.contains("\"op\""))
            .map(|l| BridgeResponse::decode(l).unwrap())
            .find(|r| r.request_id == id && r.ok)
            .unwrap()
    };
    for id in [1, 3, 5, 6] {
        let got = replies.iter().find(|r| r.request_id == id).unwrap();
        assert_eq!(got.encode(), want(id).encode(), "request {id}");
    }
    let by_text = replies.iter().find(|r| r.request_id == 4).unwrap();
    let by_text = decode_logprobs(by_text.payload.clone().unwrap()).unwrap();
    assert!((by_text[0] - 0.9f64.ln()).abs() < 1e-15);
}

#[test]
fn tcp_bridge_matches_the_local_model() {
    let addr = spawn_server(1);
    let remote = BridgeLm::connect(addr.as_str()).unwrap();
    let local = toy();
    assert_eq!(remote.vocab(), local.vocab());
    assert_eq!(remote.id(), "toy-staggered");

    let ctx = local.tokenize("x b f").unwrap();
    assert_eq!(remote.next_dist(&ctx).unwrap(), local.next_dist(&ctx).unwrap());
    let tgt = local.tokenize("g h").unwrap();
    assert_eq!(remote.score_tokens(&ctx, &tgt).unwrap(), local.score_tokens(&ctx, &tgt).unwrap());
    assert_eq!(remote.tokenize("x a c").unwrap(), local.tokenize("x a c").unwrap());
    assert_eq!(remote.detokenize(&tgt).unwrap(), "g h");
    assert!(remote.tokenize("zebra").is_err());

    let tpl = PromptTemplatePair::new("plain", "[INPUT]", "[INCOMPLETE_OUTPUT] [INPUT]").unwrap();
    for strategy in [Strategy::DiverLeft, Strategy::DiverRight, Strategy::DiverToken] {
        let cfg = DecoderConfig { max_new_tokens: 8, ..DecoderConfig::with_strategy(strategy) };
        let a = decode(&remote, &remote, &tpl, "x", &cfg).unwrap();
        let b = decode(&local, &local, &tpl, "x", &cfg).unwrap();
        assert_eq!(a.output, b.output, "{strategy}");
        assert_eq!(a.trace.without_timing(), b.trace.without_timing());
    }
}

#[test]
fn hello_score_consistency_and_determinism() {
    let addr = spawn_server(1);
    let remote = BridgeLm::connect(addr.as_str()).unwrap();
    for prefix in ["", "x", "x b f g"] {
        let ctx = remote.vocab().tokenize(prefix).unwrap();
        let dist = remote.next_dist(&ctx).unwrap();
        for t in 0..remote.vocab().size() as u32 {
            let s = remote.score_tokens(&ctx, &[t]).unwrap()[0];
            let d = dist.logp(t);
            assert!(s == d || (s - d).abs() < 1e-6, "{prefix:?} token {t}: {s} vs {d}");
        }
        let again = remote.next_dist(&ctx).unwrap();
        for (a, b) in dist.values().iter().zip(again.values()) {
            assert!(a == b || (a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn malformed_requests_get_errors_and_the_server_stays_up() {
    let addr = spawn_server(1);
    let stream = TcpStream::connect(&addr).unwrap();
    stream.set_nodelay(true).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    let mut ask = |line: &str| {
        writeln!(writer, "{line}").unwrap();
        let mut reply = String::new();
        reader.read_line(&mut reply).unwrap();
        BridgeResponse::decode(reply.trim_end()).unwrap()
    };
    let bad = ask(r#"{"op":"launch","request_id":9}"#);
    assert!(!bad.ok && bad.request_id == 9);
    let garbage = ask("not json");
    assert!(!garbage.ok);
    let oov = ask(r#"{"op":"next_logprobs","request_id":10,"context":[99]}"#);
    assert!(!oov.ok && oov.request_id == 10);
    let empty = ask(r#"{"op":"score_sequence","request_id":11,"context":[],"target":[]}"#);
    assert!(!empty.ok);
    let fine = ask(r#"{"op":"next_logprobs","request_id":12,"context":[2]}"#);
    assert!(fine.ok && fine.request_id == 12);
    assert_eq!(decode_logprobs(fine.payload.unwrap()).unwrap().len(), 11);
}

#[test]
fn stale_response_ids_are_rejected() {
    let client_side = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = client_side.local_addr().unwrap();
    let fake = thread::spawn(move || {
        let (stream, _) = client_side.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        writeln!(writer, r#"{{"request_id":0,"ok":true,"payload":{{"eos_id":1,"v":1,"vocab_size":3}}}}"#).unwrap();
        line.clear();
        reader.read_line(&mut line).unwrap();
        writeln!(writer, r#"{{"request_id":77,"ok":true,"payload":[-1.0986122886681098,-1.0986122886681098,-1.0986122886681098]}}"#).unwrap();
    });
    let remote = BridgeLm::connect(addr).unwrap();
    assert_eq!(remote.vocab().size(), 3);
    assert!(remote.next_dist(&[]).is_err());
    fake.join().unwrap();
}
