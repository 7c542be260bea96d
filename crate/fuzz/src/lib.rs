//! Bodies of the fuzz targets. Each takes raw bytes, feeds them to one
//! parser or decoder entry point and panics only on a broken invariant.
//! Kept free of libFuzzer so the checked-in corpus can be replayed by a
//! plain `cargo test`.

use std::io::BufReader;

use diver_core::bridge::protocol::{decode_logprobs, decode_manifest, BridgeRequest, BridgeResponse};
use diver_core::config::{Strategy, GAMMA_GRID};
use diver_core::template::parse_templates;
use diver_core::trace::{read_trace, RecordStats};
use diver_core::{
    decode, render_backward_prompt, DecoderConfig, EventData, Fallback, LanguageModel, PromptTemplatePair, TabularLm,
    TokenId, Vocab,
};
use diver_harness::{parse_dataset, ModelSpec};

pub fn tabular_lm_json(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(lm) = TabularLm::from_json(text) else { return };
    let again = TabularLm::from_json(&lm.to_json()).expect("serialized table reloads");
    assert_eq!(again.to_json(), lm.to_json());
    let eos = lm.vocab().eos();
    let ctx: Vec<TokenId> = (0..lm.vocab().size() as TokenId).filter(|&t| t != eos).take(3).collect();
    if let Ok(dist) = lm.next_dist(&ctx) {
        assert_eq!(dist.values().len(), lm.vocab().size());
        let mass: f64 = dist.values().iter().map(|v| v.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-6);
    }
}

pub fn templates_json(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(list) = parse_templates(text) else { return };
    for t in list {
        t.validate().expect("parsed templates validate");
        let _ = t.render_forward("in");
        let _ = t.render_forward_without_input();
        let _ = t.render_backward("in", "out");
    }
}

pub fn dataset_jsonl(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(records) = parse_dataset(text) else { return };
    let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), records.len());
}

pub fn trace_jsonl(data: &[u8]) {
    let Ok(records) = read_trace(BufReader::new(data)) else { return };
    let mut text = Vec::new();
    for (id, events) in &records {
        for e in events {
            text.extend_from_slice(e.to_line(id).as_bytes());
            text.push(b'\n');
        }
        let s = RecordStats::from_events(events);
        assert!(s.span_lengths.values().sum::<u64>() <= events.len() as u64);
    }
    let again = read_trace(BufReader::new(text.as_slice())).expect("rewritten trace parses");
    assert_eq!(again, records);
}

pub fn bridge_request(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(req) = BridgeRequest::decode(text) else { return };
    let line = req.encode();
    let back = BridgeRequest::decode(&line).expect("encoded request decodes");
    assert_eq!(back, req);
    assert_eq!(back.encode(), line);
}

pub fn bridge_response(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(resp) = BridgeResponse::decode(text) else { return };
    let line = resp.encode();
    assert_eq!(BridgeResponse::decode(&line).expect("encoded response decodes").encode(), line);
    let id = resp.request_id;
    if let Ok(payload) = resp.into_payload(id) {
        if let Ok(values) = decode_logprobs(payload.clone()) {
            assert!(values.iter().all(|v| !v.is_nan() && *v <= 0.0));
        }
        if let Ok(m) = decode_manifest(payload) {
            assert!((m.eos_id as usize) < m.vocab_size);
        }
    }
}

pub fn model_spec(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = text.parse::<ModelSpec>() {
        match spec {
            ModelSpec::Toy(p) => assert!(!p.as_os_str().is_empty()),
            ModelSpec::BridgeTcp(a) => assert!(!a.is_empty()),
            ModelSpec::BridgeExec(c) => assert!(!c.trim().is_empty()),
        }
    }
}

fn small_model() -> TabularLm {
    let vocab = Vocab::from_words("<s> </s> a b c", "</s>", Some("<s>")).expect("valid vocab");
    TabularLm::from_rows("fuzz", vocab, 2, &[("a", &[("b", 0.7), ("c", 0.3)])], Fallback::Uniform)
        .expect("valid table")
}

/// Bytes split at 0xff into forward template, backward template, input and
/// partial output.
pub fn backward_prompt(data: &[u8]) {
    let parts: Vec<String> = data.split(|&b| b == 0xff).map(|p| String::from_utf8_lossy(p).into_owned()).collect();
    if parts.len() < 4 {
        return;
    }
    let Ok(tpl) = PromptTemplatePair::new("f", parts[0].clone(), parts[1].clone()) else { return };
    let lm = small_model();
    if let Ok((prefix, target)) = render_backward_prompt(&lm, &tpl, &parts[2], &parts[3]) {
        assert!(prefix.iter().chain(target.iter()).all(|&t| lm.vocab().contains(t)));
        assert_eq!(target, lm.tokenize(&parts[2]).expect("input tokenized once already"));
    }
}

/// Builds a toy model and config from the bytes and decodes in every
/// verified mode, checking trace bookkeeping.
pub fn decode_toy(data: &[u8]) {
    if data.len() < 6 {
        return;
    }
    let content = 2 + data[0] as usize % 4;
    let order = 1 + data[1] as usize % 3;
    let gamma = GAMMA_GRID[data[2] as usize % GAMMA_GRID.len()];
    let max_new = 1 + data[3] as usize % 8;
    let max_span = 1 + data[4] as usize % 8;
    let input_len = 1 + data[5] as usize % 3;
    let mut bytes = data[6..].iter().copied().cycle().chain(std::iter::repeat(1));

    let mut words = vec!["<s>".to_owned(), "</s>".to_owned()];
    words.extend((0..content).map(|i| format!("t{i}")));
    let vocab = Vocab::new(words, "</s>", Some("<s>")).expect("valid vocab");
    let input: Vec<String> = (0..input_len).map(|_| format!("t{}", bytes.next().unwrap_or(0) as usize % content)).collect();

    let alphabet: Vec<TokenId> = (0..vocab.size() as TokenId).filter(|&t| t != 1).collect();
    let mut contexts = vec![Vec::new()];
    for _ in 1..order {
        contexts = contexts
            .into_iter()
            .flat_map(|c: Vec<TokenId>| alphabet.iter().map(move |&t| [c.clone(), vec![t]].concat()))
            .collect();
    }
    let rows = contexts
        .into_iter()
        .map(|ctx| {
            let mut w: Vec<f64> = (0..vocab.size()).map(|i| if i == 0 { 0.0 } else { bytes.next().unwrap_or(1) as f64 }).collect();
            if w.iter().all(|&x| x == 0.0) {
                w[1] = 1.0;
            }
            (ctx, w)
        })
        .collect();
    let lm = TabularLm::new("fuzz", vocab, order, rows, Fallback::Uniform).expect("generated table is valid");
    let tpl = PromptTemplatePair::new("plain", "[INPUT]", "[INCOMPLETE_OUTPUT] [INPUT]").expect("valid template");

    for strategy in [Strategy::DiverLeft, Strategy::DiverRight, Strategy::DiverToken] {
        let cfg = DecoderConfig { gamma, max_new_tokens: max_new, max_span_len: max_span, ..DecoderConfig::with_strategy(strategy) };
        let res = match decode(&lm, &lm, &tpl, &input.join(" "), &cfg) {
            Ok(r) => r,
            Err(f) => *f.partial,
        };
        assert!(res.output.len() <= max_new);
        let stats = res.trace.record_stats();
        assert_eq!(stats.tokens_emitted as usize, res.output.len());
        assert_eq!(stats.span_lengths.values().sum::<u64>(), stats.divergence_count);
        for e in &res.trace.events {
            if let EventData::Divergence { risks, k, candidates, .. } = &e.data {
                assert!(candidates.len() > 1);
                if strategy == Strategy::DiverToken {
                    assert!(risks.is_empty() && *k == 0);
                    continue;
                }
                assert_eq!(risks.len(), candidates.len());
                let lo = risks.iter().map(|r| r.1).min().unwrap_or(0);
                let hi = risks.iter().map(|r| r.1).max().unwrap_or(0);
                assert!(lo > e.step && *k <= hi - e.step - 1);
            }
        }
    }
}
