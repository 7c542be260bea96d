//! JSON-lines wire protocol between the engine and a model bridge process.
//!
//! One request per line, one response per line, strictly alternating on a
//! connection. Requests:
//!
//! ```json
//! {"op":"hello","request_id":0,"v":1}
//! {"op":"next_logprobs","request_id":1,"context":[5,9,2]}
//! {"op":"score_sequence","request_id":2,"context":[5,9],"target":[2,7]}
//! {"op":"tokenize","request_id":3,"context":"some text"}
//! {"op":"detokenize","request_id":4,"context":[5,9]}
//! ```
//!
//! Responses echo `request_id` and carry either `payload` (`ok: true`) or
//! `error`. Log-probabilities travel as JSON numbers with `null` standing
//! for negative infinity.

use serde::{Deserialize, Serialize};

use crate::error::LmError;
use crate::vocab::TokenId;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Hello,
    NextLogprobs,
    ScoreSequence,
    Tokenize,
    Detokenize,
}

/// Token ids, or raw text the bridge tokenizes itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tokens {
    Ids(Vec<TokenId>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub op: Op,
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Tokens>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Tokens>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeResponse {
    pub request_id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Payload of a `hello` response. Fields are declared in alphabetical order
/// so typed and untyped serialization agree byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bos_id: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_limit: Option<usize>,
    pub eos_id: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    pub v: u32,
    pub vocab_size: usize,
}

impl BridgeRequest {
    pub fn new(op: Op, request_id: u64) -> Self {
        Self { op, request_id, v: None, context: None, target: None }
    }

    pub fn hello(request_id: u64) -> Self {
        Self { v: Some(PROTOCOL_VERSION), ..Self::new(Op::Hello, request_id) }
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    pub fn decode(line: &str) -> Result<Self, LmError> {
        serde_json::from_str(line).map_err(|e| LmError::Protocol(format!("bad request: {e}")))
    }
}

impl BridgeResponse {
    pub fn success(request_id: u64, payload: serde_json::Value) -> Self {
        Self { request_id, ok: true, payload: Some(payload), error: None }
    }

    pub fn failure(request_id: u64, error: impl Into<String>) -> Self {
        Self { request_id, ok: false, payload: None, error: Some(error.into()) }
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }

    pub fn decode(line: &str) -> Result<Self, LmError> {
        serde_json::from_str(line).map_err(|e| LmError::Protocol(format!("bad response: {e}")))
    }

    /// The payload of a successful response to request `expected_id`.
    pub fn into_payload(self, expected_id: u64) -> Result<serde_json::Value, LmError> {
        if self.request_id != expected_id {
            return Err(LmError::Protocol(format!(
                "response id {} does not match request {expected_id}",
                self.request_id
            )));
        }
        if !self.ok {
            return Err(LmError::ModelUnavailable(self.error.unwrap_or_else(|| "unspecified bridge error".into())));
        }
        self.payload.ok_or_else(|| LmError::Protocol("ok response without payload".into()))
    }
}

/// `-inf` becomes `null`.
pub fn encode_logprobs(values: &[f64]) -> serde_json::Value {
    serde_json::Value::Array(
        values
            .iter()
            .map(|&v| if v.is_finite() { serde_json::json!(v) } else { serde_json::Value::Null })
            .collect(),
    )
}

pub fn decode_logprobs(payload: serde_json::Value) -> Result<Vec<f64>, LmError> {
    let raw: Vec<Option<f64>> =
        serde_json::from_value(payload).map_err(|e| LmError::Protocol(format!("bad logprob list: {e}")))?;
    raw.into_iter()
        .map(|v| match v {
            None => Ok(f64::NEG_INFINITY),
            Some(x) if x.is_nan() || x > 1e-6 => Err(LmError::Protocol(format!("invalid log-probability {x}"))),
            Some(x) => Ok(x.min(0.0)),
        })
        .collect()
}

pub fn decode_manifest(payload: serde_json::Value) -> Result<Manifest, LmError> {
    let m: Manifest =
        serde_json::from_value(payload).map_err(|e| LmError::Protocol(format!("bad manifest: {e}")))?;
    if m.v != PROTOCOL_VERSION {
        return Err(LmError::Protocol(format!("unsupported protocol version {}", m.v)));
    }
    if m.vocab_size == 0 || m.eos_id as usize >= m.vocab_size {
        return Err(LmError::Protocol("manifest eos_id outside vocabulary".into()));
    }
    if let Some(t) = &m.tokens {
        if t.len() != m.vocab_size {
            return Err(LmError::Protocol("manifest token list does not match vocab_size".into()));
        }
    }
    Ok(m)
}
