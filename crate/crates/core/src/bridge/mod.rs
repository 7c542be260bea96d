//! Engine side of the model bridge: a [`LanguageModel`] that forwards every
//! call to an external process, plus a reference responder that serves any
//! in-process model over the same protocol.

pub mod protocol;

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::dist::LogProbDist;
use crate::error::LmError;
use crate::lm::LanguageModel;
use crate::numeric::logsumexp;
use crate::vocab::{TokenId, TokenSeq, Vocab};

use protocol::{
    decode_logprobs, decode_manifest, encode_logprobs, BridgeRequest, BridgeResponse, Manifest, Op, Tokens,
    PROTOCOL_VERSION,
};

/// Bridges may return slightly unnormalized float32 distributions; within
/// this tolerance they are renormalized, beyond it rejected.
const RENORMALIZE_TOLERANCE: f64 = 1e-3;

struct Conn {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
}

pub struct BridgeLm {
    id: String,
    vocab: Vocab,
    manifest: Manifest,
    conn: Mutex<Conn>,
    next_id: AtomicU64,
    child: Option<Mutex<Child>>,
}

impl std::fmt::Debug for BridgeLm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeLm").field("id", &self.id).field("manifest", &self.manifest).finish()
    }
}

fn vocab_from_manifest(m: &Manifest) -> Result<Vocab, LmError> {
    let synthetic = || (0..m.vocab_size).map(|i| format!("<{i}>")).collect::<Vec<_>>();
    let tokens = match &m.tokens {
        Some(t) if t.iter().all(|s| !s.is_empty() && !s.chars().any(char::is_whitespace)) => t.clone(),
        _ => synthetic(),
    };
    let eos = tokens[m.eos_id as usize].clone();
    let bos = m.bos_id.and_then(|b| tokens.get(b as usize).cloned());
    Vocab::new(tokens.clone(), &eos, bos.as_deref()).or_else(|_| {
        let tokens = synthetic();
        let eos = tokens[m.eos_id as usize].clone();
        let bos = m.bos_id.and_then(|b| tokens.get(b as usize).cloned());
        Vocab::new(tokens, &eos, bos.as_deref())
    })
}

impl BridgeLm {
    /// Performs the hello exchange over an established stream pair.
    pub fn from_streams(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
        label: &str,
    ) -> Result<Self, LmError> {
        let mut conn = Conn { reader, writer };
        let payload = Self::exchange(&mut conn, &BridgeRequest::hello(0))?;
        let manifest = decode_manifest(payload)?;
        let vocab = vocab_from_manifest(&manifest)?;
        let id = manifest.model_id.clone().unwrap_or_else(|| format!("bridge:{label}"));
        Ok(Self { id, vocab, manifest, conn: Mutex::new(conn), next_id: AtomicU64::new(1), child: None })
    }

    /// Launches `program args...` and talks to it over stdin/stdout.
    pub fn spawn(command_line: &str) -> Result<Self, LmError> {
        let mut parts = command_line.split_whitespace();
        let program = parts.next().ok_or_else(|| LmError::ModelUnavailable("empty bridge command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| LmError::ModelUnavailable("no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| LmError::ModelUnavailable("no stdout".into()))?;
        let mut lm = Self::from_streams(Box::new(BufReader::new(stdout)), Box::new(stdin), command_line)?;
        lm.child = Some(Mutex::new(child));
        Ok(lm)
    }

    pub fn connect(addr: impl ToSocketAddrs + std::fmt::Display) -> Result<Self, LmError> {
        let label = addr.to_string();
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Self::from_streams(Box::new(reader), Box::new(stream), &label)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn exchange(conn: &mut Conn, req: &BridgeRequest) -> Result<serde_json::Value, LmError> {
        writeln!(conn.writer, "{}", req.encode())?;
        conn.writer.flush()?;
        let mut line = String::new();
        if conn.reader.read_line(&mut line)? == 0 {
            return Err(LmError::ModelUnavailable("bridge closed the connection".into()));
        }
        BridgeResponse::decode(line.trim_end())?.into_payload(req.request_id)
    }

    fn call(&self, op: Op, context: Option<Tokens>, target: Option<Tokens>) -> Result<serde_json::Value, LmError> {
        let request_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let req = BridgeRequest { op, request_id, v: None, context, target };
        let mut conn = self.conn.lock().map_err(|_| LmError::ModelUnavailable("connection poisoned".into()))?;
        Self::exchange(&mut conn, &req)
    }
}

impl Drop for BridgeLm {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut c) = child.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

impl LanguageModel for BridgeLm {
    fn id(&self) -> &str {
        &self.id
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn context_limit(&self) -> Option<usize> {
        self.manifest.context_limit
    }

    fn next_dist(&self, context: &[TokenId]) -> Result<LogProbDist, LmError> {
        if let Some(limit) = self.manifest.context_limit {
            if context.len() > limit {
                return Err(LmError::ContextTooLong { len: context.len(), limit });
            }
        }
        let values = decode_logprobs(self.call(Op::NextLogprobs, Some(Tokens::Ids(context.to_vec())), None)?)?;
        if values.len() != self.vocab.size() {
            return Err(LmError::Protocol(format!(
                "logprob vector has {} entries, vocabulary has {}",
                values.len(),
                self.vocab.size()
            )));
        }
        let norm = logsumexp(&values)?;
        if !norm.is_finite() || norm.abs() > RENORMALIZE_TOLERANCE {
            return Err(LmError::Protocol(format!("distribution log-mass {norm} is not 0")));
        }
        if norm.abs() <= 1e-12 {
            return Ok(LogProbDist::from_log_values(values)?);
        }
        Ok(LogProbDist::from_log_values(values.into_iter().map(|v| v - norm).collect())?)
    }

    fn score_tokens(&self, prefix: &[TokenId], target: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let scores = decode_logprobs(self.call(
            Op::ScoreSequence,
            Some(Tokens::Ids(prefix.to_vec())),
            Some(Tokens::Ids(target.to_vec())),
        )?)?;
        if scores.len() != target.len() {
            return Err(LmError::Protocol(format!(
                "score list has {} entries for {} target tokens",
                scores.len(),
                target.len()
            )));
        }
        Ok(scores)
    }

    fn tokenize(&self, text: &str) -> Result<TokenSeq, LmError> {
        let ids: Vec<TokenId> = serde_json::from_value(self.call(Op::Tokenize, Some(Tokens::Text(text.into())), None)?)
            .map_err(|e| LmError::Protocol(format!("bad token list: {e}")))?;
        if let Some(&bad) = ids.iter().find(|&&t| !self.vocab.contains(t)) {
            return Err(LmError::BadToken(bad));
        }
        Ok(TokenSeq(ids))
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, LmError> {
        serde_json::from_value(self.call(Op::Detokenize, Some(Tokens::Ids(ids.to_vec())), None)?)
            .map_err(|e| LmError::Protocol(format!("bad detokenized text: {e}")))
    }
}

fn answer<M: LanguageModel + ?Sized>(model: &M, req: &BridgeRequest) -> Result<serde_json::Value, LmError> {
    let ids = |t: &Option<Tokens>| -> Result<Vec<TokenId>, LmError> {
        match t {
            Some(Tokens::Ids(v)) => Ok(v.clone()),
            Some(Tokens::Text(s)) => Ok(model.tokenize(s)?.0),
            None => Ok(Vec::new()),
        }
    };
    match req.op {
        Op::Hello => {
            let vocab = model.vocab();
            let manifest = Manifest {
                bos_id: vocab.bos(),
                context_limit: model.context_limit(),
                eos_id: vocab.eos(),
                model_id: Some(model.id().to_owned()),
                tokens: Some(vocab.tokens().to_vec()),
                v: PROTOCOL_VERSION,
                vocab_size: vocab.size(),
            };
            Ok(serde_json::to_value(manifest)?)
        }
        Op::NextLogprobs => Ok(encode_logprobs(model.next_dist(&ids(&req.context)?)?.values())),
        Op::ScoreSequence => {
            let target = ids(&req.target)?;
            if target.is_empty() {
                return Err(LmError::Protocol("score_sequence needs a non-empty target".into()));
            }
            Ok(encode_logprobs(&model.score_tokens(&ids(&req.context)?, &target)?))
        }
        Op::Tokenize => match &req.context {
            Some(Tokens::Text(s)) => Ok(serde_json::to_value(model.tokenize(s)?.0)?),
            _ => Err(LmError::Protocol("tokenize needs a text context".into())),
        },
        Op::Detokenize => Ok(serde_json::Value::String(model.detokenize(&ids(&req.context)?)?)),
    }
}

/// Serves `model` over a JSON-lines stream until EOF. Malformed requests get
/// error responses; the loop keeps running.
pub fn serve<M, R, W>(model: &M, reader: R, mut writer: W) -> std::io::Result<()>
where
    M: LanguageModel + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match BridgeRequest::decode(&line) {
            Ok(req) => match answer(model, &req) {
                Ok(payload) => BridgeResponse::success(req.request_id, payload),
                Err(e) => BridgeResponse::failure(req.request_id, e.to_string()),
            },
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("request_id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                BridgeResponse::failure(id, e.to_string())
            }
        };
        writeln!(writer, "{}", response.encode())?;
        writer.flush()?;
    }
    Ok(())
}
