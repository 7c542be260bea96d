use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diver_core::config::GAMMA_GRID;
use diver_core::template::load_templates;
use diver_core::{DecoderConfig, LanguageModel, Strategy, TabularLm};
use diver_harness::{run_dataset, stats, sweep_gamma, RunSpec};

#[derive(Parser)]
#[command(name = "diver", version, about = "Run decoding strategies over datasets and inspect traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode every record of a dataset, writing a trace and a report
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Trace output (JSON lines)
        #[arg(long)]
        out: PathBuf,
        /// Report output; stdout when omitted
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// One run per gamma value
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        /// Directory for per-gamma traces
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute aggregates from a trace file
    Stats { trace: PathBuf },
    /// Compare the engine against the brute-force oracle on one input
    #[command(hide = true)]
    Verify {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        input: String,
        #[arg(long, default_value = "plain")]
        task: String,
    },
    /// Serve a toy model over the bridge protocol
    #[command(hide = true)]
    ServeToy {
        #[arg(long)]
        model: PathBuf,
        /// Listen on this address instead of stdio
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Args)]
struct DecodeArgs {
    /// Model spec: toy:PATH, bridge:tcp://HOST:PORT or bridge:exec:COMMAND
    #[arg(long)]
    model: String,
    /// Verifier for diver-* methods, amateur for cd
    #[arg(long)]
    verify_model: Option<String>,
    /// Template file (JSON object or list); defaults to a single `plain` task
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value = "diver-right")]
    method: Strategy,
    #[arg(long, default_value_t = 0.3)]
    gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value_t = 4)]
    beam_width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    #[arg(long, default_value_t = 64)]
    max_span: usize,
    /// Sample spans from softmax(q) instead of taking the best
    #[arg(long)]
    sample_spans: bool,
    #[arg(long)]
    max_candidates: Option<usize>,
}

impl DecodeArgs {
    fn spec(&self) -> RunSpec {
        let cfg = DecoderConfig {
            strategy: self.method,
            gamma: self.gamma,
            top_p: self.top_p,
            alpha: self.alpha,
            beam_width: self.beam_width,
            max_new_tokens: self.max_tokens,
            max_span_len: self.max_span,
            rng_seed: self.seed,
            verifier: self.verify_model.clone(),
            sample_spans: self.sample_spans,
            max_candidates: self.max_candidates,
        };
        RunSpec { model: self.model.clone(), templates: self.templates.clone(), cfg }
    }
}

fn print_json(value: &impl serde::Serialize, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn toy(spec: &str) -> Result<TabularLm> {
    match spec.strip_prefix("toy:") {
        Some(path) => Ok(TabularLm::load(path)?),
        None => bail!("verify needs toy:PATH models, got {spec:?}"),
    }
}

fn verify(decode: &DecodeArgs, input: &str, task: &str) -> Result<ExitCode> {
    let spec = decode.spec();
    let model = toy(&spec.model)?;
    let verifier = spec.cfg.verifier.as_deref().map(toy).transpose()?;
    let verifier = verifier.as_ref().unwrap_or(&model);
    let templates = match &spec.templates {
        Some(p) => load_templates(p)?,
        None => diver_harness::default_templates(),
    };
    let tpl = templates.iter().find(|t| t.name == task).with_context(|| format!("no template named {task:?}"))?;
    let engine = diver_core::decode(&model, verifier, tpl, input, &spec.cfg).map_err(|f| f.error)?;
    let oracle = diver_oracle::oracle_decode(&model, verifier, tpl, input, &spec.cfg)?;
    let agree = engine.output == oracle;
    print_json(
        &serde_json::json!({
            "engine": model.vocab().detokenize(&engine.output),
            "oracle": model.vocab().detokenize(&oracle),
            "match": agree,
        }),
        None,
    )?;
    Ok(if agree { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn serve_toy(model: &Path, listen: Option<&str>) -> Result<()> {
    let lm = TabularLm::load(model)?;
    match listen {
        None => {
            let stdin = std::io::stdin();
            diver_core::bridge::serve(&lm, stdin.lock(), std::io::stdout().lock())?;
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            for stream in listener.incoming() {
                let stream = stream?;
                stream.set_nodelay(true)?;
                let reader = BufReader::new(stream.try_clone()?);
                diver_core::bridge::serve(&lm, reader, stream)?;
            }
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { dataset, decode, out, report } => {
            let rep = run_dataset(&dataset, &decode.spec(), &out)?;
            print_json(&rep, report.as_deref())?;
            for r in rep.records.iter().filter(|r| r.error.is_some()) {
                eprintln!("record {}: {}", r.id, r.error.as_deref().unwrap_or(""));
            }
            Ok(if rep.failures > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Command::Sweep { dataset, decode, gammas, out } => {
            let gammas = gammas.unwrap_or_else(|| GAMMA_GRID.to_vec());
            let rows = sweep_gamma(&dataset, &decode.spec(), &gammas, &out)?;
            print_json(&rows, None)?;
            Ok(if rows.iter().any(|r| r.failures > 0) { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Command::Stats { trace } => {
            print_json(&stats(&trace)?, None)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { decode, input, task } => verify(&decode, &input, &task),
        Command::ServeToy { model, listen } => {
            serve_toy(&model, listen.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
