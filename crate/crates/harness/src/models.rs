//! Model specs on the command line:
//!
//! - `toy:PATH` loads a tabular model from JSON
//! - `bridge:tcp://HOST:PORT` connects to a running bridge
//! - `bridge:exec:COMMAND ARGS...` spawns a bridge and talks over stdio

use std::path::PathBuf;
use std::str::FromStr;

use diver_core::bridge::BridgeLm;
use diver_core::{LanguageModel, LmError, TabularLm};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    Toy(PathBuf),
    BridgeTcp(String),
    BridgeExec(String),
}

impl FromStr for ModelSpec {
    type Err = LmError;

    fn from_str(s: &str) -> Result<Self, LmError> {
        let bad = || LmError::ModelUnavailable(format!("unrecognized model spec {s:?}"));
        if let Some(path) = s.strip_prefix("toy:") {
            if path.is_empty() {
                return Err(bad());
            }
            return Ok(ModelSpec::Toy(path.into()));
        }
        let rest = s.strip_prefix("bridge:").ok_or_else(bad)?;
        if let Some(addr) = rest.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(bad());
            }
            return Ok(ModelSpec::BridgeTcp(addr.to_owned()));
        }
        match rest.strip_prefix("exec:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(ModelSpec::BridgeExec(cmd.to_owned())),
            _ => Err(bad()),
        }
    }
}

impl ModelSpec {
    pub fn load(&self) -> Result<Box<dyn LanguageModel>, LmError> {
        Ok(match self {
            ModelSpec::Toy(path) => Box::new(TabularLm::load(path)?),
            ModelSpec::BridgeTcp(addr) => Box::new(BridgeLm::connect(addr.as_str())?),
            ModelSpec::BridgeExec(cmd) => Box::new(BridgeLm::spawn(cmd)?),
        })
    }
}

pub fn load_model(spec: &str) -> Result<Box<dyn LanguageModel>, LmError> {
    spec.parse::<ModelSpec>()?.load()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_forms() {
        assert_eq!("toy:m.json".parse::<ModelSpec>().unwrap(), ModelSpec::Toy("m.json".into()));
        assert_eq!(
            "bridge:tcp://127.0.0.1:9000".parse::<ModelSpec>().unwrap(),
            ModelSpec::BridgeTcp("127.0.0.1:9000".into())
        );
        assert_eq!(
            "bridge:exec:python bridge.py --model x".parse::<ModelSpec>().unwrap(),
            ModelSpec::BridgeExec("python bridge.py --model x".into())
        );
        for bad in ["", "toy:", "gpt", "bridge:", "bridge:tcp://", "bridge:exec: "] {
            assert!(bad.parse::<ModelSpec>().is_err(), "{bad}");
        }
    }
}
