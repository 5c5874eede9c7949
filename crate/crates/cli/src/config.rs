//! Flat JSON run configuration: file values, then flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use subln_core::init::InitMode;
use subln_core::lab::{Arm, LossKind, Reduction, Task};
use subln_core::{Family, NormVariant};

pub const SEED_ENV: &str = "SUBLN_SEED";

/// Every key any command understands. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<NormVariant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<InitMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub l: Option<Vec<usize>>,
    /// `auto`, `unit`, or a number.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arms: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_seeds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction: Option<Reduction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svg: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

impl RunConfig {
    /// Merges `flags` over the optional config file and validates every key.
    /// The file's `command`, when present, must name `command`.
    pub fn load(command: &str, file: Option<&Path>, flags: Value) -> Result<Self> {
        let mut map = match file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                match serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", path.display()))? {
                    Value::Object(m) => m,
                    _ => bail!("config {} must be a JSON object", path.display()),
                }
            }
            None => Map::new(),
        };
        if let Some(c) = map.get("command") {
            if c.as_str() != Some(command) {
                bail!("config key `command` is {c}, but the `{command}` command was invoked");
            }
        }
        let Value::Object(flags) = flags else {
            bail!("flags did not serialize to an object");
        };
        for (k, v) in flags {
            if !v.is_null() {
                map.insert(k, v);
            }
        }
        map.insert("command".into(), Value::String(command.into()));
        let mut config: RunConfig = serde_json::from_value(Value::Object(map)).context("invalid config")?;
        if config.seed.is_none() {
            if let Ok(s) = std::env::var(SEED_ENV) {
                config.seed = Some(s.parse().with_context(|| format!("{SEED_ENV}=`{s}` is not a u64"))?);
            }
        }
        Ok(config)
    }

    /// Single-line JSON written as the `#` comment heading every CSV. Output
    /// location and thread count do not affect results and are left out.
    pub fn header_line(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.jobs = None;
        format!("# {}", serde_json::to_string(&c).expect("config serializes"))
    }

    pub fn parsed_arms(&self) -> Result<Option<Vec<Arm>>> {
        self.arms
            .as_ref()
            .map(|v| v.iter().map(|s| s.parse::<Arm>().map_err(anyhow::Error::from)).collect())
            .transpose()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"command": "bounds", "d": 4, "eta": 0.5}"#).unwrap();
        let c = RunConfig::load("bounds", Some(&p), json!({"d": 8, "variant": null})).unwrap();
        assert_eq!(c.d, Some(8));
        assert_eq!(c.eta, Some(0.5));
    }

    #[test]
    fn unknown_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"depth": 4}"#).unwrap();
        let err = RunConfig::load("bounds", Some(&p), json!({})).unwrap_err();
        assert!(format!("{err:#}").contains("depth"), "{err:#}");
    }

    #[test]
    fn command_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"command": "gamma"}"#).unwrap();
        assert!(RunConfig::load("bounds", Some(&p), json!({})).is_err());
    }

    #[test]
    fn header_omits_out_and_jobs() {
        let c = RunConfig {
            command: Some("x".into()),
            out: Some("/tmp".into()),
            jobs: Some(3),
            d: Some(2),
            ..Default::default()
        };
        assert_eq!(c.header_line(), r#"# {"command":"x","d":2}"#);
    }
}
