//! Run configuration: one JSON document plus `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tammatte_core::model::ModelConfig;
use tammatte_core::synth::SynthConfig;
use tammatte_core::train::TrainConfig;
use tammatte_core::trimap::{MAX_KERNEL, VALIDATION_KERNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Dilation kernels reported by validation.
    pub kernels: Vec<usize>,
    /// Kernel used for the headline validation metrics and for `infer` / `eval` defaults.
    pub kernel: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kernels: VALIDATION_KERNELS.to_vec(),
            kernel: VALIDATION_KERNELS[0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for &k in self.kernels.iter().chain([&self.kernel]) {
            if k % 2 == 0 || k > MAX_KERNEL {
                bail!("eval kernels must be odd and <= {MAX_KERNEL}, got {k}");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; it replaces the seeds of the model and train sections.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `file` (or the defaults), applies `overrides`, propagates the global seed and validates.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut config: RunConfig = serde_json::from_value(doc).context("invalid run config")?;
        config.propagate_seed();
        config.validate()?;
        Ok(config)
    }

    pub fn propagate_seed(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate(self.model.output_stride())?;
        self.eval.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Applies `a.b.c=value`. The value parses as JSON when possible and is a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` must look like key=value");
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override `{assignment}` has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!(
                "override `{assignment}`: `{}` is not a section",
                keys[..i].join(".")
            );
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("keys is non-empty")
}
