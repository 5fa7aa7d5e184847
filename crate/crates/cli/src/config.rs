//! Run configuration: defaults, JSON config files and dotted `key=value`
//! overrides, merged in that order.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ccgs::corpus::{default_split_counts, SynthConfig};
use ccgs::evaluation::{EvalMode, EvalOptions};
use ccgs::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for corpus generation; `--seed` also sets the training and
    /// initialization seeds.
    pub seed: u64,
    pub synth: SynthConfig,
    /// Train/val/test question counts; `null` splits the pool 2710:145:155.
    pub split: Option<[usize; 3]>,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub mode: EvalMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig {
                n_questions: 151,
                ..SynthConfig::default()
            },
            split: None,
            train: TrainConfig::desk(),
            eval: EvalOptions::default(),
            mode: EvalMode::Ccgs,
        }
    }
}

impl RunConfig {
    pub fn split_counts(&self) -> [usize; 3] {
        self.split.unwrap_or_else(|| default_split_counts(self.synth.n_questions))
    }

    pub fn to_json(&self) -> anyhow::Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Accumulates config layers on top of the defaults.
pub struct ConfigBuilder {
    value: Value,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self {
            value: serde_json::to_value(RunConfig::default()).expect("default config serializes"),
        }
    }

    pub fn merge_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let layer: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut self.value, layer, "").with_context(|| format!("in config {}", path.display()))
    }

    /// Applies `a.b.c=value`. The value is read as JSON when it parses,
    /// otherwise as a bare string.
    pub fn set(&mut self, assignment: &str) -> anyhow::Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut layer = value;
        for key in path.rsplit('.') {
            if key.is_empty() {
                bail!("empty key in override `{assignment}`");
            }
            layer = Value::Object([(key.to_string(), layer)].into_iter().collect());
        }
        merge(&mut self.value, layer, "")
    }

    pub fn build(self) -> anyhow::Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(self.value).context("invalid configuration")?;
        cfg.train.validate()?;
        cfg.eval.validate()?;
        Ok(cfg)
    }
}

/// Overlays `layer` onto `base`. Keys absent from `base` are rejected so that
/// typos fail instead of being ignored.
fn merge(base: &mut Value, layer: Value, prefix: &str) -> anyhow::Result<()> {
    match (base, layer) {
        (Value::Object(base), Value::Object(layer)) => {
            for (key, v) in layer {
                let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
                let slot = base.get_mut(&key).ok_or_else(|| anyhow!("unknown config key `{path}`"))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (Value::Object(_), v) if !v.is_null() => bail!("config key `{prefix}` is a section, got {v}"),
        (base, v) => {
            *base = v;
            Ok(())
        }
    }
}

/// Parses `1,10,100`.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| anyhow!("bad list entry `{s}`: {e}")))
        .collect()
}
