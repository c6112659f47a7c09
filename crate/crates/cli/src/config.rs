//! Run configuration file.
//!
//! ```toml
//! preset = "desk"          # base model: "desk" (default) or "paper"
//!
//! [model]                  # optional overrides, same keys as ModelConfig
//! reweight = "tanh"
//! [model.backbone]
//! branch_mode = "sequential"
//!
//! [train]                  # TrainConfig; `steps` is required
//! steps = 500
//! lr = 2e-4
//! ```
//!
//! Override tables merge key by key into the preset; arrays (such as
//! `backbone.stages`) replace the preset's value wholesale. Unknown keys at
//! any level are rejected.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use itsr_core::train::TrainConfig;
use itsr_core::ModelConfig;
use serde::Deserialize;
use toml::{Table, Value};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    model: Option<Table>,
    train: Option<Table>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| anyhow!("{e}"))?;
        let preset = raw.preset.as_deref().unwrap_or("desk");
        let mut model = ModelConfig::preset(preset).map_err(|e| anyhow!("{e}"))?;
        if let Some(overrides) = raw.model {
            let mut base = Value::try_from(&model).context("serializing preset")?;
            merge(&mut base, Value::Table(overrides));
            model = base
                .try_into()
                .map_err(|e: toml::de::Error| locate(text, "model", e.message()))?;
        }
        model.validate().map_err(|e| anyhow!("[model]: {e}"))?;
        let train = raw
            .train
            .map(|t| {
                Value::Table(t)
                    .try_into::<TrainConfig>()
                    .map_err(|e| locate(text, "train", e.message()))
            })
            .transpose()?;
        if let Some(t) = &train {
            t.validate().map_err(|e| anyhow!("[train]: {e}"))?;
        }
        Ok(Self { model, train })
    }

    pub fn require_train(&self) -> Result<&TrainConfig> {
        match &self.train {
            Some(t) => Ok(t),
            None => bail!("config has no [train] table"),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Adds the line of the offending key, when the message names one.
fn locate(text: &str, table: &str, message: &str) -> anyhow::Error {
    let key = message.split('`').nth(1);
    let line = key.and_then(|k| {
        text.lines().position(|l| {
            let l = l.trim_start();
            l.strip_prefix(k).is_some_and(|rest| rest.trim_start().starts_with('='))
        })
    });
    match line {
        Some(n) => anyhow!("[{table}] line {}: {message}", n + 1),
        None => anyhow!("[{table}]: {message}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use itsr_core::backbone::BranchMode;
    use itsr_core::upsampler::Reweight;

    #[test]
    fn empty_file_is_the_desk_preset() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.model, ModelConfig::desk());
        assert!(c.train.is_none());
    }

    #[test]
    fn overrides_merge_into_the_preset() {
        let c = RunConfig::parse(
            "preset = \"desk\"\n[model]\nreweight = \"tanh\"\n[model.backbone]\nbranch_mode = \"sequential\"\n[train]\nsteps = 7\nbatch = 2\n",
        )
        .unwrap();
        assert_eq!(c.model.reweight, Reweight::Tanh);
        assert_eq!(c.model.backbone.branch_mode, BranchMode::Sequential);
        assert_eq!(c.model.backbone.window, ModelConfig::desk().backbone.window);
        let t = c.require_train().unwrap();
        assert_eq!((t.steps, t.batch), (7, 2));
        assert_eq!(t.lr, TrainConfig::desk(7).lr);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_line() {
        let err = RunConfig::parse("[model]\nc_up = 8\nc_upp = 9\n").unwrap_err().to_string();
        assert!(err.contains("c_upp") && err.contains("line 3"), "{err}");
        let err = RunConfig::parse("[train]\nsteps = 3\nlearning_rate = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("learning_rate") && err.contains("line 3"), "{err}");
        let err = RunConfig::parse("seed = 3\n").unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn syntax_errors_report_a_position() {
        let err = RunConfig::parse("[train]\nsteps = = 3\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn documented_defaults_are_the_desk_defaults() {
        let text = r#"
preset = "desk"
[model]
reweight = "sin"
variant = "modulation"
c_up = 32
phi_hidden = 32
upsampler_init = "trunc_normal"
data_norm = true
precision = "f32"
[model.backbone]
window = 4
heads = 2
ffn_ratio = 2
branch_mode = "parallel"
global_residual = true
stages = [
  { blocks = 1, dbb_ratio = 0.0, channels = 16 },
  { blocks = 2, dbb_ratio = 1.0, channels = 16 },
]
[train]
steps = 500
batch = 4
patch = 24
r_min = 1.0
r_max = 2.0
augment = true
lr = 2e-4
decay_at = [0.4, 0.8, 0.9, 0.95]
decay_factor = 0.5
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
checkpoint_every = 0
log_wall_time = false
prefetch = 0
"#;
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.model, ModelConfig::desk());
        assert_eq!(c.train, Some(TrainConfig::desk(500)));
        let minimal = RunConfig::parse("[train]\nsteps = 500\n").unwrap();
        assert_eq!(minimal, c);
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(RunConfig::parse("preset = \"huge\"\n").is_err());
    }
}
