//! Run configuration: one TOML file with a section per stage.
//!
//! A file is laid over the built-in defaults key by key, then environment
//! variables named `TSREASON_<SECTION>__<KEY>` (or `TSREASON_<KEY>` for
//! top-level keys) override single values. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::circuit::{CircuitConfig, CHANNELS};
use crate::dataset::DatasetSpec;
use crate::lm::{TemporalEncoding, TransformerConfig};
use crate::train::{Stage, StageConfig};
use crate::util::sha256_hex;
use crate::vq::{TokenizerConfig, VqTrainConfig};

pub const ENV_PREFIX: &str = "TSREASON_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Generation budget per response.
    pub max_new_tokens: usize,
    /// Samples per reasoning task in the review sheet.
    pub review_per_task: usize,
    /// Validation samples per task scored at each fine-tuning snapshot.
    pub probe_per_task: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_new_tokens: 320, review_per_task: 25, probe_per_task: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub baseline: TemporalEncoding,
    pub seeds: Vec<u64>,
    /// Scale applied to every dataset count for ablation runs.
    pub dataset_scale: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { baseline: TemporalEncoding::Linear, seeds: vec![1, 2, 3], dataset_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Single-threaded dataset generation.
    pub deterministic: bool,
    pub encoding: TemporalEncoding,
    pub circuit: CircuitConfig,
    pub dataset: DatasetSpec,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_training: VqTrainConfig,
    pub model: TransformerConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 2024,
            out: PathBuf::from("runs/default"),
            deterministic: true,
            encoding: TemporalEncoding::Tokens,
            circuit: CircuitConfig::default(),
            dataset: DatasetSpec::default(),
            tokenizer: TokenizerConfig::default(),
            tokenizer_training: VqTrainConfig::default(),
            model: TransformerConfig::default(),
            pretrain: StageConfig::pretrain(),
            finetune: StageConfig::finetune(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        };
        cfg.assign_stage_seeds();
        cfg
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_env(root: &mut toml::Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
    for (key, raw) in vars {
        let Some(path) = key.strip_prefix(ENV_PREFIX) else { continue };
        let parts: Vec<String> = path.split("__").map(|p| p.to_ascii_lowercase()).collect();
        let mut node = &mut *root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(p))
                .ok_or_else(|| ConfigError::Invalid(format!("{key}: no config section {p:?}")))?;
        }
        let table = node.as_table_mut().ok_or_else(|| ConfigError::Invalid(format!("{key}: not a section")))?;
        table.insert(parts[parts.len() - 1].clone(), parse_env_value(&raw));
    }
    Ok(())
}

impl RunConfig {
    /// Parse `text` over the defaults, then apply `env` overrides and validate.
    pub fn from_toml_with_env(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let user: toml::Value = toml::from_str::<toml::Table>(text)
            .map(toml::Value::Table)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut root = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut root, user);
        apply_env(&mut root, env)?;
        let mut cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        cfg.assign_stage_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    /// Read and validate a config file, honoring `TSREASON_*` variables.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_with_env(&text, std::env::vars())
    }

    fn assign_stage_seeds(&mut self) {
        self.pretrain.seed = crate::util::derive_seed(self.seed, "pretrain");
        self.finetune.seed = crate::util::derive_seed(self.seed, "finetune");
    }

    /// Rebuild derived fields after the seed changes.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.assign_stage_seeds();
        self
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let m = self.dataset.window_len;
        let t = &self.tokenizer;
        if t.patch_len > m {
            return bad(format!("tokenizer.patch_len ({}) exceeds dataset.window_len ({m})", t.patch_len));
        }
        t.validate().map_err(|e| ConfigError::Invalid(format!("tokenizer: {e}")))?;
        let patches = t.num_patches(m).map_err(|e| ConfigError::Invalid(format!("tokenizer: {e}")))?;
        self.circuit.validate().map_err(|e| ConfigError::Invalid(format!("circuit: {e}")))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        let temporal = CHANNELS * patches + (CHANNELS - 1) + 3;
        if self.model.context < temporal {
            return bad(format!(
                "model.context ({}) cannot hold the {temporal} tokens of the temporal block alone",
                self.model.context
            ));
        }
        for (name, stage, want) in [("pretrain", &self.pretrain, Stage::Pretrain), ("finetune", &self.finetune, Stage::Finetune)] {
            if stage.stage != want {
                return bad(format!("{name}.stage must be {:?}", want));
            }
            stage.validate().map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        if self.ablation.seeds.is_empty() {
            return bad("ablation.seeds must list at least one seed".into());
        }
        if !self.ablation.baseline.is_continuous() {
            return bad("ablation.baseline must be a continuous adapter (linear, mlp or attention)".into());
        }
        if !(self.ablation.dataset_scale > 0.0) {
            return bad("ablation.dataset_scale must be positive".into());
        }
        if self.dataset.max_regeneration_fraction < 0.0 {
            return bad("dataset.max_regeneration_fraction must be >= 0".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical serialized form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let located = RunConfig { out: PathBuf::new(), ..self.clone() };
        sha256_hex(located.to_toml().as_bytes())
    }
}
