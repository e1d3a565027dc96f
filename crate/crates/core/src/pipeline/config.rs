use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::{AblationConfig, EvalConfig};
use crate::model::ModelConfig;
use crate::tokenizer::SemanticCodebooks;
use crate::train::{PretrainConfig, SftConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Interaction log (`.tsv` or `.jsonl`); synthetic data is generated
    /// when unset.
    pub sequences: Option<PathBuf>,
    /// Item embedding file, required with `sequences`.
    pub items: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Tokens per item, the last one disambiguating collisions.
    pub levels: usize,
    pub codebook_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            codebook_size: 32,
        }
    }
}

/// Architecture knobs. Token vocabularies come from the fitted codebooks and
/// the user-table size from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_history: usize,
    pub max_prefix_items: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = ModelConfig::reference_scale();
        Self {
            d_model: p.d_model,
            encoder_layers: p.encoder_layers,
            decoder_layers: p.decoder_layers,
            heads: p.heads,
            ffn_dim: p.ffn_dim,
            max_history: p.max_history,
            max_prefix_items: p.max_prefix_items,
            dropout: p.dropout,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, tokenizer: &SemanticCodebooks, num_users: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_history: self.max_history,
            max_prefix_items: self.max_prefix_items,
            dropout: self.dropout,
            num_users,
            ..ModelConfig::default()
        }
        .with_tokenizer(tokenizer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub sft: SftConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            sft: SftConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Keys whose defaults are the reference-scale settings.
const REFERENCE_KEYS: [&str; 9] = [
    "tokenizer.levels",
    "model.d_model",
    "model.encoder_layers",
    "model.decoder_layers",
    "model.heads",
    "sft.k",
    "sft.tau",
    "sft.lambda_qual",
    "eval.beam_width",
];

impl RunConfig {
    /// Parses TOML; errors point at the offending line of `origin`.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse {
                path: origin.to_path_buf(),
                line,
                msg: e.message().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved TOML.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        if self.data.sequences.is_some() != self.data.items.is_some() {
            return Err(Error::Config("data.sequences and data.items must be given together".into()));
        }
        if self.tokenizer.levels == 0 || self.tokenizer.codebook_size == 0 {
            return Err(Error::Config("tokenizer levels and codebook size must be positive".into()));
        }
        let m = &self.model;
        if m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0 {
            return Err(Error::Config(format!("model.d_model {} must be a positive multiple of model.heads {}", m.d_model, m.heads)));
        }
        if m.max_history == 0 || !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config("model.max_history must be positive and model.dropout in [0, 1)".into()));
        }
        self.sft.validate()?;
        if self.sft.k > m.max_prefix_items || self.ablation.k_sweep.iter().any(|&k| k == 0 || k > m.max_prefix_items) {
            return Err(Error::Config(format!("curriculum sizes must lie in 1..={}", m.max_prefix_items)));
        }
        if self.eval.beam_width == 0 {
            return Err(Error::Config("eval.beam_width must be positive".into()));
        }
        Ok(())
    }

    /// One line per configuration key with its default value; reference-scale
    /// settings are marked.
    pub fn describe_keys() -> String {
        let value = serde_json::to_value(Self::default()).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        lines
            .into_iter()
            .map(|(k, v)| {
                let mark = if REFERENCE_KEYS.contains(&k.as_str()) { "  (reference)" } else { "" };
                format!("  {k:width$} = {v}{mark}\n")
            })
            .collect()
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        serde_json::Value::Null => out.push((prefix.to_string(), "unset".into())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
