//! Encoder–decoder generative recommender with the reverse-curriculum
//! prefix module.
//!
//! Every forward pass runs inside a [`Binder`]: a fresh graph plus lazily
//! bound parameters. The encoder turns one history into per-token and
//! per-event states, the decoder generates semantic tokens conditioned on a
//! behavior control token, and the [`rcpm`] functions select which history
//! events are teacher-forced as a decoder prefix.

mod checkpoint;
mod conversion;
mod decoder;
mod encoder;
mod layers;
mod params;
pub mod rcpm;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::SemanticCodebooks;

pub use checkpoint::{read_container, write_container};
pub use conversion::{prepare, PrefixMode, PrefixSpec, Prepared};
pub(crate) use decoder::head_logits;
pub use decoder::{cross_memory, decode_forward, decode_logits, nll_sum, CrossMemory, DecoderInput};
pub use encoder::{encode, encode_events, EncoderStates};
pub use params::{Binder, ParamId, ParamStore};
pub use rcpm::{
    assemble_prefix, build_query, couple_mask_to_prefix, curriculum_calls, recent_prefix, score_relevance,
    select_curriculum, CurriculumPrefix,
};

/// Standard deviation of every randomly initialised weight.
pub const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Tokens per item.
    pub levels: usize,
    pub vocab_sizes: Vec<usize>,
    pub behaviors: usize,
    /// Longest history the encoder accepts.
    pub max_history: usize,
    /// Largest curriculum the decoder has positions for.
    pub max_prefix_items: usize,
    /// Size of the user table, not counting the shared cold-start row.
    pub num_users: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 1,
            heads: 4,
            ffn_dim: 128,
            levels: 4,
            vocab_sizes: vec![32, 32, 32, 32],
            behaviors: 4,
            max_history: 50,
            max_prefix_items: 6,
            num_users: 2000,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Large-model settings: d=256, 4 encoder and 2 decoder layers, 8 heads.
    pub fn reference_scale() -> Self {
        Self {
            d_model: 256,
            encoder_layers: 4,
            decoder_layers: 2,
            heads: 8,
            ffn_dim: 1024,
            ..Self::default()
        }
    }

    /// Copies levels and vocabulary sizes from a fitted tokenizer.
    pub fn with_tokenizer(mut self, tokenizer: &SemanticCodebooks) -> Self {
        self.levels = tokenizer.levels();
        self.vocab_sizes = tokenizer.vocab_sizes();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.levels == 0 || self.vocab_sizes.len() != self.levels {
            return bad(format!("{} vocabulary sizes for {} levels", self.vocab_sizes.len(), self.levels));
        }
        if self.vocab_sizes.contains(&0) {
            return bad("vocabulary sizes must be positive".into());
        }
        if self.ffn_dim == 0 || self.behaviors == 0 || self.max_history == 0 {
            return bad("ffn_dim, behaviors and max_history must be positive".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Longest decoder input: BOS, the largest prefix, and a full target.
    pub fn max_decoder_len(&self) -> usize {
        1 + (self.max_prefix_items + 1) * self.levels
    }

    /// Offset of each level inside the shared token-embedding table.
    pub fn level_offsets(&self) -> Vec<usize> {
        self.vocab_sizes
            .iter()
            .scan(0, |acc, v| {
                let o = *acc;
                *acc += v;
                Some(o)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct LnIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_kv: ParamId,
    pub b_kv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayerIds {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayerIds {
    pub ln1: LnIds,
    pub self_attn: AttnIds,
    pub ln2: LnIds,
    pub cross: AttnIds,
    pub ln3: LnIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: ParamId,
    pub beh_emb: ParamId,
    pub enc_pos: ParamId,
    pub dec_pos: ParamId,
    pub bos: ParamId,
    pub encoder: Vec<EncoderLayerIds>,
    pub enc_ln: LnIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub dec_ln: LnIds,
    pub heads: Vec<(ParamId, ParamId)>,
    pub user_emb: ParamId,
    pub w_u: ParamId,
    pub q_w1: ParamId,
    pub q_b1: ParamId,
    pub q_w2: ParamId,
    pub q_b2: ParamId,
}

/// Prefix of every parameter that belongs to the curriculum selector.
pub const RCPM_PREFIX: &str = "rcpm.";

impl Layout {
    /// Walks the parameter list in a fixed order, asking `def` for each one.
    fn build(c: &ModelConfig, def: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>) -> Result<Self> {
        let d = c.d_model;
        let ln = |def: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>, name: &str| -> Result<LnIds> {
            Ok(LnIds {
                g: def(format!("{name}.g"), vec![1, d], Init::Ones)?,
                b: def(format!("{name}.b"), vec![1, d], Init::Zeros)?,
            })
        };
        let attn = |def: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>, name: &str| -> Result<AttnIds> {
            Ok(AttnIds {
                w_q: def(format!("{name}.w_q"), vec![d, d], Init::Normal)?,
                b_q: def(format!("{name}.b_q"), vec![1, d], Init::Zeros)?,
                w_kv: def(format!("{name}.w_kv"), vec![d, 2 * d], Init::Normal)?,
                b_kv: def(format!("{name}.b_kv"), vec![1, 2 * d], Init::Zeros)?,
                w_o: def(format!("{name}.w_o"), vec![d, d], Init::Normal)?,
                b_o: def(format!("{name}.b_o"), vec![1, d], Init::Zeros)?,
            })
        };
        let ffn = |def: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>, name: &str| -> Result<FfnIds> {
            Ok(FfnIds {
                w1: def(format!("{name}.w1"), vec![d, c.ffn_dim], Init::Normal)?,
                b1: def(format!("{name}.b1"), vec![1, c.ffn_dim], Init::Zeros)?,
                w2: def(format!("{name}.w2"), vec![c.ffn_dim, d], Init::Normal)?,
                b2: def(format!("{name}.b2"), vec![1, d], Init::Zeros)?,
            })
        };
        let vocab: usize = c.vocab_sizes.iter().sum();
        let tok_emb = def("tok_emb".into(), vec![vocab, d], Init::Normal)?;
        let beh_emb = def("beh_emb".into(), vec![c.behaviors, d], Init::Normal)?;
        let enc_pos = def("enc_pos".into(), vec![c.max_history, d], Init::Normal)?;
        let dec_pos = def("dec_pos".into(), vec![c.max_decoder_len(), d], Init::Normal)?;
        let bos = def("bos".into(), vec![1, d], Init::Normal)?;
        let mut encoder = Vec::with_capacity(c.encoder_layers);
        for i in 0..c.encoder_layers {
            encoder.push(EncoderLayerIds {
                ln1: ln(def, &format!("enc.{i}.ln1"))?,
                attn: attn(def, &format!("enc.{i}.attn"))?,
                ln2: ln(def, &format!("enc.{i}.ln2"))?,
                ffn: ffn(def, &format!("enc.{i}.ffn"))?,
            });
        }
        let enc_ln = ln(def, "enc.ln")?;
        let mut decoder = Vec::with_capacity(c.decoder_layers);
        for i in 0..c.decoder_layers {
            decoder.push(DecoderLayerIds {
                ln1: ln(def, &format!("dec.{i}.ln1"))?,
                self_attn: attn(def, &format!("dec.{i}.self"))?,
                ln2: ln(def, &format!("dec.{i}.ln2"))?,
                cross: attn(def, &format!("dec.{i}.cross"))?,
                ln3: ln(def, &format!("dec.{i}.ln3"))?,
                ffn: ffn(def, &format!("dec.{i}.ffn"))?,
            });
        }
        let dec_ln = ln(def, "dec.ln")?;
        let mut heads = Vec::with_capacity(c.levels);
        for (l, &v) in c.vocab_sizes.iter().enumerate() {
            heads.push((
                def(format!("head.{l}.w"), vec![d, v], Init::Normal)?,
                def(format!("head.{l}.b"), vec![1, v], Init::Zeros)?,
            ));
        }
        let user_emb = def(format!("{RCPM_PREFIX}user_emb"), vec![c.num_users + 1, d], Init::Normal)?;
        let w_u = def(format!("{RCPM_PREFIX}w_u"), vec![d, d], Init::Normal)?;
        let q_w1 = def(format!("{RCPM_PREFIX}mlp.w1"), vec![2 * d, d], Init::Normal)?;
        let q_b1 = def(format!("{RCPM_PREFIX}mlp.b1"), vec![1, d], Init::Zeros)?;
        let q_w2 = def(format!("{RCPM_PREFIX}mlp.w2"), vec![d, d], Init::Normal)?;
        let q_b2 = def(format!("{RCPM_PREFIX}mlp.b2"), vec![1, d], Init::Zeros)?;
        Ok(Self {
            tok_emb,
            beh_emb,
            enc_pos,
            dec_pos,
            bos,
            encoder,
            enc_ln,
            decoder,
            dec_ln,
            heads,
            user_emb,
            w_u,
            q_w1,
            q_b1,
            q_w2,
            q_b2,
        })
    }
}

fn init_array(shape: &[usize], init: Init, rng: &mut Rng) -> Array {
    match init {
        Init::Normal => Array::randn(shape, INIT_STD, rng),
        Init::Zeros => Array::zeros(shape),
        Init::Ones => Array::full(shape, 1.0),
    }
}

/// Configuration, parameters and the id layout tying them together.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut |name, shape, init| {
            params.insert(name, init_array(&shape, init, rng))
        })?;
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model from named arrays, checking every name and shape.
    pub fn from_parts(config: ModelConfig, arrays: Vec<(String, Array)>) -> Result<Self> {
        config.validate()?;
        let count = arrays.len();
        let mut by_name: std::collections::HashMap<String, Array> = arrays.into_iter().collect();
        if by_name.len() != count {
            return Err(Error::Format("duplicate parameter names".into()));
        }
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut |name, shape, _| {
            let a = by_name
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if a.shape() != shape.as_slice() {
                return Err(Error::Format(format!("parameter {name} has shape {:?}, expected {shape:?}", a.shape())));
            }
            if !a.is_finite() {
                return Err(Error::Format(format!("parameter {name} holds non-finite values")));
            }
            params.insert(name, a)
        })?;
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected parameter {extra}")));
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn is_rcpm(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with(RCPM_PREFIX)
    }

    /// Re-draws the curriculum-selector parameters: weights from a normal
    /// with [`INIT_STD`], biases zero.
    pub fn reinit_rcpm(&mut self, rng: &mut Rng) {
        let ids: Vec<ParamId> = self.params.ids().filter(|&id| self.is_rcpm(id)).collect();
        for id in ids {
            let shape = self.params.get(id).shape().to_vec();
            let init = if self.params.name(id).contains(".b") { Init::Zeros } else { Init::Normal };
            *self.params.get_mut(id) = init_array(&shape, init, rng);
        }
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({ "kind": "model", "config": self.config });
        let arrays: Vec<(&str, &Array)> = self.params.iter().map(|(_, n, a)| (n, a)).collect();
        write_container(path, &header, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, arrays) = read_container(path)?;
        if header.get("kind").and_then(|k| k.as_str()) != Some("model") {
            return Err(Error::Format(format!("{} is not a model file", path.display())));
        }
        let config: ModelConfig = serde_json::from_value(header["config"].clone())?;
        Self::from_parts(config, arrays)
    }

    /// Named copies of all parameter arrays.
    pub fn named_arrays(&self) -> Vec<(String, Array)> {
        self.params.iter().map(|(_, n, a)| (n.to_string(), a.clone())).collect()
    }
}
