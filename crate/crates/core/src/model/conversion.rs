//! Encoder pass plus prefix construction for one conversion example, shared
//! by fine-tuning and retrieval.

use serde::{Deserialize, Serialize};

use super::{
    assemble_prefix, build_query, cross_memory, encode, recent_prefix, score_relevance, select_curriculum, Binder,
    CrossMemory, CurriculumPrefix, EncoderStates, Model,
};
use crate::data::Batch;
use crate::error::Result;
use crate::tokenizer::{SemanticCodebooks, Token};

/// How the decoder prefix is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefixMode {
    /// Straight-through top-k over pay-conditioned relevance.
    Learned,
    /// The last k events, oldest first, without a learned selector.
    Recent,
    /// No prefix: the decoder sees BOS and the target only.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixSpec {
    pub mode: PrefixMode,
    /// Curriculum size.
    pub k: usize,
    /// Selection temperature.
    pub tau: f64,
}

/// Encoder output and prefix for one batch row.
pub struct Prepared {
    pub states: EncoderStates,
    pub memory: CrossMemory,
    /// Present in [`PrefixMode::Learned`]; carries the surrogate mask.
    pub curriculum: Option<CurriculumPrefix>,
    pub prefix: Vec<Token>,
}

pub fn prepare(
    model: &Model,
    b: &mut Binder,
    batch: &Batch,
    row: usize,
    tokenizer: &SemanticCodebooks,
    spec: PrefixSpec,
) -> Result<Prepared> {
    let states = encode(model, b, batch, row)?;
    let memory = cross_memory(model, b, &states)?;
    let (curriculum, prefix) = match spec.mode {
        PrefixMode::Learned => {
            let q = build_query(model, b, batch.users[row])?;
            let s = score_relevance(&mut b.graph, q, states.events, None)?;
            let mut c = select_curriculum(&mut b.graph, s, spec.tau, spec.k)?;
            assemble_prefix(&mut c, &states.items, tokenizer)?;
            let tokens = c.tokens.clone();
            (Some(c), tokens)
        }
        PrefixMode::Recent => (None, recent_prefix(&states.items, spec.k, tokenizer)?),
        PrefixMode::Off => (None, Vec::new()),
    };
    Ok(Prepared {
        states,
        memory,
        curriculum,
        prefix,
    })
}
