use std::ops::Range;

use super::layers::{attend, ffn, layer_norm, linear, project_kv, self_attention};
use super::rcpm::{couple_mask_to_prefix, CurriculumPrefix};
use super::{Binder, EncoderStates, Model};
use crate::autodiff::Var;
use crate::data::BehaviorType;
use crate::error::{Error, Result};
use crate::tokenizer::Token;

/// Cross-attention keys and values of one encoder output, one entry per
/// decoder layer. Computing them once lets repeated decoder calls on the
/// same history share the projection.
#[derive(Clone, Debug)]
pub struct CrossMemory {
    kv: Vec<Var>,
}

pub fn cross_memory(model: &Model, b: &mut Binder, states: &EncoderStates) -> Result<CrossMemory> {
    let kv = model
        .layout()
        .decoder
        .iter()
        .map(|layer| project_kv(b, &layer.cross, states.tokens))
        .collect::<Result<_>>()?;
    Ok(CrossMemory { kv })
}

/// Decoder input after the BOS position.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInput<'a> {
    /// Behavior whose control embedding is added to BOS.
    pub behavior: BehaviorType,
    /// Teacher-forced tokens following BOS.
    pub tokens: &'a [Token],
    /// When set, the first `prefix.tokens.len()` tokens are this curriculum
    /// and their embeddings are scaled by its surrogate mask.
    pub prefix: Option<&'a CurriculumPrefix>,
}

/// Hidden states `[1 + tokens, d]`. Row `j` predicts output token `j`, whose
/// level is `j mod L`.
pub fn decode_forward(model: &Model, b: &mut Binder, memory: &CrossMemory, input: DecoderInput) -> Result<Var> {
    let c = model.config();
    let lay = model.layout();
    let l = c.levels;
    let n = 1 + input.tokens.len();
    if n > c.max_decoder_len() {
        return Err(Error::Length {
            len: n,
            max: c.max_decoder_len(),
        });
    }
    let code = input.behavior.code() as usize;
    if code >= c.behaviors {
        return Err(Error::Index(format!("behavior code {code} with {} behaviors", c.behaviors)));
    }
    let offsets = c.level_offsets();
    let mut idx = Vec::with_capacity(input.tokens.len());
    for (j, &z) in input.tokens.iter().enumerate() {
        let lvl = j % l;
        if z >= c.vocab_sizes[lvl] {
            return Err(Error::Index(format!("token {z} at level {lvl} exceeds vocabulary {}", c.vocab_sizes[lvl])));
        }
        idx.push(offsets[lvl] + z);
    }
    let bos = b.p(lay.bos);
    let beh_tab = b.p(lay.beh_emb);
    let e_b = b.graph.gather_rows(beh_tab, &[code])?;
    let mut rows = vec![b.graph.add(bos, e_b)?];
    let split = match input.prefix {
        Some(p) => {
            let k = p.tokens.len();
            if k > input.tokens.len() || input.tokens[..k] != p.tokens[..] {
                return Err(Error::Input("decoder tokens do not start with the curriculum prefix".into()));
            }
            k
        }
        None => 0,
    };
    let tok_tab = b.p(lay.tok_emb);
    if let Some(p) = input.prefix.filter(|_| split > 0) {
        let e = b.graph.gather_rows(tok_tab, &idx[..split])?;
        rows.push(couple_mask_to_prefix(&mut b.graph, p, e, l)?);
    }
    if split < idx.len() {
        rows.push(b.graph.gather_rows(tok_tab, &idx[split..])?);
    }
    let x = if rows.len() == 1 { rows[0] } else { b.graph.concat_rows(&rows)? };
    let pos_tab = b.p(lay.dec_pos);
    let pos: Vec<usize> = (0..n).collect();
    let e_pos = b.graph.gather_rows(pos_tab, &pos)?;
    let x = b.graph.add(x, e_pos)?;
    let mut x = b.dropout(x, c.dropout)?;
    for (layer, &kv) in lay.decoder.iter().zip(&memory.kv) {
        let h = layer_norm(b, &layer.ln1, x)?;
        let a = self_attention(b, &layer.self_attn, c.heads, h, true)?;
        let a = b.dropout(a, c.dropout)?;
        x = b.graph.add(x, a)?;
        let h = layer_norm(b, &layer.ln2, x)?;
        let a = attend(b, &layer.cross, c.heads, h, kv, false)?;
        let a = b.dropout(a, c.dropout)?;
        x = b.graph.add(x, a)?;
        let h = layer_norm(b, &layer.ln3, x)?;
        let f = ffn(b, &layer.ffn, h, c.dropout)?;
        let f = b.dropout(f, c.dropout)?;
        x = b.graph.add(x, f)?;
    }
    layer_norm(b, &lay.dec_ln, x)
}

/// Logits of the given hidden rows through the head of `level`.
pub(crate) fn head_logits(model: &Model, b: &mut Binder, hidden: Var, rows: &[usize], level: usize) -> Result<Var> {
    let (w, bias) = model.layout().heads[level];
    let h = b.graph.gather_rows(hidden, rows)?;
    linear(b, w, bias, h)
}

/// One `[1, |V|]` logit row per decoder position, using the vocabulary of
/// that position's level.
pub fn decode_logits(model: &Model, b: &mut Binder, hidden: Var) -> Result<Vec<Var>> {
    let n = b.graph.value(hidden).rows();
    let l = model.config().levels;
    (0..n).map(|j| head_logits(model, b, hidden, &[j], j % l)).collect()
}

/// Summed negative log-likelihood of `targets[j]` at positions `j` in
/// `positions`, as a `[1, 1]` variable.
pub fn nll_sum(model: &Model, b: &mut Binder, hidden: Var, targets: &[Token], positions: Range<usize>) -> Result<Var> {
    let n = b.graph.value(hidden).rows();
    if positions.end > n || positions.end > targets.len() || positions.is_empty() {
        return Err(Error::shape(
            "nll_sum",
            format!("positions {positions:?} for {n} rows and {} targets", targets.len()),
        ));
    }
    let l = model.config().levels;
    let mut parts = Vec::with_capacity(l);
    for lvl in 0..l {
        let rows: Vec<usize> = positions.clone().filter(|j| j % l == lvl).collect();
        if rows.is_empty() {
            continue;
        }
        let tgt: Vec<usize> = rows.iter().map(|&j| targets[j]).collect();
        let logits = head_logits(model, b, hidden, &rows, lvl)?;
        let nll = b.graph.cross_entropy_rows(logits, &tgt)?;
        parts.push(b.graph.sum(nll));
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = b.graph.add(total, p)?;
    }
    Ok(total)
}
