use super::layers::{ffn, layer_norm, self_attention};
use super::{Binder, Model};
use crate::autodiff::{Array, Var};
use crate::data::{Batch, BehaviorType};
use crate::error::{Error, Result};
use crate::tokenizer::{ItemId, Token};

/// Encoder output for one history with padding removed.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    /// `[T'·L, d]` token states, the cross-attention memory.
    pub tokens: Var,
    /// `[T', d]` event states, each the mean of its event's token states.
    pub events: Var,
    /// Item of each real event, oldest first.
    pub items: Vec<ItemId>,
    /// Batch slot of each real event.
    pub slots: Vec<usize>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Encodes row `row` of a padded batch. Padding slots are dropped before
/// attention, which is the same as masking them out as keys.
pub fn encode(model: &Model, b: &mut Binder, batch: &Batch, row: usize) -> Result<EncoderStates> {
    if row >= batch.rows() {
        return Err(Error::Index(format!("batch row {row} of {}", batch.rows())));
    }
    let l = batch.levels;
    let mut tokens = Vec::new();
    let mut behaviors = Vec::new();
    let mut items = Vec::new();
    let mut slots = Vec::new();
    for slot in 0..batch.width {
        if !batch.mask[row][slot] {
            continue;
        }
        tokens.extend_from_slice(&batch.tokens[row][slot * l..(slot + 1) * l]);
        behaviors.push(batch.behaviors[row][slot * l]);
        items.push(batch.items[row][slot].expect("real slot has an item"));
        slots.push(slot);
    }
    let mut states = encode_events(model, b, &tokens, &behaviors, items)?;
    states.slots = slots;
    Ok(states)
}

/// Encodes a history given as flat per-event token groups (`L` tokens per
/// event) and one behavior per event.
pub fn encode_events(
    model: &Model,
    b: &mut Binder,
    tokens: &[Token],
    behaviors: &[BehaviorType],
    items: Vec<ItemId>,
) -> Result<EncoderStates> {
    let c = model.config();
    let lay = model.layout();
    let l = c.levels;
    let n_events = behaviors.len();
    if n_events == 0 {
        return Err(Error::Input("cannot encode an empty history".into()));
    }
    if tokens.len() != n_events * l || items.len() != n_events {
        return Err(Error::shape(
            "encode",
            format!("{} tokens and {} items for {n_events} events of {l} levels", tokens.len(), items.len()),
        ));
    }
    if n_events > c.max_history {
        return Err(Error::Input(format!(
            "history of {n_events} events exceeds max_history {}",
            c.max_history
        )));
    }
    let offsets = c.level_offsets();
    let n = n_events * l;
    let mut tok_idx = Vec::with_capacity(n);
    let mut beh_idx = Vec::with_capacity(n);
    let mut pos_idx = Vec::with_capacity(n);
    for (t, &beh) in behaviors.iter().enumerate() {
        let code = beh.code() as usize;
        if code >= c.behaviors {
            return Err(Error::Index(format!("behavior code {code} with {} behaviors", c.behaviors)));
        }
        for lvl in 0..l {
            let z = tokens[t * l + lvl];
            if z >= c.vocab_sizes[lvl] {
                return Err(Error::Index(format!("token {z} at level {lvl} exceeds vocabulary {}", c.vocab_sizes[lvl])));
            }
            tok_idx.push(offsets[lvl] + z);
            beh_idx.push(code);
            // Positions count back from the most recent event.
            pos_idx.push(n_events - 1 - t);
        }
    }
    let (tok_tab, beh_tab, pos_tab) = (b.p(lay.tok_emb), b.p(lay.beh_emb), b.p(lay.enc_pos));
    let e_tok = b.graph.gather_rows(tok_tab, &tok_idx)?;
    let e_beh = b.graph.gather_rows(beh_tab, &beh_idx)?;
    let e_pos = b.graph.gather_rows(pos_tab, &pos_idx)?;
    let x = b.graph.add(e_tok, e_beh)?;
    let x = b.graph.add(x, e_pos)?;
    let mut x = b.dropout(x, c.dropout)?;
    for layer in &lay.encoder {
        let h = layer_norm(b, &layer.ln1, x)?;
        let a = self_attention(b, &layer.attn, c.heads, h, false)?;
        let a = b.dropout(a, c.dropout)?;
        x = b.graph.add(x, a)?;
        let h = layer_norm(b, &layer.ln2, x)?;
        let f = ffn(b, &layer.ffn, h, c.dropout)?;
        let f = b.dropout(f, c.dropout)?;
        x = b.graph.add(x, f)?;
    }
    let token_states = layer_norm(b, &lay.enc_ln, x)?;
    let mut pool = vec![0.0; n_events * n];
    for t in 0..n_events {
        for lvl in 0..l {
            pool[t * n + t * l + lvl] = 1.0 / l as f64;
        }
    }
    let pool = b.graph.constant(Array::matrix(n_events, n, pool)?);
    let events = b.graph.matmul(pool, token_states)?;
    Ok(EncoderStates {
        tokens: token_states,
        events,
        items,
        slots: (0..n_events).collect(),
    })
}
