//! Reverse-curriculum prefix selection.
//!
//! A pay-conditioned user query scores every history event, a temperature
//! softmax turns the scores into a distribution `p`, and the top-k events
//! become the curriculum. Their tokens are laid out in ascending order of
//! `p`, so the most relevant event sits right before the target. The hard
//! k-hot mask is wrapped as `m = m_hard + (p - sg(p))`: its value is exactly
//! `m_hard`, its gradient flows into `p`.

use std::cell::Cell;

use super::layers::linear;
use super::{Binder, Model};
use crate::autodiff::{Array, Graph, Var};
use crate::data::{BehaviorType, UserId};
use crate::error::{Error, Result};
use crate::tokenizer::{ItemId, SemanticCodebooks, Token};

thread_local! {
    static CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`select_curriculum`] calls made on this thread so far.
pub fn curriculum_calls() -> u64 {
    CALLS.with(|c| c.get())
}

/// `q = MLP([W_u x_u ; e_pay])` with a 2d → d → d ReLU MLP. Users outside
/// the table share the cold-start row.
pub fn build_query(model: &Model, b: &mut Binder, user: UserId) -> Result<Var> {
    let c = model.config();
    let lay = model.layout();
    let row = (user.0 as usize).min(c.num_users);
    let table = b.p(lay.user_emb);
    let x_u = b.graph.gather_rows(table, &[row])?;
    let w_u = b.p(lay.w_u);
    let e_u = b.graph.matmul(x_u, w_u)?;
    let beh = b.p(lay.beh_emb);
    let e_pay = b.graph.gather_rows(beh, &[BehaviorType::CONVERSION.code() as usize])?;
    let z = b.graph.concat_cols(&[e_u, e_pay])?;
    let h = linear(b, lay.q_w1, lay.q_b1, z)?;
    let h = b.graph.relu(h);
    linear(b, lay.q_w2, lay.q_b2, h)
}

/// Scores `s_t = q·h_t / √d` as a `[1, T']` row. Where `valid` is false the
/// score is `-inf`.
pub fn score_relevance(g: &mut Graph, q: Var, events: Var, valid: Option<&[bool]>) -> Result<Var> {
    let (qr, d) = g.value(q).dims2("score_relevance")?;
    let (_, hd) = g.value(events).dims2("score_relevance")?;
    if qr != 1 || d != hd {
        return Err(Error::shape("score_relevance", format!("query [{qr}, {d}] against states of width {hd}")));
    }
    let s = g.matmul_bt(q, events)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    match valid {
        Some(v) => {
            let hidden: Vec<bool> = v.iter().map(|ok| !ok).collect();
            g.masked_fill(s, &hidden, f64::NEG_INFINITY)
        }
        None => Ok(s),
    }
}

/// Selected events of one history.
#[derive(Clone, Debug)]
pub struct CurriculumPrefix {
    /// Selected event indices, ordered by ascending relevance.
    pub indices: Vec<usize>,
    /// `[1, T']` relevance distribution.
    pub p: Var,
    pub p_values: Vec<f64>,
    pub m_hard: Vec<f64>,
    /// `[1, T']` straight-through mask.
    pub m: Var,
    /// Prefix tokens, filled by [`assemble_prefix`].
    pub tokens: Vec<Token>,
}

/// Top-k selection over `p = softmax(s / τ)`. Events scored `-inf` are
/// never selected; ties go to the smaller index; fewer than `k` candidates
/// selects them all.
pub fn select_curriculum(g: &mut Graph, s: Var, tau: f64, k: usize) -> Result<CurriculumPrefix> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if k == 0 {
        return Err(Error::Parameter("curriculum size k must be at least 1".into()));
    }
    let (rows, n) = g.value(s).dims2("select_curriculum")?;
    if rows != 1 {
        return Err(Error::shape("select_curriculum", format!("scores must be one row, got {rows}")));
    }
    CALLS.with(|c| c.set(c.get() + 1));
    let valid: Vec<usize> = (0..n).filter(|&t| g.value(s).data()[t].is_finite()).collect();
    if valid.is_empty() {
        return Err(Error::Input("no valid events to select from".into()));
    }
    let p = g.softmax_rows(s, tau)?;
    let p_values = g.value(p).data().to_vec();
    let mut ranked = valid;
    ranked.sort_by(|&a, &b| p_values[b].total_cmp(&p_values[a]).then(a.cmp(&b)));
    ranked.truncate(k);
    let mut m_hard = vec![0.0; n];
    for &t in &ranked {
        m_hard[t] = 1.0;
    }
    ranked.reverse();
    let hard = g.constant(Array::matrix(1, n, m_hard.clone())?);
    let sg = g.stop_gradient(p);
    let zero = g.sub(p, sg)?;
    let m = g.add(hard, zero)?;
    Ok(CurriculumPrefix {
        indices: ranked,
        p,
        p_values,
        m_hard,
        m,
        tokens: Vec::new(),
    })
}

/// Fills `curriculum.tokens` with the tokens of the selected items in
/// curriculum order.
pub fn assemble_prefix(curriculum: &mut CurriculumPrefix, items: &[ItemId], tokenizer: &SemanticCodebooks) -> Result<()> {
    let mut tokens = Vec::with_capacity(curriculum.indices.len() * tokenizer.levels());
    for &t in &curriculum.indices {
        let item = items
            .get(t)
            .ok_or_else(|| Error::Index(format!("event {t} of a {}-event history", items.len())))?;
        tokens.extend_from_slice(tokenizer.encode(*item)?);
    }
    curriculum.tokens = tokens;
    Ok(())
}

/// Scales the embeddings of each selected event's `levels` prefix tokens by
/// that event's surrogate mask entry. The value is unchanged; the gradient
/// reaches `p`.
pub fn couple_mask_to_prefix(g: &mut Graph, curriculum: &CurriculumPrefix, embeddings: Var, levels: usize) -> Result<Var> {
    let rows = g.value(embeddings).rows();
    if rows != curriculum.indices.len() * levels {
        return Err(Error::shape(
            "couple_mask_to_prefix",
            format!("{rows} embedding rows for {} events of {levels} tokens", curriculum.indices.len()),
        ));
    }
    let column = g.transpose(curriculum.m)?;
    let idx: Vec<usize> = curriculum
        .indices
        .iter()
        .flat_map(|&t| std::iter::repeat_n(t, levels))
        .collect();
    let scales = g.gather_rows(column, &idx)?;
    g.scale_rows(embeddings, scales)
}

/// Tokens of the last `k` items in chronological order.
pub fn recent_prefix(items: &[ItemId], k: usize, tokenizer: &SemanticCodebooks) -> Result<Vec<Token>> {
    let start = items.len().saturating_sub(k);
    let mut tokens = Vec::with_capacity((items.len() - start) * tokenizer.levels());
    for item in &items[start..] {
        tokens.extend_from_slice(tokenizer.encode(*item)?);
    }
    Ok(tokens)
}
