use super::{AttnIds, Binder, FfnIds, LnIds, LN_EPS};
use crate::autodiff::Var;
use crate::error::Result;

pub(crate) fn layer_norm(b: &mut Binder, ids: &LnIds, x: Var) -> Result<Var> {
    let (g, beta) = (b.p(ids.g), b.p(ids.b));
    b.graph.layer_norm(x, g, beta, LN_EPS)
}

pub(crate) fn linear(b: &mut Binder, w: super::ParamId, bias: super::ParamId, x: Var) -> Result<Var> {
    let (w, bias) = (b.p(w), b.p(bias));
    let y = b.graph.matmul(x, w)?;
    b.graph.add_bias(y, bias)
}

pub(crate) fn ffn(b: &mut Binder, ids: &FfnIds, x: Var, dropout: f64) -> Result<Var> {
    let h = linear(b, ids.w1, ids.b1, x)?;
    let h = b.graph.relu(h);
    let h = b.dropout(h, dropout)?;
    linear(b, ids.w2, ids.b2, h)
}

/// Key/value projection `[n, 2d]` of `x`; keys first, values second.
pub(crate) fn project_kv(b: &mut Binder, ids: &AttnIds, x: Var) -> Result<Var> {
    linear(b, ids.w_kv, ids.b_kv, x)
}

/// Multi-head attention of queries from `x` over projected keys/values.
/// `causal` hides key `j` from query `i` when `j > i`.
pub(crate) fn attend(b: &mut Binder, ids: &AttnIds, heads: usize, x: Var, kv: Var, causal: bool) -> Result<Var> {
    let d = b.graph.value(x).cols();
    let dh = d / heads;
    let q = linear(b, ids.w_q, ids.b_q, x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = b.graph.slice_cols(q, h * dh, dh)?;
        let kh = b.graph.slice_cols(kv, h * dh, dh)?;
        let vh = b.graph.slice_cols(kv, d + h * dh, dh)?;
        let scores = b.graph.matmul_bt(qh, kh)?;
        let mut scores = b.graph.scale(scores, scale);
        if causal {
            scores = b.graph.causal_mask(scores, 0)?;
        }
        let att = b.graph.softmax_rows(scores, 1.0)?;
        outs.push(b.graph.matmul(att, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { b.graph.concat_cols(&outs)? };
    linear(b, ids.w_o, ids.b_o, o)
}

/// Self-attention sub-layer input `x` (already normalised).
pub(crate) fn self_attention(b: &mut Binder, ids: &AttnIds, heads: usize, x: Var, causal: bool) -> Result<Var> {
    let kv = project_kv(b, ids, x)?;
    attend(b, ids, heads, x, kv, causal)
}
