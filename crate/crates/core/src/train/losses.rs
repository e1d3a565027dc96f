use serde::{Deserialize, Serialize};

use super::Gradients;
use crate::autodiff::{Array, Var};
use crate::data::{Batch, BehaviorType};
use crate::model::{
    cross_memory, decode_forward, encode, nll_sum, prepare, Binder, DecoderInput, Model, PrefixSpec,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::SemanticCodebooks;

/// Batch-mean losses, in nats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Generation loss: the per-example sequence NLL during pretraining,
    /// the per-token NLL over prefix and target during fine-tuning.
    pub nll: f64,
    /// Per-token target NLL with the prefix, current parameters.
    pub l_curr_pay: f64,
    /// Per-token target NLL without prefix under the frozen baseline.
    pub l_base_pay: f64,
    pub l_qual: f64,
    pub l_total: f64,
    pub examples: usize,
}

impl LossReport {
    /// `l_base_pay - l_curr_pay`, the likelihood gain the hinge asks for.
    pub fn nll_gain(&self) -> f64 {
        self.l_base_pay - self.l_curr_pay
    }
}

/// Which decoder tokens the fine-tuning NLL averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SftWeighting {
    /// Prefix and target tokens weighted equally.
    #[default]
    AllTokens,
    TargetOnly,
}

/// `max(0, margin - (base - curr))`
pub fn quality_hinge(base: f64, curr: f64, margin: f64) -> f64 {
    (margin - (base - curr)).max(0.0)
}

/// Trainable binder when gradients are wanted, frozen otherwise.
fn binder<'a>(model: &'a Model, train: bool, dropout: Option<&'a mut Rng>) -> Binder<'a> {
    if !train {
        return Binder::frozen(model.params());
    }
    let b = Binder::trainable(model.params());
    match dropout {
        Some(r) => b.with_dropout(r),
        None => b,
    }
}

fn backprop(b: &mut Binder, loss: Var, weight: f64, grads: &mut Gradients) -> Result<()> {
    let scaled = b.graph.scale(loss, weight);
    for (id, g) in b.gradients(scaled)? {
        grads.accumulate(id, &g);
    }
    Ok(())
}

fn scalar(b: &Binder, v: Var) -> f64 {
    b.graph.value(v).data()[0]
}

/// Mixed-behavior generation loss: for each example the decoder sees
/// `[BOS + e_b ; z]` with `b` the target behavior, and the loss is the summed
/// NLL of the target's tokens, averaged over the batch. Gradients of that
/// mean are added to `grads` when given.
pub fn loss_pretrain(
    model: &Model,
    batch: &Batch,
    mut grads: Option<&mut Gradients>,
    mut dropout: Option<&mut Rng>,
) -> Result<LossReport> {
    let rows = batch.rows();
    if rows == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let mut total = 0.0;
    for r in 0..rows {
        let mut b = binder(model, grads.is_some(), dropout.as_deref_mut());
        let states = encode(model, &mut b, batch, r)?;
        let memory = cross_memory(model, &mut b, &states)?;
        let z = &batch.target_tokens[r];
        let hidden = decode_forward(
            model,
            &mut b,
            &memory,
            DecoderInput {
                behavior: batch.target_behaviors[r],
                tokens: &z[..z.len() - 1],
                prefix: None,
            },
        )?;
        let nll = nll_sum(model, &mut b, hidden, z, 0..z.len())?;
        total += scalar(&b, nll);
        if let Some(g) = grads.as_deref_mut() {
            backprop(&mut b, nll, 1.0 / rows as f64, g)?;
        }
    }
    let nll = total / rows as f64;
    Ok(LossReport {
        nll,
        l_total: nll,
        examples: rows,
        ..LossReport::default()
    })
}

/// Settings of the fine-tuning objective.
#[derive(Clone, Copy, Debug)]
pub struct SftObjective<'a> {
    /// Frozen pretrained baseline.
    pub theta0: Option<&'a Model>,
    pub tokenizer: &'a SemanticCodebooks,
    pub prefix: PrefixSpec,
    pub lambda_qual: f64,
    pub margin: f64,
    pub weighting: SftWeighting,
}

/// Per-token target NLL without prefix under a frozen model.
pub fn baseline_pay_nll(theta0: &Model, batch: &Batch, row: usize) -> Result<f64> {
    let mut b = Binder::frozen(theta0.params());
    let states = encode(theta0, &mut b, batch, row)?;
    let memory = cross_memory(theta0, &mut b, &states)?;
    let z = &batch.target_tokens[row];
    let hidden = decode_forward(
        theta0,
        &mut b,
        &memory,
        DecoderInput {
            behavior: BehaviorType::CONVERSION,
            tokens: &z[..z.len() - 1],
            prefix: None,
        },
    )?;
    let nll = nll_sum(theta0, &mut b, hidden, z, 0..z.len())?;
    Ok(scalar(&b, nll) / z.len() as f64)
}

/// Curriculum-augmented fine-tuning loss on pay targets.
///
/// Per example: the prefix is built by `obj.prefix`, the decoder sees
/// `[BOS + e_pay ; prefix ; z]`, `l_sft` is the mean NLL over the decoder
/// tokens selected by `obj.weighting`, `l_curr` the mean target-token NLL,
/// `l_base` the same quantity without prefix under θ0, and
/// `l_qual = max(0, margin - (l_base - l_curr))`. The example loss
/// `l_sft + λ·l_qual` is averaged over the batch; only θ receives gradient.
pub fn loss_sft(
    model: &Model,
    batch: &Batch,
    obj: &SftObjective,
    grads: Option<&mut Gradients>,
    dropout: Option<&mut Rng>,
) -> Result<LossReport> {
    loss_sft_with_baseline(model, batch, obj, None, grads, dropout)
}

/// [`loss_sft`] with the per-row θ0 baselines supplied, for callers that
/// score the same examples repeatedly.
pub(crate) fn loss_sft_with_baseline(
    model: &Model,
    batch: &Batch,
    obj: &SftObjective,
    baseline: Option<&[f64]>,
    mut grads: Option<&mut Gradients>,
    mut dropout: Option<&mut Rng>,
) -> Result<LossReport> {
    let theta0 = obj
        .theta0
        .ok_or_else(|| Error::Pipeline("fine-tuning needs the pretrained baseline θ0".into()))?;
    let rows = batch.rows();
    if baseline.is_some_and(|b| b.len() != rows) {
        return Err(Error::Input(format!("{} baselines for {rows} rows", baseline.map_or(0, <[f64]>::len))));
    }
    if rows == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(b) = batch.target_behaviors.iter().find(|b| **b != BehaviorType::CONVERSION) {
        return Err(Error::Input(format!("fine-tuning targets must be {}, found {}", BehaviorType::CONVERSION.name(), b.name())));
    }
    let mut sums = LossReport {
        examples: rows,
        ..LossReport::default()
    };
    for r in 0..rows {
        let base = match baseline {
            Some(b) => b[r],
            None => baseline_pay_nll(theta0, batch, r)?,
        };
        let mut b = binder(model, grads.is_some(), dropout.as_deref_mut());
        let prep = prepare(model, &mut b, batch, r, obj.tokenizer, obj.prefix)?;
        let z = &batch.target_tokens[r];
        let kl = prep.prefix.len();
        let mut y = prep.prefix.clone();
        y.extend_from_slice(z);
        let hidden = decode_forward(
            model,
            &mut b,
            &prep.memory,
            DecoderInput {
                behavior: BehaviorType::CONVERSION,
                tokens: &y[..y.len() - 1],
                prefix: prep.curriculum.as_ref(),
            },
        )?;
        let target_sum = nll_sum(model, &mut b, hidden, &y, kl..y.len())?;
        let l = z.len() as f64;
        let curr = b.graph.scale(target_sum, 1.0 / l);
        let sft = match obj.weighting {
            SftWeighting::TargetOnly => curr,
            SftWeighting::AllTokens if kl == 0 => curr,
            SftWeighting::AllTokens => {
                let prefix_sum = nll_sum(model, &mut b, hidden, &y, 0..kl)?;
                let all = b.graph.add(prefix_sum, target_sum)?;
                b.graph.scale(all, 1.0 / y.len() as f64)
            }
        };
        let curr_v = scalar(&b, curr);
        let qual = quality_hinge(base, curr_v, obj.margin);
        // When the hinge is active its gradient is that of l_curr.
        let loss = if obj.lambda_qual != 0.0 && qual > 0.0 {
            let offset = b.graph.constant(Array::scalar(obj.margin - base));
            let hinge = b.graph.add(curr, offset)?;
            let weighted = b.graph.scale(hinge, obj.lambda_qual);
            b.graph.add(sft, weighted)?
        } else {
            sft
        };
        let sft_v = scalar(&b, sft);
        sums.nll += sft_v;
        sums.l_curr_pay += curr_v;
        sums.l_base_pay += base;
        sums.l_qual += qual;
        sums.l_total += sft_v + obj.lambda_qual * qual;
        if let Some(g) = grads.as_deref_mut() {
            backprop(&mut b, loss, 1.0 / rows as f64, g)?;
        }
    }
    let n = rows as f64;
    Ok(LossReport {
        nll: sums.nll / n,
        l_curr_pay: sums.l_curr_pay / n,
        l_base_pay: sums.l_base_pay / n,
        l_qual: sums.l_qual / n,
        l_total: sums.l_total / n,
        examples: rows,
    })
}
