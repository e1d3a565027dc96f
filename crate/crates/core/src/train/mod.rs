//! Losses, optimizer and the two training stages: mixed-behavior
//! pretraining of the baseline θ0, then curriculum fine-tuning on pay
//! targets against the frozen θ0.

mod checkpoint;
mod losses;
mod metrics;
mod optim;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, PadPolicy, TrainingExample};
use crate::error::{Error, Result};
use crate::model::{Model, PrefixMode, PrefixSpec};
use crate::rng;
use crate::tokenizer::SemanticCodebooks;

pub use checkpoint::{Stage, TrainCheckpoint};
pub use losses::{baseline_pay_nll, loss_pretrain, loss_sft, quality_hinge, LossReport, SftObjective, SftWeighting};
pub use metrics::Metrics;
pub use optim::{Adam, AdamSettings, Gradients};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    /// Training examples drawn afresh each epoch; all of them when unset.
    pub examples_per_epoch: Option<usize>,
    /// Validation examples scored after each epoch.
    pub valid_examples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 2,
            clip_norm: 1.0,
            examples_per_epoch: Some(8000),
            valid_examples: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    /// Curriculum size.
    pub k: usize,
    /// Selection temperature.
    pub tau: f64,
    pub lambda_qual: f64,
    pub margin: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    pub weighting: SftWeighting,
    pub prefix_mode: PrefixMode,
    /// Validation examples scored after each epoch; the epoch with the lowest
    /// prefix-conditioned conversion NLL is kept. Zero keeps the last epoch.
    pub valid_examples: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            k: 4,
            tau: 0.5,
            lambda_qual: 0.1,
            margin: 0.05,
            lr: 1e-3,
            batch_size: 32,
            epochs: 4,
            max_steps: None,
            clip_norm: 1.0,
            weighting: SftWeighting::AllTokens,
            prefix_mode: PrefixMode::Learned,
            valid_examples: 500,
        }
    }
}

impl SftConfig {
    pub fn prefix_spec(&self) -> PrefixSpec {
        PrefixSpec {
            mode: self.prefix_mode,
            k: self.k,
            tau: self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.tau > 0.0) {
            return Err(Error::Parameter(format!("need k ≥ 1 and τ > 0, got k={} τ={}", self.k, self.tau)));
        }
        if !(self.margin >= 0.0) || !(self.lambda_qual >= 0.0) {
            return Err(Error::Parameter("margin and lambda_qual must be non-negative".into()));
        }
        check_common(self.lr, self.batch_size)
    }
}

fn check_common(lr: f64, batch_size: usize) -> Result<()> {
    if !(lr > 0.0) || batch_size == 0 {
        return Err(Error::Parameter(format!("need lr > 0 and batch_size ≥ 1, got {lr} and {batch_size}")));
    }
    Ok(())
}

fn divergence(stage: &str, step: usize, detail: impl Into<String>) -> Error {
    Error::Divergence {
        stage: stage.into(),
        step,
        detail: detail.into(),
    }
}

/// Mean pretraining loss over `examples`, in batches.
pub fn validation_nll(model: &Model, tokenizer: &SemanticCodebooks, examples: &[TrainingExample], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("no validation examples".into()));
    }
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, tokenizer, PadPolicy::Left)?;
        total += loss_pretrain(model, &batch, None, None)?.nll * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_nll: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters of the best validation epoch, tagged θ0.
    pub checkpoint: TrainCheckpoint,
    pub epochs: Vec<PretrainEpoch>,
    /// Validation NLL before the first step.
    pub initial_valid_nll: f64,
}

/// Trains `model` on mixed-behavior targets and keeps the parameters with
/// the best validation NLL.
pub fn pretrain(
    mut model: Model,
    tokenizer: &SemanticCodebooks,
    train: &[TrainingExample],
    valid: &[TrainingExample],
    config: &PretrainConfig,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<PretrainOutcome> {
    check_common(config.lr, config.batch_size)?;
    if train.is_empty() {
        return Err(Error::Input("no pretraining examples".into()));
    }
    let valid = &valid[..valid.len().min(config.valid_examples)];
    let valid = if valid.is_empty() { &train[..train.len().min(config.valid_examples.max(1))] } else { valid };
    let mut shuffle = rng::named_rng(seed, "pretrain-shuffle");
    let mut dropout = rng::named_rng(seed, "pretrain-dropout");
    let mut adam = Adam::new(
        AdamSettings {
            lr: config.lr,
            ..AdamSettings::default()
        },
        model.params(),
    );
    let initial_valid_nll = validation_nll(&model, tokenizer, valid, config.batch_size)?;
    let mut best = (initial_valid_nll, model.clone(), adam.clone());
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let take = config.examples_per_epoch.map_or(order.len(), |n| n.min(order.len()));
        let (mut seen, mut sum) = (0usize, 0.0);
        for chunk in order[..take].chunks(config.batch_size) {
            let examples: Vec<TrainingExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = make_batch(&examples, tokenizer, PadPolicy::Left)?;
            let mut grads = Gradients::new(model.params());
            let report = loss_pretrain(&model, &batch, Some(&mut grads), Some(&mut dropout))?;
            if !report.nll.is_finite() || !grads.is_finite() {
                return Err(divergence("pretrain", step, format!("loss {}", report.nll)));
            }
            let norm = grads.clip(config.clip_norm);
            adam.update(model.params_mut(), &grads);
            step += 1;
            seen += chunk.len();
            sum += report.nll * chunk.len() as f64;
            metrics.log(serde_json::json!({
                "stage": "pretrain", "step": step, "l_gr": report.nll,
                "l_total": report.l_total, "grad_norm": norm, "lr": config.lr,
            }))?;
        }
        let valid_nll = validation_nll(&model, tokenizer, valid, config.batch_size)?;
        if !valid_nll.is_finite() {
            return Err(divergence("pretrain", step, "validation NLL is not finite"));
        }
        let record = PretrainEpoch {
            epoch,
            train_nll: sum / seen.max(1) as f64,
            valid_nll,
        };
        metrics.log(serde_json::json!({ "stage": "pretrain-epoch", "step": step, "epoch": epoch,
            "train_nll": record.train_nll, "valid_nll": valid_nll }))?;
        epochs.push(record);
        if valid_nll < best.0 {
            best = (valid_nll, model.clone(), adam.clone());
        }
    }
    Ok(PretrainOutcome {
        checkpoint: TrainCheckpoint {
            model: best.1,
            stage: Stage::Pretrained,
            optimizer: best.2,
        },
        epochs,
        initial_valid_nll,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SftEpoch {
    pub epoch: usize,
    pub l_sft: f64,
    pub l_qual: f64,
    pub l_total: f64,
    /// Mean `l_base_pay - l_curr_pay` over the epoch's batches.
    pub nll_gain: f64,
    /// Mean `l_curr_pay` on the validation examples.
    pub valid_l_curr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    pub checkpoint: TrainCheckpoint,
    pub epochs: Vec<SftEpoch>,
    pub steps: usize,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    /// Digest of θ0, identical before and after the run.
    pub theta0_digest: String,
}

/// θ0's no-prefix conversion NLL for every example.
fn baselines(theta0: &Model, tokenizer: &SemanticCodebooks, examples: &[TrainingExample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let batch = make_batch(chunk, tokenizer, PadPolicy::Left)?;
        for r in 0..chunk.len() {
            out.push(baseline_pay_nll(theta0, &batch, r)?);
        }
    }
    Ok(out)
}

fn valid_curr(model: &Model, objective: &SftObjective, valid: &[TrainingExample], bases: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for (chunk, b) in valid.chunks(64).zip(bases.chunks(64)) {
        let batch = make_batch(chunk, objective.tokenizer, PadPolicy::Left)?;
        let r = losses::loss_sft_with_baseline(model, &batch, objective, Some(b), None, None)?;
        sum += r.l_curr_pay * chunk.len() as f64;
    }
    Ok(sum / valid.len() as f64)
}

/// Fine-tunes a copy of θ0 on pay targets. Curriculum-selector parameters
/// are drawn fresh; θ0 itself is only read. With validation examples the
/// parameters of the best epoch are returned.
#[allow(clippy::too_many_arguments)]
pub fn sft(
    theta0: &TrainCheckpoint,
    tokenizer: &SemanticCodebooks,
    train: &[TrainingExample],
    valid: &[TrainingExample],
    config: &SftConfig,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<SftOutcome> {
    config.validate()?;
    if theta0.stage != Stage::Pretrained {
        return Err(Error::Pipeline("fine-tuning must start from a pretrained θ0 checkpoint".into()));
    }
    if train.is_empty() {
        return Err(Error::Input("no fine-tuning examples".into()));
    }
    let room = theta0.model.config().max_prefix_items;
    if config.prefix_mode != PrefixMode::Off && config.k > room {
        return Err(Error::Parameter(format!("curriculum size {} exceeds the model's prefix room of {room} items", config.k)));
    }
    let digest_before = theta0.model.digest();
    let mut model = theta0.model.clone();
    model.reinit_rcpm(&mut rng::named_rng(seed, "rcpm-init"));
    let mut shuffle = rng::named_rng(seed, "sft-shuffle");
    let mut dropout = rng::named_rng(seed, "sft-dropout");
    let mut adam = Adam::new(
        AdamSettings {
            lr: config.lr,
            ..AdamSettings::default()
        },
        model.params(),
    );
    let objective = SftObjective {
        theta0: Some(&theta0.model),
        tokenizer,
        prefix: config.prefix_spec(),
        lambda_qual: config.lambda_qual,
        margin: config.margin,
        weighting: config.weighting,
    };
    let train_bases = baselines(&theta0.model, tokenizer, train)?;
    let valid = &valid[..valid.len().min(config.valid_examples)];
    let valid_bases = baselines(&theta0.model, tokenizer, valid)?;
    let mut best: Option<(f64, usize, Model, Adam)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let limit = config.max_steps.unwrap_or(usize::MAX);
    'outer: for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut acc = SftEpoch {
            epoch,
            l_sft: 0.0,
            l_qual: 0.0,
            l_total: 0.0,
            nll_gain: 0.0,
            valid_l_curr: None,
        };
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if step >= limit {
                break;
            }
            let examples: Vec<TrainingExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = make_batch(&examples, tokenizer, PadPolicy::Left)?;
            let bases: Vec<f64> = chunk.iter().map(|&i| train_bases[i]).collect();
            let mut grads = Gradients::new(model.params());
            let report =
                losses::loss_sft_with_baseline(&model, &batch, &objective, Some(&bases), Some(&mut grads), Some(&mut dropout))?;
            if !report.l_total.is_finite() || !grads.is_finite() {
                return Err(divergence("sft", step, format!("loss {}", report.l_total)));
            }
            let norm = grads.clip(config.clip_norm);
            adam.update(model.params_mut(), &grads);
            step += 1;
            batches += 1;
            acc.l_sft += report.nll;
            acc.l_qual += report.l_qual;
            acc.l_total += report.l_total;
            acc.nll_gain += report.nll_gain();
            metrics.log(serde_json::json!({
                "stage": "sft", "step": step, "l_sft": report.nll, "l_qual": report.l_qual,
                "l_total": report.l_total, "nll_gain": report.nll_gain(), "grad_norm": norm, "lr": config.lr,
            }))?;
        }
        if batches > 0 {
            let n = batches as f64;
            acc.l_sft /= n;
            acc.l_qual /= n;
            acc.l_total /= n;
            acc.nll_gain /= n;
            if !valid.is_empty() {
                let v = valid_curr(&model, &objective, valid, &valid_bases)?;
                acc.valid_l_curr = Some(v);
                if best.as_ref().is_none_or(|b| v < b.0) {
                    best = Some((v, epoch, model.clone(), adam.clone()));
                }
            }
            metrics.log(serde_json::json!({ "stage": "sft-epoch", "step": step, "epoch": epoch,
                "l_sft": acc.l_sft, "l_qual": acc.l_qual, "l_total": acc.l_total, "nll_gain": acc.nll_gain,
                "valid_l_curr": acc.valid_l_curr }))?;
            epochs.push(acc);
        }
        if step >= limit {
            break 'outer;
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, m, a)) = best {
        model = m;
        adam = a;
    }
    let digest_after = theta0.model.digest();
    if digest_after != digest_before {
        return Err(Error::Pipeline("θ0 changed during fine-tuning".into()));
    }
    Ok(SftOutcome {
        checkpoint: TrainCheckpoint {
            model,
            stage: Stage::Sft,
            optimizer: adam,
        },
        epochs,
        steps: step,
        best_epoch,
        theta0_digest: digest_after,
    })
}

/// Mean fine-tuning losses of a frozen model over `examples`.
pub fn evaluate_sft(
    model: &Model,
    objective: &SftObjective,
    examples: &[TrainingExample],
    batch_size: usize,
) -> Result<LossReport> {
    if examples.is_empty() {
        return Err(Error::Input("no examples to score".into()));
    }
    let mut sum = LossReport::default();
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, objective.tokenizer, PadPolicy::Left)?;
        let r = loss_sft(model, &batch, objective, None, None)?;
        let w = chunk.len() as f64;
        sum.nll += r.nll * w;
        sum.l_curr_pay += r.l_curr_pay * w;
        sum.l_base_pay += r.l_base_pay * w;
        sum.l_qual += r.l_qual * w;
        sum.l_total += r.l_total * w;
        sum.examples += chunk.len();
    }
    let n = sum.examples as f64;
    Ok(LossReport {
        nll: sum.nll / n,
        l_curr_pay: sum.l_curr_pay / n,
        l_base_pay: sum.l_base_pay / n,
        l_qual: sum.l_qual / n,
        l_total: sum.l_total / n,
        examples: sum.examples,
    })
}

#[cfg(test)]
mod tests;
