use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{evaluate, EvalConfig};
use crate::data::TrainingExample;
use crate::error::{Error, Result};
use crate::model::{curriculum_calls, PrefixMode};
use crate::tokenizer::SemanticCodebooks;
use crate::train::{evaluate_sft, sft, Metrics, SftConfig, SftObjective, TrainCheckpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Learned curriculum with the quality hinge.
    Full,
    /// No prefix at all.
    NoRcpm,
    /// The last k events as prefix.
    RecentK,
    /// Learned curriculum, hinge weight zero.
    NoQualityLoss,
    /// Full model with curriculum size k.
    K(usize),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoRcpm => "no-rcpm".into(),
            Variant::RecentK => "recent-k".into(),
            Variant::NoQualityLoss => "no-quality-loss".into(),
            Variant::K(k) => format!("k={k}"),
        }
    }

    pub fn sft_config(&self, base: &SftConfig) -> SftConfig {
        let mut c = base.clone();
        match *self {
            Variant::Full => c.prefix_mode = PrefixMode::Learned,
            Variant::NoRcpm => c.prefix_mode = PrefixMode::Off,
            Variant::RecentK => c.prefix_mode = PrefixMode::Recent,
            Variant::NoQualityLoss => {
                c.prefix_mode = PrefixMode::Learned;
                c.lambda_qual = 0.0;
            }
            Variant::K(k) => {
                c.prefix_mode = PrefixMode::Learned;
                c.k = k;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Curriculum sizes run as extra learned-prefix rows.
    pub k_sweep: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            variants: vec![Variant::Full, Variant::NoRcpm, Variant::RecentK, Variant::NoQualityLoss],
            k_sweep: vec![1, 2, 4, 6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub recall_5: f64,
    pub recall_10: f64,
    pub ndcg_5: f64,
    pub ndcg_10: f64,
    /// Mean `l_base_pay - l_curr_pay` of the returned model over the
    /// training set.
    pub train_gain: f64,
    /// Curriculum selections made while training and evaluating.
    pub selector_calls: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub k: usize,
    pub lambda_qual: f64,
    pub seeds: Vec<SeedResult>,
    pub mean_recall_5: f64,
    pub std_recall_5: f64,
    pub mean_recall_10: f64,
    pub std_recall_10: f64,
    pub mean_ndcg_5: f64,
    pub mean_ndcg_10: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationRow {
    fn new(variant: String, config: &SftConfig, seeds: Vec<SeedResult>) -> Self {
        let col = |f: fn(&SeedResult) -> f64| seeds.iter().map(f).collect::<Vec<_>>();
        let (mean_recall_5, std_recall_5) = mean_std(&col(|s| s.recall_5));
        let (mean_recall_10, std_recall_10) = mean_std(&col(|s| s.recall_10));
        Self {
            variant,
            k: config.k,
            lambda_qual: config.lambda_qual,
            mean_recall_5,
            std_recall_5,
            mean_recall_10,
            std_recall_10,
            mean_ndcg_5: mean_std(&col(|s| s.ndcg_5)).0,
            mean_ndcg_10: mean_std(&col(|s| s.ndcg_10)).0,
            seeds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,k,lambda_qual,seeds,recall@5,recall@5_std,recall@10,recall@10_std,ndcg@5,ndcg@10\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.variant,
                r.k,
                r.lambda_qual,
                r.seeds.len(),
                r.mean_recall_5,
                r.std_recall_5,
                r.mean_recall_10,
                r.std_recall_10,
                r.mean_ndcg_5,
                r.mean_ndcg_10
            ));
        }
        out
    }

    /// Curriculum-size sweep: `k, recall@5, recall@10, std` per sweep entry.
    pub fn k_sweep_csv(&self) -> String {
        let mut out = String::from("k,recall@5,recall@10,std\n");
        for r in self.rows.iter().filter(|r| r.variant.starts_with("k=")) {
            out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.k, r.mean_recall_5, r.mean_recall_10, r.std_recall_5));
        }
        out
    }
}

fn fingerprint(config: &SftConfig, eval: &EvalConfig, seed: u64, digest: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(serde_json::to_vec(eval)?);
    h.update(seed.to_le_bytes());
    h.update(digest.as_bytes());
    Ok(hex::encode(&h.finalize()[..8]))
}

/// Fine-tunes and evaluates every variant for every seed, all from the same
/// θ0: the configured variants, then one row per curriculum size in the
/// sweep. A row whose fine-tuning settings match an earlier row (the sweep
/// entry equal to the base `k`, say) reuses that row's runs.
#[allow(clippy::too_many_arguments)]
pub fn run_ablations(
    theta0: &TrainCheckpoint,
    tokenizer: &SemanticCodebooks,
    train: &[TrainingExample],
    valid: &[TrainingExample],
    test: &[TrainingExample],
    base: &SftConfig,
    eval: &EvalConfig,
    ablation: &AblationConfig,
    metrics: &mut Metrics,
) -> Result<AblationTable> {
    if ablation.seeds.is_empty() {
        return Err(Error::Parameter("ablations need at least one seed".into()));
    }
    let mut variants = ablation.variants.clone();
    variants.extend(ablation.k_sweep.iter().map(|&k| Variant::K(k)));
    let mut rows: Vec<AblationRow> = Vec::with_capacity(variants.len());
    let mut done: Vec<(SftConfig, usize)> = Vec::new();
    for variant in variants {
        let config = variant.sft_config(base);
        if let Some(&(_, i)) = done.iter().find(|(c, _)| *c == config) {
            let row = AblationRow {
                variant: variant.name(),
                ..rows[i].clone()
            };
            rows.push(row);
            continue;
        }
        let mut seeds = Vec::with_capacity(ablation.seeds.len());
        for &seed in &ablation.seeds {
            let calls = curriculum_calls();
            let outcome = sft(theta0, tokenizer, train, valid, &config, seed, metrics)?;
            let model = &outcome.checkpoint.model;
            let fp = fingerprint(&config, eval, seed, &model.digest())?;
            let report = evaluate(model, tokenizer, test, config.prefix_spec(), eval, fp)?;
            let objective = SftObjective {
                theta0: Some(&theta0.model),
                tokenizer,
                prefix: config.prefix_spec(),
                lambda_qual: config.lambda_qual,
                margin: config.margin,
                weighting: config.weighting,
            };
            let fit = evaluate_sft(model, &objective, train, 64)?;
            let result = SeedResult {
                seed,
                recall_5: report.recall_5,
                recall_10: report.recall_10,
                ndcg_5: report.ndcg_5,
                ndcg_10: report.ndcg_10,
                train_gain: fit.nll_gain(),
                selector_calls: curriculum_calls() - calls,
            };
            metrics.log(serde_json::json!({ "stage": "ablation", "variant": variant.name(), "result": result }))?;
            seeds.push(result);
        }
        done.push((config.clone(), rows.len()));
        rows.push(AblationRow::new(variant.name(), &config, seeds));
    }
    Ok(AblationTable { rows })
}
