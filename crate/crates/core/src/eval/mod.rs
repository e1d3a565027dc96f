//! Constrained beam-search retrieval, ranking metrics and the ablation
//! runner.

mod ablation;
mod beam;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, PadPolicy, TrainingExample, UserId};
use crate::error::{Error, Result};
use crate::model::{Model, PrefixSpec};
use crate::tokenizer::{ItemId, SemanticCodebooks};

pub use ablation::{run_ablations, AblationConfig, AblationRow, AblationTable, SeedResult, Variant};
pub use beam::{generate_topn, score_catalog, Beam, CatalogTrie, Ranking};

/// 1-based rank of `target` in `ranked`.
pub fn rank_of(ranked: &[ItemId], target: ItemId) -> Option<usize> {
    ranked.iter().position(|&i| i == target).map(|p| p + 1)
}

/// 1 when `target` is among the first `k` entries, else 0.
pub fn recall_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// `1 / log2(1 + rank)` when the single relevant item is within the first
/// `k` entries, else 0.
pub fn ndcg_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((1 + r) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam_width: usize,
    /// Teacher-force the selected curriculum before generating.
    pub inference_prefix: bool,
    /// Evaluate at most this many test users, in split order.
    pub max_users: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_width: 20,
            inference_prefix: true,
            max_users: None,
        }
    }
}

/// Ranked-list length; enough for the largest cutoff.
pub const LIST_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRank {
    pub user: UserId,
    pub target: ItemId,
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_5: f64,
    pub recall_10: f64,
    pub ndcg_5: f64,
    pub ndcg_10: f64,
    pub users: usize,
    pub short_lists: usize,
    pub fingerprint: String,
    pub ranks: Vec<UserRank>,
}

impl EvalReport {
    pub fn from_ranks(ranks: Vec<UserRank>, short_lists: usize, fingerprint: String) -> Self {
        let n = ranks.len().max(1) as f64;
        let recall = |k: usize| ranks.iter().filter(|r| r.rank.is_some_and(|x| x <= k)).count() as f64 / n;
        let ndcg = |k: usize| {
            ranks
                .iter()
                .filter_map(|r| r.rank.filter(|&x| x <= k))
                .map(|x| 1.0 / ((1 + x) as f64).log2())
                .sum::<f64>()
                / n
        };
        Self {
            recall_5: recall(5),
            recall_10: recall(10),
            ndcg_5: ndcg(5),
            ndcg_10: ndcg(10),
            users: ranks.len(),
            short_lists,
            fingerprint,
            ranks,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One header line and one row of summary metrics.
    pub fn summary_csv(&self) -> String {
        format!(
            "recall@5,recall@10,ndcg@5,ndcg@10,users,short_lists,fingerprint\n{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
            self.recall_5, self.recall_10, self.ndcg_5, self.ndcg_10, self.users, self.short_lists, self.fingerprint
        )
    }

    /// Per-user ranks; empty rank means the target was not retrieved.
    pub fn ranks_csv(&self) -> String {
        let mut out = String::from("user,target,rank\n");
        for r in &self.ranks {
            let rank = r.rank.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{rank}\n", r.user, r.target));
        }
        out
    }
}

/// Retrieves a top-10 list for every example and scores the target.
pub fn evaluate(
    model: &Model,
    tokenizer: &SemanticCodebooks,
    examples: &[TrainingExample],
    spec: PrefixSpec,
    config: &EvalConfig,
    fingerprint: String,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Input("no evaluation examples".into()));
    }
    let examples = &examples[..config.max_users.map_or(examples.len(), |m| m.min(examples.len()))];
    let spec = if config.inference_prefix {
        spec
    } else {
        PrefixSpec {
            mode: crate::model::PrefixMode::Off,
            ..spec
        }
    };
    let trie = CatalogTrie::new(tokenizer);
    let width = config.beam_width.max(LIST_LEN);
    let mut ranks = Vec::with_capacity(examples.len());
    let mut short = 0;
    for chunk in examples.chunks(64) {
        let batch = make_batch(chunk, tokenizer, PadPolicy::Left)?;
        for (r, ex) in chunk.iter().enumerate() {
            let ranking = generate_topn(model, tokenizer, &trie, &batch, r, spec, width, LIST_LEN)?;
            short += usize::from(ranking.short);
            ranks.push(UserRank {
                user: ex.user(),
                target: ex.target_item,
                rank: rank_of(&ranking.ids(), ex.target_item),
            });
        }
    }
    Ok(EvalReport::from_ranks(ranks, short, fingerprint))
}

#[cfg(test)]
mod tests;
