use std::collections::HashSet;

use crate::autodiff::log_softmax_in_place;
use crate::data::{Batch, BehaviorType};
use crate::error::{Error, Result};
use crate::model::{decode_forward, prepare, Binder, DecoderInput, Model, PrefixSpec};
use crate::tokenizer::{ItemId, SemanticCodebooks, Token};

/// Every prefix of every catalog token sequence, for constraining beams.
#[derive(Clone, Debug)]
pub struct CatalogTrie {
    levels: usize,
    prefixes: HashSet<Vec<Token>>,
}

impl CatalogTrie {
    pub fn new(tokenizer: &SemanticCodebooks) -> Self {
        let mut prefixes = HashSet::new();
        for (_, tokens) in tokenizer.assignments() {
            for end in 0..=tokens.len() {
                prefixes.insert(tokens[..end].to_vec());
            }
        }
        Self {
            levels: tokenizer.levels(),
            prefixes,
        }
    }

    pub fn allows(&self, prefix: &[Token]) -> bool {
        self.prefixes.contains(prefix)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }
}

/// A partial token sequence and its cumulative log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    pub tokens: Vec<Token>,
    pub log_prob: f64,
}

impl Beam {
    /// Index of the level the next token belongs to.
    pub fn level(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// Items with their sequence log-probabilities, best first.
    pub items: Vec<(ItemId, f64)>,
    /// Fewer than the requested number of items could be produced.
    pub short: bool,
}

impl Ranking {
    pub fn ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|(i, _)| *i).collect()
    }
}

/// Log-probabilities of the next token after `tokens`, which follow the
/// decoder prefix and belong to the target.
fn next_log_probs(
    model: &Model,
    b: &mut Binder,
    memory: &crate::model::CrossMemory,
    prefix: &[Token],
    tokens: &[Token],
) -> Result<Vec<f64>> {
    let mut input = prefix.to_vec();
    input.extend_from_slice(tokens);
    let hidden = decode_forward(
        model,
        b,
        memory,
        DecoderInput {
            behavior: BehaviorType::CONVERSION,
            tokens: &input,
            prefix: None,
        },
    )?;
    let last = b.graph.value(hidden).rows() - 1;
    let logits = crate::model::head_logits(model, b, hidden, &[last], tokens.len())?;
    let mut row = b.graph.value(logits).data().to_vec();
    log_softmax_in_place(&mut row);
    Ok(row)
}

/// Ranks catalog items for batch row `row`: the prefix chosen by `spec` is
/// teacher-forced after BOS, then the `L` target positions are searched
/// with a beam of `beam_width`, each step restricted to catalog prefixes.
#[allow(clippy::too_many_arguments)]
pub fn generate_topn(
    model: &Model,
    tokenizer: &SemanticCodebooks,
    trie: &CatalogTrie,
    batch: &Batch,
    row: usize,
    spec: PrefixSpec,
    beam_width: usize,
    n: usize,
) -> Result<Ranking> {
    if beam_width == 0 || n == 0 {
        return Err(Error::Parameter("beam width and list length must be positive".into()));
    }
    if beam_width < n {
        return Err(Error::Parameter(format!("beam width {beam_width} is smaller than the list length {n}")));
    }
    let mut b = Binder::frozen(model.params());
    let prep = prepare(model, &mut b, batch, row, tokenizer, spec)?;
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    for _ in 0..trie.levels() {
        let mut next = Vec::new();
        for beam in &beams {
            let lp = next_log_probs(model, &mut b, &prep.memory, &prep.prefix, &beam.tokens)?;
            for (t, &l) in lp.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(t);
                if trie.allows(&tokens) {
                    next.push(Beam {
                        tokens,
                        log_prob: beam.log_prob + l,
                    });
                }
            }
        }
        next.sort_by(|a, c| c.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&c.tokens)));
        next.truncate(beam_width);
        beams = next;
    }
    let mut items = Vec::with_capacity(n);
    for beam in beams {
        if let Some(item) = tokenizer.decode(&beam.tokens)? {
            items.push((item, beam.log_prob));
            if items.len() == n {
                break;
            }
        }
    }
    let short = items.len() < n;
    Ok(Ranking { items, short })
}

/// Exact sequence log-probability of every catalog item, best first. The
/// brute-force counterpart of [`generate_topn`].
pub fn score_catalog(
    model: &Model,
    tokenizer: &SemanticCodebooks,
    batch: &Batch,
    row: usize,
    spec: PrefixSpec,
) -> Result<Vec<(ItemId, f64)>> {
    let mut b = Binder::frozen(model.params());
    let prep = prepare(model, &mut b, batch, row, tokenizer, spec)?;
    let mut scored = Vec::with_capacity(tokenizer.num_items());
    for (item, tokens) in tokenizer.assignments() {
        let mut total = 0.0;
        for lvl in 0..tokens.len() {
            let lp = next_log_probs(model, &mut b, &prep.memory, &prep.prefix, &tokens[..lvl])?;
            total += lp[tokens[lvl]];
        }
        scored.push((*item, total));
    }
    scored.sort_by(|a, c| {
        c.1.total_cmp(&a.1)
            .then_with(|| tokenizer.encode(a.0).ok().cmp(&tokenizer.encode(c.0).ok()))
    });
    Ok(scored)
}
