use super::{BehaviorType, TrainingExample, UserId};
use crate::error::{Error, Result};
use crate::tokenizer::{ItemId, SemanticCodebooks, Token};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadPolicy {
    /// Padding goes before the history, so the last slot is always the most
    /// recent event.
    #[default]
    Left,
    Right,
}

/// Padded histories, expanded to tokens.
///
/// Row `r` holds `width` event slots. Event slot `t` occupies token slots
/// `t * levels .. (t + 1) * levels`; every token of an event carries the
/// event's behavior code.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub width: usize,
    pub levels: usize,
    pub users: Vec<UserId>,
    /// `[rows][width * levels]`; padding slots hold token 0.
    pub tokens: Vec<Vec<Token>>,
    /// `[rows][width * levels]`
    pub behaviors: Vec<Vec<BehaviorType>>,
    /// `[rows][width]`; true on real events.
    pub mask: Vec<Vec<bool>>,
    /// Item of each event slot, `None` on padding.
    pub items: Vec<Vec<Option<ItemId>>>,
    pub target_tokens: Vec<Vec<Token>>,
    pub target_items: Vec<ItemId>,
    pub target_behaviors: Vec<BehaviorType>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.users.len()
    }

    /// Number of real events in row `r`.
    pub fn real_len(&self, r: usize) -> usize {
        self.mask[r].iter().filter(|m| **m).count()
    }
}

pub fn make_batch(examples: &[TrainingExample], tokenizer: &SemanticCodebooks, pad: PadPolicy) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::Input("cannot batch zero examples".into()));
    }
    let levels = tokenizer.levels();
    let width = examples.iter().map(|e| e.history.len()).max().unwrap_or(0);
    if width == 0 {
        return Err(Error::Input("examples must have non-empty histories".into()));
    }
    let mut batch = Batch {
        width,
        levels,
        users: Vec::with_capacity(examples.len()),
        tokens: Vec::with_capacity(examples.len()),
        behaviors: Vec::with_capacity(examples.len()),
        mask: Vec::with_capacity(examples.len()),
        items: Vec::with_capacity(examples.len()),
        target_tokens: Vec::with_capacity(examples.len()),
        target_items: Vec::with_capacity(examples.len()),
        target_behaviors: Vec::with_capacity(examples.len()),
    };
    for ex in examples {
        let n = ex.history.len();
        if n == 0 {
            return Err(Error::Input(format!("user {} has an empty history", ex.user())));
        }
        let offset = match pad {
            PadPolicy::Left => width - n,
            PadPolicy::Right => 0,
        };
        let mut tokens = vec![0; width * levels];
        let mut behaviors = vec![BehaviorType::Impression; width * levels];
        let mut mask = vec![false; width];
        let mut items = vec![None; width];
        for (t, e) in ex.history.events.iter().enumerate() {
            let slot = offset + t;
            let z = tokenizer.encode(e.item)?;
            tokens[slot * levels..(slot + 1) * levels].copy_from_slice(z);
            behaviors[slot * levels..(slot + 1) * levels].fill(e.behavior);
            mask[slot] = true;
            items[slot] = Some(e.item);
        }
        batch.users.push(ex.user());
        batch.tokens.push(tokens);
        batch.behaviors.push(behaviors);
        batch.mask.push(mask);
        batch.items.push(items);
        batch.target_tokens.push(tokenizer.encode(ex.target_item)?.to_vec());
        batch.target_items.push(ex.target_item);
        batch.target_behaviors.push(ex.target_behavior);
    }
    Ok(batch)
}
