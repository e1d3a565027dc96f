//! Multi-behavior interaction data: types, synthetic generation, file I/O,
//! leave-one-out splitting and batching.

mod batch;
mod io;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::tokenizer::ItemId;

pub use batch::{make_batch, Batch, PadPolicy};
pub use io::{load_jsonl, load_tsv, write_jsonl, write_tsv};
pub use synthetic::{generate_synthetic, CatalogItem, SyntheticCatalog, SyntheticConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl std::fmt::Display for UserId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Interaction type. `Pay` is the conversion behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum BehaviorType {
    Impression = 0,
    Click = 1,
    AddToCart = 2,
    Pay = 3,
}

impl BehaviorType {
    pub const ALL: [BehaviorType; 4] = [
        BehaviorType::Impression,
        BehaviorType::Click,
        BehaviorType::AddToCart,
        BehaviorType::Pay,
    ];
    pub const COUNT: usize = 4;
    pub const CONVERSION: BehaviorType = BehaviorType::Pay;

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown behavior code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            BehaviorType::Impression => "impression",
            BehaviorType::Click => "click",
            BehaviorType::AddToCart => "add-to-cart",
            BehaviorType::Pay => "pay",
        }
    }

    /// Accepts a numeric code or a behavior name.
    pub fn parse(s: &str) -> Result<Self> {
        if let Ok(code) = s.parse::<u8>() {
            return Self::from_code(code);
        }
        match s.to_ascii_lowercase().as_str() {
            "impression" | "pv" => Ok(BehaviorType::Impression),
            "click" | "clk" => Ok(BehaviorType::Click),
            "add-to-cart" | "atc" | "cart" => Ok(BehaviorType::AddToCart),
            "pay" | "buy" => Ok(BehaviorType::Pay),
            other => Err(Error::Input(format!("unknown behavior {other:?}"))),
        }
    }
}

impl From<BehaviorType> for u8 {
    fn from(b: BehaviorType) -> u8 {
        b.code()
    }
}

impl TryFrom<u8> for BehaviorType {
    type Error = Error;
    fn try_from(code: u8) -> Result<Self> {
        Self::from_code(code)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub behavior: BehaviorType,
    pub item: ItemId,
}

impl Event {
    pub fn new(behavior: BehaviorType, item: ItemId) -> Self {
        Self { behavior, item }
    }
}

/// A user's chronological history. Serialized as
/// `{"user": u, "events": [[behavior, item], ...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user: UserId,
    #[serde(with = "event_pairs")]
    pub events: Vec<Event>,
}

mod event_pairs {
    use super::{BehaviorType, Event, ItemId};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(events: &[Event], s: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<(u8, u32)> = events.iter().map(|e| (e.behavior.code(), e.item.0)).collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Event>, D::Error> {
        let pairs = Vec::<(u8, u32)>::deserialize(d)?;
        pairs
            .into_iter()
            .map(|(b, i)| {
                BehaviorType::from_code(b)
                    .map(|behavior| Event::new(behavior, ItemId(i)))
                    .map_err(serde::de::Error::custom)
            })
            .collect()
    }
}

impl InteractionSequence {
    pub fn new(user: UserId, events: Vec<Event>) -> Self {
        Self { user, events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Keeps only the most recent `max_len` events.
    pub fn truncate_recent(&mut self, max_len: usize) {
        if self.events.len() > max_len {
            self.events.drain(..self.events.len() - max_len);
        }
    }
}

/// One prediction target with the events strictly before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub history: InteractionSequence,
    pub target_behavior: BehaviorType,
    pub target_item: ItemId,
}

impl TrainingExample {
    pub fn user(&self) -> UserId {
        self.history.user
    }
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<TrainingExample>,
    pub valid: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    /// Users with no matching target event.
    pub skipped_users: usize,
    /// Targets dropped because nothing preceded them.
    pub dropped_empty_history: usize,
}

/// Leave-one-out split per user. The last matching event is the test target,
/// the second-to-last the validation target, every earlier one a training
/// target. Histories are truncated to the most recent `max_history` events.
pub fn split_examples(
    sequences: &[InteractionSequence],
    filter: Option<BehaviorType>,
    max_history: usize,
) -> Result<Splits> {
    if sequences.is_empty() {
        return Err(Error::Input("no sequences to split".into()));
    }
    if max_history == 0 {
        return Err(Error::Parameter("max_history must be at least 1".into()));
    }
    let mut out = Splits::default();
    for seq in sequences {
        let positions: Vec<usize> = seq
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| filter.is_none_or(|b| e.behavior == b))
            .map(|(i, _)| i)
            .collect();
        if positions.is_empty() {
            out.skipped_users += 1;
            continue;
        }
        let n = positions.len();
        for (rank, &pos) in positions.iter().enumerate() {
            if pos == 0 {
                out.dropped_empty_history += 1;
                continue;
            }
            let start = pos.saturating_sub(max_history);
            let target = seq.events[pos];
            let example = TrainingExample {
                history: InteractionSequence::new(seq.user, seq.events[start..pos].to_vec()),
                target_behavior: target.behavior,
                target_item: target.item,
            };
            if rank + 1 == n {
                out.test.push(example);
            } else if rank + 2 == n {
                out.valid.push(example);
            } else {
                out.train.push(example);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(b: BehaviorType, i: u32) -> Event {
        Event::new(b, ItemId(i))
    }

    #[test]
    fn behavior_codes_are_stable() {
        for (i, b) in BehaviorType::ALL.iter().enumerate() {
            assert_eq!(b.code() as usize, i);
            assert_eq!(BehaviorType::from_code(i as u8).unwrap(), *b);
            assert_eq!(BehaviorType::parse(b.name()).unwrap(), *b);
        }
        assert!(BehaviorType::from_code(4).is_err());
        assert!(BehaviorType::parse("wishlist").is_err());
        assert_eq!(BehaviorType::CONVERSION, BehaviorType::Pay);
    }

    #[test]
    fn single_pay_user_gives_test_only() {
        use BehaviorType::*;
        let s = InteractionSequence::new(UserId(1), vec![ev(Click, 1), ev(Click, 2), ev(Pay, 3)]);
        let sp = split_examples(&[s], Some(Pay), 50).unwrap();
        assert_eq!(sp.test.len(), 1);
        assert!(sp.valid.is_empty() && sp.train.is_empty());
        assert_eq!(sp.test[0].history.events.len(), 2);
        assert_eq!(sp.test[0].target_item, ItemId(3));
    }

    #[test]
    fn pay_filter_assigns_last_two_to_test_and_valid() {
        use BehaviorType::*;
        let s = InteractionSequence::new(
            UserId(1),
            vec![ev(Click, 1), ev(Pay, 2), ev(Click, 3), ev(Pay, 4), ev(Pay, 5), ev(Click, 6)],
        );
        let sp = split_examples(&[s], Some(Pay), 50).unwrap();
        assert_eq!(sp.train.len(), 1);
        assert_eq!(sp.train[0].target_item, ItemId(2));
        assert_eq!(sp.valid[0].target_item, ItemId(4));
        assert_eq!(sp.test[0].target_item, ItemId(5));
        assert_eq!(sp.test[0].history.events.len(), 4);
    }

    #[test]
    fn unfiltered_targets_cover_all_behaviors() {
        use BehaviorType::*;
        let s = InteractionSequence::new(
            UserId(0),
            vec![
                ev(Impression, 0),
                ev(Click, 1),
                ev(Impression, 2),
                ev(AddToCart, 3),
                ev(Pay, 4),
                ev(Click, 5),
                ev(Click, 6),
            ],
        );
        let sp = split_examples(&[s], None, 50).unwrap();
        let mut seen: Vec<BehaviorType> = sp.train.iter().map(|e| e.target_behavior).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![Impression, Click, AddToCart, Pay]);
    }

    #[test]
    fn first_event_target_is_dropped_and_users_without_targets_skipped() {
        use BehaviorType::*;
        let a = InteractionSequence::new(UserId(0), vec![ev(Pay, 1)]);
        let b = InteractionSequence::new(UserId(1), vec![ev(Click, 1)]);
        let sp = split_examples(&[a, b], Some(Pay), 50).unwrap();
        assert!(sp.test.is_empty());
        assert_eq!(sp.dropped_empty_history, 1);
        assert_eq!(sp.skipped_users, 1);
        assert!(split_examples(&[], None, 5).is_err());
    }

    #[test]
    fn histories_never_contain_their_target_and_are_truncated() {
        use BehaviorType::*;
        let events: Vec<Event> = (0..30).map(|i| ev(if i % 7 == 6 { Pay } else { Click }, i)).collect();
        let s = InteractionSequence::new(UserId(0), events.clone());
        let sp = split_examples(&[s], None, 5).unwrap();
        for ex in sp.train.iter().chain(&sp.valid).chain(&sp.test) {
            assert!(ex.history.events.len() <= 5 && !ex.history.is_empty());
            let pos = ex.target_item.0 as usize;
            assert_eq!(ex.history.events.last().unwrap().item.0 as usize, pos - 1);
            assert!(!ex.history.events.iter().any(|e| e.item == ex.target_item));
        }
    }

    #[test]
    fn truncation_keeps_most_recent() {
        use BehaviorType::*;
        let mut s = InteractionSequence::new(UserId(0), (0..10).map(|i| ev(Click, i)).collect());
        s.truncate_recent(3);
        assert_eq!(s.events.iter().map(|e| e.item.0).collect::<Vec<_>>(), vec![7, 8, 9]);
    }

    #[test]
    fn sequence_json_shape() {
        use BehaviorType::*;
        let s = InteractionSequence::new(UserId(4), vec![ev(Click, 9), ev(Pay, 2)]);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"user":4,"events":[[1,9],[3,2]]}"#);
        assert_eq!(serde_json::from_str::<InteractionSequence>(&json).unwrap(), s);
        assert!(serde_json::from_str::<InteractionSequence>(r#"{"user":4,"events":[[7,9]]}"#).is_err());
    }
}
