//! Synthetic multi-behavior streams in which conversions are preceded by a
//! coherent run of same-category clicks and add-to-carts.
//!
//! Background traffic follows a per-user Markov chain over categories
//! (stay probability [`SyntheticConfig::stay_prob`]). A conversion episode
//! picks a category and an item in it; with probability `coherence` it first
//! emits `cluster_length` click/add-to-cart events on items of that category,
//! each optionally followed by a random impression, and then the pay event.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BehaviorType, Event, InteractionSequence, ItemId, UserId};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::ItemEmbeddingTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    /// Target share of pay events among all events.
    pub conversion_rate: f64,
    pub cluster_length: usize,
    pub coherence: f64,
    pub min_events: usize,
    pub max_events: usize,
    pub embedding_dim: usize,
    /// Markov stay probability of the background interest chain.
    pub stay_prob: f64,
    /// Chance that a cluster event is followed by a random impression.
    pub noise_prob: f64,
    /// Spread of item embeddings around their category centre.
    pub item_spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_items: 500,
            num_categories: 25,
            conversion_rate: 0.0123,
            cluster_length: 3,
            coherence: 1.0,
            min_events: 120,
            max_events: 280,
            embedding_dim: 32,
            stay_prob: 0.8,
            noise_prob: 0.5,
            item_spread: 0.3,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.num_categories == 0 || self.num_items < self.num_categories {
            return bad(format!(
                "need at least one item per category ({} items, {} categories)",
                self.num_items, self.num_categories
            ));
        }
        if !(self.conversion_rate > 0.0 && self.conversion_rate < 1.0) {
            return bad(format!("conversion rate {} must lie in (0, 1)", self.conversion_rate));
        }
        if self.cluster_length == 0 {
            return bad("cluster length must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.coherence) {
            return bad(format!("coherence {} must lie in [0, 1]", self.coherence));
        }
        if !(0.0..=1.0).contains(&self.stay_prob) || !(0.0..=1.0).contains(&self.noise_prob) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.num_users == 0 || self.min_events == 0 || self.max_events < self.min_events {
            return bad("need users and a non-empty event-count range".into());
        }
        if self.embedding_dim == 0 || !(self.item_spread >= 0.0) {
            return bad("embedding dimension and spread must be positive".into());
        }
        Ok(())
    }

    /// Expected events per conversion episode, including the pay event.
    fn episode_len(&self) -> f64 {
        1.0 + self.coherence * self.cluster_length as f64 * (1.0 + self.noise_prob)
    }

    /// Per-step episode probability that makes pay events a
    /// `conversion_rate` share of all events.
    fn episode_prob(&self) -> f64 {
        let f = self.conversion_rate;
        (f / (1.0 + f - f * self.episode_len())).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub id: ItemId,
    pub category: usize,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCatalog {
    pub num_categories: usize,
    pub items: Vec<CatalogItem>,
}

impl SyntheticCatalog {
    pub fn category_of(&self, item: ItemId) -> Option<usize> {
        self.items.get(item.0 as usize).filter(|c| c.id == item).map(|c| c.category)
    }

    pub fn embedding_table(&self) -> Result<ItemEmbeddingTable> {
        ItemEmbeddingTable::new(self.items.iter().map(|c| (c.id, c.embedding.clone())).collect())
    }
}

pub fn generate_synthetic(
    config: &SyntheticConfig,
    seed: u64,
) -> Result<(SyntheticCatalog, Vec<InteractionSequence>)> {
    config.validate()?;
    let mut rng = rng::named_rng(seed, "data");
    let dim = config.embedding_dim;
    let unit = Normal::new(0.0, 1.0).expect("valid");
    let spread = Normal::new(0.0, config.item_spread).expect("valid");

    let centres: Vec<Vec<f64>> = (0..config.num_categories)
        .map(|_| (0..dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut by_category: Vec<Vec<ItemId>> = vec![Vec::new(); config.num_categories];
    let items: Vec<CatalogItem> = (0..config.num_items)
        .map(|i| {
            let category = i % config.num_categories;
            let id = ItemId(i as u32);
            by_category[category].push(id);
            let embedding = centres[category].iter().map(|c| c + spread.sample(&mut rng)).collect();
            CatalogItem { id, category, embedding }
        })
        .collect();
    let all_items: Vec<ItemId> = items.iter().map(|c| c.id).collect();

    let episode_prob = config.episode_prob();
    let mut sequences = Vec::with_capacity(config.num_users);
    for u in 0..config.num_users {
        let target_len = rng.random_range(config.min_events..=config.max_events);
        let mut interest = rng.random_range(0..config.num_categories);
        let mut events = Vec::with_capacity(target_len + 8);
        while events.len() < target_len {
            if rng.random::<f64>() < episode_prob {
                let category = rng.random_range(0..config.num_categories);
                let pool = &by_category[category];
                let purchase = *pool.choose(&mut rng).expect("non-empty category");
                if rng.random::<f64>() < config.coherence {
                    for _ in 0..config.cluster_length {
                        let behavior = if rng.random::<f64>() < 0.65 {
                            BehaviorType::Click
                        } else {
                            BehaviorType::AddToCart
                        };
                        events.push(Event::new(behavior, *pool.choose(&mut rng).expect("non-empty")));
                        if rng.random::<f64>() < config.noise_prob {
                            let noise = *all_items.choose(&mut rng).expect("non-empty");
                            events.push(Event::new(BehaviorType::Impression, noise));
                        }
                    }
                }
                events.push(Event::new(BehaviorType::Pay, purchase));
            } else {
                if rng.random::<f64>() >= config.stay_prob {
                    interest = rng.random_range(0..config.num_categories);
                }
                let behavior = if rng.random::<f64>() < 0.7 {
                    BehaviorType::Impression
                } else {
                    BehaviorType::Click
                };
                let item = if rng.random::<f64>() < 0.8 {
                    *by_category[interest].choose(&mut rng).expect("non-empty")
                } else {
                    *all_items.choose(&mut rng).expect("non-empty")
                };
                events.push(Event::new(behavior, item));
            }
        }
        sequences.push(InteractionSequence::new(UserId(u as u32), events));
    }
    Ok((
        SyntheticCatalog {
            num_categories: config.num_categories,
            items,
        },
        sequences,
    ))
}
