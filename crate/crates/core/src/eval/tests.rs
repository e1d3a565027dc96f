use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::data::{BehaviorType, Event, InteractionSequence};
use crate::model::{ModelConfig, ParamId, PrefixMode};
use crate::rng;
use crate::tokenizer::ItemEmbeddingTable;

fn tokenizer() -> SemanticCodebooks {
    let table = ItemEmbeddingTable::new(
        (0..24)
            .map(|i| (ItemId(i), vec![(i % 5) as f64, (i / 5) as f64 * 0.3, ((i * 7) % 3) as f64]))
            .collect(),
    )
    .unwrap();
    SemanticCodebooks::fit(&table, 2, 4, 0).unwrap()
}

fn model(tok: &SemanticCodebooks, seed: u64) -> Model {
    let config = ModelConfig {
        d_model: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_dim: 16,
        max_history: 6,
        max_prefix_items: 3,
        num_users: 5,
        ..ModelConfig::default()
    }
    .with_tokenizer(tok);
    let mut r = rng::rng(seed);
    let mut m = Model::new(config, &mut r).unwrap();
    // Large weights spread the output distribution so rankings are not ties.
    let ids: Vec<ParamId> = m.params().ids().collect();
    for id in ids {
        let name = m.params().name(id).to_string();
        let base = if name.ends_with(".g") { 1.0 } else { 0.0 };
        for v in m.params_mut().get_mut(id).data_mut() {
            *v = base + r.random_range(-0.8..0.8);
        }
    }
    m
}

fn example(user: u32, items: &[u32], target: u32) -> TrainingExample {
    use BehaviorType::*;
    let kinds = [Click, Impression, AddToCart, Click, Pay, Click];
    TrainingExample {
        history: InteractionSequence::new(
            UserId(user),
            items.iter().zip(kinds.iter().cycle()).map(|(&i, &b)| Event::new(b, ItemId(i))).collect(),
        ),
        target_behavior: BehaviorType::Pay,
        target_item: ItemId(target),
    }
}

fn specs() -> [PrefixSpec; 3] {
    [
        PrefixSpec { mode: PrefixMode::Off, k: 2, tau: 0.5 },
        PrefixSpec { mode: PrefixMode::Recent, k: 2, tau: 0.5 },
        PrefixSpec { mode: PrefixMode::Learned, k: 2, tau: 0.5 },
    ]
}

#[test]
fn metrics_fixture() {
    let ranked: Vec<ItemId> = (10..20).map(ItemId).collect();
    // Target at rank 3.
    assert_eq!(rank_of(&ranked, ItemId(12)), Some(3));
    assert_eq!(recall_at_k(&ranked, ItemId(12), 5), 1.0);
    assert_eq!(recall_at_k(&ranked, ItemId(12), 2), 0.0);
    assert!((ndcg_at_k(&ranked, ItemId(12), 5) - 0.5).abs() < 1e-12);
    assert_eq!(ndcg_at_k(&ranked, ItemId(10), 10), 1.0);
    assert_eq!(ndcg_at_k(&ranked, ItemId(99), 10), 0.0);
    assert_eq!(rank_of(&ranked, ItemId(99)), None);
}

#[test]
fn report_aggregates_planted_ranks() {
    // Half the users hit within 5.
    let planted = [Some(1), Some(3), Some(5), Some(7), Some(10), None, Some(2), None];
    let ranks: Vec<UserRank> = planted
        .iter()
        .enumerate()
        .map(|(u, &rank)| UserRank { user: UserId(u as u32), target: ItemId(0), rank })
        .collect();
    let r = EvalReport::from_ranks(ranks, 0, "x".into());
    assert_eq!(r.recall_5, 0.5);
    assert_eq!(r.recall_10, 0.75);
    let want5 = (1.0 + 0.5 + 1.0 / 6f64.log2() + 1.0 / 3f64.log2()) / 8.0;
    assert!((r.ndcg_5 - want5).abs() < 1e-12);
    let want10 = want5 + (1.0 / 8f64.log2() + 1.0 / 11f64.log2()) / 8.0;
    assert!((r.ndcg_10 - want10).abs() < 1e-12);
    assert_eq!(r.summary_csv().lines().count(), 2);
    assert_eq!(r.ranks_csv().lines().count(), 9);
}

#[test]
fn metrics_against_brute_force() {
    let mut r = rng::rng(7);
    for _ in 0..500 {
        let n = r.random_range(1..15usize);
        let mut ranked: Vec<ItemId> = (0..40).map(ItemId).collect();
        for i in (1..ranked.len()).rev() {
            let j = r.random_range(0..=i);
            ranked.swap(i, j);
        }
        ranked.truncate(n);
        let target = ItemId(r.random_range(0..40));
        for k in [1, 5, 10] {
            let mut hit = 0.0;
            let mut gain = 0.0;
            for (pos, item) in ranked.iter().take(k).enumerate() {
                if *item == target {
                    hit = 1.0;
                    gain = 1.0 / ((pos + 2) as f64).log2();
                }
            }
            assert_eq!(recall_at_k(&ranked, target, k), hit);
            assert!((ndcg_at_k(&ranked, target, k) - gain).abs() < 1e-15);
        }
    }
}

#[test]
fn trie_holds_exactly_catalog_prefixes() {
    let tok = tokenizer();
    let trie = CatalogTrie::new(&tok);
    assert!(trie.allows(&[]));
    for (_, tokens) in tok.assignments() {
        for end in 0..=tokens.len() {
            assert!(trie.allows(&tokens[..end]));
        }
    }
    let full: usize = tok.vocab_sizes().iter().product();
    let codes: std::collections::HashSet<_> = tok.assignments().iter().map(|(_, t)| t.clone()).collect();
    assert_eq!(codes.len(), tok.num_items());
    if full > codes.len() {
        // Some full-length code is not an item and must be rejected.
        let mut found = false;
        let v = tok.vocab_sizes();
        let mut idx = vec![0usize; v.len()];
        'outer: loop {
            if !codes.contains(&idx) {
                assert!(!trie.allows(&idx));
                found = true;
                break;
            }
            for l in (0..v.len()).rev() {
                idx[l] += 1;
                if idx[l] < v[l] {
                    continue 'outer;
                }
                idx[l] = 0;
            }
            break;
        }
        assert!(found);
    }
}

/// With a beam wide enough to never prune, beam search equals exhaustive
/// scoring of the catalog, bit for bit.
#[test]
fn wide_beam_matches_exhaustive_scoring() {
    let tok = tokenizer();
    let m = model(&tok, 3);
    let trie = CatalogTrie::new(&tok);
    let exs = [example(1, &[3, 11, 7, 15], 9), example(4, &[0, 22, 5], 17), example(9, &[8], 2)];
    let batch = make_batch(&exs, &tok, PadPolicy::Left).unwrap();
    for spec in specs() {
        for row in 0..exs.len() {
            let all = score_catalog(&m, &tok, &batch, row, spec).unwrap();
            assert_eq!(all.len(), tok.num_items());
            let total: f64 = all.iter().map(|(_, lp)| lp.exp()).sum();
            assert!(total <= 1.0 + 1e-12);
            let width = tok.num_items();
            let got = generate_topn(&m, &tok, &trie, &batch, row, spec, width, LIST_LEN).unwrap();
            assert!(!got.short);
            assert_eq!(got.items, all[..LIST_LEN].to_vec());
        }
    }
}

#[test]
fn width_one_is_greedy() {
    let tok = tokenizer();
    let m = model(&tok, 5);
    let trie = CatalogTrie::new(&tok);
    let exs = [example(2, &[3, 11, 7], 9)];
    let batch = make_batch(&exs, &tok, PadPolicy::Left).unwrap();
    for spec in specs() {
        let got = generate_topn(&m, &tok, &trie, &batch, 0, spec, 1, 1).unwrap();
        // Greedy: at every level the best allowed token given the path so far.
        let all = score_catalog(&m, &tok, &batch, 0, spec).unwrap();
        let mut path: Vec<usize> = Vec::new();
        for l in 0..tok.levels() {
            let best = (0..tok.vocab_sizes()[l])
                .filter(|&t| {
                    let mut p = path.clone();
                    p.push(t);
                    trie.allows(&p)
                })
                .max_by(|&a, &c| {
                    let mass = |t: usize| {
                        all.iter()
                            .filter(|(i, _)| {
                                let code = tok.encode(*i).unwrap();
                                code[..l] == path[..] && code[l] == t
                            })
                            .map(|(_, lp)| lp.exp())
                            .sum::<f64>()
                    };
                    mass(a).total_cmp(&mass(c)).then(c.cmp(&a))
                })
                .unwrap();
            path.push(best);
        }
        assert_eq!(got.items.len(), 1);
        assert_eq!(tok.encode(got.items[0].0).unwrap(), &path[..]);
    }
}

#[test]
fn beam_rejects_bad_widths() {
    let tok = tokenizer();
    let m = model(&tok, 1);
    let trie = CatalogTrie::new(&tok);
    let batch = make_batch(&[example(1, &[1, 2], 3)], &tok, PadPolicy::Left).unwrap();
    let spec = specs()[0];
    assert!(matches!(generate_topn(&m, &tok, &trie, &batch, 0, spec, 0, 1), Err(Error::Parameter(_))));
    assert!(matches!(generate_topn(&m, &tok, &trie, &batch, 0, spec, 5, 10), Err(Error::Parameter(_))));
}

#[test]
fn narrow_beam_lists_are_sorted_and_distinct() {
    let tok = tokenizer();
    let m = model(&tok, 8);
    let trie = CatalogTrie::new(&tok);
    let batch = make_batch(&[example(3, &[4, 9, 13, 1], 6)], &tok, PadPolicy::Left).unwrap();
    for spec in specs() {
        let got = generate_topn(&m, &tok, &trie, &batch, 0, spec, 10, 10).unwrap();
        let ids = got.ids();
        let set: std::collections::HashSet<_> = ids.iter().collect();
        assert_eq!(set.len(), ids.len());
        assert!(got.items.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(got.items.iter().all(|(i, _)| tok.contains(*i)));
    }
}

#[test]
fn evaluate_is_deterministic_and_respects_flags() {
    let tok = tokenizer();
    let m = model(&tok, 2);
    let exs: Vec<_> = (0..6).map(|u| example(u, &[u, u + 3, u + 7], (u * 5) % 24)).collect();
    let spec = specs()[2];
    let cfg = EvalConfig { beam_width: 10, ..EvalConfig::default() };
    let a = evaluate(&m, &tok, &exs, spec, &cfg, "f".into()).unwrap();
    let b = evaluate(&m, &tok, &exs, spec, &cfg, "f".into()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.users, 6);
    // Without the inference prefix the learned spec behaves like no prefix.
    let off = EvalConfig { inference_prefix: false, ..cfg.clone() };
    let c = evaluate(&m, &tok, &exs, spec, &off, "f".into()).unwrap();
    let d = evaluate(&m, &tok, &exs, specs()[0], &cfg, "f".into()).unwrap();
    assert_eq!(c.ranks, d.ranks);
    let capped = EvalConfig { max_users: Some(2), ..cfg };
    assert_eq!(evaluate(&m, &tok, &exs, spec, &capped, "f".into()).unwrap().users, 2);
    assert!(matches!(evaluate(&m, &tok, &[], spec, &cfg, "f".into()), Err(Error::Input(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn recall_monotone_in_k(ranks in proptest::collection::vec(proptest::option::of(1usize..12), 1..30)) {
        let ranks: Vec<UserRank> = ranks
            .into_iter()
            .enumerate()
            .map(|(u, rank)| UserRank { user: UserId(u as u32), target: ItemId(0), rank })
            .collect();
        let r = EvalReport::from_ranks(ranks, 0, String::new());
        prop_assert!(r.recall_5 <= r.recall_10);
        prop_assert!(r.ndcg_5 <= r.ndcg_10);
        prop_assert!(r.ndcg_10 <= r.recall_10 + 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.recall_10));
    }
}
