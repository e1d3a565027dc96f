use rand::Rng as _;

use super::*;
use crate::data::{make_batch, Batch, BehaviorType, Event, InteractionSequence, PadPolicy, UserId};
use crate::model::{ModelConfig, ParamId};
use crate::tokenizer::{ItemEmbeddingTable, ItemId};

/// Four items on a lopsided grid: level one splits the far coordinate,
/// level two the near one, so codes are (0,0), (0,1), (1,0), (1,1) in
/// some order.
fn grid_tokenizer() -> SemanticCodebooks {
    let table = ItemEmbeddingTable::new(vec![
        (ItemId(0), vec![0.0, 0.0]),
        (ItemId(1), vec![0.0, 1.0]),
        (ItemId(2), vec![10.0, 0.0]),
        (ItemId(3), vec![10.0, 1.0]),
    ])
    .unwrap();
    let tok = SemanticCodebooks::fit(&table, 2, 2, 0).unwrap();
    assert_eq!(tok.vocab_sizes(), vec![2, 2]);
    tok
}

fn catalog_tokenizer() -> SemanticCodebooks {
    let table = ItemEmbeddingTable::new(
        (0..24)
            .map(|i| (ItemId(i), vec![(i % 5) as f64, (i / 5) as f64 * 0.3, ((i * 7) % 3) as f64]))
            .collect(),
    )
    .unwrap();
    SemanticCodebooks::fit(&table, 2, 4, 0).unwrap()
}

fn small_config(tok: &SemanticCodebooks) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_dim: 16,
        max_history: 6,
        max_prefix_items: 3,
        num_users: 8,
        ..ModelConfig::default()
    }
    .with_tokenizer(tok)
}

fn noisy_model(tok: &SemanticCodebooks, seed: u64, scale: f64) -> Model {
    let mut r = rng::rng(seed);
    let mut m = Model::new(small_config(tok), &mut r).unwrap();
    let ids: Vec<ParamId> = m.params().ids().collect();
    for id in ids {
        let name = m.params().name(id).to_string();
        let base = if name.ends_with(".g") { 1.0 } else { 0.0 };
        for v in m.params_mut().get_mut(id).data_mut() {
            *v = base + r.random_range(-scale..scale);
        }
    }
    m
}

fn example(user: u32, items: &[u32], target_behavior: BehaviorType, target: u32) -> TrainingExample {
    use BehaviorType::*;
    let kinds = [Click, Impression, AddToCart, Click, Pay, Click];
    TrainingExample {
        history: InteractionSequence::new(
            UserId(user),
            items.iter().zip(kinds.iter().cycle()).map(|(&i, &b)| Event::new(b, ItemId(i))).collect(),
        ),
        target_behavior,
        target_item: ItemId(target),
    }
}

fn pay_examples(n: u32, items: u32) -> Vec<TrainingExample> {
    (0..n)
        .map(|u| {
            let start = (u * 3) % items;
            let hist: Vec<u32> = (0..4).map(|j| (start + j) % items).collect();
            example(u % 8, &hist, BehaviorType::Pay, (start + 4) % items)
        })
        .collect()
}

/// Head weights zeroed; at each level the target token gets logit 0 and the
/// other token `ln(e^c - 1)`, so the per-token NLL is exactly `c`.
fn fixed_nll_model(tok: &SemanticCodebooks, target: ItemId, c: f64) -> Model {
    let mut m = noisy_model(tok, 11, 0.3);
    let code = tok.encode(target).unwrap().to_vec();
    let other = (c.exp() - 1.0).ln();
    for (l, &t) in code.iter().enumerate() {
        let w = m.params().id(&format!("head.{l}.w")).unwrap();
        m.params_mut().get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let b = m.params().id(&format!("head.{l}.b")).unwrap();
        for (j, v) in m.params_mut().get_mut(b).data_mut().iter_mut().enumerate() {
            *v = if j == t { 0.0 } else { other };
        }
    }
    m
}

fn objective<'a>(theta0: &'a Model, tok: &'a SemanticCodebooks, mode: PrefixMode, lambda: f64, margin: f64) -> SftObjective<'a> {
    SftObjective {
        theta0: Some(theta0),
        tokenizer: tok,
        prefix: PrefixSpec { mode, k: 2, tau: 0.5 },
        lambda_qual: lambda,
        margin,
        weighting: SftWeighting::AllTokens,
    }
}

fn grid_batch(tok: &SemanticCodebooks) -> Batch {
    make_batch(&[example(1, &[0, 1, 3], BehaviorType::Pay, 2)], tok, PadPolicy::Left).unwrap()
}

#[test]
fn hinge_closed_form() {
    assert_eq!(quality_hinge(1.0, 0.5, 0.1), 0.0);
    assert!((quality_hinge(1.0, 1.2, 0.1) - 0.3).abs() < 1e-12);
    assert!((quality_hinge(1.0, 0.95, 0.1) - 0.05).abs() < 1e-12);
}

#[test]
fn hinge_fixtures_through_the_loss() {
    let tok = grid_tokenizer();
    let batch = grid_batch(&tok);
    let theta0 = fixed_nll_model(&tok, ItemId(2), 1.0);
    for (curr, want_qual) in [(0.5, 0.0), (1.2, 0.3)] {
        let model = fixed_nll_model(&tok, ItemId(2), curr);
        for lambda in [0.0, 0.1, 2.0] {
            let obj = objective(&theta0, &tok, PrefixMode::Off, lambda, 0.1);
            let r = loss_sft(&model, &batch, &obj, None, None).unwrap();
            assert!((r.l_base_pay - 1.0).abs() < 1e-9, "{r:?}");
            assert!((r.l_curr_pay - curr).abs() < 1e-9, "{r:?}");
            assert!((r.l_qual - want_qual).abs() < 1e-9, "{r:?}");
            assert!((r.nll_gain() - (1.0 - curr)).abs() < 1e-9);
            // Without prefix the generation loss is the target NLL.
            assert!((r.nll - curr).abs() < 1e-9);
            assert!((r.l_total - (r.nll + lambda * r.l_qual)).abs() < 1e-12);
        }
    }
}

#[test]
fn total_is_sft_plus_weighted_hinge() {
    let tok = catalog_tokenizer();
    let theta0 = noisy_model(&tok, 1, 0.5);
    let model = noisy_model(&tok, 2, 0.5);
    let exs = pay_examples(5, 24);
    let batch = make_batch(&exs, &tok, PadPolicy::Left).unwrap();
    for mode in [PrefixMode::Off, PrefixMode::Recent, PrefixMode::Learned] {
        for margin in [-5.0, 0.05, 5.0] {
            let obj = objective(&theta0, &tok, mode, 0.37, margin);
            let r = loss_sft(&model, &batch, &obj, None, None).unwrap();
            assert!((r.l_total - (r.nll + 0.37 * r.l_qual)).abs() < 1e-12);
            assert!(r.l_qual >= 0.0);
        }
    }
}

fn grads_of(model: &Model, batch: &Batch, obj: &SftObjective) -> Gradients {
    let mut g = Gradients::new(model.params());
    loss_sft(model, batch, obj, Some(&mut g), None).unwrap();
    g
}

fn max_diff(a: &Gradients, b: &Gradients, params: &crate::model::ParamStore, f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for id in params.ids() {
        match (a.get(id), b.get(id)) {
            (Some(x), Some(y)) => {
                for (p, q) in x.data().iter().zip(y.data()) {
                    worst = worst.max(f(*p, *q).abs());
                }
            }
            (None, None) => {}
            (Some(x), None) | (None, Some(x)) => worst = worst.max(x.data().iter().fold(0.0, |m, v| m.max(v.abs()))),
        }
    }
    worst
}

#[test]
fn zero_lambda_gradients_equal_generation_loss_gradients() {
    let tok = catalog_tokenizer();
    let theta0 = noisy_model(&tok, 1, 0.5);
    let model = noisy_model(&tok, 2, 0.5);
    let batch = make_batch(&pay_examples(4, 24), &tok, PadPolicy::Left).unwrap();
    for mode in [PrefixMode::Off, PrefixMode::Recent, PrefixMode::Learned] {
        // Active hinge, weight zero.
        let zero = grads_of(&model, &batch, &objective(&theta0, &tok, mode, 0.0, 50.0));
        // Inactive hinge, any weight.
        let idle = grads_of(&model, &batch, &objective(&theta0, &tok, mode, 3.0, -50.0));
        assert!(max_diff(&zero, &idle, model.params(), |a, b| a - b) < 1e-12);
    }
}

#[test]
fn active_hinge_adds_lambda_times_target_gradient() {
    let tok = catalog_tokenizer();
    let theta0 = noisy_model(&tok, 1, 0.5);
    let model = noisy_model(&tok, 2, 0.5);
    let batch = make_batch(&pay_examples(3, 24), &tok, PadPolicy::Left).unwrap();
    let lambda = 0.6;
    for mode in [PrefixMode::Off, PrefixMode::Recent, PrefixMode::Learned] {
        let mut base = objective(&theta0, &tok, mode, 0.0, 50.0);
        base.weighting = SftWeighting::TargetOnly;
        let mut hinged = base;
        hinged.lambda_qual = lambda;
        // With target-only weighting the generation loss is l_curr itself.
        let g0 = grads_of(&model, &batch, &base);
        let g1 = grads_of(&model, &batch, &hinged);
        assert!(max_diff(&g0, &g1, model.params(), |a, b| (1.0 + lambda) * a - b) < 1e-12);
    }
}

/// Central differences of the reported total against the accumulated
/// gradients. The recent-k prefix keeps the loss smooth.
#[test]
fn sft_gradients_match_finite_differences() {
    let tok = catalog_tokenizer();
    let theta0 = noisy_model(&tok, 1, 0.5);
    let model = noisy_model(&tok, 2, 0.5);
    let batch = make_batch(&pay_examples(2, 24), &tok, PadPolicy::Left).unwrap();
    let obj = objective(&theta0, &tok, PrefixMode::Recent, 0.8, 2.0);
    let g = grads_of(&model, &batch, &obj);
    let mut r = rng::rng(4);
    let h = 1e-5;
    let mut checked = 0;
    for id in model.params().ids() {
        let Some(grad) = g.get(id) else { continue };
        let n = grad.data().len();
        for _ in 0..3 {
            let i = r.random_range(0..n);
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().get_mut(id).data_mut()[i] += delta;
                loss_sft(&m, &batch, &obj, None, None).unwrap().l_total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            // Exactly-zero gradients (key biases) sit at the round-off floor.
            let err = (grad.data()[i] - numeric).abs() / (grad.data()[i].abs().max(numeric.abs()) + 1e-5);
            assert!(err < 1e-5, "{} [{i}]: {} vs {numeric}", model.params().name(id), grad.data()[i]);
            checked += 1;
        }
    }
    assert!(checked > 30);
}

#[test]
fn untrained_heads_give_uniform_pretrain_nll() {
    let tok = catalog_tokenizer();
    let mut m = noisy_model(&tok, 3, 0.5);
    for l in 0..tok.levels() {
        for name in [format!("head.{l}.w"), format!("head.{l}.b")] {
            let id = m.params().id(&name).unwrap();
            m.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let exs = vec![
        example(0, &[1, 2], BehaviorType::Click, 3),
        example(1, &[4], BehaviorType::Pay, 9),
        example(2, &[5, 6, 7], BehaviorType::AddToCart, 20),
    ];
    let batch = make_batch(&exs, &tok, PadPolicy::Left).unwrap();
    let r = loss_pretrain(&m, &batch, None, None).unwrap();
    let want: f64 = tok.vocab_sizes().iter().map(|&v| (v as f64).ln()).sum();
    assert!((r.nll - want).abs() < 1e-9);
    assert_eq!(r.l_total, r.nll);
}

#[test]
fn sft_rejects_bad_inputs() {
    let tok = catalog_tokenizer();
    let model = noisy_model(&tok, 2, 0.5);
    let batch = make_batch(&pay_examples(2, 24), &tok, PadPolicy::Left).unwrap();
    let mut obj = objective(&model, &tok, PrefixMode::Learned, 0.1, 0.05);
    obj.theta0 = None;
    assert!(matches!(loss_sft(&model, &batch, &obj, None, None), Err(Error::Pipeline(_))));
    let click = make_batch(&[example(0, &[1, 2], BehaviorType::Click, 3)], &tok, PadPolicy::Left).unwrap();
    let obj = objective(&model, &tok, PrefixMode::Learned, 0.1, 0.05);
    assert!(matches!(loss_sft(&model, &click, &obj, None, None), Err(Error::Input(_))));
}

fn mixed_examples(n: u32) -> Vec<TrainingExample> {
    use BehaviorType::*;
    let kinds = [Click, AddToCart, Pay, Impression];
    (0..n)
        .map(|u| {
            let start = (u * 5) % 24;
            let hist: Vec<u32> = (0..4).map(|j| (start + j) % 24).collect();
            example(u % 8, &hist, kinds[(u % 4) as usize], (start + 4) % 24)
        })
        .collect()
}

fn quick_pretrain(seed: u64) -> PretrainOutcome {
    let tok = catalog_tokenizer();
    let model = Model::new(small_config(&tok), &mut rng::rng(seed)).unwrap();
    let cfg = PretrainConfig {
        lr: 1e-2,
        batch_size: 8,
        epochs: 6,
        examples_per_epoch: None,
        valid_examples: 16,
        ..PretrainConfig::default()
    };
    let train = mixed_examples(48);
    let valid = mixed_examples(16);
    pretrain(model, &tok, &train, &valid, &cfg, seed, &mut Metrics::in_memory()).unwrap()
}

fn quick_sft() -> SftConfig {
    SftConfig {
        k: 2,
        batch_size: 4,
        epochs: 2,
        lr: 5e-3,
        ..SftConfig::default()
    }
}

#[test]
fn pretraining_lowers_validation_nll() {
    let out = quick_pretrain(1);
    assert_eq!(out.checkpoint.stage, Stage::Pretrained);
    assert_eq!(out.epochs.len(), 6);
    let best = out.epochs.iter().map(|e| e.valid_nll).fold(f64::INFINITY, f64::min);
    assert!(best < out.initial_valid_nll - 0.5, "{} -> {best}", out.initial_valid_nll);
    assert!(out.epochs.last().unwrap().train_nll < out.epochs[0].train_nll);
}

#[test]
fn training_is_deterministic_per_seed() {
    let a = quick_pretrain(5);
    let b = quick_pretrain(5);
    assert_eq!(a.checkpoint.model.digest(), b.checkpoint.model.digest());
    let c = quick_pretrain(6);
    assert_ne!(a.checkpoint.model.digest(), c.checkpoint.model.digest());

    let tok = catalog_tokenizer();
    let train = pay_examples(12, 24);
    let run = |seed| sft(&a.checkpoint, &tok, &train, &[], &quick_sft(), seed, &mut Metrics::in_memory()).unwrap();
    let (x, y, z) = (run(1), run(1), run(2));
    assert_eq!(x.checkpoint.model.digest(), y.checkpoint.model.digest());
    assert_eq!(x.epochs, y.epochs);
    assert_ne!(x.checkpoint.model.digest(), z.checkpoint.model.digest());
}

#[test]
fn sft_leaves_theta0_untouched_and_moves_theta() {
    let pre = quick_pretrain(2);
    let tok = catalog_tokenizer();
    let before = pre.checkpoint.model.digest();
    let bytes_before = pre.checkpoint.model.named_arrays();
    let mut metrics = Metrics::in_memory();
    let out = sft(&pre.checkpoint, &tok, &pay_examples(12, 24), &[], &quick_sft(), 3, &mut metrics).unwrap();
    assert_eq!(out.theta0_digest, before);
    assert_eq!(pre.checkpoint.model.digest(), before);
    assert_eq!(pre.checkpoint.model.named_arrays(), bytes_before);
    assert_ne!(out.checkpoint.model.digest(), before);
    assert_eq!(out.checkpoint.stage, Stage::Sft);
    assert_eq!(out.steps, 6);
    let stages: Vec<&str> = metrics.records().iter().filter_map(|r| r["stage"].as_str()).collect();
    assert_eq!(stages.iter().filter(|s| **s == "sft").count(), 6);
    assert_eq!(stages.iter().filter(|s| **s == "sft-epoch").count(), 2);
}

#[test]
fn sft_respects_step_cap_and_stage() {
    let pre = quick_pretrain(2);
    let tok = catalog_tokenizer();
    let train = pay_examples(12, 24);
    let capped = SftConfig {
        max_steps: Some(4),
        ..quick_sft()
    };
    let out = sft(&pre.checkpoint, &tok, &train, &[], &capped, 1, &mut Metrics::in_memory()).unwrap();
    assert_eq!(out.steps, 4);
    // Fine-tuning an already fine-tuned checkpoint is a pipeline error.
    let again = sft(&out.checkpoint, &tok, &train, &[], &quick_sft(), 1, &mut Metrics::in_memory());
    assert!(matches!(again, Err(Error::Pipeline(_))));
    assert!(matches!(
        sft(&pre.checkpoint, &tok, &[], &[], &quick_sft(), 1, &mut Metrics::in_memory()),
        Err(Error::Input(_))
    ));
    let too_long = SftConfig { k: 4, ..quick_sft() };
    assert!(matches!(
        sft(&pre.checkpoint, &tok, &train, &[], &too_long, 1, &mut Metrics::in_memory()),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let pre = quick_pretrain(4);
    let tok = catalog_tokenizer();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("theta0.bin");
    pre.checkpoint.save(&path).unwrap();
    let loaded = TrainCheckpoint::load(&path).unwrap();
    assert_eq!(loaded.stage, Stage::Pretrained);
    assert_eq!(loaded.model.digest(), pre.checkpoint.model.digest());
    assert_eq!(loaded.optimizer, pre.checkpoint.optimizer);
    let train = pay_examples(8, 24);
    let a = sft(&pre.checkpoint, &tok, &train, &[], &quick_sft(), 9, &mut Metrics::in_memory()).unwrap();
    let b = sft(&loaded, &tok, &train, &[], &quick_sft(), 9, &mut Metrics::in_memory()).unwrap();
    assert_eq!(a.checkpoint.model.digest(), b.checkpoint.model.digest());
}

#[test]
fn evaluate_sft_averages_over_examples() {
    let tok = catalog_tokenizer();
    let theta0 = noisy_model(&tok, 1, 0.5);
    let model = noisy_model(&tok, 2, 0.5);
    let exs = pay_examples(7, 24);
    let obj = objective(&theta0, &tok, PrefixMode::Recent, 0.2, 0.05);
    let whole = evaluate_sft(&model, &obj, &exs, 100).unwrap();
    let chunked = evaluate_sft(&model, &obj, &exs, 3).unwrap();
    assert_eq!(whole.examples, 7);
    assert!((whole.l_total - chunked.l_total).abs() < 1e-12);
    assert!((whole.l_curr_pay - chunked.l_curr_pay).abs() < 1e-12);
}

#[test]
fn cached_baselines_give_identical_losses_and_gradients() {
    let tok = catalog_tokenizer();
    let theta0 = noisy_model(&tok, 1, 0.5);
    let model = noisy_model(&tok, 2, 0.5);
    let exs = pay_examples(4, 24);
    let batch = make_batch(&exs, &tok, PadPolicy::Left).unwrap();
    let bases: Vec<f64> = (0..4).map(|r| baseline_pay_nll(&theta0, &batch, r).unwrap()).collect();
    let obj = objective(&theta0, &tok, PrefixMode::Learned, 0.3, 1.0);
    let mut g1 = Gradients::new(model.params());
    let mut g2 = Gradients::new(model.params());
    let a = loss_sft(&model, &batch, &obj, Some(&mut g1), None).unwrap();
    let b = losses::loss_sft_with_baseline(&model, &batch, &obj, Some(&bases), Some(&mut g2), None).unwrap();
    assert_eq!(a, b);
    assert_eq!(max_diff(&g1, &g2, model.params(), |x, y| x - y), 0.0);
    assert!(matches!(
        losses::loss_sft_with_baseline(&model, &batch, &obj, Some(&bases[..3]), None, None),
        Err(Error::Input(_))
    ));
}

#[test]
fn sft_keeps_the_best_validation_epoch() {
    let pre = quick_pretrain(2);
    let tok = catalog_tokenizer();
    let train = pay_examples(12, 24);
    let valid = pay_examples(6, 23);
    let cfg = SftConfig {
        epochs: 4,
        lr: 2e-2,
        ..quick_sft()
    };
    let out = sft(&pre.checkpoint, &tok, &train, &valid, &cfg, 5, &mut Metrics::in_memory()).unwrap();
    let scores: Vec<f64> = out.epochs.iter().map(|e| e.valid_l_curr.unwrap()).collect();
    let best = (0..scores.len()).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
    assert_eq!(out.best_epoch, Some(best));
    let obj = SftObjective {
        theta0: Some(&pre.checkpoint.model),
        tokenizer: &tok,
        prefix: cfg.prefix_spec(),
        lambda_qual: cfg.lambda_qual,
        margin: cfg.margin,
        weighting: cfg.weighting,
    };
    let again = evaluate_sft(&out.checkpoint.model, &obj, &valid, 64).unwrap();
    assert!((again.l_curr_pay - scores[best]).abs() < 1e-12);
    // Without validation data the last epoch is kept.
    let last = sft(&pre.checkpoint, &tok, &train, &[], &cfg, 5, &mut Metrics::in_memory()).unwrap();
    assert_eq!(last.best_epoch, None);
    assert!(last.epochs.iter().all(|e| e.valid_l_curr.is_none()));
}
