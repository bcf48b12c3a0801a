mod support;

use pfgt::data::Sample;
use pfgt::model::Model;
use pfgt::numerics::{Graph, Parameter};
use pfgt::training::{
    compute_learn_loss, compute_unlearn_loss, fit, plan_sample, train, Ablation, DistractorCount, TrainConfig,
};
use pfgt::{checkpoint, Error};
use support::{tiny_data, tiny_encoder};

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed,
        ..Default::default()
    }
}

fn manual_log_softmax(z: &[f32]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, v| a.max(f64::from(*v)));
    let lse = m + z.iter().map(|v| (f64::from(*v) - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| f64::from(*v) - lse).collect()
}

#[test]
fn learn_loss_is_the_mean_of_per_sample_cross_entropies() {
    let splits = tiny_data(4, 10, 0);
    let model: Model = Model::init(&tiny_encoder(4), 1).unwrap();
    let batch: Vec<&Sample> = splits.train.samples.iter().step_by(7).take(4).collect();
    let cfg = TrainConfig::default();

    // Replay the pool generator by hand on a clone.
    let mut replay = model.clone();
    let mut manual = 0.0;
    for s in &batch {
        let plan = plan_sample(&mut replay.pool, s.label, &cfg).unwrap();
        assert!(plan.learn.contains(&s.label));
        let logits = replay.logits_with(&s.image, &plan.learn).unwrap();
        manual -= manual_log_softmax(&logits)[s.label];
    }
    manual /= 4.0;

    let mut m = model.clone();
    let loss = compute_learn_loss(&mut m, &batch, &cfg).unwrap();
    assert!((loss - manual).abs() < 1e-6, "{loss} vs {manual}");
}

fn with_head(mut model: Model, bias: [f32; 4]) -> Model {
    model.encoder.head.weight.tensor.values_mut().fill(0.0);
    model.encoder.head.bias.tensor.values_mut().copy_from_slice(&bias);
    model
}

#[test]
fn closed_form_losses() {
    let splits = tiny_data(4, 10, 0);
    let batch: Vec<&Sample> = splits.train.samples.iter().take(6).collect();
    let cfg = TrainConfig::default();
    let base: Model = Model::init(&tiny_encoder(4), 1).unwrap();

    let mut flat = with_head(base.clone(), [0.0; 4]);
    let learn = compute_learn_loss(&mut flat, &batch, &cfg).unwrap();
    assert!((learn - 4f64.ln()).abs() < 1e-6);
    assert!(compute_unlearn_loss(&mut flat, &batch, &cfg).unwrap().abs() < 1e-7);

    let mut peaked = with_head(base, [60.0, 0.0, 0.0, 0.0]);
    let kl = compute_unlearn_loss(&mut peaked, &batch, &cfg).unwrap();
    assert!((kl - 4f64.ln()).abs() < 1e-5, "{kl}");
}

#[test]
fn inactive_label_cannot_be_trained() {
    let splits = tiny_data(4, 10, 0);
    let mut model: Model = Model::init(&tiny_encoder(4), 1).unwrap();
    model.pool.remove_prompt(2).unwrap();
    let s = splits.train.samples.iter().find(|s| s.label == 2).unwrap();
    let cfg = TrainConfig::default();
    assert!(matches!(compute_learn_loss(&mut model, &[s], &cfg), Err(Error::InactiveClass(2))));
    assert!(matches!(fit(&mut model, &splits.train, &cfg), Err(Error::Config(_))));
}

#[test]
fn loss_composition_and_lambda_zero() {
    let splits = tiny_data(4, 10, 0);
    for lambda in [0.0, 0.5, 2.0] {
        let cfg = TrainConfig { lambda, ..quick(3) };
        let (_, log) = train::<f32>(&tiny_encoder(4), &splits.train, &cfg).unwrap();
        assert_eq!(log.batches.len(), 2 * 4);
        for b in &log.batches {
            assert!((b.total - (b.learn_term + lambda * b.unlearn_term)).abs() < 1e-6);
            if lambda == 0.0 {
                assert_eq!(b.total, b.learn_term);
            }
        }
    }
}

#[test]
fn full_knowledge_has_no_unlearn_term() {
    let splits = tiny_data(4, 10, 0);
    let cfg = TrainConfig {
        full_knowledge: true,
        ..quick(3)
    };
    assert!(!cfg.uses_kl());
    let (_, log) = train::<f32>(&tiny_encoder(4), &splits.train, &cfg).unwrap();
    assert!(log.batches.iter().all(|b| b.unlearn_term == 0.0));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let splits = tiny_data(4, 10, 0);
    let run = |seed| {
        let (m, _) = train::<f32>(&tiny_encoder(4), &splits.train, &quick(seed)).unwrap();
        checkpoint::to_bytes(&m, serde_json::Value::Null).unwrap()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn only_prompts_lora_and_head_change() {
    let splits = tiny_data(4, 10, 0);
    let cfg = quick(2);
    let init: Model = Model::init(&tiny_encoder(4), cfg.seed).unwrap();
    let (trained, _) = train::<f32>(&tiny_encoder(4), &splits.train, &cfg).unwrap();
    let mut changed = Vec::new();
    for (a, b) in init.all_params().iter().zip(trained.all_params()) {
        assert_eq!(a.name, b.name);
        let same = a.tensor.values().iter().zip(b.tensor.values()).all(|(x, y)| x.to_bits() == y.to_bits());
        if a.frozen {
            assert!(same, "frozen {} changed", a.name);
        } else if !same {
            changed.push(a.name.clone());
        }
    }
    assert!(changed.iter().any(|n| n.starts_with("prompt.")));
    assert!(changed.iter().any(|n| n.contains("lora_")));
    assert!(changed.iter().any(|n| n.starts_with("head.")));
}

#[test]
fn learning_reduces_the_learn_loss() {
    let splits = tiny_data(4, 30, 1);
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 8,
        seed: 4,
        ..Default::default()
    };
    let (_, log) = train::<f32>(&tiny_encoder(4), &splits.train, &cfg).unwrap();
    let means = log.epoch_means();
    assert_eq!(means.len(), 10);
    assert!(means[9].1 < means[0].1, "{:?}", means);
}

#[test]
fn ablation_switches_change_only_their_aspect() {
    let model: Model = Model::init(&tiny_encoder(5), 0).unwrap();
    let mut pool = model.pool.clone();
    let kl_only = TrainConfig {
        ablation: Ablation::KL_ONLY,
        ..Default::default()
    };
    for _ in 0..50 {
        let p = plan_sample(&mut pool, 2, &kl_only).unwrap();
        assert_eq!(p.learn, vec![0, 1, 2, 3, 4]);
        assert_eq!(p.unlearn.unwrap(), vec![0, 1, 3, 4]);
    }

    let shuffle = TrainConfig {
        ablation: Ablation::KL_SHUFFLE,
        ..Default::default()
    };
    let mut orders = std::collections::HashSet::new();
    for _ in 0..50 {
        let p = plan_sample(&mut pool, 2, &shuffle).unwrap();
        let mut sorted = p.learn.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        let mut u = p.unlearn.unwrap();
        u.sort();
        assert_eq!(u, vec![0, 1, 3, 4]);
        orders.insert(p.learn);
    }
    assert!(orders.len() > 10);

    let sampling_only = TrainConfig {
        ablation: Ablation {
            use_kl: true,
            use_shuffle: false,
            use_sampling: true,
        },
        ..Default::default()
    };
    let mut sizes = std::collections::HashSet::new();
    for _ in 0..200 {
        let p = plan_sample(&mut pool, 2, &sampling_only).unwrap();
        assert!(p.learn.windows(2).all(|w| w[0] < w[1]), "sampling alone keeps canonical order");
        assert!(p.learn.contains(&2));
        let u = p.unlearn.unwrap();
        assert!(!u.contains(&2) && !u.is_empty());
        sizes.insert(p.learn.len());
    }
    assert_eq!(sizes, (2..=5).collect());
}

#[test]
fn inactive_prompts_never_enter_a_plan_or_receive_gradient() {
    let mut model: Model = Model::init(&tiny_encoder(5), 0).unwrap();
    model.pool.remove_prompt(3).unwrap();
    let splits = tiny_data(5, 4, 0);
    let cfg = TrainConfig::default();
    for s in splits.train.samples.iter().filter(|s| s.label != 3) {
        let mut pool = model.pool.clone();
        let plan = plan_sample(&mut pool, s.label, &cfg).unwrap();
        let unlearn = plan.unlearn.unwrap();
        assert!(!plan.learn.contains(&3) && !unlearn.contains(&3));
        let mut g = Graph::new();
        let blocks: Vec<&Parameter> = plan.learn.iter().map(|c| model.pool.block(*c)).collect();
        let y = model.encoder.forward(&mut g, &s.image, &blocks).unwrap();
        let loss = g.cross_entropy(y, s.label).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(g.param_grads(&grads).iter().all(|(n, _)| *n != "prompt.3"));
    }
}

#[test]
fn distractor_count_support_is_validated() {
    assert!(DistractorCount::Fixed { m: 0 }.validate(6).is_err());
    assert!(DistractorCount::Fixed { m: 6 }.validate(6).is_err());
    assert!(DistractorCount::Uniform { low: 1, high: 5 }.validate(6).is_ok());
    assert!(DistractorCount::Uniform { low: 3, high: 2 }.validate(6).is_err());
    let bad = TrainConfig {
        m_distribution: DistractorCount::Fixed { m: 9 },
        ..Default::default()
    };
    assert!(bad.validate(6).is_err());
    assert!(TrainConfig { lambda: -1.0, ..Default::default() }.validate(6).is_err());
}

#[test]
fn loss_log_csv_has_the_documented_columns() {
    let splits = tiny_data(4, 10, 0);
    let (_, log) = train::<f32>(&tiny_encoder(4), &splits.train, &quick(1)).unwrap();
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,batch,learn_term,unlearn_term,total,wall_ms");
    assert_eq!(text.lines().count(), 1 + log.batches.len());
}
