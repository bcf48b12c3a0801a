mod support;

use std::collections::BTreeSet;

use pfgt::checkpoint;
use pfgt::evaluation::mia_from_scores;
use pfgt::model::Model;
use pfgt::numerics::{softmax, Graph, Tensor};
use pfgt::prompt_pool::assemble_shuffled;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::tiny_encoder;

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 2..max_len)
}

proptest! {
    #[test]
    fn softmax_normalizes_and_is_shift_invariant(z in logits(12), c in -50.0f64..50.0) {
        let t = Tensor::new(vec![z.len()], z.clone()).unwrap();
        let p = softmax(&t, 0).unwrap();
        let sum: f64 = p.values().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(p.values().iter().all(|v| *v >= 0.0));
        let shifted = Tensor::new(vec![z.len()], z.iter().map(|v| v + c).collect()).unwrap();
        let q = softmax(&shifted, 0).unwrap();
        for (a, b) in p.values().iter().zip(q.values()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_to_uniform_is_nonnegative_and_bounded(z in logits(12)) {
        let k = z.len();
        let mut g: Graph<f64> = Graph::new();
        let v = g.constant(vec![k], z).unwrap();
        let kl = g.kl_to_uniform(v).unwrap();
        let value = g.scalar(kl);
        prop_assert!(value >= 0.0);
        prop_assert!(value <= (k as f64).ln() + 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_identity(z in logits(10), label_seed in 0usize..100) {
        let k = z.len();
        let label = label_seed % k;
        let mut g: Graph<f64> = Graph::new();
        let v = g.input(Tensor::new(vec![k], z.clone()).unwrap().with_requires_grad(true));
        let ce = g.cross_entropy(v, label).unwrap();
        let grads = g.backward(ce).unwrap();
        let p = softmax(&Tensor::new(vec![k], z).unwrap(), 0).unwrap();
        for (i, (gi, pi)) in grads.get(v).unwrap().iter().zip(p.values()).enumerate() {
            let expected = pi - if i == label { 1.0 } else { 0.0 };
            prop_assert!((gi - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn distractors_exclude_target_and_inactive(seed in any::<u64>(), target in 0usize..6, off in 0usize..6, m_seed in 0usize..10) {
        let mut model: Model = Model::init(&tiny_encoder(6), 0).unwrap();
        prop_assume!(off != target);
        model.pool.remove_prompt(off).unwrap();
        let m = m_seed % 5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.pool.sample_distractors(target, m, &mut rng).unwrap();
        prop_assert_eq!(d.len(), m);
        prop_assert!(!d.contains(&target) && !d.contains(&off));
        prop_assert_eq!(d.iter().collect::<BTreeSet<_>>().len(), m);
    }

    #[test]
    fn shuffle_preserves_multiset(seed in any::<u64>(), blocks in prop::collection::vec(0u8..10, 1..8)) {
        let mut out = assemble_shuffled(blocks.clone(), &mut ChaCha8Rng::seed_from_u64(seed));
        let mut sorted = blocks;
        sorted.sort();
        out.sort();
        prop_assert_eq!(out, sorted);
    }

    #[test]
    fn remove_restore_round_trip(classes in prop::collection::btree_set(0usize..5, 0..5)) {
        let model: Model = Model::init(&tiny_encoder(5), 1).unwrap();
        let mut m = model.clone();
        for c in &classes {
            m.pool.remove_prompt(*c).unwrap();
        }
        prop_assert_eq!(m.pool.active_count(), 5 - classes.len());
        prop_assert_eq!(m.pool.removed_classes(), classes.clone());
        for c in &classes {
            m.pool.restore_prompt(*c).unwrap();
        }
        prop_assert_eq!(m, model);
    }

    #[test]
    fn mia_is_invariant_to_increasing_affine_maps(
        members in prop::collection::vec(0.0f64..1.0, 4..40),
        nonmembers in prop::collection::vec(0.0f64..1.0, 4..40),
        seed in any::<u64>(),
    ) {
        let a = mia_from_scores(&members, &nonmembers, seed).unwrap();
        let t = |v: &Vec<f64>| v.iter().map(|x| 2.5 * x - 1.0).collect::<Vec<_>>();
        let b = mia_from_scores(&t(&members), &t(&nonmembers), seed).unwrap();
        prop_assert!((a.attack_advantage - b.attack_advantage).abs() < 1e-9);
        prop_assert_eq!(a.direction, b.direction);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip_for_any_mask(seed in any::<u64>(), mask in prop::collection::vec(any::<bool>(), 4)) {
        let mut model: Model = Model::init(&tiny_encoder(4), seed).unwrap();
        model.pool.set_active_mask(&mask).unwrap();
        let bytes = checkpoint::to_bytes(&model, serde_json::Value::Null).unwrap();
        let (back, _) = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.pool.active_mask(), model.pool.active_mask());
        prop_assert_eq!(checkpoint::to_bytes(&back, serde_json::Value::Null).unwrap(), bytes);
    }

    #[test]
    fn strip_lora_is_idempotent_and_reversible(seed in any::<u64>()) {
        let model: Model = Model::init(&tiny_encoder(3), seed).unwrap();
        let s = model.encoder.strip_lora();
        prop_assert_eq!(s.strip_lora(), s.clone());
        prop_assert_eq!(s.restore_lora(), model.encoder);
    }
}
