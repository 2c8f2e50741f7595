use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wheelgat::autodiff::{finite_diff_check, Graph, Parameters, TensorError};
use wheelgat::dataset::UNSEEN_ID;
use wheelgat::init;
use wheelgat::model::*;
use wheelgat::training::RunMode;
use wheelgat::wheelgraph::{MessagePassing, TopologyFlags};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        hidden_dim: 4,
        node_dim: 8,
        dropout: 0.0,
        ..Default::default()
    }
}

const SIZES: Sizes = Sizes {
    vocab: 12,
    intents: 5,
    slots: 7,
};

fn tiny(seed: u64) -> WheelGat {
    WheelGat::init(tiny_config(), SIZES, seed).unwrap()
}

fn loss_value(m: &WheelGat, ids: &[usize], intent: usize, slots: &[usize], alpha: f64) -> f64 {
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, ids, &mut RunMode::Eval).unwrap();
    let l = joint_loss(&mut g, &fwd, intent, slots, LossConfig { alpha }).unwrap();
    g.value(l.total)[0]
}

#[test]
fn zero_intent_head_gives_uniform_distribution() {
    let mut m = tiny(1);
    m.heads.intent_w.data_mut().fill(0.0);
    m.heads.intent_b.data_mut().fill(0.0);
    let p = m.predict(&[3, 4, 5]).unwrap();
    for &v in &p.intent_dist {
        assert!((v - 1.0 / SIZES.intents as f64).abs() < 1e-15);
    }
    assert_eq!(p.intent, 0);
    let l = loss_value(&m, &[3, 4, 5], 2, &[0, 1, 2], 1.0);
    assert!((l - (SIZES.intents as f64).ln()).abs() < 1e-12);
}

#[test]
fn distributions_have_one_row_per_token() {
    let m = tiny(2);
    for t in 1..=6 {
        let ids: Vec<usize> = (0..t).map(|i| (i * 5) % SIZES.vocab).collect();
        let p = m.predict(&ids).unwrap();
        assert_eq!(p.slot_dists.len(), t);
        assert_eq!(p.slots.len(), t);
        assert!((p.intent_dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for d in &p.slot_dists {
            assert_eq!(d.len(), SIZES.slots);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(p.intent < SIZES.intents && p.slots.iter().all(|&s| s < SIZES.slots));
    }
}

#[test]
fn forward_is_bitwise_reproducible() {
    let a = tiny(3).predict(&[1, 2, 3, 4]).unwrap();
    let b = tiny(3).predict(&[1, 2, 3, 4]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..20 {
        let m = tiny(case);
        let t = rng.gen_range(1..8);
        let ids: Vec<usize> = (0..t).map(|_| rng.gen_range(0..SIZES.vocab)).collect();
        let intent = rng.gen_range(0..SIZES.intents);
        let slots: Vec<usize> = (0..t).map(|_| rng.gen_range(0..SIZES.slots)).collect();
        let alpha = rng.gen_range(0.0..=1.0);
        let p = m.predict(&ids).unwrap();

        let mut l1 = 0.0;
        l1 -= p.intent_dist[intent].ln();
        let mut l2 = 0.0;
        for s in 0..t {
            l2 -= p.slot_dists[s][slots[s]].ln();
        }
        let want = alpha * l1 + (1.0 - alpha) * l2;
        let got = loss_value(&m, &ids, intent, &slots, alpha);
        assert!((got - want).abs() < 1e-12, "case {case}: {got} vs {want}");
        assert!(got >= 0.0);
    }
}

#[test]
fn loss_is_linear_in_alpha() {
    let m = tiny(5);
    let ids = [1, 7, 2, 9];
    let slots = [0, 3, 3, 6];
    let l0 = loss_value(&m, &ids, 1, &slots, 0.0);
    let l1 = loss_value(&m, &ids, 1, &slots, 1.0);
    let lh = loss_value(&m, &ids, 1, &slots, 0.5);
    assert!((lh - 0.5 * (l0 + l1)).abs() < 1e-12);
}

#[test]
fn intent_bias_shift_changes_nothing() {
    let m = tiny(6);
    let mut shifted = m.clone();
    shifted.heads.intent_b.data_mut().iter_mut().for_each(|b| *b += 3.25);
    let ids = [4, 5, 6];
    let (a, b) = (m.predict(&ids).unwrap(), shifted.predict(&ids).unwrap());
    assert_eq!(a.intent, b.intent);
    for (x, y) in a.intent_dist.iter().zip(&b.intent_dist) {
        assert!((x - y).abs() < 1e-9);
    }
    let la = loss_value(&m, &ids, 2, &[1, 1, 1], 0.1);
    let lb = loss_value(&shifted, &ids, 2, &[1, 1, 1], 0.1);
    assert!((la - lb).abs() < 1e-9);
}

#[test]
fn near_zero_probability_is_clamped_and_counted() {
    let mut m = tiny(7);
    m.heads.intent_w.data_mut().fill(0.0);
    m.heads.intent_b.data_mut().fill(0.0);
    m.heads.intent_b.data_mut()[0] = 100.0;
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &[1, 2], &mut RunMode::Eval).unwrap();
    let l = joint_loss(&mut g, &fwd, 1, &[0, 0], LossConfig { alpha: 1.0 }).unwrap();
    assert_eq!(l.clamped(&g), 1);
    assert!((g.value(l.total)[0] + PROB_CLAMP.ln()).abs() < 1e-9);
}

#[test]
fn unseen_labels_cannot_enter_the_loss() {
    let m = tiny(8);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &[1, 2], &mut RunMode::Eval).unwrap();
    assert!(matches!(
        joint_loss(&mut g, &fwd, UNSEEN_ID, &[0, 0], LossConfig::default()),
        Err(ModelError::Label(_))
    ));
    assert!(matches!(
        joint_loss(&mut g, &fwd, 0, &[0, UNSEEN_ID], LossConfig::default()),
        Err(ModelError::Label(_))
    ));
}

#[test]
fn out_of_vocabulary_ids_and_empty_input_are_errors() {
    let m = tiny(9);
    assert!(m.predict(&[SIZES.vocab]).is_err());
    assert!(m.predict(&[]).is_err());
}

#[test]
fn mismatched_node_width_is_rejected() {
    let cfg = ModelConfig {
        node_dim: 10,
        ..tiny_config()
    };
    assert!(matches!(WheelGat::init(cfg, SIZES, 0), Err(ModelError::Config(_))));
}

fn census(c: &ModelConfig, s: Sizes) -> usize {
    let (e, h, d) = (c.embed_dim, c.hidden_dim, c.node_dim);
    let gru = |input: usize, hidden: usize| {
        3 * input * hidden + 3 * hidden * hidden + if c.gru_bias { 3 * hidden } else { 0 }
    };
    let mut n = s.vocab * e + e * e + e;
    for l in 0..c.encoder_layers {
        let input = if l == 0 { e } else { 2 * h };
        n += 2 * gru(input, h);
    }
    let updates = if c.shared_update { 1 } else { 2 };
    let attn = if c.passing == MessagePassing::Gat { 2 * d } else { 0 };
    n += c.graph_layers * (d * d + attn + updates * gru(d, d));
    n + d * s.intents + s.intents + d * s.slots + s.slots
}

#[test]
fn parameter_count_matches_shape_formulas() {
    let configs = [
        tiny_config(),
        ModelConfig {
            gru_bias: false,
            shared_update: false,
            graph_layers: 2,
            ..tiny_config()
        },
        ModelConfig {
            passing: MessagePassing::Gcn,
            encoder_layers: 3,
            ..tiny_config()
        },
        ModelConfig::default(),
    ];
    for c in configs {
        let m = WheelGat::init(c.clone(), SIZES, 0).unwrap();
        assert_eq!(m.param_count(), census(&c, SIZES), "{c:?}");
        let names: std::collections::BTreeSet<_> = m.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), m.named_params().len(), "parameter names must be unique");
    }
}

#[test]
fn initialization_is_seeded_and_bounded() {
    let (a, b, c) = (tiny(11), tiny(11), tiny(12));
    let pa = a.named_params();
    let pb = b.named_params();
    assert!(pa.iter().zip(&pb).all(|((_, x), (_, y))| x.data() == y.data()));
    assert!(pa
        .iter()
        .zip(c.named_params())
        .any(|((_, x), (_, y))| x.data() != y.data()));

    let cfg = tiny_config();
    for (name, t) in pa {
        let fan_in = match name.as_str() {
            "encoder.embedding" => 1,
            n if n.ends_with(".a") => 2 * cfg.node_dim,
            n if n.starts_with("encoder.l1") && n.contains(".W_") => cfg.embed_dim,
            n if n.starts_with("encoder.l") => cfg.hidden_dim,
            n if n.starts_with("encoder.affine") => cfg.embed_dim,
            _ => cfg.node_dim,
        };
        let bound = init::bound(fan_in);
        if name.contains(".b_") {
            assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
        } else {
            assert!(t.data().iter().all(|v| v.abs() <= bound), "{name} exceeds {bound}");
        }
    }
}

fn check_gradients(m: &mut WheelGat, ids: &[usize], intent: usize, slots: &[usize]) {
    let report = finite_diff_check(
        m,
        |m, g| {
            let fwd = m
                .forward(g, ids, &mut RunMode::Eval)
                .map_err(|e| TensorError::Usage(e.to_string()))?;
            let l = joint_loss(g, &fwd, intent, slots, LossConfig::default())
                .map_err(|e| TensorError::Usage(e.to_string()))?;
            Ok(l.total)
        },
        1e-5,
    )
    .unwrap();
    for g in &report.groups {
        assert!(g.max_rel < 1e-4, "{}: {:e}", g.name, g.max_rel);
    }
    assert_eq!(report.groups.len(), m.named_params().len());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut m = tiny(13);
    check_gradients(&mut m, &[2, 5, 11], 3, &[1, 0, 6]);
}

#[test]
fn variant_gradients_match_finite_differences() {
    let variants = [
        ModelConfig {
            passing: MessagePassing::Gcn,
            ..tiny_config()
        },
        ModelConfig {
            shared_update: false,
            graph_layers: 2,
            flags: TopologyFlags {
                head_tail: false,
                ..Default::default()
            },
            ..tiny_config()
        },
    ];
    for c in variants {
        let mut m = WheelGat::init(c, SIZES, 14).unwrap();
        check_gradients(&mut m, &[7, 1, 4, 4], 0, &[2, 2, 5, 1]);
    }
}

proptest! {
    #[test]
    fn argmax_is_invariant_under_monotone_maps(grid in prop::collection::vec(-200i32..200, 1..20)) {
        let xs: Vec<f64> = grid.iter().map(|&v| f64::from(v) / 4.0).collect();
        let i = argmax(&xs);
        prop_assert!(xs.iter().all(|x| *x <= xs[i]));
        prop_assert!(xs[..i].iter().all(|x| *x < xs[i]));
        let mapped: Vec<f64> = xs.iter().map(|x| (x / 10.0).exp() * 3.0 - 1.0).collect();
        prop_assert_eq!(argmax(&mapped), i);
    }
}
