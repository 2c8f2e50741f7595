use std::ops::ControlFlow;
use std::path::Path;

use proptest::prelude::*;
use wheelgat::autodiff::{Graph, Parameters, Tensor};
use wheelgat::dataset::{load_split, EncodeMode, Layout, Split, Utterance, Vocab};
use wheelgat::model::{LossConfig, ModelConfig, Sizes, WheelGat};
use wheelgat::training::*;

struct Holder(Vec<Tensor>);

impl Parameters for Holder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.0.iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.0
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect()
    }
}

/// Parameters with the given values whose gradients are set to `grads`.
fn holder(values: &[Vec<f64>], grads: &[Vec<f64>]) -> Holder {
    let h = Holder(
        values
            .iter()
            .map(|v| Tensor::param(vec![v.len()], v.clone()).unwrap())
            .collect(),
    );
    let mut g = Graph::new();
    let mut terms = Vec::new();
    for (t, gr) in h.0.iter().zip(grads) {
        let x = g.leaf(t);
        let c = g.constant(vec![gr.len()], gr.clone()).unwrap();
        let p = g.mul(x, c).unwrap();
        terms.push(g.sum(p).unwrap());
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t).unwrap();
    }
    g.backward(total).unwrap();
    h
}

#[test]
fn small_gradients_are_not_clipped() {
    let h = holder(&[vec![0.0, 0.0]], &[vec![0.3, 0.4]]);
    assert_eq!(clip_global_norm(&h, 1.0), 1.0);
    assert_eq!(h.0[0].grad().unwrap(), vec![0.3, 0.4]);
}

#[test]
fn three_four_five_is_scaled_to_unit_norm() {
    let h = holder(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]);
    assert!((clip_global_norm(&h, 1.0) - 0.2).abs() < 1e-15);
    let g = h.0[0].grad().unwrap();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_the_limit(
        a in prop::collection::vec(-10.0f64..10.0, 1..8),
        b in prop::collection::vec(-10.0f64..10.0, 1..8),
        max in 0.01f64..5.0,
    ) {
        let h = holder(&[vec![0.0; a.len()], vec![0.0; b.len()]], &[a, b]);
        clip_global_norm(&h, max);
        let norm: f64 = h.0.iter().flat_map(|t| t.grad().unwrap()).map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm <= max + 1e-12);
    }
}

#[test]
fn zero_gradient_without_decay_leaves_parameters() {
    let mut h = holder(&[vec![0.5, -1.5]], &[vec![0.0, 0.0]]);
    let mut adam = Adam::new(
        &h,
        AdamConfig {
            l2: 0.0,
            ..Default::default()
        },
    );
    adam.step(&mut h).unwrap();
    assert_eq!(h.0[0].data(), &[0.5, -1.5]);
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn first_step_moves_by_learning_rate() {
    let mut h = holder(&[vec![0.0]], &[vec![1.0]]);
    let mut adam = Adam::new(
        &h,
        AdamConfig {
            l2: 0.0,
            ..Default::default()
        },
    );
    adam.step(&mut h).unwrap();
    // m̂ = g, v̂ = g², so Δθ = −lr·g/(|g| + ε).
    let want = -1e-3 / (1.0 + 1e-8);
    assert!((h.0[0].data()[0] - want).abs() < 1e-18);
}

#[test]
fn repeated_steps_differ_from_one_doubled_step() {
    let cfg = AdamConfig {
        l2: 0.0,
        ..Default::default()
    };
    let mut theta_a = vec![0.2];
    let mut mom_a = Moments::new(1);
    adam_update(&mut theta_a, &[0.5], &mut mom_a, 1, &cfg);
    adam_update(&mut theta_a, &[0.5], &mut mom_a, 2, &cfg);
    let mut theta_b = vec![0.2];
    let mut mom_b = Moments::new(1);
    adam_update(&mut theta_b, &[1.0], &mut mom_b, 1, &cfg);
    assert_ne!(theta_a[0], theta_b[0]);
}

#[test]
fn l2_enters_the_gradient_or_the_weights() {
    let theta0 = 2.0;
    let coupled = AdamConfig {
        l2: 0.1,
        ..Default::default()
    };
    let mut t = vec![theta0];
    adam_update(&mut t, &[0.0], &mut Moments::new(1), 1, &coupled);
    // Gradient becomes λθ > 0, so the first normalized step is a full −lr.
    assert!((t[0] - (theta0 - 1e-3 * 0.2 / (0.2 + 1e-8))).abs() < 1e-15);

    let decoupled = AdamConfig {
        decoupled: true,
        ..coupled
    };
    let mut t = vec![theta0];
    adam_update(&mut t, &[0.0], &mut Moments::new(1), 1, &decoupled);
    assert!((t[0] - (theta0 - 1e-3 * 0.1 * theta0)).abs() < 1e-15);
}

fn fixture(split: Split) -> Vec<Utterance> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/atis-subset");
    load_split(&dir, split, Layout::Conll).unwrap()
}

fn small_model(vocab: &Vocab, dropout: f64, seed: u64) -> WheelGat {
    let cfg = ModelConfig {
        embed_dim: 16,
        hidden_dim: 8,
        node_dim: 16,
        dropout,
        ..Default::default()
    };
    let sizes = Sizes {
        vocab: vocab.tokens.len(),
        intents: vocab.intents.len(),
        slots: vocab.slots.len(),
    };
    WheelGat::init(cfg, sizes, seed).unwrap()
}

#[test]
fn batch_gradient_is_mean_of_utterance_gradients() {
    let train_set = fixture(Split::Train);
    let vocab = Vocab::build(&train_set, true).unwrap();
    let model = small_model(&vocab, 0.0, 3);
    let batch: Vec<_> = train_set[..3]
        .iter()
        .map(|u| vocab.encode(u, EncodeMode::Train).unwrap())
        .collect();

    let mut singles: Vec<Vec<Vec<f64>>> = Vec::new();
    for u in &batch {
        model.zero_grads();
        accumulate_gradient(&model, u, LossConfig::default(), &mut RunMode::Eval).unwrap();
        singles.push(model.named_params().iter().map(|(_, t)| t.grad_or_zeros()).collect());
    }
    model.zero_grads();
    for u in &batch {
        accumulate_gradient(&model, u, LossConfig::default(), &mut RunMode::Eval).unwrap();
    }
    for (_, t) in model.named_params() {
        t.scale_grad(1.0 / 3.0);
    }
    for (p, (name, t)) in model.named_params().iter().enumerate() {
        let got = t.grad_or_zeros();
        for (i, v) in got.iter().enumerate() {
            let mean = (singles[0][p][i] + singles[1][p][i] + singles[2][p][i]) / 3.0;
            assert!((v - mean).abs() < 1e-10, "{name}[{i}]");
        }
    }
}

fn run(dropout: f64, epochs: usize, seed: u64) -> TrainOutcome {
    let train_set = fixture(Split::Train);
    let dev = fixture(Split::Dev);
    let vocab = Vocab::build(&train_set, true).unwrap();
    let model = small_model(&vocab, dropout, seed);
    let cfg = TrainConfig {
        max_epochs: epochs,
        batch_size: 8,
        seed,
        ..Default::default()
    };
    train(model, &vocab, &train_set, &dev, &cfg, |_, _| ControlFlow::Continue(())).unwrap()
}

#[test]
fn same_seed_same_trajectory() {
    for dropout in [0.0, 0.2] {
        let a = run(dropout, 3, 5);
        let b = run(dropout, 3, 5);
        assert_eq!(a.log, b.log);
        let pa = a.best.named_params();
        assert!(pa
            .iter()
            .zip(b.best.named_params())
            .all(|((_, x), (_, y))| x.data() == y.data()));
    }
    assert_ne!(run(0.2, 1, 5).log[0].train_loss, run(0.2, 1, 6).log[0].train_loss);
}

#[test]
fn best_epoch_is_the_first_maximum_of_the_selection_metric() {
    let out = run(0.2, 6, 2);
    let scores: Vec<f64> = out.log.iter().map(|e| e.validation.sentence_accuracy).collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    assert_eq!(out.best_epoch, best + 1);
    assert_eq!(out.best_score, scores[best]);
}

#[test]
fn training_loss_goes_down() {
    let out = run(0.2, 20, 1);
    let first = out.log[0].train_loss;
    let last = out.log.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn observer_can_stop_training() {
    let train_set = fixture(Split::Train);
    let vocab = Vocab::build(&train_set, true).unwrap();
    let model = small_model(&vocab, 0.0, 1);
    let cfg = TrainConfig {
        max_epochs: 10,
        ..Default::default()
    };
    let out = train(model, &vocab, &train_set, &train_set, &cfg, |e, _| {
        if e.epoch == 2 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert_eq!(out.log.len(), 2);
}

#[test]
fn non_finite_loss_names_the_utterance() {
    let train_set = fixture(Split::Train);
    let vocab = Vocab::build(&train_set, true).unwrap();
    let mut model = small_model(&vocab, 0.0, 1);
    model.heads.slot_b.data_mut()[0] = f64::NAN;
    let cfg = TrainConfig {
        max_epochs: 1,
        ..Default::default()
    };
    let err = train(model, &vocab, &train_set, &train_set, &cfg, |_, _| {
        ControlFlow::Continue(())
    })
    .unwrap_err();
    match err {
        TrainError::NonFinite { epoch, utterance } => {
            assert_eq!(epoch, 1);
            assert!(utterance < train_set.len());
            assert!(err.to_string().contains(&format!("utterance {utterance}")));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn invalid_settings_are_rejected() {
    let bad = [
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
        TrainConfig {
            clip_max_norm: 0.0,
            ..Default::default()
        },
        TrainConfig {
            loss: LossConfig { alpha: 1.5 },
            ..Default::default()
        },
        TrainConfig {
            adam: AdamConfig {
                lr: -1.0,
                ..Default::default()
            },
            ..Default::default()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(TrainError::Usage(_))));
    }
}

#[test]
fn epoch_log_line_has_five_tab_separated_fields() {
    let out = run(0.0, 1, 1);
    let line = out.log[0].line();
    let fields: Vec<&str> = line.split('\t').collect();
    assert_eq!(fields.len(), 5);
    assert_eq!(fields[0], "1");
    for f in &fields[1..] {
        assert_eq!(f.split('.').nth(1).map(str::len), Some(4), "{line}");
    }
}
