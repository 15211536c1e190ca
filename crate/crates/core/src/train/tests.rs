use super::*;
use crate::eval::{predict, score};
use crate::examples::compile_corpus;
use crate::fixtures::{generate, generate_pair_task, pair_task_vocabulary, PairTaskSpec, SyntheticData, SyntheticSpec};
use crate::model::{downstream_forward, ParamKind, TensorMut, TensorRef};
use crate::tokenizer::{build_vocab, Vocabulary};
use proptest::prelude::*;

/// Parameters made of one weight and one bias vector, for optimizer tests.
#[derive(Clone, Debug, PartialEq)]
struct Toy {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Parameters for Toy {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            TensorRef {
                name: "weight".into(),
                kind: ParamKind::Weight,
                shape: vec![self.weight.len()],
                data: &self.weight,
            },
            TensorRef {
                name: "bias".into(),
                kind: ParamKind::Bias,
                shape: vec![self.bias.len()],
                data: &self.bias,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            TensorMut {
                name: "weight".into(),
                kind: ParamKind::Weight,
                data: &mut self.weight,
            },
            TensorMut {
                name: "bias".into(),
                kind: ParamKind::Bias,
                data: &mut self.bias,
            },
        ]
    }
}

fn toy(w: f64, b: f64) -> Toy {
    Toy {
        weight: vec![w],
        bias: vec![b],
    }
}

#[test]
fn adamw_zero_gradient_without_decay_is_identity() {
    let mut p = Toy {
        weight: vec![0.3, -1.2],
        bias: vec![0.7],
    };
    let before = p.clone();
    let grads = Toy {
        weight: vec![0.0, 0.0],
        bias: vec![0.0],
    };
    let config = TrainConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut state = AdamState::new(&p);
    for _ in 0..5 {
        adamw_step(&mut p, &grads, &mut state, &config).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(state.step, 5);
}

#[test]
fn adamw_first_step_by_hand() {
    // t=1: m̂ = g, v̂ = g², so θ = 1 - 0.1 · 1/(1 + 1e-8).
    let mut p = toy(1.0, 1.0);
    let config = TrainConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut state = AdamState::new(&p);
    adamw_step(&mut p, &toy(1.0, 1.0), &mut state, &config).unwrap();
    let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    assert!((p.weight[0] - expected).abs() < 1e-15);
    assert!((p.weight[0] - 0.9).abs() < 1e-8);
}

#[test]
fn adamw_second_step_by_hand() {
    let (lr, b1, b2, eps): (f64, f64, f64, f64) = (0.01, 0.9, 0.999, 1e-8);
    let config = TrainConfig {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut p = toy(0.5, 0.0);
    let mut state = AdamState::new(&p);
    adamw_step(&mut p, &toy(2.0, 0.0), &mut state, &config).unwrap();
    adamw_step(&mut p, &toy(-1.0, 0.0), &mut state, &config).unwrap();
    let m1 = (1.0 - b1) * 2.0;
    let v1 = (1.0 - b2) * 4.0;
    let x1 = 0.5 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
    let m2 = b1 * m1 + (1.0 - b1) * -1.0;
    let v2 = b2 * v1 + (1.0 - b2) * 1.0;
    let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
    assert!((p.weight[0] - x2).abs() < 1e-15, "{} vs {x2}", p.weight[0]);
}

#[test]
fn weight_decay_skips_biases() {
    let mut p = toy(1.0, 1.0);
    let config = TrainConfig {
        lr: 0.1,
        weight_decay: 0.5,
        ..Default::default()
    };
    let mut state = AdamState::new(&p);
    adamw_step(&mut p, &toy(0.0, 0.0), &mut state, &config).unwrap();
    assert!((p.weight[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    assert_eq!(p.bias[0], 1.0);
}

#[test]
fn non_finite_gradient_is_rejected() {
    let mut p = toy(1.0, 1.0);
    let mut state = AdamState::new(&p);
    let err = adamw_step(&mut p, &toy(1.0, f64::NAN), &mut state, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteGradient { tensor } if tensor == "bias"));
    assert_eq!(p, toy(1.0, 1.0));
    assert_eq!(state.step, 0);
}

#[test]
fn adamw_trajectories_are_reproducible() {
    let run = || {
        let mut p = Toy {
            weight: vec![0.4, -0.3],
            bias: vec![0.2],
        };
        let mut state = AdamState::new(&p);
        let mut trace = Vec::new();
        for t in 0..50 {
            let g = Toy {
                weight: vec![(t as f64).sin() + p.weight[0], p.weight[1] * 3.0],
                bias: vec![p.bias[0] - 0.1],
            };
            adamw_step(&mut p, &g, &mut state, &TrainConfig::default()).unwrap();
            trace.push(p.clone());
        }
        trace
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.weight[0].to_bits(), y.weight[0].to_bits());
        assert_eq!(x.weight[1].to_bits(), y.weight[1].to_bits());
        assert_eq!(x.bias[0].to_bits(), y.bias[0].to_bits());
    }
}

proptest! {
    #[test]
    fn adamw_descends_a_quadratic(
        start in prop::sample::select(vec![-1.0, 1.0]).prop_flat_map(|s| (1.0f64..10.0).prop_map(move |x| s * x)),
        curvature in 0.1f64..10.0,
        lr in 1e-3f64..5e-2,
    ) {
        // f(θ) = curvature·θ²/2. While |θ| stays well above the step size
        // the gradient keeps its sign, so |θ| must shrink every step.
        let config = TrainConfig { lr, weight_decay: 0.0, ..Default::default() };
        let mut p = toy(start, 0.0);
        let mut state = AdamState::new(&p);
        let mut prev = start.abs();
        for _ in 0..2000 {
            if prev <= 10.0 * lr {
                break;
            }
            let g = toy(curvature * p.weight[0], 0.0);
            adamw_step(&mut p, &g, &mut state, &config).unwrap();
            let now = p.weight[0].abs();
            prop_assert!(now < prev, "|θ| rose from {prev} to {now}");
            prev = now;
        }
        prop_assert!(prev <= 10.0 * lr || prev < start.abs());
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
        TrainConfig {
            lr: 0.0,
            ..Default::default()
        },
        TrainConfig {
            beta2: 1.0,
            ..Default::default()
        },
        TrainConfig {
            jobs: 0,
            ..Default::default()
        },
        TrainConfig {
            mask_prob: 1.5,
            ..Default::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))), "{bad:?}");
    }
}

#[test]
fn config_json_uses_field_names() {
    let text = r#"{"batch_size": 8, "lr": 0.001, "mode": "lmgc_m", "epochs": 2}"#;
    let c: TrainConfig = serde_json::from_str(text).unwrap();
    assert_eq!(c.batch_size, 8);
    assert_eq!(c.mode, TrainMode::LmgcM);
    assert_eq!(c.weight_decay, 0.01);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
}

struct Setup {
    vocab: Vocabulary,
    train: Vec<CandidateGroup>,
    val: Vec<CandidateGroup>,
    test: SyntheticData,
    model: LmgcModel,
}

fn synthetic_spec(name: &str, n: usize) -> SyntheticSpec {
    SyntheticSpec {
        name: name.into(),
        n_sentences: n,
        n_lemmas: 8,
        vocab_size: 20,
        context_len: 3,
        gloss_len: 2,
        ..Default::default()
    }
}

fn setup(n_train: usize, n_val: usize) -> Setup {
    let tr = generate(&synthetic_spec("train", n_train)).unwrap();
    let va = generate(&synthetic_spec("val", n_val)).unwrap();
    let test = generate(&synthetic_spec("test", 200)).unwrap();
    let vocab = build_vocab(&[&tr.corpus, &va.corpus, &test.corpus], &tr.lexicon, 1, None);
    let bc = BuilderConfig::default();
    let train = compile_corpus(&tr.corpus, &tr.lexicon, &tr.gold, &vocab, &bc).unwrap().groups;
    let val = compile_corpus(&va.corpus, &va.lexicon, &va.gold, &vocab, &bc).unwrap().groups;
    let mut mc = ModelConfig::desk(vocab.len());
    mc.hidden = 16;
    mc.ffn = 32;
    mc.dropout = 0.1;
    let model = LmgcModel::init(&mc).unwrap();
    Setup {
        vocab,
        train,
        val,
        test,
        model,
    }
}

fn desk_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr: 3e-3,
        epochs,
        ..Default::default()
    }
}

fn test_f1(s: &Setup, model: &LmgcModel) -> f64 {
    let preds = predict(model, &s.test.corpus, &s.test.lexicon, &s.vocab, &BuilderConfig::default()).unwrap();
    score(&preds.predictions, &s.test.gold, &s.test.corpus).unwrap().overall.f1
}

#[test]
fn zero_epochs_reports_initial_validation_only() {
    let s = setup(40, 20);
    let config = desk_config(0);
    let out = train_lmgc(s.model.clone(), &s.train, &s.val, &config, None).unwrap();
    assert_eq!(out.report.epochs.len(), 1);
    assert_eq!(out.report.epochs[0].epoch, 0);
    assert!(out.report.epochs[0].train.is_none());
    assert!(out.report.steps.is_empty());
    assert_eq!(out.report.selected_epoch, 0);
    assert_eq!(out.best, s.model);
}

#[test]
fn empty_sets_are_rejected() {
    let s = setup(20, 10);
    let config = desk_config(1);
    let err = train_lmgc(s.model.clone(), &[], &s.val, &config, None).unwrap_err();
    assert!(matches!(err, TrainError::EmptyDataset("training")));
    let err = pretrain_lmgc_m(s.model.clone(), &s.train, &[], &config, None).unwrap_err();
    assert!(matches!(err, TrainError::EmptyDataset("validation")));
    let bad = TrainConfig {
        mode: TrainMode::Downstream,
        ..config
    };
    assert!(matches!(
        train_lmgc(s.model, &s.train, &s.val, &bad, None),
        Err(TrainError::InvalidConfig(_))
    ));
}

#[test]
fn validation_loss_decreases_on_synthetic_corpus() {
    let s = setup(3000, 100);
    let before = test_f1(&s, &s.model);
    let out = train_lmgc(s.model.clone(), &s.train, &s.val, &desk_config(3), None).unwrap();
    let losses = out.report.validation_losses();
    assert_eq!(losses.len(), 4);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "validation losses {losses:?}");
    }
    assert_eq!(out.report.selected_epoch, 3);
    let after = test_f1(&s, &out.best);
    assert!(after > before, "F1 {before} -> {after}");
}

#[test]
fn selected_epoch_minimizes_validation_loss() {
    let s = setup(60, 30);
    let config = TrainConfig {
        lr: 0.05,
        ..desk_config(4)
    };
    let out = train_lmgc(s.model, &s.train, &s.val, &config, None).unwrap();
    let losses = out.report.validation_losses();
    let sel = losses[out.report.selected_epoch];
    assert!(losses.iter().all(|&l| sel <= l), "{losses:?}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let s = setup(60, 20);
    for jobs in [1, 3] {
        let config = TrainConfig { jobs, ..desk_config(2) };
        let a = train_lmgc(s.model.clone(), &s.train, &s.val, &config, None).unwrap();
        let b = train_lmgc(s.model.clone(), &s.train, &s.val, &config, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        assert_eq!(a.best, b.best);
    }
    let other = TrainConfig {
        seed: 1,
        ..desk_config(2)
    };
    let a = train_lmgc(s.model.clone(), &s.train, &s.val, &desk_config(2), None).unwrap();
    let c = train_lmgc(s.model, &s.train, &s.val, &other, None).unwrap();
    assert_ne!(a.report.steps, c.report.steps);
}

#[test]
fn run_directory_layout() {
    let s = setup(30, 10);
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = train_lmgc(s.model, &s.train, &s.val, &desk_config(2), Some(&run)).unwrap();
    for name in ["config.json", "metrics.jsonl", "epoch_1.ckpt", "epoch_2.ckpt", "best.ckpt", "report.json"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<EpochMetrics> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, out.report.epochs);
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["train"]["batch_size"], 8);
    let best = crate::model::checkpoint::load_checkpoint(&run.join("best.ckpt")).unwrap();
    assert_eq!(best.into_lmgc().unwrap(), out.best);
}

#[test]
fn binary_mode_trains_on_pairs() {
    let s = setup(200, 50);
    let config = TrainConfig {
        mode: TrainMode::LmgcBinary,
        batch_size: 16,
        ..desk_config(3)
    };
    let out = train_lmgc(s.model, &s.train, &s.val, &config, None).unwrap();
    let pairs: usize = s.train.iter().map(|g| g.pairs.len()).sum();
    assert_eq!(out.report.steps.len(), 3 * pairs.div_ceil(16));
    assert_eq!(out.report.mode, TrainMode::LmgcBinary);
    let losses = out.report.validation_losses();
    assert!(losses[3] < losses[0], "{losses:?}");
}

#[test]
fn lmgc_m_without_masks_matches_multichoice() {
    let s = setup(60, 20);
    let config = TrainConfig {
        mask_prob: 0.0,
        ..desk_config(2)
    };
    let m = pretrain_lmgc_m(s.model.clone(), &s.train, &s.val, &config, None).unwrap();
    let c = train_lmgc(s.model, &s.train, &s.val, &config, None).unwrap();
    assert_eq!(m.report.mode, TrainMode::LmgcM);
    assert!(m.report.steps.iter().all(|st| st.loss.mlm == 0.0));
    assert_eq!(m.report.steps, c.report.steps);
    assert_eq!(m.report.epochs, c.report.epochs);
    assert_eq!(m.best, c.best);
}

#[test]
fn lmgc_m_components_decrease_and_resum() {
    let s = setup(3000, 100);
    let out = pretrain_lmgc_m(s.model, &s.train, &s.val, &desk_config(3), None).unwrap();
    for st in &out.report.steps {
        assert!(st.loss.mlm > 0.0);
        assert!((st.loss.gloss + st.loss.mlm - st.loss.total).abs() < 1e-9);
    }
    let first = &out.report.epochs[0].validation;
    let last = &out.report.epochs[3].validation;
    assert!(last.gloss < first.gloss, "{first:?} -> {last:?}");
    assert!(last.mlm < first.mlm, "{first:?} -> {last:?}");
    for e in &out.report.epochs {
        assert!((e.validation.gloss + e.validation.mlm - e.validation.total).abs() < 1e-9);
    }
}

#[test]
fn finetune_without_masks_cases() {
    let s = setup(300, 60);
    let config = desk_config(2);
    let pre = pretrain_lmgc_m(s.model.clone(), &s.train, &s.val, &config, None).unwrap();
    let expected = pre.best.encoder.config.clone();

    let zero = finetune_without_masks(pre.best.clone().into(), &expected, &s.train, &s.val, &desk_config(0), None)
        .unwrap();
    assert_eq!(zero.best, pre.best);

    let tuned = finetune_without_masks(pre.best.clone().into(), &expected, &s.train, &s.val, &config, None).unwrap();
    assert_eq!(tuned.report.mode, TrainMode::LmgcMultichoice);
    assert!(tuned.report.steps.iter().all(|st| st.loss.mlm == 0.0));
    assert!(test_f1(&s, &tuned.best) >= test_f1(&s, &pre.best));

    let wider = ModelConfig {
        hidden: 32,
        ..expected.clone()
    };
    let err = finetune_without_masks(pre.best.clone().into(), &wider, &s.train, &s.val, &config, None).unwrap_err();
    assert!(matches!(err, TrainError::CheckpointIncompatible(_)));

    let downstream = DownstreamModel::from_encoder(pre.best.encoder, HeadSpec::Classification { classes: 3 }).unwrap();
    let err = finetune_without_masks(downstream.into(), &expected, &s.train, &s.val, &config, None).unwrap_err();
    assert!(matches!(err, TrainError::CheckpointIncompatible(_)));
}

fn pair_task() -> (Vocabulary, Vec<LabeledSequence>, Vec<LabeledSequence>) {
    let spec = PairTaskSpec {
        n_items: 2200,
        sentence_len: 2,
        vocab_size: 20,
        ..Default::default()
    };
    let vocab = pair_task_vocabulary(&spec);
    let mut items = generate_pair_task(&spec, &vocab).unwrap();
    let val = items.split_off(2000);
    (vocab, items, val)
}

fn small_encoder(vocab: usize) -> EncoderParams {
    let mut mc = ModelConfig::desk(vocab);
    mc.hidden = 16;
    mc.ffn = 32;
    mc.dropout = 0.1;
    EncoderParams::init(&mc).unwrap()
}

#[test]
fn downstream_classification_learns_keyword_sharing() {
    let (vocab, train, val) = pair_task();
    let config = TrainConfig {
        batch_size: 16,
        lr: 1e-3,
        epochs: 10,
        ..Default::default()
    };
    let spec = HeadSpec::Classification { classes: 2 };
    let out = finetune_downstream(small_encoder(vocab.len()), spec, &train, &val, &config, None).unwrap();
    assert_eq!(out.report.mode, TrainMode::Downstream);
    let correct = val
        .iter()
        .filter(|item| {
            let logits = downstream_forward(&out.best, &item.sequence, &mut Mode::Eval).unwrap();
            let predicted = usize::from(logits[1] > logits[0]);
            item.target == Target::Class(predicted)
        })
        .count();
    let accuracy = correct as f64 / val.len() as f64;
    assert!(accuracy > 0.9, "accuracy {accuracy}");
}

#[test]
fn downstream_regression_fits_zero_targets() {
    let (vocab, train, val) = pair_task();
    let zero = |items: &[LabeledSequence]| -> Vec<LabeledSequence> {
        items
            .iter()
            .take(200)
            .map(|i| LabeledSequence {
                sequence: i.sequence.clone(),
                target: Target::Value(0.0),
            })
            .collect()
    };
    let config = TrainConfig {
        batch_size: 16,
        lr: 3e-3,
        epochs: 3,
        ..Default::default()
    };
    let out =
        finetune_downstream(small_encoder(vocab.len()), HeadSpec::Regression, &zero(&train), &zero(&val), &config, None)
            .unwrap();
    let last = out.report.epochs.last().unwrap().validation.total;
    assert!(last < 1e-3, "{last}");
}

#[test]
fn downstream_rejects_bad_labels() {
    let (vocab, train, val) = pair_task();
    let config = desk_config(1);
    let err = finetune_downstream(
        small_encoder(vocab.len()),
        HeadSpec::Classification { classes: 2 },
        &train,
        &[LabeledSequence {
            sequence: val[0].sequence.clone(),
            target: Target::Class(2),
        }],
        &config,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::LabelOutOfRange { label: 2, classes: 2 }));
    let err = finetune_downstream(small_encoder(vocab.len()), HeadSpec::Regression, &train, &val, &config, None)
        .unwrap_err();
    assert!(matches!(err, TrainError::InvalidConfig(_)));
}

#[test]
fn downstream_head_size() {
    let encoder = small_encoder(30);
    let h = encoder.config.hidden;
    let base = encoder.param_count();
    for k in [2, 3, 5] {
        let m = DownstreamModel::from_encoder(encoder.clone(), HeadSpec::Classification { classes: k }).unwrap();
        assert_eq!(m.param_count() - base, k * h + k);
    }
    let m = DownstreamModel::from_encoder(encoder, HeadSpec::Regression).unwrap();
    assert_eq!(m.param_count() - base, h + 1);
}
