use super::checkpoint::*;
use super::*;
use crate::tokenizer::{TokenSequence, AGG, PAD, SEP};
use ndarray::Array1;
use rand::{Rng, SeedableRng};

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 24,
        vocab_size: vocab,
        max_positions: 32,
        segments: 2,
        dropout: 0.2,
        seed: 11,
    }
}

fn seq(ids: &[u32]) -> TokenSequence {
    let sep = ids.iter().position(|&i| i == SEP).unwrap_or(ids.len());
    TokenSequence {
        ids: ids.to_vec(),
        segment_ids: (0..ids.len()).map(|i| u8::from(i > sep)).collect(),
    }
}

fn random_seq(rng: &mut ChaCha8Rng, vocab: u32) -> TokenSequence {
    let n = rng.random_range(3..12);
    let mut ids = vec![AGG];
    ids.extend((0..n).map(|_| rng.random_range(7..vocab)));
    ids.push(SEP);
    seq(&ids)
}

#[test]
fn init_is_deterministic() {
    let a = LmgcModel::init(&tiny(40)).unwrap();
    let b = LmgcModel::init(&tiny(40)).unwrap();
    assert_eq!(a, b);
    let c = LmgcModel::init(&ModelConfig { seed: 12, ..tiny(40) }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn init_scales() {
    let m = LmgcModel::init(&ModelConfig::desk(500)).unwrap();
    let e = &m.encoder.token_embedding;
    let mean = e.mean().unwrap();
    let std = e.std(0.0);
    assert!(mean.abs() < 2e-3, "{mean}");
    assert!((std - 0.02).abs() < 1e-3, "{std}");
    assert!(m.encoder.layers[0].ln1_gamma.iter().all(|&g| g == 1.0));
    assert!(m.encoder.layers[1].b1.iter().all(|&b| b == 0.0));
}

#[test]
fn gloss_head_adds_two_h_plus_two() {
    let cfg = ModelConfig::desk(100);
    let m = LmgcModel::init(&cfg).unwrap();
    assert_eq!(m.head.param_count(), 66);
    assert_eq!(m.param_count() - m.encoder.param_count(), 2 * cfg.hidden + 2);
}

#[test]
fn downstream_head_size() {
    let cfg = ModelConfig::desk(100);
    let enc = EncoderParams::init(&cfg).unwrap();
    for k in [2, 3, 7] {
        let m = DownstreamModel::from_encoder(enc.clone(), HeadSpec::Classification { classes: k }).unwrap();
        assert_eq!(m.head.param_count(), k * cfg.hidden + k);
    }
    let r = DownstreamModel::from_encoder(enc.clone(), HeadSpec::Regression).unwrap();
    assert_eq!(r.head.param_count(), cfg.hidden + 1);
    assert!(DownstreamModel::from_encoder(enc, HeadSpec::Classification { classes: 1 }).is_err());
}

#[test]
fn invalid_configs() {
    assert!(matches!(
        EncoderParams::init(&ModelConfig { heads: 3, ..tiny(20) }),
        Err(ModelError::InvalidConfig(_))
    ));
    assert!(EncoderParams::init(&ModelConfig { dropout: 1.0, ..tiny(20) }).is_err());
    assert!(EncoderParams::init(&ModelConfig { vocab_size: 3, ..tiny(20) }).is_err());
}

#[test]
fn forward_shape_and_errors() {
    let m = LmgcModel::init(&tiny(30)).unwrap();
    let s = seq(&[AGG, 8, 9, SEP, 10, SEP]);
    let out = m.encoder.forward(&s, &mut Mode::Eval).unwrap();
    assert_eq!(out.hidden.dim(), (6, 16));
    assert_eq!(out.aggregate(), out.hidden.row(0));
    assert!(out.hidden.iter().all(|x| x.is_finite()));

    let long = seq(&vec![8; 33]);
    assert!(matches!(
        m.encoder.forward(&long, &mut Mode::Eval),
        Err(ModelError::SequenceTooLong { len: 33, max: 32 })
    ));
    assert!(matches!(
        m.encoder.forward(&seq(&[AGG, 30]), &mut Mode::Eval),
        Err(ModelError::TokenOutOfRange { id: 30, .. })
    ));
}

#[test]
fn eval_is_deterministic_and_train_is_seeded() {
    let m = LmgcModel::init(&tiny(30)).unwrap();
    let s = seq(&[AGG, 8, 9, SEP, 10, SEP]);
    let a = m.encoder.forward(&s, &mut Mode::Eval).unwrap().hidden;
    let b = m.encoder.forward(&s, &mut Mode::Eval).unwrap().hidden;
    assert_eq!(a, b);
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(1);
    let t1 = m.encoder.forward(&s, &mut Mode::Train(&mut r1)).unwrap().hidden;
    let t2 = m.encoder.forward(&s, &mut Mode::Train(&mut r2)).unwrap().hidden;
    assert_eq!(t1, t2);
    assert_ne!(t1, a);
}

#[test]
fn pad_positions_are_masked() {
    let m = LmgcModel::init(&tiny(30)).unwrap();
    let only = m.encoder.forward(&seq(&[AGG]), &mut Mode::Eval).unwrap();
    let padded = m.encoder.forward(&seq(&[AGG, PAD, PAD, PAD]), &mut Mode::Eval).unwrap();
    for (a, b) in only.aggregate().iter().zip(padded.aggregate()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn permuting_pads_changes_nothing() {
    let m = LmgcModel::init(&tiny(30)).unwrap();
    // two PADs with different segment ids swap places
    let a = TokenSequence {
        ids: vec![AGG, 8, SEP, PAD, PAD],
        segment_ids: vec![0, 0, 0, 0, 1],
    };
    let b = TokenSequence {
        ids: vec![AGG, 8, SEP, PAD, PAD],
        segment_ids: vec![0, 0, 0, 1, 0],
    };
    let ha = m.encoder.forward(&a, &mut Mode::Eval).unwrap().hidden;
    let hb = m.encoder.forward(&b, &mut Mode::Eval).unwrap().hidden;
    for i in 0..3 {
        for (x, y) in ha.row(i).iter().zip(hb.row(i)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn candidate_scoring() {
    let m = LmgcModel::init(&tiny(30)).unwrap();
    let s = seq(&[AGG, 8, 9, SEP, 10, SEP]);
    let one = score_candidates(&m, &[&s], &mut Mode::Eval).unwrap();
    assert_eq!(one.probabilities, vec![1.0]);
    let three = score_candidates(&m, &[&s, &s, &s], &mut Mode::Eval).unwrap();
    for p in &three.probabilities {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(score_candidates(&m, &[], &mut Mode::Eval).is_err());
}

#[test]
fn softmax_argmax_matches_score_argmax() {
    let m = LmgcModel::init(&tiny(40)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let argmax = |v: &[f64]| {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        best
    };
    for _ in 0..1000 {
        let k = rng.random_range(1..6);
        let seqs: Vec<TokenSequence> = (0..k).map(|_| random_seq(&mut rng, 40)).collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let c = score_candidates(&m, &refs, &mut Mode::Eval).unwrap();
        let total: f64 = c.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        let direct: Vec<f64> = seqs
            .iter()
            .map(|s| m.head.score(m.encoder.forward(s, &mut Mode::Eval).unwrap().aggregate()))
            .collect();
        assert_eq!(argmax(&c.probabilities), argmax(&direct));
    }
}

#[test]
fn mlm_logits_contract() {
    let mut m = LmgcModel::init(&tiny(30)).unwrap();
    m.encoder.mlm_bias = Array1::from_shape_fn(30, |i| i as f64 * 0.1);
    let zero = Array2::zeros((4, 16));
    let l = mlm_logits(&m.encoder, &zero, &[0, 3]).unwrap();
    assert_eq!(l.dim(), (2, 30));
    for row in l.rows() {
        assert_eq!(row, m.encoder.mlm_bias);
    }
    assert!(matches!(
        mlm_logits(&m.encoder, &zero, &[4]),
        Err(ModelError::PositionOutOfRange { position: 4, len: 4 })
    ));
    let h = m.encoder.forward(&seq(&[AGG, 8, 9, SEP]), &mut Mode::Eval).unwrap().hidden;
    let l = mlm_logits(&m.encoder, &h, &[1, 2]).unwrap();
    for row in l.rows() {
        let p = softmax(row.as_slice().unwrap());
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn downstream_outputs() {
    let enc = EncoderParams::init(&tiny(30)).unwrap();
    let mut m = DownstreamModel::from_encoder(enc.clone(), HeadSpec::Classification { classes: 2 }).unwrap();
    m.head.bias = Array1::from_vec(vec![0.5, -0.25]);
    assert_eq!(m.head.forward(Array1::zeros(16).view()).unwrap(), vec![0.5, -0.25]);
    assert!(matches!(
        m.head.forward(Array1::zeros(15).view()),
        Err(ModelError::DimensionMismatch { expected: 16, found: 15 })
    ));
    let s = seq(&[AGG, 8, SEP, 9, SEP]);
    assert_eq!(downstream_forward(&m, &s, &mut Mode::Eval).unwrap().len(), 2);
    let r = DownstreamModel::from_encoder(enc, HeadSpec::Regression).unwrap();
    let out = downstream_forward(&r, &s, &mut Mode::Eval).unwrap();
    assert_eq!(out.len(), 1);
    assert!(out[0].is_finite());
}

#[test]
fn checkpoint_round_trip() {
    let m = LmgcModel::init(&tiny(30)).unwrap();
    let ckpt = Checkpoint::from(m.clone());
    let mut buf = Vec::new();
    write_checkpoint(&ckpt, &mut buf).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.into_lmgc().unwrap(), m);

    let d = DownstreamModel::from_encoder(m.encoder.clone(), HeadSpec::Classification { classes: 3 }).unwrap();
    let mut buf2 = Vec::new();
    write_checkpoint(&Checkpoint::from(d.clone()), &mut buf2).unwrap();
    assert_eq!(read_checkpoint(buf2.as_slice()).unwrap().into_downstream().unwrap(), d);
}

#[test]
fn checkpoint_errors() {
    let m = LmgcModel::init(&tiny(30)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&Checkpoint::from(m), &path).unwrap();
    assert!(matches!(
        load_checkpoint_for(&path, &ModelConfig { hidden: 32, ..tiny(30) }),
        Err(CheckpointError::ShapeMismatch { .. })
    ));
    assert!(load_checkpoint_for(&path, &tiny(30)).is_ok());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(matches!(
        read_checkpoint(bytes.as_slice()),
        Err(CheckpointError::VersionMismatch { .. })
    ));
    bytes[0] = b'G';
    bytes[8] = 9;
    assert!(matches!(
        read_checkpoint(bytes.as_slice()),
        Err(CheckpointError::VersionMismatch { .. })
    ));
    bytes[8] = 1;
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(read_checkpoint(bytes.as_slice()), Err(CheckpointError::Format(_))));
}
