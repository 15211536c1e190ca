//! Criteria on the synthetic fixture, where the gold gloss shares a marker
//! token with its sentence.

use gloss_wsd::corpus::{GoldKeys, WsdCorpus};
use gloss_wsd::eval::{predict, predict_sequential, score};
use gloss_wsd::examples::{compile_corpus, BuilderConfig, CandidateGroup};
use gloss_wsd::fixtures::{generate, SyntheticData, SyntheticSpec};
use gloss_wsd::lexicon::GlossLexicon;
use gloss_wsd::model::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use gloss_wsd::model::{LmgcModel, ModelConfig};
use gloss_wsd::tokenizer::{build_vocab, Vocabulary};
use gloss_wsd::train::{finetune_without_masks, pretrain_lmgc_m, train_lmgc, TrainConfig, TrainMode};

use crate::{timed, Outcome};

fn fixture(name: &str, n_sentences: usize) -> Result<SyntheticData, String> {
    generate(&SyntheticSpec {
        name: name.into(),
        n_sentences,
        senses_per_lemma: 4,
        signal_strength: 1.0,
        seed: 0,
        ..Default::default()
    })
    .map_err(|e| e.to_string())
}

fn groups(data: &SyntheticData, vocab: &Vocabulary) -> Result<Vec<CandidateGroup>, String> {
    let compiled =
        compile_corpus(&data.corpus, &data.lexicon, &data.gold, vocab, &BuilderConfig::default()).map_err(|e| e.to_string())?;
    if !compiled.skipped.is_empty() {
        return Err(format!("{} instances skipped", compiled.skipped.len()));
    }
    Ok(compiled.groups)
}

fn test_f1(
    model: &LmgcModel,
    corpus: &WsdCorpus,
    gold: &GoldKeys,
    lexicon: &GlossLexicon,
    vocab: &Vocabulary,
) -> Result<f64, String> {
    let preds = predict(model, corpus, lexicon, vocab, &BuilderConfig::default()).map_err(|e| e.to_string())?;
    let s = score(&preds.predictions, gold, corpus).map_err(|e| e.to_string())?;
    Ok(s.overall.f1)
}

pub fn parallel_sequential() -> Outcome {
    timed(600, || {
        let data = fixture("parallel", 5000)?;
        let vocab = build_vocab(&[&data.corpus], &data.lexicon, 1, None);
        let mut compared = 0;
        for seed in 1..=3 {
            let config = ModelConfig {
                seed,
                ..ModelConfig::desk(vocab.len())
            };
            let model = LmgcModel::init(&config).map_err(|e| e.to_string())?;
            let mut bytes = Vec::new();
            write_checkpoint(&Checkpoint::from(model), &mut bytes).map_err(|e| e.to_string())?;
            let model = read_checkpoint(bytes.as_slice())
                .map_err(|e| e.to_string())?
                .into_lmgc()
                .ok_or("checkpoint lost its gloss head")?;
            let config = BuilderConfig::default();
            let stacked = predict(&model, &data.corpus, &data.lexicon, &vocab, &config).map_err(|e| e.to_string())?;
            let sequential =
                predict_sequential(&model, &data.corpus, &data.lexicon, &vocab, &config).map_err(|e| e.to_string())?;
            if stacked.predictions.len() != 5000 || !stacked.skipped.is_empty() {
                return Err(format!("seed {seed}: {} predictions", stacked.predictions.len()));
            }
            let differing = stacked
                .predictions
                .iter()
                .zip(&sequential.predictions)
                .filter(|(a, b)| a != b)
                .count();
            if differing > 0 || stacked.predictions.len() != sequential.predictions.len() {
                return Ok(Outcome::fail(format!("seed {seed}: {differing} of 5000 instances differ")));
            }
            compared += stacked.predictions.len();
        }
        Ok(Outcome::new(true, format!("{compared} predictions identical over 3 random checkpoints")))
    })
}

/// Strictly decreasing sequence.
fn decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0])
}

pub fn learning() -> Outcome {
    timed(600, || {
        let train = fixture("train", 5000)?;
        let val = fixture("val", 500)?;
        let test = fixture("test", 1000)?;
        let vocab = build_vocab(&[&train.corpus, &val.corpus, &test.corpus], &train.lexicon, 1, None);
        let (train_groups, val_groups) = (groups(&train, &vocab)?, groups(&val, &vocab)?);
        // 2 layers, H=32, dropout 0.2; batch 32, lr 2e-5, 3 epochs
        let model_config = ModelConfig::desk(vocab.len());
        let config = TrainConfig::default();
        let err = |e: gloss_wsd::train::TrainError| e.to_string();
        let f1 = |m: &LmgcModel| test_f1(m, &test.corpus, &test.gold, &test.lexicon, &vocab);

        let init = LmgcModel::init(&model_config).map_err(|e| e.to_string())?;
        let lmgc = train_lmgc(init.clone(), &train_groups, &val_groups, &config, None).map_err(err)?;
        let lmgc_f1 = f1(&lmgc.best)?;

        let masked = TrainConfig {
            mode: TrainMode::LmgcM,
            ..config.clone()
        };
        let pre = pretrain_lmgc_m(init, &train_groups, &val_groups, &masked, None).map_err(err)?;
        let mlm: Vec<f64> = pre.report.epochs.iter().map(|e| e.validation.mlm).collect();
        let tuned = finetune_without_masks(
            Checkpoint::from(pre.best),
            &model_config,
            &train_groups,
            &val_groups,
            &config,
            None,
        )
        .map_err(err)?;
        let m_f1 = f1(&tuned.best)?;

        let passed = lmgc_f1 >= 0.95 && m_f1 >= lmgc_f1 - 0.02 && decreasing(&mlm);
        let mlm_text: Vec<String> = mlm.iter().map(|x| format!("{x:.4}")).collect();
        Ok(Outcome::new(
            passed,
            format!(
                "LMGC test F1 {lmgc_f1:.3} (need >= 0.95, chance 0.25); LMGC-M + fine-tune F1 {m_f1:.3} (need >= {:.3}); \
                 validation MLM by epoch [{}] (need strictly decreasing)",
                lmgc_f1 - 0.02,
                mlm_text.join(", ")
            ),
        ))
    })
}
