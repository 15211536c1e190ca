//! AdamW and the training regimes: LMGC (binary or multi-choice), LMGC-M
//! joint pre-training, mask-free fine-tuning, and downstream fine-tuning.
//!
//! Every random draw comes from a stream derived from the run seed: batch
//! order from `(seed, epoch)`, dropout from `(seed, epoch, item)`, masks from
//! `(seed, epoch)`. A fixed `jobs` value therefore reproduces a run bit for
//! bit.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::examples::{apply_masking, BuilderConfig, CandidateGroup, MaskSplit, MaskedPosition};
use crate::model::checkpoint::{check_shapes, save_checkpoint, Checkpoint, CheckpointError};
use crate::model::{
    DownstreamModel, EncoderParams, HeadSpec, LmgcModel, Mode, ModelConfig, ModelError, Parameters,
};
use crate::objectives::{
    binary_pair_loss, downstream_loss, lmgc_group_loss, FocalParams, LossValue, ObjectiveError, Target,
};
use crate::seed;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty {0} set")]
    EmptyDataset(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    LmgcBinary,
    LmgcMultichoice,
    LmgcM,
    Downstream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Candidate groups per step (multi-choice, LMGC-M), pairs per step
    /// (binary), or labelled sequences per step (downstream).
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub validation_split: String,
    pub jobs: usize,
    pub focal: FocalParams,
    pub mask_prob: f64,
    pub mask_split: MaskSplit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 3,
            mode: TrainMode::LmgcMultichoice,
            seed: 0,
            validation_split: "semeval2007".into(),
            jobs: 1,
            focal: FocalParams::default(),
            mask_prob: 0.15,
            mask_split: MaskSplit::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.jobs == 0 {
            return fail("batch_size and jobs must be positive");
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return fail("lr and eps must be positive, weight_decay non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("betas must lie in [0, 1)");
        }
        BuilderConfig {
            mask_prob: self.mask_prob,
            mask_split: self.mask_split,
            ..BuilderConfig::default()
        }
        .validate()
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }
}

/// Adam moments for every parameter tensor, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay
/// (skipped for biases and layer-norm parameters).
pub fn adamw_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let grads = grads.tensors();
    if let Some(t) = grads.iter().find(|t| t.data.iter().any(|g| !g.is_finite())) {
        return Err(TrainError::NonFiniteGradient { tensor: t.name.clone() });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(&grads).zip(&mut state.m).zip(&mut state.v) {
        let wd = if p.kind.decays() { config.weight_decay } else { 0.0 };
        for (((x, &gi), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= config.lr * (m_hat / (v_hat.sqrt() + config.eps) + wd * *x);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch; absent for the initial evaluation.
    pub train: Option<LossValue>,
    pub validation: LossValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    /// Epoch 0 is the evaluation before any update.
    pub epochs: Vec<EpochMetrics>,
    pub selected_epoch: usize,
    pub steps: Vec<StepMetrics>,
    /// Not serialized, so reports of identical runs compare byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn validation_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.validation.total).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub report: TrainReport,
    /// Parameters at the selected epoch.
    pub best: M,
}

/// A training problem: per-item losses over a training and a validation set.
trait Task: Sync {
    type M: Parameters + Clone + Send + Sync;

    fn train_len(&self) -> usize;
    fn val_len(&self) -> usize;
    fn train_loss(
        &self,
        model: &Self::M,
        index: usize,
        epoch: usize,
        mode: &mut Mode<'_>,
        grads: &mut Self::M,
    ) -> Result<LossValue, TrainError>;
    fn val_loss(&self, model: &Self::M, index: usize) -> Result<LossValue, TrainError>;
}

fn add_loss(a: LossValue, b: LossValue) -> LossValue {
    LossValue {
        total: a.total + b.total,
        gloss: a.gloss + b.gloss,
        mlm: a.mlm + b.mlm,
    }
}

fn mean_loss(sum: LossValue, n: usize) -> LossValue {
    let n = n as f64;
    LossValue {
        total: sum.total / n,
        gloss: sum.gloss / n,
        mlm: sum.mlm / n,
    }
}

fn with_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    if jobs <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

fn validation<T: Task>(task: &T, model: &T::M) -> Result<LossValue, TrainError> {
    let losses: Vec<LossValue> = (0..task.val_len())
        .into_par_iter()
        .map(|i| task.val_loss(model, i))
        .collect::<Result<_, _>>()?;
    let sum = losses.into_iter().fold(LossValue::default(), add_loss);
    Ok(mean_loss(sum, task.val_len()))
}

struct RunDir<'a> {
    dir: Option<&'a Path>,
}

impl RunDir<'_> {
    fn io<T>(&self, path: &Path, r: io::Result<T>) -> Result<T, TrainError> {
        r.map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    fn start(&self, config: &TrainConfig, model: &ModelConfig) -> Result<(), TrainError> {
        let Some(dir) = self.dir else { return Ok(()) };
        self.io(dir, fs::create_dir_all(dir))?;
        let path = dir.join("config.json");
        let snapshot = serde_json::json!({ "train": config, "model": model });
        let text = serde_json::to_string_pretty(&snapshot).expect("config serializes");
        self.io(&path, fs::write(&path, text + "\n"))?;
        let metrics = dir.join("metrics.jsonl");
        self.io(&metrics, File::create(&metrics).map(drop))
    }

    fn epoch(&self, metrics: &EpochMetrics, ckpt: Option<Checkpoint>) -> Result<(), TrainError> {
        let Some(dir) = self.dir else { return Ok(()) };
        let path = dir.join("metrics.jsonl");
        let line = serde_json::to_string(metrics).expect("metrics serialize");
        let mut f = self.io(&path, fs::OpenOptions::new().append(true).open(&path))?;
        self.io(&path, writeln!(f, "{line}"))?;
        if let Some(ckpt) = ckpt {
            save_checkpoint(&ckpt, &dir.join(format!("epoch_{}.ckpt", metrics.epoch)))?;
        }
        Ok(())
    }

    fn finish(&self, report: &TrainReport, best: Checkpoint) -> Result<(), TrainError> {
        let Some(dir) = self.dir else { return Ok(()) };
        save_checkpoint(&best, &dir.join("best.ckpt"))?;
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(report).expect("report serializes");
        self.io(&path, fs::write(&path, text + "\n"))
    }
}

fn fit<T: Task>(
    task: &T,
    mut model: T::M,
    config: &TrainConfig,
    model_config: &ModelConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome<T::M>, TrainError>
where
    Checkpoint: From<T::M>,
{
    config.validate()?;
    if task.train_len() == 0 {
        return Err(TrainError::EmptyDataset("training"));
    }
    if task.val_len() == 0 {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let started = Instant::now();
    let run = RunDir { dir: run_dir };
    run.start(config, model_config)?;

    with_pool(config.jobs, move || {
        let mut state = AdamState::new(&model);
        let initial = EpochMetrics {
            epoch: 0,
            train: None,
            validation: validation(task, &model)?,
        };
        run.epoch(&initial, None)?;
        let mut best = model.clone();
        let mut best_loss = initial.validation.total;
        let mut selected_epoch = 0;
        let mut epochs = vec![initial];
        let mut steps = Vec::new();

        for epoch in 1..=config.epochs {
            let mut order: Vec<usize> = (0..task.train_len()).collect();
            order.shuffle(&mut seed::stream(config.seed, &["shuffle".into(), epoch.into()]));
            let mut epoch_sum = LossValue::default();
            for batch in order.chunks(config.batch_size) {
                // per-item gradients summed in item order, so the result
                // does not depend on the thread count
                let partials: Vec<(T::M, LossValue)> = batch
                    .par_iter()
                    .map(|&i| {
                        let mut grads = model.clone();
                        grads.fill_zero();
                        let mut rng = seed::stream(config.seed, &["dropout".into(), epoch.into(), i.into()]);
                        let loss = task.train_loss(&model, i, epoch, &mut Mode::Train(&mut rng), &mut grads)?;
                        Ok((grads, loss))
                    })
                    .collect::<Result<_, TrainError>>()?;
                let mut parts = partials.into_iter();
                let (mut grads, mut sum) = parts.next().expect("non-empty batch");
                for (g, s) in parts {
                    grads.add_assign(&g);
                    sum = add_loss(sum, s);
                }
                grads.scale(1.0 / batch.len() as f64);
                adamw_step(&mut model, &grads, &mut state, config)?;
                epoch_sum = add_loss(epoch_sum, sum);
                steps.push(StepMetrics {
                    step: steps.len() + 1,
                    epoch,
                    loss: mean_loss(sum, batch.len()),
                });
            }
            let metrics = EpochMetrics {
                epoch,
                train: Some(mean_loss(epoch_sum, task.train_len())),
                validation: validation(task, &model)?,
            };
            if metrics.validation.total < best_loss {
                best_loss = metrics.validation.total;
                best = model.clone();
                selected_epoch = epoch;
            }
            run.epoch(&metrics, Some(Checkpoint::from(model.clone())))?;
            epochs.push(metrics);
        }

        let report = TrainReport {
            mode: config.mode,
            epochs,
            selected_epoch,
            steps,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        run.finish(&report, Checkpoint::from(best.clone()))?;
        Ok(TrainOutcome { report, best })
    })
}

struct MultichoiceTask<'a> {
    train: &'a [CandidateGroup],
    val: &'a [CandidateGroup],
    /// LMGC-M masking; `None` trains plain LMGC.
    masking: Option<Masking>,
    vocab_size: usize,
    val_masks: Vec<Vec<MaskedPosition>>,
    val_sequences: Vec<Vec<TokenSequence>>,
}

#[derive(Clone, Copy)]
struct Masking {
    seed: u64,
    prob: f64,
    split: MaskSplit,
}

impl Masking {
    fn builder(&self, stream: &[seed::Part<'_>]) -> BuilderConfig {
        BuilderConfig {
            mask_prob: self.prob,
            mask_split: self.split,
            seed: seed::derive(self.seed, stream),
            ..BuilderConfig::default()
        }
    }
}

impl<'a> MultichoiceTask<'a> {
    fn new(
        train: &'a [CandidateGroup],
        val: &'a [CandidateGroup],
        masking: Option<Masking>,
        vocab_size: usize,
    ) -> Self {
        let (val_sequences, val_masks) = match masking {
            Some(mk) => {
                let cfg = mk.builder(&["mask".into(), "validation".into()]);
                val.iter()
                    .map(|g| {
                        let m = apply_masking(g, vocab_size, &cfg);
                        (m.masked_sequences, m.masked_positions)
                    })
                    .unzip()
            }
            None => (Vec::new(), Vec::new()),
        };
        MultichoiceTask {
            train,
            val,
            masking,
            vocab_size,
            val_masks,
            val_sequences,
        }
    }
}

impl Task for MultichoiceTask<'_> {
    type M = LmgcModel;

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn val_len(&self) -> usize {
        self.val.len()
    }

    fn train_loss(
        &self,
        model: &LmgcModel,
        index: usize,
        epoch: usize,
        mode: &mut Mode<'_>,
        grads: &mut LmgcModel,
    ) -> Result<LossValue, TrainError> {
        let group = &self.train[index];
        match self.masking {
            None => {
                let seqs: Vec<&TokenSequence> = group.pairs.iter().map(|p| &p.sequence).collect();
                Ok(lmgc_group_loss(model, &seqs, group.primary_gold, &[], mode, Some(grads))?)
            }
            Some(mk) => {
                let cfg = mk.builder(&["mask".into(), epoch.into()]);
                let masked = apply_masking(group, self.vocab_size, &cfg);
                let seqs: Vec<&TokenSequence> = masked.masked_sequences.iter().collect();
                Ok(lmgc_group_loss(
                    model,
                    &seqs,
                    group.primary_gold,
                    &masked.masked_positions,
                    mode,
                    Some(grads),
                )?)
            }
        }
    }

    fn val_loss(&self, model: &LmgcModel, index: usize) -> Result<LossValue, TrainError> {
        let group = &self.val[index];
        let (seqs, masked): (Vec<&TokenSequence>, &[MaskedPosition]) = if self.masking.is_some() {
            (self.val_sequences[index].iter().collect(), &self.val_masks[index])
        } else {
            (group.pairs.iter().map(|p| &p.sequence).collect(), &[])
        };
        Ok(lmgc_group_loss(model, &seqs, group.primary_gold, masked, &mut Mode::Eval, None)?)
    }
}

struct BinaryTask<'a> {
    train: Vec<(&'a TokenSequence, bool)>,
    val: Vec<(&'a TokenSequence, bool)>,
    focal: FocalParams,
}

fn flatten(groups: &[CandidateGroup]) -> Vec<(&TokenSequence, bool)> {
    groups
        .iter()
        .flat_map(|g| g.pairs.iter().map(|p| (&p.sequence, p.label)))
        .collect()
}

impl Task for BinaryTask<'_> {
    type M = LmgcModel;

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn val_len(&self) -> usize {
        self.val.len()
    }

    fn train_loss(
        &self,
        model: &LmgcModel,
        index: usize,
        _epoch: usize,
        mode: &mut Mode<'_>,
        grads: &mut LmgcModel,
    ) -> Result<LossValue, TrainError> {
        let (seq, label) = self.train[index];
        let l = binary_pair_loss(model, seq, label, &self.focal, mode, Some(grads))?;
        Ok(LossValue::gloss_only(l))
    }

    fn val_loss(&self, model: &LmgcModel, index: usize) -> Result<LossValue, TrainError> {
        let (seq, label) = self.val[index];
        let l = binary_pair_loss(model, seq, label, &self.focal, &mut Mode::Eval, None)?;
        Ok(LossValue::gloss_only(l))
    }
}

/// A labelled sequence for downstream fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub sequence: TokenSequence,
    pub target: Target,
}

struct DownstreamTask<'a> {
    train: &'a [LabeledSequence],
    val: &'a [LabeledSequence],
}

impl Task for DownstreamTask<'_> {
    type M = DownstreamModel;

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn val_len(&self) -> usize {
        self.val.len()
    }

    fn train_loss(
        &self,
        model: &DownstreamModel,
        index: usize,
        _epoch: usize,
        mode: &mut Mode<'_>,
        grads: &mut DownstreamModel,
    ) -> Result<LossValue, TrainError> {
        let item = &self.train[index];
        let l = downstream_loss(model, &item.sequence, item.target, mode, Some(grads))?;
        Ok(LossValue::gloss_only(l))
    }

    fn val_loss(&self, model: &DownstreamModel, index: usize) -> Result<LossValue, TrainError> {
        let item = &self.val[index];
        let l = downstream_loss(model, &item.sequence, item.target, &mut Mode::Eval, None)?;
        Ok(LossValue::gloss_only(l))
    }
}

/// LMGC fine-tuning: multi-choice cross-entropy over each group's stacked
/// candidates, or focal loss over individual pairs in binary mode.
pub fn train_lmgc(
    model: LmgcModel,
    train: &[CandidateGroup],
    val: &[CandidateGroup],
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome<LmgcModel>, TrainError> {
    let model_config = model.encoder.config.clone();
    match config.mode {
        TrainMode::LmgcMultichoice => {
            let task = MultichoiceTask::new(train, val, None, model_config.vocab_size);
            fit(&task, model, config, &model_config, run_dir)
        }
        TrainMode::LmgcBinary => {
            let task = BinaryTask {
                train: flatten(train),
                val: flatten(val),
                focal: config.focal,
            };
            fit(&task, model, config, &model_config, run_dir)
        }
        other => Err(TrainError::InvalidConfig(format!("train_lmgc does not run mode {other:?}"))),
    }
}

/// LMGC-M: multi-choice loss on masked inputs plus MLM cross-entropy over
/// the masked context words. Masks are redrawn each epoch.
pub fn pretrain_lmgc_m(
    model: LmgcModel,
    train: &[CandidateGroup],
    val: &[CandidateGroup],
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome<LmgcModel>, TrainError> {
    let model_config = model.encoder.config.clone();
    let masking = Masking {
        seed: config.seed,
        prob: config.mask_prob,
        split: config.mask_split,
    };
    let task = MultichoiceTask::new(train, val, Some(masking), model_config.vocab_size);
    let config = TrainConfig {
        mode: TrainMode::LmgcM,
        ..config.clone()
    };
    fit(&task, model, &config, &model_config, run_dir)
}

/// Continues an LMGC-M checkpoint with plain multi-choice training.
pub fn finetune_without_masks(
    checkpoint: Checkpoint,
    expected: &ModelConfig,
    train: &[CandidateGroup],
    val: &[CandidateGroup],
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome<LmgcModel>, TrainError> {
    check_shapes(&checkpoint.encoder, expected).map_err(|e| TrainError::CheckpointIncompatible(e.to_string()))?;
    let model = checkpoint
        .into_lmgc()
        .ok_or_else(|| TrainError::CheckpointIncompatible("checkpoint has no gloss head".into()))?;
    let config = TrainConfig {
        mode: TrainMode::LmgcMultichoice,
        ..config.clone()
    };
    train_lmgc(model, train, val, &config, run_dir)
}

/// Trains the encoder with a new classification or regression head.
pub fn finetune_downstream(
    encoder: EncoderParams,
    spec: HeadSpec,
    train: &[LabeledSequence],
    val: &[LabeledSequence],
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome<DownstreamModel>, TrainError> {
    for item in train.iter().chain(val) {
        match (spec, item.target) {
            (HeadSpec::Classification { classes }, Target::Class(label)) if label >= classes => {
                return Err(TrainError::LabelOutOfRange { label, classes });
            }
            (HeadSpec::Classification { .. }, Target::Value(_)) | (HeadSpec::Regression, Target::Class(_)) => {
                return Err(TrainError::InvalidConfig("target kind does not match head".into()));
            }
            _ => {}
        }
    }
    let model_config = encoder.config.clone();
    let model = DownstreamModel::from_encoder(encoder, spec)?;
    let task = DownstreamTask { train, val };
    let config = TrainConfig {
        mode: TrainMode::Downstream,
        ..config.clone()
    };
    fit(&task, model, &config, &model_config, run_dir)
}

#[cfg(test)]
mod tests;
