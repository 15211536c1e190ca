//! Post-layer-norm transformer encoder with gloss, MLM and downstream heads.
//!
//! All arithmetic is `f64`. Backward passes are written by hand and checked
//! against finite differences in [`crate::objectives::gradcheck`].

pub mod checkpoint;
mod encoder;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::tokenizer::Special;

pub use encoder::{EncoderOutput, Trace};

const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds {max} positions")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("segment id {id} outside {segments} segments")]
    SegmentOutOfRange { id: u8, segments: usize },
    #[error("position {position} outside sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty input")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub segments: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, H=32, 2 heads, FFN 64, 160 positions.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            hidden: 32,
            heads: 2,
            ffn: 64,
            vocab_size,
            max_positions: 160,
            segments: 2,
            dropout: 0.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return fail("layers, hidden, heads and ffn must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab_size < Special::COUNT as usize {
            return fail(format!("vocab_size {} smaller than the special tokens", self.vocab_size));
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        if self.segments < 2 {
            return fail("at least two segments are required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// How a parameter tensor is treated by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Embedding,
    Bias,
    Norm,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Embedding)
    }
}

pub struct TensorRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a mut [f64],
}

/// Uniform access to parameter tensors in a fixed declaration order.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    /// `self += other`, tensor by tensor.
    fn add_assign(&mut self, other: &Self) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

fn mat<'a>(name: String, kind: ParamKind, a: &'a Array2<f64>) -> TensorRef<'a> {
    TensorRef {
        name,
        kind,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters are contiguous"),
    }
}

fn vec1<'a>(name: String, kind: ParamKind, a: &'a Array1<f64>) -> TensorRef<'a> {
    TensorRef {
        name,
        kind,
        shape: vec![a.len()],
        data: a.as_slice().expect("parameters are contiguous"),
    }
}

fn mat_mut<'a>(name: String, kind: ParamKind, a: &'a mut Array2<f64>) -> TensorMut<'a> {
    TensorMut {
        name,
        kind,
        data: a.as_slice_mut().expect("parameters are contiguous"),
    }
}

fn vec1_mut<'a>(name: String, kind: ParamKind, a: &'a mut Array1<f64>) -> TensorMut<'a> {
    TensorMut {
        name,
        kind,
        data: a.as_slice_mut().expect("parameters are contiguous"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

/// Encoder weights plus the tied MLM output bias. Linear maps act on row
/// vectors: `y = x · W + b` with `W` of shape (in, out).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: ModelConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub segment_embedding: Array2<f64>,
    pub emb_ln_gamma: Array1<f64>,
    pub emb_ln_beta: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub mlm_bias: Array1<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl EncoderParams {
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::stream(config.seed, &["init".into(), "encoder".into()]);
        let (h, f) = (config.hidden, config.ffn);
        let token_embedding = normal_matrix(&mut rng, config.vocab_size, h);
        let position_embedding = normal_matrix(&mut rng, config.max_positions, h);
        let segment_embedding = normal_matrix(&mut rng, config.segments, h);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: normal_matrix(&mut rng, h, h),
                bq: Array1::zeros(h),
                wk: normal_matrix(&mut rng, h, h),
                bk: Array1::zeros(h),
                wv: normal_matrix(&mut rng, h, h),
                bv: Array1::zeros(h),
                wo: normal_matrix(&mut rng, h, h),
                bo: Array1::zeros(h),
                ln1_gamma: Array1::ones(h),
                ln1_beta: Array1::zeros(h),
                w1: normal_matrix(&mut rng, h, f),
                b1: Array1::zeros(f),
                w2: normal_matrix(&mut rng, f, h),
                b2: Array1::zeros(h),
                ln2_gamma: Array1::ones(h),
                ln2_beta: Array1::zeros(h),
            })
            .collect();
        Ok(EncoderParams {
            config: config.clone(),
            token_embedding,
            position_embedding,
            segment_embedding,
            emb_ln_gamma: Array1::ones(h),
            emb_ln_beta: Array1::zeros(h),
            layers,
            mlm_bias: Array1::zeros(config.vocab_size),
        })
    }

    /// Same shapes, all zeros; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        use ParamKind::*;
        let mut out = vec![
            mat("token_embedding".into(), Embedding, &self.token_embedding),
            mat("position_embedding".into(), Embedding, &self.position_embedding),
            mat("segment_embedding".into(), Embedding, &self.segment_embedding),
            vec1("emb_ln.gamma".into(), Norm, &self.emb_ln_gamma),
            vec1("emb_ln.beta".into(), Norm, &self.emb_ln_beta),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layer{i}.{s}");
            out.extend([
                mat(n("wq"), Weight, &l.wq),
                vec1(n("bq"), Bias, &l.bq),
                mat(n("wk"), Weight, &l.wk),
                vec1(n("bk"), Bias, &l.bk),
                mat(n("wv"), Weight, &l.wv),
                vec1(n("bv"), Bias, &l.bv),
                mat(n("wo"), Weight, &l.wo),
                vec1(n("bo"), Bias, &l.bo),
                vec1(n("ln1.gamma"), Norm, &l.ln1_gamma),
                vec1(n("ln1.beta"), Norm, &l.ln1_beta),
                mat(n("w1"), Weight, &l.w1),
                vec1(n("b1"), Bias, &l.b1),
                mat(n("w2"), Weight, &l.w2),
                vec1(n("b2"), Bias, &l.b2),
                vec1(n("ln2.gamma"), Norm, &l.ln2_gamma),
                vec1(n("ln2.beta"), Norm, &l.ln2_beta),
            ]);
        }
        out.push(vec1("mlm_bias".into(), Bias, &self.mlm_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        use ParamKind::*;
        let mut out = vec![
            mat_mut("token_embedding".into(), Embedding, &mut self.token_embedding),
            mat_mut("position_embedding".into(), Embedding, &mut self.position_embedding),
            mat_mut("segment_embedding".into(), Embedding, &mut self.segment_embedding),
            vec1_mut("emb_ln.gamma".into(), Norm, &mut self.emb_ln_gamma),
            vec1_mut("emb_ln.beta".into(), Norm, &mut self.emb_ln_beta),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layer{i}.{s}");
            out.extend([
                mat_mut(n("wq"), Weight, &mut l.wq),
                vec1_mut(n("bq"), Bias, &mut l.bq),
                mat_mut(n("wk"), Weight, &mut l.wk),
                vec1_mut(n("bk"), Bias, &mut l.bk),
                mat_mut(n("wv"), Weight, &mut l.wv),
                vec1_mut(n("bv"), Bias, &mut l.bv),
                mat_mut(n("wo"), Weight, &mut l.wo),
                vec1_mut(n("bo"), Bias, &mut l.bo),
                vec1_mut(n("ln1.gamma"), Norm, &mut l.ln1_gamma),
                vec1_mut(n("ln1.beta"), Norm, &mut l.ln1_beta),
                mat_mut(n("w1"), Weight, &mut l.w1),
                vec1_mut(n("b1"), Bias, &mut l.b1),
                mat_mut(n("w2"), Weight, &mut l.w2),
                vec1_mut(n("b2"), Bias, &mut l.b2),
                vec1_mut(n("ln2.gamma"), Norm, &mut l.ln2_gamma),
                vec1_mut(n("ln2.beta"), Norm, &mut l.ln2_beta),
            ]);
        }
        out.push(vec1_mut("mlm_bias".into(), Bias, &mut self.mlm_bias));
        out
    }
}

/// Two-logit classifier over the aggregate; index 1 is the "gloss matches"
/// logit used as the candidate score.
#[derive(Clone, Debug, PartialEq)]
pub struct GlossHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl GlossHead {
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = seed::stream(config.seed, &["init".into(), "gloss_head".into()]);
        GlossHead {
            weight: normal_matrix(&mut rng, config.hidden, 2),
            bias: Array1::zeros(2),
        }
    }

    pub fn logits(&self, aggregate: ArrayView1<'_, f64>) -> [f64; 2] {
        let l = aggregate.dot(&self.weight) + &self.bias;
        [l[0], l[1]]
    }

    pub fn score(&self, aggregate: ArrayView1<'_, f64>) -> f64 {
        aggregate.dot(&self.weight.column(1)) + self.bias[1]
    }
}

impl Parameters for GlossHead {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            mat("gloss_head.weight".into(), ParamKind::Weight, &self.weight),
            vec1("gloss_head.bias".into(), ParamKind::Bias, &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            mat_mut("gloss_head.weight".into(), ParamKind::Weight, &mut self.weight),
            vec1_mut("gloss_head.bias".into(), ParamKind::Bias, &mut self.bias),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadSpec {
    Classification { classes: usize },
    Regression,
}

impl HeadSpec {
    pub fn outputs(self) -> usize {
        match self {
            HeadSpec::Classification { classes } => classes,
            HeadSpec::Regression => 1,
        }
    }
}

/// `W ∈ R^{K×H}` plus `K` biases; regression uses `K = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamHead {
    pub spec: HeadSpec,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DownstreamHead {
    pub fn init(config: &ModelConfig, spec: HeadSpec) -> Result<Self, ModelError> {
        if let HeadSpec::Classification { classes } = spec {
            if classes < 2 {
                return Err(ModelError::InvalidConfig(format!("{classes} classes; need at least 2")));
            }
        }
        let mut rng = seed::stream(config.seed, &["init".into(), "downstream_head".into()]);
        let k = spec.outputs();
        Ok(DownstreamHead {
            spec,
            weight: normal_matrix(&mut rng, k, config.hidden),
            bias: Array1::zeros(k),
        })
    }

    pub fn forward(&self, aggregate: ArrayView1<'_, f64>) -> Result<Vec<f64>, ModelError> {
        if aggregate.len() != self.weight.ncols() {
            return Err(ModelError::DimensionMismatch {
                expected: self.weight.ncols(),
                found: aggregate.len(),
            });
        }
        Ok((self.weight.dot(&aggregate) + &self.bias).to_vec())
    }
}

impl Parameters for DownstreamHead {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            mat("downstream_head.weight".into(), ParamKind::Weight, &self.weight),
            vec1("downstream_head.bias".into(), ParamKind::Bias, &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            mat_mut("downstream_head.weight".into(), ParamKind::Weight, &mut self.weight),
            vec1_mut("downstream_head.bias".into(), ParamKind::Bias, &mut self.bias),
        ]
    }
}

/// An encoder together with one task head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<H> {
    pub encoder: EncoderParams,
    pub head: H,
}

pub type LmgcModel = Model<GlossHead>;
pub type DownstreamModel = Model<DownstreamHead>;

impl<H: Parameters> Parameters for Model<H> {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut t = self.encoder.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

impl<H: Parameters + Clone> Model<H> {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }
}

impl LmgcModel {
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        Ok(Model {
            encoder: EncoderParams::init(config)?,
            head: GlossHead::init(config),
        })
    }
}

impl DownstreamModel {
    /// Attaches a fresh downstream head to a (typically pre-trained) encoder.
    pub fn from_encoder(encoder: EncoderParams, spec: HeadSpec) -> Result<Self, ModelError> {
        let head = DownstreamHead::init(&encoder.config, spec)?;
        Ok(Model { encoder, head })
    }
}

/// Dropout behaviour of a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub(crate) fn dropout_mask(&mut self, p: f64, rows: usize, cols: usize) -> Option<Array2<f64>> {
        match self {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                Some(Array2::from_shape_fn((rows, cols), |_| {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                }))
            }
            _ => None,
        }
    }
}

/// Raw candidate scores and their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateScores {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Scores the `k` stacked candidate sequences of one instance. The
/// sequences are right-padded to a common length, as in a batched stack;
/// padding is masked out of attention.
pub fn score_candidates(
    model: &LmgcModel,
    sequences: &[&crate::tokenizer::TokenSequence],
    mode: &mut Mode<'_>,
) -> Result<CandidateScores, ModelError> {
    if sequences.is_empty() {
        return Err(ModelError::Empty);
    }
    let width = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut scores = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let padded = encoder::pad_to(seq, width);
        let out = model.encoder.forward(&padded, mode)?;
        scores.push(model.head.score(out.aggregate()));
    }
    let probabilities = softmax(&scores);
    Ok(CandidateScores { scores, probabilities })
}

/// MLM logits `hidden[p] · Eᵀ + b` for each requested position.
pub fn mlm_logits(
    encoder: &EncoderParams,
    hidden: &Array2<f64>,
    positions: &[usize],
) -> Result<Array2<f64>, ModelError> {
    let n = hidden.nrows();
    let mut rows = Array2::zeros((positions.len(), encoder.config.hidden));
    for (r, &p) in positions.iter().enumerate() {
        if p >= n {
            return Err(ModelError::PositionOutOfRange { position: p, len: n });
        }
        rows.row_mut(r).assign(&hidden.row(p));
    }
    Ok(rows.dot(&encoder.token_embedding.t()) + &encoder.mlm_bias)
}

pub fn downstream_forward(
    model: &DownstreamModel,
    sequence: &crate::tokenizer::TokenSequence,
    mode: &mut Mode<'_>,
) -> Result<Vec<f64>, ModelError> {
    let out = model.encoder.forward(sequence, mode)?;
    model.head.forward(out.aggregate())
}

#[cfg(test)]
mod tests;
