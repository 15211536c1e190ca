//! Losses with hand-derived gradients, and a finite-difference checker.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::examples::MaskedPosition;
use crate::model::{
    mlm_logits, softmax, DownstreamModel, HeadSpec, LmgcModel, Mode, ModelError, Parameters,
};
use crate::seed;
use crate::tokenizer::TokenSequence;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite gradient in {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("target does not match head")]
    TargetMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: Option<f64>,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            gamma: 2.0,
            alpha: Some(0.25),
        }
    }
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `y=1: -α(1-p)^γ ln p`, `y=0: -(1-α) p^γ ln(1-p)`; without `alpha` both
/// class weights are 1.
pub fn focal_loss(p: f64, y: bool, params: &FocalParams) -> f64 {
    let p = clamp_p(p);
    let g = params.gamma;
    if y {
        -params.alpha.unwrap_or(1.0) * (1.0 - p).powf(g) * p.ln()
    } else {
        -params.alpha.map_or(1.0, |a| 1.0 - a) * p.powf(g) * (1.0 - p).ln()
    }
}

/// Derivative of [`focal_loss`] with respect to the logit `z`, `p = σ(z)`.
pub fn focal_loss_grad(p: f64, y: bool, params: &FocalParams) -> f64 {
    let p = clamp_p(p);
    let g = params.gamma;
    let q = 1.0 - p;
    if y {
        params.alpha.unwrap_or(1.0) * (g * q.powf(g) * p * p.ln() - q.powf(g + 1.0))
    } else {
        params.alpha.map_or(1.0, |a| 1.0 - a) * (p.powf(g + 1.0) - g * p.powf(g) * q * q.ln())
    }
}

pub fn binary_cross_entropy(p: f64, y: bool) -> f64 {
    let p = clamp_p(p);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn multichoice_loss(probabilities: &[f64], gold: usize) -> Result<f64, ObjectiveError> {
    let p = probabilities.get(gold).ok_or(ObjectiveError::IndexOutOfRange {
        index: gold,
        len: probabilities.len(),
    })?;
    Ok(-p.max(PROB_EPS).ln())
}

/// Softmax cross-entropy from raw scores via log-sum-exp, with its gradient
/// `softmax(scores) - onehot(gold)`.
pub fn multichoice_from_scores(scores: &[f64], gold: usize) -> Result<(f64, Vec<f64>), ObjectiveError> {
    if gold >= scores.len() {
        return Err(ObjectiveError::IndexOutOfRange {
            index: gold,
            len: scores.len(),
        });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(scores);
    grad[gold] -= 1.0;
    Ok((lse - scores[gold], grad))
}

/// Mean over rows of softmax cross-entropy against `originals`; 0 for no rows.
pub fn mlm_loss(logits: &Array2<f64>, originals: &[u32]) -> f64 {
    mlm_loss_grad(logits, originals).0
}

pub fn mlm_loss_grad(logits: &Array2<f64>, originals: &[u32]) -> (f64, Array2<f64>) {
    let m = logits.nrows();
    assert_eq!(m, originals.len(), "one original id per masked position");
    let mut grad = Array2::zeros(logits.dim());
    if m == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for (r, (row, &orig)) in logits.rows().into_iter().zip(originals).enumerate() {
        let row = row.to_vec();
        let (loss, g) = multichoice_from_scores(&row, orig as usize).expect("original id within vocabulary");
        total += loss;
        grad.row_mut(r).assign(&Array1::from(g));
    }
    grad /= m as f64;
    (total / m as f64, grad)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub gloss: f64,
    pub mlm: f64,
}

impl LossValue {
    pub fn gloss_only(gloss: f64) -> Self {
        LossValue {
            total: gloss,
            gloss,
            mlm: 0.0,
        }
    }
}

pub fn lmgc_m_loss(
    probabilities: &[f64],
    gold: usize,
    mlm_logits: &Array2<f64>,
    originals: &[u32],
) -> Result<LossValue, ObjectiveError> {
    let gloss = multichoice_loss(probabilities, gold)?;
    let mlm = mlm_loss(mlm_logits, originals);
    Ok(LossValue {
        total: gloss + mlm,
        gloss,
        mlm,
    })
}

/// Multi-choice (plus optional MLM) loss of one candidate group. `masked`
/// lists positions whose original ids the MLM head must recover; an empty
/// list gives plain LMGC. Gradients are added into `grads` when given.
pub fn lmgc_group_loss(
    model: &LmgcModel,
    sequences: &[&TokenSequence],
    gold: usize,
    masked: &[MaskedPosition],
    mode: &mut Mode<'_>,
    grads: Option<&mut LmgcModel>,
) -> Result<LossValue, ObjectiveError> {
    if gold >= sequences.len() {
        return Err(ObjectiveError::IndexOutOfRange {
            index: gold,
            len: sequences.len(),
        });
    }
    let mut outputs = Vec::with_capacity(sequences.len());
    for seq in sequences {
        outputs.push(model.encoder.forward_trace(seq, mode)?);
    }
    let scores: Vec<f64> = outputs.iter().map(|(o, _)| model.head.score(o.aggregate())).collect();
    let (gloss, d_scores) = multichoice_from_scores(&scores, gold)?;

    let positions: Vec<Vec<usize>> = (0..sequences.len())
        .map(|p| masked.iter().filter(|m| m.pair == p).map(|m| m.index).collect())
        .collect();
    let originals: Vec<Vec<u32>> = (0..sequences.len())
        .map(|p| masked.iter().filter(|m| m.pair == p).map(|m| m.original).collect())
        .collect();
    let mut logits = Vec::with_capacity(sequences.len());
    for ((out, _), pos) in outputs.iter().zip(&positions) {
        logits.push(mlm_logits(&model.encoder, &out.hidden, pos)?);
    }
    let all_logits = ndarray::concatenate(Axis(0), &logits.iter().map(|l| l.view()).collect::<Vec<_>>())
        .expect("equal vocabulary width");
    let all_originals: Vec<u32> = originals.concat();
    let (mlm, d_logits) = mlm_loss_grad(&all_logits, &all_originals);
    let value = LossValue {
        total: gloss + mlm,
        gloss,
        mlm,
    };

    let Some(grads) = grads else {
        return Ok(value);
    };
    let w1 = model.head.weight.column(1).to_owned();
    let mut offset = 0;
    for (p, (out, trace)) in outputs.iter().enumerate() {
        let agg = out.aggregate();
        grads.head.weight.column_mut(1).scaled_add(d_scores[p], &agg);
        grads.head.bias[1] += d_scores[p];
        let mut d_hidden = Array2::zeros(out.hidden.dim());
        d_hidden.row_mut(0).scaled_add(d_scores[p], &w1);

        let m = positions[p].len();
        if m > 0 {
            let d_l = d_logits.slice(ndarray::s![offset..offset + m, ..]);
            let d_h = d_l.dot(&model.encoder.token_embedding);
            for (r, &i) in positions[p].iter().enumerate() {
                d_hidden.row_mut(i).scaled_add(1.0, &d_h.row(r));
                let h = out.hidden.row(i);
                // tied output embedding: dE += d_logitsᵀ · h
                for (v, &g) in d_l.row(r).iter().enumerate() {
                    if g != 0.0 {
                        grads.encoder.token_embedding.row_mut(v).scaled_add(g, &h);
                    }
                }
            }
            grads.encoder.mlm_bias += &d_l.sum_axis(Axis(0));
            offset += m;
        }
        model.encoder.backward(trace, &d_hidden, &mut grads.encoder);
    }
    Ok(value)
}

/// Focal loss of one sentence-gloss pair under the two-class head,
/// `p = softmax(logits)[1] = σ(l1 - l0)`.
pub fn binary_pair_loss(
    model: &LmgcModel,
    sequence: &TokenSequence,
    label: bool,
    focal: &FocalParams,
    mode: &mut Mode<'_>,
    grads: Option<&mut LmgcModel>,
) -> Result<f64, ObjectiveError> {
    let (out, trace) = model.encoder.forward_trace(sequence, mode)?;
    let [l0, l1] = model.head.logits(out.aggregate());
    let p = 1.0 / (1.0 + (l0 - l1).exp());
    let loss = focal_loss(p, label, focal);
    if let Some(grads) = grads {
        let dz = focal_loss_grad(p, label, focal);
        let agg = out.aggregate();
        grads.head.weight.column_mut(1).scaled_add(dz, &agg);
        grads.head.weight.column_mut(0).scaled_add(-dz, &agg);
        grads.head.bias[1] += dz;
        grads.head.bias[0] -= dz;
        let d_agg = (&model.head.weight.column(1) - &model.head.weight.column(0)) * dz;
        let mut d_hidden = Array2::zeros(out.hidden.dim());
        d_hidden.row_mut(0).assign(&d_agg);
        model.encoder.backward(&trace, &d_hidden, &mut grads.encoder);
    }
    Ok(loss)
}

/// Positive-class probability of a single pair under the two-class head.
pub fn pair_probability(model: &LmgcModel, sequence: &TokenSequence) -> Result<f64, ObjectiveError> {
    let out = model.encoder.forward(sequence, &mut Mode::Eval)?;
    let [l0, l1] = model.head.logits(out.aggregate());
    Ok(1.0 / (1.0 + (l0 - l1).exp()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// Cross-entropy (classification) or squared error (regression).
pub fn downstream_loss(
    model: &DownstreamModel,
    sequence: &TokenSequence,
    target: Target,
    mode: &mut Mode<'_>,
    grads: Option<&mut DownstreamModel>,
) -> Result<f64, ObjectiveError> {
    let (out, trace) = model.encoder.forward_trace(sequence, mode)?;
    let logits = model.head.forward(out.aggregate())?;
    let (loss, d_logits) = match (model.head.spec, target) {
        (HeadSpec::Classification { classes }, Target::Class(label)) => {
            if label >= classes {
                return Err(ObjectiveError::LabelOutOfRange { label, classes });
            }
            multichoice_from_scores(&logits, label)?
        }
        (HeadSpec::Regression, Target::Value(y)) => {
            let diff = logits[0] - y;
            (diff * diff, vec![2.0 * diff])
        }
        _ => return Err(ObjectiveError::TargetMismatch),
    };
    if let Some(grads) = grads {
        let agg = out.aggregate();
        let d = Array1::from(d_logits);
        for (k, &dk) in d.iter().enumerate() {
            grads.head.weight.row_mut(k).scaled_add(dk, &agg);
        }
        grads.head.bias += &d;
        let mut d_hidden = Array2::zeros(out.hidden.dim());
        d_hidden.row_mut(0).assign(&model.head.weight.t().dot(&d));
        model.encoder.backward(&trace, &d_hidden, &mut grads.encoder);
    }
    Ok(loss)
}

/// Relative errors below this denominator are measured against it instead,
/// so coordinates whose true gradient is numerically zero do not divide by
/// rounding noise.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub coordinate: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub nonzero: usize,
    pub epsilon: f64,
    /// Up to ten worst coordinates, largest error first.
    pub worst: Vec<GradcheckEntry>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Splits `total` draws as evenly as possible over tensors of the given
/// sizes; what small tensors cannot take goes to the larger ones.
fn spread(sizes: &[usize], total: usize) -> Vec<usize> {
    let mut quota = vec![0; sizes.len()];
    let mut left = total.min(sizes.iter().sum());
    while left > 0 {
        let open: Vec<usize> = (0..sizes.len()).filter(|&i| quota[i] < sizes[i]).collect();
        let share = (left / open.len()).max(1);
        for i in open {
            let add = share.min(sizes[i] - quota[i]).min(left);
            quota[i] += add;
            left -= add;
        }
    }
    quota
}

/// Compares the analytic gradient produced by `loss(params, Some(grads))`
/// with central differences on `sample_size` coordinates, spread evenly over
/// all tensors and drawn from `seed`. Parameters are restored afterwards.
pub fn gradcheck<P, F>(
    params: &mut P,
    mut loss: F,
    epsilon: f64,
    sample_size: usize,
    seed: u64,
) -> Result<GradcheckReport, ObjectiveError>
where
    P: Parameters + Clone,
    F: FnMut(&P, Option<&mut P>) -> f64,
{
    let mut grads = params.clone();
    grads.fill_zero();
    loss(params, Some(&mut grads));
    for t in grads.tensors() {
        if t.data.iter().any(|g| !g.is_finite()) {
            return Err(ObjectiveError::NonFiniteGradient { tensor: t.name });
        }
    }

    let sizes: Vec<(String, usize)> = params.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
    let mut rng = seed::stream(seed, &["gradcheck".into()]);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    let lens: Vec<usize> = sizes.iter().map(|(_, len)| *len).collect();
    for (ti, take) in spread(&lens, sample_size).into_iter().enumerate() {
        coords.extend(sample(&mut rng, lens[ti], take).into_iter().map(|i| (ti, i)));
    }

    let mut entries = Vec::with_capacity(coords.len());
    let grad_tensors = grads.tensors();
    for &(ti, i) in &coords {
        let original = params.tensors()[ti].data[i];
        params.tensors_mut()[ti].data[i] = original + epsilon;
        let plus = loss(params, None);
        params.tensors_mut()[ti].data[i] = original - epsilon;
        let minus = loss(params, None);
        params.tensors_mut()[ti].data[i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grad_tensors[ti].data[i];
        entries.push(GradcheckEntry {
            coordinate: format!("{}[{}]", sizes[ti].0, i),
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let nonzero = entries.iter().filter(|e| e.analytic != 0.0).count();
    entries.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_error = entries.first().map_or(0.0, |e| e.rel_err);
    let checked = entries.len();
    entries.truncate(10);
    Ok(GradcheckReport {
        max_rel_error,
        checked,
        nonzero,
        epsilon,
        worst: entries,
    })
}
