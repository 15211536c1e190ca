use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::{EncoderParams, LayerParams, Mode, ModelError, LN_EPS};
use crate::tokenizer::{TokenSequence, PAD};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Array2<f64>,
}

impl EncoderOutput {
    /// Final hidden state at the `[AGG]` position.
    pub fn aggregate(&self) -> ArrayView1<'_, f64> {
        self.hidden.row(0)
    }
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerTrace {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln1: LnCache,
    y: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
    ln2: LnCache,
}

/// Intermediate activations kept for the backward pass.
pub struct Trace {
    ids: Vec<u32>,
    segments: Vec<u8>,
    emb_ln: LnCache,
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerTrace>,
}

pub(crate) fn pad_to(seq: &TokenSequence, width: usize) -> TokenSequence {
    let mut padded = seq.clone();
    padded.ids.resize(width.max(seq.len()), PAD);
    padded.segment_ids.resize(width.max(seq.len()), 0);
    padded
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let h = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / h;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / h;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let h = dy.ncols() as f64;
    let dxhat = dy * gamma;
    let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
    let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
    let inner = dxhat * h - &sum_d - &cache.xhat * &sum_dx;
    inner * &(cache.inv_std.view().insert_axis(Axis(1)).mapv(|s| s / h))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn apply_mask(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

impl EncoderParams {
    fn check(&self, seq: &TokenSequence) -> Result<(), ModelError> {
        let cfg = &self.config;
        if seq.ids.is_empty() {
            return Err(ModelError::Empty);
        }
        if seq.segment_ids.len() != seq.ids.len() {
            return Err(ModelError::DimensionMismatch {
                expected: seq.ids.len(),
                found: seq.segment_ids.len(),
            });
        }
        if seq.len() > cfg.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: seq.len(),
                max: cfg.max_positions,
            });
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        if let Some(&id) = seq.segment_ids.iter().find(|&&s| s as usize >= cfg.segments) {
            return Err(ModelError::SegmentOutOfRange {
                id,
                segments: cfg.segments,
            });
        }
        Ok(())
    }

    pub fn forward(&self, seq: &TokenSequence, mode: &mut Mode<'_>) -> Result<EncoderOutput, ModelError> {
        self.run(seq, mode).map(|(out, _)| out)
    }

    pub fn forward_trace(
        &self,
        seq: &TokenSequence,
        mode: &mut Mode<'_>,
    ) -> Result<(EncoderOutput, Trace), ModelError> {
        self.run(seq, mode)
    }

    fn run(&self, seq: &TokenSequence, mode: &mut Mode<'_>) -> Result<(EncoderOutput, Trace), ModelError> {
        self.check(seq)?;
        let cfg = &self.config;
        let (n, h) = (seq.len(), cfg.hidden);
        let mut e = Array2::zeros((n, h));
        for (i, (&id, &sg)) in seq.ids.iter().zip(&seq.segment_ids).enumerate() {
            let mut row = e.row_mut(i);
            row += &self.token_embedding.row(id as usize);
            row += &self.position_embedding.row(i);
            row += &self.segment_embedding.row(sg as usize);
        }
        let (x, emb_ln) = layer_norm(&e, &self.emb_ln_gamma, &self.emb_ln_beta);
        let emb_mask = mode.dropout_mask(cfg.dropout, n, h);
        let mut x = apply_mask(x, &emb_mask);
        let attendable: Vec<bool> = seq.ids.iter().map(|&id| id != PAD).collect();

        let mut layers = Vec::with_capacity(self.layers.len());
        for lp in &self.layers {
            let (out, trace) = self.layer_forward(lp, x, &attendable, mode);
            layers.push(trace);
            x = out;
        }
        let trace = Trace {
            ids: seq.ids.clone(),
            segments: seq.segment_ids.clone(),
            emb_ln,
            emb_mask,
            layers,
        };
        Ok((EncoderOutput { hidden: x }, trace))
    }

    fn layer_forward(
        &self,
        lp: &LayerParams,
        x: Array2<f64>,
        attendable: &[bool],
        mode: &mut Mode<'_>,
    ) -> (Array2<f64>, LayerTrace) {
        let cfg = &self.config;
        let (n, h, d) = (x.nrows(), cfg.hidden, cfg.head_dim());
        let scale = 1.0 / (d as f64).sqrt();
        let q = x.dot(&lp.wq) + &lp.bq;
        let k = x.dot(&lp.wk) + &lp.bk;
        let v = x.dot(&lp.wv) + &lp.bv;
        let mut ctx = Array2::zeros((n, h));
        let mut probs = Vec::with_capacity(cfg.heads);
        for a in 0..cfg.heads {
            let cols = s![.., a * d..(a + 1) * d];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in p.rows_mut() {
                let max = row
                    .iter()
                    .zip(attendable)
                    .filter(|(_, &ok)| ok)
                    .map(|(&s, _)| s)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (s, &ok) in row.iter_mut().zip(attendable) {
                    *s = if ok { (*s - max).exp() } else { 0.0 };
                    z += *s;
                }
                row /= z;
            }
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let attn_mask = mode.dropout_mask(cfg.dropout, n, h);
        let attn = apply_mask(ctx.dot(&lp.wo) + &lp.bo, &attn_mask);
        let (y, ln1) = layer_norm(&(&x + &attn), &lp.ln1_gamma, &lp.ln1_beta);
        let f1 = y.dot(&lp.w1) + &lp.b1;
        let g = f1.mapv(gelu);
        let ffn_mask = mode.dropout_mask(cfg.dropout, n, h);
        let f2 = apply_mask(g.dot(&lp.w2) + &lp.b2, &ffn_mask);
        let (out, ln2) = layer_norm(&(&y + &f2), &lp.ln2_gamma, &lp.ln2_beta);
        let trace = LayerTrace {
            x,
            q,
            k,
            v,
            probs,
            ctx,
            attn_mask,
            ln1,
            y,
            f1,
            g,
            ffn_mask,
            ln2,
        };
        (out, trace)
    }

    /// Accumulates into `grads` the gradient of a scalar loss whose
    /// derivative with respect to the final hidden states is `d_hidden`.
    pub fn backward(&self, trace: &Trace, d_hidden: &Array2<f64>, grads: &mut EncoderParams) {
        let cfg = &self.config;
        let d_head = cfg.head_dim();
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut d = d_hidden.clone();
        for ((lp, lt), lg) in self.layers.iter().zip(&trace.layers).zip(grads.layers.iter_mut()).rev() {
            let d_r2 = layer_norm_backward(&d, &lt.ln2, &lp.ln2_gamma, &mut lg.ln2_gamma, &mut lg.ln2_beta);
            let d_f2 = apply_mask(d_r2.clone(), &lt.ffn_mask);
            lg.b2 += &d_f2.sum_axis(Axis(0));
            lg.w2 += &lt.g.t().dot(&d_f2);
            let d_g = d_f2.dot(&lp.w2.t());
            let d_f1 = d_g * &lt.f1.mapv(gelu_grad);
            lg.b1 += &d_f1.sum_axis(Axis(0));
            lg.w1 += &lt.y.t().dot(&d_f1);
            let d_y = d_r2 + d_f1.dot(&lp.w1.t());

            let d_r1 = layer_norm_backward(&d_y, &lt.ln1, &lp.ln1_gamma, &mut lg.ln1_gamma, &mut lg.ln1_beta);
            let d_attn = apply_mask(d_r1.clone(), &lt.attn_mask);
            lg.bo += &d_attn.sum_axis(Axis(0));
            lg.wo += &lt.ctx.t().dot(&d_attn);
            let d_ctx = d_attn.dot(&lp.wo.t());

            let (n, h) = lt.x.dim();
            let mut d_q = Array2::zeros((n, h));
            let mut d_k = Array2::zeros((n, h));
            let mut d_v = Array2::zeros((n, h));
            for (a, p) in lt.probs.iter().enumerate() {
                let cols = s![.., a * d_head..(a + 1) * d_head];
                let d_ctx_a = d_ctx.slice(cols);
                let d_p = d_ctx_a.dot(&lt.v.slice(cols).t());
                d_v.slice_mut(cols).assign(&p.t().dot(&d_ctx_a));
                let row_dot = (p * &d_p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let d_s = (p * &(d_p - &row_dot)) * scale;
                d_q.slice_mut(cols).assign(&d_s.dot(&lt.k.slice(cols)));
                d_k.slice_mut(cols).assign(&d_s.t().dot(&lt.q.slice(cols)));
            }
            lg.bq += &d_q.sum_axis(Axis(0));
            lg.bk += &d_k.sum_axis(Axis(0));
            lg.bv += &d_v.sum_axis(Axis(0));
            lg.wq += &lt.x.t().dot(&d_q);
            lg.wk += &lt.x.t().dot(&d_k);
            lg.wv += &lt.x.t().dot(&d_v);
            d = d_r1 + d_q.dot(&lp.wq.t()) + d_k.dot(&lp.wk.t()) + d_v.dot(&lp.wv.t());
        }

        let d_x = apply_mask(d, &trace.emb_mask);
        let d_e = layer_norm_backward(
            &d_x,
            &trace.emb_ln,
            &self.emb_ln_gamma,
            &mut grads.emb_ln_gamma,
            &mut grads.emb_ln_beta,
        );
        for (i, (&id, &sg)) in trace.ids.iter().zip(&trace.segments).enumerate() {
            let row = d_e.row(i);
            grads.token_embedding.row_mut(id as usize).scaled_add(1.0, &row);
            grads.position_embedding.row_mut(i).scaled_add(1.0, &row);
            grads.segment_embedding.row_mut(sg as usize).scaled_add(1.0, &row);
        }
    }
}
