//! Greedy autoregressive decoding with per-layer key/value buffers, so each
//! new position costs one row of work instead of a full re-run.

use ndarray::Array2;

use super::forward::{causal_softmax_row, embed_row, gelu, layer_norm, linear, unembed};
use super::{lit, ModelParams, Scalar};
use crate::error::{Error, Result};

struct Decoder<'a, F> {
    params: &'a ModelParams<F>,
    /// Per layer, `[batch, context_len, d_model]` row-major.
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    pos: usize,
}

impl<'a, F: Scalar> Decoder<'a, F> {
    fn new(params: &'a ModelParams<F>, batch: usize) -> Self {
        let cfg = &params.config;
        let len = batch * cfg.context_len * cfg.d_model;
        Decoder {
            params,
            keys: (0..cfg.n_layers).map(|_| vec![F::zero(); len]).collect(),
            values: (0..cfg.n_layers).map(|_| vec![F::zero(); len]).collect(),
            pos: 0,
        }
    }

    fn row_offset(&self, b: usize, pos: usize) -> usize {
        (b * self.params.config.context_len + pos) * self.params.config.d_model
    }

    /// Feeds one token per sequence and returns next-token logits `[batch, vocab]`.
    fn step(&mut self, tokens: &[u8]) -> Array2<F> {
        let p = self.params;
        let cfg = &p.config;
        let (batch, d, n_heads, dh) = (tokens.len(), cfg.d_model, cfg.n_heads, cfg.d_head());
        let scale = F::one() / lit::<F>(dh as f64).sqrt();
        let pos = self.pos;
        let mut x = Array2::zeros((batch, d));
        for (b, &tok) in tokens.iter().enumerate() {
            x.row_mut(b).assign(&embed_row(p, tok, pos));
        }
        let mut scores = vec![F::zero(); pos + 1];
        for (l, layer) in p.layers.iter().enumerate() {
            let (h, _) = layer_norm(x.view(), &layer.ln1_scale, &layer.ln1_shift);
            let q = linear(h.view(), &layer.w_q, &layer.b_q);
            let k_new = linear(h.view(), &layer.w_k, &layer.b_k);
            let v_new = linear(h.view(), &layer.w_v, &layer.b_v);
            let mut a = Array2::zeros((batch, d));
            for b in 0..batch {
                let base = self.row_offset(b, 0);
                let at = base + pos * d;
                for c in 0..d {
                    self.keys[l][at + c] = k_new[[b, c]];
                    self.values[l][at + c] = v_new[[b, c]];
                }
                let keys = &self.keys[l][base..base + (pos + 1) * d];
                let vals = &self.values[l][base..base + (pos + 1) * d];
                let qb = q.row(b);
                let qb = qb.as_slice().expect("standard layout");
                let mut ab = a.row_mut(b);
                let ab = ab.as_slice_mut().expect("standard layout");
                for head in 0..n_heads {
                    let c0 = head * dh;
                    let qh = &qb[c0..c0 + dh];
                    for (j, score) in scores.iter_mut().enumerate() {
                        let kj = &keys[j * d + c0..j * d + c0 + dh];
                        *score = dot(kj, qh);
                    }
                    causal_softmax_row(&mut scores, pos, scale);
                    let out = &mut ab[c0..c0 + dh];
                    for (j, &w) in scores.iter().enumerate() {
                        let vj = &vals[j * d + c0..j * d + c0 + dh];
                        for (o, &v) in out.iter_mut().zip(vj) {
                            *o += w * v;
                        }
                    }
                }
            }
            x = &x + &linear(a.view(), &layer.w_o, &layer.b_o);
            if let Some(mp) = &layer.mlp {
                let (h2, _) = layer_norm(x.view(), &mp.ln2_scale, &mp.ln2_shift);
                let act = linear(h2.view(), &mp.w_fc, &mp.b_fc).mapv(gelu);
                x = &x + &linear(act.view(), &mp.w_proj, &mp.b_proj);
            }
        }
        self.pos += 1;
        let (hf, _) = layer_norm(x.view(), &p.lnf_scale, &p.lnf_shift);
        unembed(p, hf.view())
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] += a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut total = acc.iter().fold(F::zero(), |s, &x| s + x);
    for i in chunks * 8..a.len() {
        total += a[i] * b[i];
    }
    total
}

/// Index of the largest logit; ties go to the lowest token id.
pub(crate) fn argmax<F: Scalar>(row: impl IntoIterator<Item = F>) -> u8 {
    let mut best = (0usize, F::neg_infinity());
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0 as u8
}

/// Greedy continuation of equally long prompts by exactly `steps` tokens.
///
/// Returns prompt plus continuation for each sequence.
pub fn generate_batch<F: Scalar>(params: &ModelParams<F>, prompts: &[Vec<u8>], steps: usize) -> Result<Vec<Vec<u8>>> {
    let Some(first) = prompts.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if len == 0 {
        return Err(Error::Input("empty prompt".into()));
    }
    if prompts.iter().any(|p| p.len() != len) {
        return Err(Error::Input("prompts in a batch must share one length".into()));
    }
    let cfg = &params.config;
    if len + steps > cfg.context_len {
        return Err(Error::Input(format!(
            "prompt {len} + {steps} steps exceeds context length {}",
            cfg.context_len
        )));
    }
    if let Some(bad) = prompts.iter().flatten().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {bad} is outside the vocabulary")));
    }
    let mut out: Vec<Vec<u8>> = prompts.to_vec();
    if steps == 0 {
        return Ok(out);
    }
    let mut decoder = Decoder::new(params, prompts.len());
    let mut logits = None;
    for p in 0..len {
        let column: Vec<u8> = prompts.iter().map(|s| s[p]).collect();
        logits = Some(decoder.step(&column));
    }
    let mut logits = logits.expect("non-empty prompt");
    for step in 0..steps {
        let next: Vec<u8> = logits.outer_iter().map(|row| argmax(row.iter().copied())).collect();
        for (seq, &tok) in out.iter_mut().zip(&next) {
            seq.push(tok);
        }
        if step + 1 < steps {
            logits = decoder.step(&next);
        }
    }
    Ok(out)
}

/// Greedy continuation of a single prompt.
pub fn generate<F: Scalar>(params: &ModelParams<F>, prompt: &[u8], steps: usize) -> Result<Vec<u8>> {
    Ok(generate_batch(params, &[prompt.to_vec()], steps)?.remove(0))
}
