use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{lit, LayerParams, ModelParams, Scalar};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Normalized inputs and reciprocal standard deviations, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LnCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

/// Row-wise layer normalization.
pub fn layer_norm<F: Scalar>(x: ArrayView2<F>, scale: &Array1<F>, shift: &Array1<F>) -> (Array2<F>, LnCache<F>) {
    let (n, d) = x.dim();
    let inv_d = F::one() / lit::<F>(d as f64);
    let eps = lit::<F>(LN_EPS);
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    let mut out = Array2::zeros((n, d));
    for r in 0..n {
        let row = x.row(r);
        let mean = row.sum() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[[r, c]] = xh;
            out[[r, c]] = xh * scale[c] + shift[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

pub(crate) fn linear<F: Scalar>(x: ArrayView2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

/// Causal softmax of `q k^T * scale`; entries above the diagonal are exactly zero.
pub fn attention_pattern<F: Scalar>(q: ArrayView2<F>, k: ArrayView2<F>, scale: F) -> Array2<F> {
    let mut scores = q.dot(&k.t());
    if !scores.is_standard_layout() {
        scores = scores.as_standard_layout().into_owned();
    }
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        causal_softmax_row(row.as_slice_mut().expect("contiguous"), i, scale);
    }
    scores
}

/// Softmax over `row[..=upto] * scale`, zeroing the rest.
pub(crate) fn causal_softmax_row<F: Scalar>(row: &mut [F], upto: usize, scale: F) {
    let max = row[..=upto]
        .iter()
        .fold(F::neg_infinity(), |m, &v| m.max(v * scale));
    let mut sum = F::zero();
    for v in row[..=upto].iter_mut() {
        *v = (*v * scale - max).exp();
        sum += *v;
    }
    for v in row[..=upto].iter_mut() {
        *v /= sum;
    }
    for v in row[upto + 1..].iter_mut() {
        *v = F::zero();
    }
}

/// `pattern * V`, the per-head mixture before the output projection.
pub fn attention_output<F: Scalar>(pattern: ArrayView2<F>, v: ArrayView2<F>) -> Array2<F> {
    pattern.dot(&v)
}

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = lit::<F>((2.0 / std::f64::consts::PI).sqrt());
    let half = lit::<F>(0.5);
    half * x * (F::one() + (c * (x + lit::<F>(0.044715) * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = lit::<F>((2.0 / std::f64::consts::PI).sqrt());
    let a = lit::<F>(0.044715);
    let half = lit::<F>(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + lit::<F>(3.0) * a * x * x)
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    pub ln2: LnCache<F>,
    pub h2: Array2<F>,
    pub pre: Array2<F>,
    pub act: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct LayerCache<F> {
    pub x_in: Array2<F>,
    pub ln1: LnCache<F>,
    pub h: Array2<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// One `[seq, seq]` pattern per (sequence, head), sequence-major.
    pub patterns: Vec<Array2<F>>,
    pub a: Array2<F>,
    pub x_mid: Array2<F>,
    pub mlp: Option<MlpCache<F>>,
    pub x_out: Array2<F>,
}

/// Everything the backward pass needs from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<u8>,
    pub layers: Vec<LayerCache<F>>,
    pub lnf: LnCache<F>,
    pub hf: Array2<F>,
    pub logits: Array2<F>,
}

fn check_tokens<F: Scalar>(params: &ModelParams<F>, tokens: &[u8], seq: usize) -> Result<()> {
    let cfg = &params.config;
    if seq == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    if seq > cfg.context_len {
        return Err(Error::Input(format!(
            "sequence length {seq} exceeds context length {}",
            cfg.context_len
        )));
    }
    if let Some(pos) = tokens.iter().position(|&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {} at {pos} is outside the vocabulary", tokens[pos])));
    }
    Ok(())
}

fn attention_block<F: Scalar>(
    layer: &LayerParams<F>,
    x_in: Array2<F>,
    batch: usize,
    seq: usize,
    n_heads: usize,
) -> LayerCache<F> {
    let d = x_in.ncols();
    let dh = d / n_heads;
    let scale = F::one() / lit::<F>(dh as f64).sqrt();
    let (h, ln1) = layer_norm(x_in.view(), &layer.ln1_scale, &layer.ln1_shift);
    let q = linear(h.view(), &layer.w_q, &layer.b_q);
    let k = linear(h.view(), &layer.w_k, &layer.b_k);
    let v = linear(h.view(), &layer.w_v, &layer.b_v);
    let mut a = Array2::zeros((batch * seq, d));
    let mut patterns = Vec::with_capacity(batch * n_heads);
    for b in 0..batch {
        let rows = b * seq..(b + 1) * seq;
        for head in 0..n_heads {
            let cols = head * dh..(head + 1) * dh;
            let qs = q.slice(s![rows.clone(), cols.clone()]);
            let ks = k.slice(s![rows.clone(), cols.clone()]);
            let vs = v.slice(s![rows.clone(), cols.clone()]);
            let pattern = attention_pattern(qs, ks, scale);
            a.slice_mut(s![rows.clone(), cols]).assign(&attention_output(pattern.view(), vs));
            patterns.push(pattern);
        }
    }
    let x_mid = &x_in + &linear(a.view(), &layer.w_o, &layer.b_o);
    let (mlp, x_out) = match &layer.mlp {
        Some(mp) => {
            let (h2, ln2) = layer_norm(x_mid.view(), &mp.ln2_scale, &mp.ln2_shift);
            let pre = linear(h2.view(), &mp.w_fc, &mp.b_fc);
            let act = pre.mapv(gelu);
            let x_out = &x_mid + &linear(act.view(), &mp.w_proj, &mp.b_proj);
            (Some(MlpCache { ln2, h2, pre, act }), x_out)
        }
        None => (None, x_mid.clone()),
    };
    LayerCache {
        x_in,
        ln1,
        h,
        q,
        k,
        v,
        patterns,
        a,
        x_mid,
        mlp,
        x_out,
    }
}

/// Token plus position embedding for one row.
pub(crate) fn embed_row<F: Scalar>(params: &ModelParams<F>, token: u8, pos: usize) -> Array1<F> {
    &params.tok_emb.row(token as usize) + &params.pos_emb.row(pos)
}

/// Batched forward over `batch` sequences of `seq` tokens, laid out row-major.
pub fn forward_batch<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[u8],
    batch: usize,
    seq: usize,
) -> Result<ForwardCache<F>> {
    if tokens.len() != batch * seq {
        return Err(Error::Input(format!(
            "{} tokens do not form {batch} sequences of {seq}",
            tokens.len()
        )));
    }
    check_tokens(params, tokens, seq)?;
    let d = params.config.d_model;
    let mut x = Array2::zeros((batch * seq, d));
    for (r, &tok) in tokens.iter().enumerate() {
        x.row_mut(r).assign(&embed_row(params, tok, r % seq));
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let cache = attention_block(layer, x, batch, seq, params.config.n_heads);
        x = cache.x_out.clone();
        layers.push(cache);
    }
    let (hf, lnf) = layer_norm(x.view(), &params.lnf_scale, &params.lnf_shift);
    let logits = unembed(params, hf.view());
    Ok(ForwardCache {
        batch,
        seq,
        tokens: tokens.to_vec(),
        layers,
        lnf,
        hf,
        logits,
    })
}

/// Tied unembedding of already-normalized rows.
pub(crate) fn unembed<F: Scalar>(params: &ModelParams<F>, hf: ArrayView2<F>) -> Array2<F> {
    hf.dot(&params.tok_emb.t())
}

#[cfg(test)]
pub(crate) fn unembed_row<F: Scalar>(params: &ModelParams<F>, hf: ndarray::ArrayView1<F>) -> Array1<F> {
    params.tok_emb.dot(&hf)
}

/// Captured activations of one layer for a single sequence.
#[derive(Debug, Clone)]
pub struct LayerTrace<F = f32> {
    /// Residual stream entering the block.
    pub resid_pre: Array2<F>,
    /// Residual stream leaving the block.
    pub resid_post: Array2<F>,
    /// `[seq, seq]` attention pattern per head.
    pub patterns: Vec<Array2<F>>,
    /// Projections including biases, all heads concatenated.
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct ActivationTrace<F = f32> {
    pub tokens: Vec<u8>,
    pub layers: Vec<LayerTrace<F>>,
    /// Residual after the final normalization, the input of the unembedding.
    pub final_norm: Array2<F>,
    pub logits: Array2<F>,
}

/// Forward pass over a single sequence; `capture` also returns the activation trace.
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[u8],
    capture: bool,
) -> Result<(Array2<F>, Option<ActivationTrace<F>>)> {
    let cache = forward_batch(params, tokens, 1, tokens.len())?;
    if !capture {
        return Ok((cache.logits, None));
    }
    let ForwardCache {
        layers, hf, logits, ..
    } = cache;
    let layers = layers
        .into_iter()
        .map(|l| LayerTrace {
            resid_pre: l.x_in,
            resid_post: l.x_out,
            patterns: l.patterns,
            q: l.q,
            k: l.k,
            v: l.v,
        })
        .collect();
    let trace = ActivationTrace {
        tokens: tokens.to_vec(),
        layers,
        final_norm: hf,
        logits: logits.clone(),
    };
    Ok((logits, Some(trace)))
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::vocab;
    use proptest::prelude::*;

    #[test]
    fn uniform_scores_give_uniform_rows() {
        let q = Array2::<f32>::zeros((5, 4));
        let k = Array2::<f32>::from_elem((5, 4), 0.3);
        let p = attention_pattern(q.view(), k.view(), 0.5);
        for i in 0..5 {
            for j in 0..5 {
                let want = if j <= i { 1.0 / (i as f32 + 1.0) } else { 0.0 };
                assert!((p[[i, j]] - want).abs() < 1e-7);
            }
        }
        let single = attention_pattern(Array2::<f32>::ones((1, 3)).view(), Array2::<f32>::ones((1, 3)).view(), 1.0);
        assert_eq!(single, ndarray::arr2(&[[1.0f32]]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn pattern_rows_are_causal_distributions(
            t in 1usize..12,
            d in 1usize..9,
            vals in prop::collection::vec(-4.0f32..4.0, 2 * 12 * 8),
        ) {
            let q = Array2::from_shape_fn((t, d), |(i, j)| vals[i * d + j]);
            let k = Array2::from_shape_fn((t, d), |(i, j)| vals[96 + i * d + j]);
            let p = attention_pattern(q.view(), k.view(), 1.0 / (d as f32).sqrt());
            for i in 0..t {
                let sum: f32 = p.row(i).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                for j in i + 1..t {
                    prop_assert_eq!(p[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn forward_shapes_and_trace_consistency() {
        let params = ModelParams::<f32>::init(&ModelConfig::default(), 1).unwrap();
        let ids = vocab::encode("@C>D,A>B,B>C,E>F,D>E|A>F").unwrap();
        let (logits, trace) = forward(&params, &ids, true).unwrap();
        assert_eq!(logits.dim(), (24, 28));
        let trace = trace.unwrap();
        assert_eq!(trace.layers.len(), 2);
        for layer in &trace.layers {
            let p = &layer.patterns[0];
            for i in 0..24 {
                assert!((p.row(i).sum() - 1.0).abs() <= 1e-6);
                assert!(p.row(i).iter().skip(i + 1).all(|&x| x == 0.0));
            }
        }
        let (renorm, _) = layer_norm(
            trace.layers[1].resid_post.view(),
            &params.lnf_scale,
            &params.lnf_shift,
        );
        assert_eq!(renorm, trace.final_norm);
        assert_eq!(unembed(&params, trace.final_norm.view()), logits);
        // tied weights: logit of token t is the dot product with embedding row t
        let r = trace.final_norm.row(7);
        for t in 0..28 {
            let dot: f32 = r.dot(&params.tok_emb.row(t));
            assert_eq!(dot, unembed_row(&params, r)[t]);
        }
        let (again, none) = forward(&params, &ids, false).unwrap();
        assert!(none.is_none());
        assert_eq!(again, logits);
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = ModelParams::<f32>::init(&ModelConfig::default(), 1).unwrap();
        assert!(matches!(forward(&params, &[0u8; 46], false), Err(Error::Input(_))));
        assert!(matches!(forward(&params, &[28u8], false), Err(Error::Input(_))));
        assert!(matches!(forward(&params, &[], false), Err(Error::Input(_))));
    }

    #[test]
    fn batched_rows_match_single_forward() {
        let params = ModelParams::<f32>::init(&ModelConfig::default(), 3).unwrap();
        let a = vocab::encode("@C>D,A>B,B>C,E>F,D>E|A>F").unwrap();
        let b = vocab::encode("@E>F,C>K,B>C,A>B,D>E|A>F").unwrap();
        let cache = forward_batch(&params, &[a.clone(), b.clone()].concat(), 2, 24).unwrap();
        let (la, _) = forward(&params, &a, false).unwrap();
        let (lb, _) = forward(&params, &b, false).unwrap();
        let close = |x: ArrayView2<f32>, y: &Array2<f32>| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-5);
        assert!(close(cache.logits.slice(s![..24, ..]), &la));
        assert!(close(cache.logits.slice(s![24.., ..]), &lb));
    }
}
