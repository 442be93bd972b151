use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::decode::argmax;
use super::forward::{forward_batch, gelu_grad, LnCache};
use super::{lit, ModelParams, Scalar};
use crate::error::{Error, Result};

/// Gradients share the parameter layout.
pub type Gradients<F> = ModelParams<F>;

/// Mean cross-entropy over rows with `mask[row]`, and its gradient w.r.t. the logits.
pub fn cross_entropy<F: Scalar>(
    logits: ArrayView2<F>,
    targets: &[u8],
    mask: &[bool],
) -> Result<(F, Array2<F>)> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Config("loss mask selects no positions".into()));
    }
    let inv = F::one() / lit::<F>(count as f64);
    let mut dlogits = Array2::zeros(logits.dim());
    let mut total = F::zero();
    for (r, row) in logits.axis_iter(Axis(0)).enumerate() {
        if !mask[r] {
            continue;
        }
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        let t = targets[r] as usize;
        total += log_z - row[t];
        let mut drow = dlogits.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            drow[c] = (v - log_z).exp() * inv;
        }
        drow[t] -= inv;
    }
    Ok((total * inv, dlogits))
}

fn ln_backward<F: Scalar>(
    dy: ArrayView2<F>,
    cache: &LnCache<F>,
    scale: &Array1<F>,
    dscale: &mut Array1<F>,
    dshift: &mut Array1<F>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    let inv_d = F::one() / lit::<F>(d as f64);
    let mut dx = Array2::zeros((n, d));
    let mut dxhat = vec![F::zero(); d];
    for r in 0..n {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for c in 0..d {
            dscale[c] += dyr[c] * xh[c];
            dshift[c] += dyr[c];
            dxhat[c] = dyr[c] * scale[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[[r, c]] = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

/// `y = x W^T + b`: accumulates `dW += dy^T x`, `db += colsum(dy)`, returns `dx = dy W`.
fn linear_backward<F: Scalar>(
    dy: ArrayView2<F>,
    x: ArrayView2<F>,
    w: &Array2<F>,
    dw: &mut Array2<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    *dw += &dy.t().dot(&x);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(w)
}

/// Next-token cross-entropy and exact gradients for every parameter.
///
/// `tokens` holds `batch` sequences of `seq` tokens; the model reads the first
/// `seq - 1` tokens of each and predicts tokens `1..seq`. `mask[p]` selects
/// whether input position `p` (target `p + 1`) contributes to the loss.
/// Reduction order is fixed, so results are bit-reproducible.
pub fn loss_and_grad<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[u8],
    batch: usize,
    seq: usize,
    mask: &[bool],
) -> Result<(F, Gradients<F>)> {
    loss_grad_hits(params, tokens, batch, seq, mask).map(|(loss, g, _)| (loss, g))
}

/// [`loss_and_grad`] plus, per sequence, whether the argmax prediction was
/// right at every masked position (teacher-forced exact match).
pub(crate) fn loss_grad_hits<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[u8],
    batch: usize,
    seq: usize,
    mask: &[bool],
) -> Result<(F, Gradients<F>, Vec<bool>)> {
    if batch == 0 || seq < 2 {
        return Err(Error::Input("batch must hold at least one sequence of two tokens".into()));
    }
    if tokens.len() != batch * seq {
        return Err(Error::Input(format!("{} tokens do not form {batch} x {seq}", tokens.len())));
    }
    if mask.len() != seq - 1 {
        return Err(Error::Config(format!("loss mask has {} entries, expected {}", mask.len(), seq - 1)));
    }
    let t = seq - 1;
    let mut inputs = Vec::with_capacity(batch * t);
    let mut targets = Vec::with_capacity(batch * t);
    for b in 0..batch {
        inputs.extend_from_slice(&tokens[b * seq..b * seq + t]);
        targets.extend_from_slice(&tokens[b * seq + 1..(b + 1) * seq]);
    }
    let row_mask: Vec<bool> = (0..batch).flat_map(|_| mask.iter().copied()).collect();

    let cache = forward_batch(params, &inputs, batch, t)?;
    let (loss, dlogits) = cross_entropy(cache.logits.view(), &targets, &row_mask)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss}; max |logit| = {}",
            cache.logits.iter().fold(F::zero(), |m, v| m.max(v.abs()))
        )));
    }

    let hits = (0..batch)
        .map(|b| {
            (0..t).all(|p| !mask[p] || argmax(cache.logits.row(b * t + p).iter().copied()) == targets[b * t + p])
        })
        .collect();

    let cfg = &params.config;
    let n_heads = cfg.n_heads;
    let dh = cfg.d_head();
    let scale = F::one() / lit::<F>(dh as f64).sqrt();
    let mut g = ModelParams::<F>::zeros(cfg)?;

    // tied unembedding: logits = hf E^T
    g.tok_emb += &dlogits.t().dot(&cache.hf);
    let dhf = dlogits.dot(&params.tok_emb);
    let mut dx = ln_backward(
        dhf.view(),
        &cache.lnf,
        &params.lnf_scale,
        &mut g.lnf_scale,
        &mut g.lnf_shift,
    );

    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let p = &params.layers[l];
        let gl = &mut g.layers[l];

        let dx_mid = match (&p.mlp, &mut gl.mlp, &lc.mlp) {
            (Some(mp), Some(gm), Some(mc)) => {
                let dact = linear_backward(dx.view(), mc.act.view(), &mp.w_proj, &mut gm.w_proj, &mut gm.b_proj);
                let dpre = &dact * &mc.pre.mapv(gelu_grad);
                let dh2 = linear_backward(dpre.view(), mc.h2.view(), &mp.w_fc, &mut gm.w_fc, &mut gm.b_fc);
                &dx + &ln_backward(dh2.view(), &mc.ln2, &mp.ln2_scale, &mut gm.ln2_scale, &mut gm.ln2_shift)
            }
            _ => dx,
        };

        let da = linear_backward(dx_mid.view(), lc.a.view(), &p.w_o, &mut gl.w_o, &mut gl.b_o);
        let n = batch * t;
        let d = cfg.d_model;
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for b in 0..batch {
            let rows = b * t..(b + 1) * t;
            for head in 0..n_heads {
                let cols = head * dh..(head + 1) * dh;
                let pat = &lc.patterns[b * n_heads + head];
                let da_s = da.slice(s![rows.clone(), cols.clone()]);
                let q_s = lc.q.slice(s![rows.clone(), cols.clone()]);
                let k_s = lc.k.slice(s![rows.clone(), cols.clone()]);
                let v_s = lc.v.slice(s![rows.clone(), cols.clone()]);
                let dp = da_s.dot(&v_s.t());
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&pat.t().dot(&da_s));
                // softmax backward; masked entries have pat == 0 and stay zero
                let mut ds = &dp * pat;
                for (i, mut row) in ds.axis_iter_mut(Axis(0)).enumerate() {
                    let dot = row.sum();
                    for j in 0..=i {
                        row[j] = row[j] - pat[[i, j]] * dot;
                    }
                }
                ds *= scale;
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&k_s));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&q_s));
            }
        }
        let mut dh_total = linear_backward(dq.view(), lc.h.view(), &p.w_q, &mut gl.w_q, &mut gl.b_q);
        dh_total += &linear_backward(dk.view(), lc.h.view(), &p.w_k, &mut gl.w_k, &mut gl.b_k);
        dh_total += &linear_backward(dv.view(), lc.h.view(), &p.w_v, &mut gl.w_v, &mut gl.b_v);
        dx = &dx_mid
            + &ln_backward(
                dh_total.view(),
                &lc.ln1,
                &p.ln1_scale,
                &mut gl.ln1_scale,
                &mut gl.ln1_shift,
            );
    }

    for (r, &tok) in inputs.iter().enumerate() {
        let row = dx.row(r);
        let mut te = g.tok_emb.row_mut(tok as usize);
        te += &row;
        let mut pe = g.pos_emb.row_mut(r % t);
        pe += &row;
    }
    Ok((loss, g, hits))
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_vocab() {
        let logits = Array2::<f64>::zeros((3, 28));
        let (loss, _) = cross_entropy(logits.view(), &[1, 2, 3], &[true, true, true]).unwrap();
        assert!((loss - 28f64.ln()).abs() < 1e-12);
        assert!((loss - 3.332).abs() < 1e-3);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let mut logits = Array2::<f64>::zeros((2, 28));
        logits[[0, 4]] = 100.0;
        logits[[1, 9]] = 100.0;
        let (loss, _) = cross_entropy(logits.view(), &[4, 9], &[true, true]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn masked_rows_do_not_matter() {
        let mut logits = Array2::<f64>::zeros((2, 28));
        let (before, _) = cross_entropy(logits.view(), &[4, 9], &[false, true]).unwrap();
        logits[[0, 3]] = 42.0;
        let (after, grad) = cross_entropy(logits.view(), &[4, 9], &[false, true]).unwrap();
        assert_eq!(before, after);
        assert!(grad.row(0).iter().all(|&g| g == 0.0));
        assert!(matches!(
            cross_entropy(logits.view(), &[4, 9], &[false, false]),
            Err(Error::Config(_))
        ));
    }

    fn toy() -> ModelParams<f64> {
        let cfg = ModelConfig {
            d_model: 8,
            context_len: 12,
            ..ModelConfig::default()
        };
        ModelParams::<f64>::init(&cfg, 5).unwrap()
    }

    #[test]
    fn zero_output_projection_blocks_attention_gradients() {
        let mut p = toy();
        for layer in &mut p.layers {
            layer.w_o.fill(0.0);
        }
        let tokens: Vec<u8> = (0..20).map(|i| (i * 7 % 28) as u8).collect();
        let (_, g) = loss_and_grad(&p, &tokens, 2, 10, &[true; 9]).unwrap();
        for gl in &g.layers {
            for w in [&gl.w_q, &gl.w_k, &gl.w_v] {
                assert!(w.iter().all(|&x| x == 0.0));
            }
            assert!(gl.ln1_scale.iter().all(|&x| x == 0.0));
            assert!(gl.w_o.iter().any(|&x| x != 0.0));
        }
        assert!(g.tok_emb.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn unused_position_rows_get_no_gradient() {
        let p = toy();
        let tokens: Vec<u8> = (0..8).map(|i| (i * 5 % 28) as u8).collect();
        let (_, g) = loss_and_grad(&p, &tokens, 1, 8, &[true; 7]).unwrap();
        for row in 7..12 {
            assert!(g.pos_emb.row(row).iter().all(|&x| x == 0.0));
        }
        assert!(g.pos_emb.row(6).iter().any(|&x| x != 0.0));
    }
}
