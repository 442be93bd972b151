//! Inspection of trained models: residual decoding, attention links,
//! dataset-averaged attention and Q/K/V retro-projection.
//!
//! Layers are numbered from 1 in everything this module returns.

mod circuit;
mod pinv;

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ActivationTrace, ModelParams, Projection};
use crate::vocab;

pub use circuit::{
    circuit_report, dataset_circuit_stats, CheckResult, CircuitReport, CircuitStats, LinkClass, ReportThresholds,
    TargetReport,
};
pub use pinv::{retained_rank, truncated_pinv, truncated_pinv_f64, MatrixTag, TruncatedPinv};

/// Tokens shown per decoded vector.
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedToken {
    pub token: char,
    pub logit: f32,
    /// 1-based.
    pub rank: usize,
}

/// Final norm plus tied unembedding applied to one residual vector; the
/// `top_k` highest logits, ties broken by token id.
pub fn logit_lens(params: &ModelParams<f32>, residual: ArrayView1<f32>, top_k: usize) -> Result<Vec<DecodedToken>> {
    let vocab_size = params.config.vocab_size;
    if top_k > vocab_size {
        return Err(Error::Input(format!("top_k {top_k} exceeds the vocabulary of {vocab_size}")));
    }
    if residual.len() != params.config.d_model {
        return Err(Error::Input(format!(
            "residual has {} entries, model width is {}",
            residual.len(),
            params.config.d_model
        )));
    }
    let row = residual.insert_axis(Axis(0));
    let (normed, _) = model::layer_norm(row, &params.lnf_scale, &params.lnf_shift);
    let logits = params.tok_emb.dot(&normed.row(0));
    Ok(rank_logits(logits.view(), top_k))
}

/// Top-`k` entries of a logit vector.
pub fn rank_logits(logits: ArrayView1<f32>, top_k: usize) -> Vec<DecodedToken> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.into_iter()
        .take(top_k)
        .enumerate()
        .map(|(r, id)| DecodedToken {
            token: vocab::token_char(id as u8).unwrap_or('?'),
            logit: logits[id],
            rank: r + 1,
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QkvDecoding {
    pub q: Vec<DecodedToken>,
    pub k: Vec<DecodedToken>,
    pub v: Vec<DecodedToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLink {
    /// 1-based.
    pub layer: usize,
    pub head: usize,
    pub src: usize,
    pub dst: usize,
    pub strength: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoded: Option<QkvDecoding>,
}

/// Links of one head's `[seq, seq]` pattern, ordered by destination then source.
pub fn links_from_pattern(
    pattern: &Array2<f32>,
    layer: usize,
    head: usize,
    threshold: f32,
    dst_filter: Option<&[usize]>,
) -> Vec<AttentionLink> {
    let mut out = Vec::new();
    for (dst, row) in pattern.outer_iter().enumerate() {
        if dst_filter.is_some_and(|f| !f.contains(&dst)) {
            continue;
        }
        for (src, &strength) in row.iter().enumerate().take(dst + 1) {
            if strength >= threshold {
                out.push(AttentionLink {
                    layer,
                    head,
                    src,
                    dst,
                    strength,
                    decoded: None,
                });
            }
        }
    }
    out
}

/// Every causal (src, dst) pair of `layer` (1-based) with strength at least
/// `threshold`, optionally only into the positions of `dst_filter`.
pub fn attention_links(
    trace: &ActivationTrace,
    layer: usize,
    threshold: f32,
    dst_filter: Option<&[usize]>,
) -> Result<Vec<AttentionLink>> {
    let lt = layer
        .checked_sub(1)
        .and_then(|l| trace.layers.get(l))
        .ok_or_else(|| Error::Input(format!("layer {layer} not in 1..={}", trace.layers.len())))?;
    Ok(lt
        .patterns
        .iter()
        .enumerate()
        .flat_map(|(head, p)| links_from_pattern(p, layer, head, threshold, dst_filter))
        .collect())
}

/// Forward pass with activation capture.
pub fn trace(params: &ModelParams<f32>, tokens: &[u8]) -> Result<ActivationTrace> {
    let (_, trace) = model::forward(params, tokens, true)?;
    Ok(trace.expect("capture requested"))
}

/// Mean attention pattern per layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedAttention {
    pub count: usize,
    /// `[layer][head]`, each `[seq, seq]`.
    pub layers: Vec<Vec<Array2<f32>>>,
}

impl AveragedAttention {
    pub fn links(&self, layer: usize, threshold: f32, dst_filter: Option<&[usize]>) -> Result<Vec<AttentionLink>> {
        let heads = layer
            .checked_sub(1)
            .and_then(|l| self.layers.get(l))
            .ok_or_else(|| Error::Input(format!("layer {layer} not in 1..={}", self.layers.len())))?;
        Ok(heads
            .iter()
            .enumerate()
            .flat_map(|(head, p)| links_from_pattern(p, layer, head, threshold, dst_filter))
            .collect())
    }

    pub fn all_links(&self, threshold: f32, dst_filter: Option<&[usize]>) -> Vec<AttentionLink> {
        (1..=self.layers.len())
            .flat_map(|l| self.links(l, threshold, dst_filter).expect("layer in range"))
            .collect()
    }
}

/// Element-wise mean of the attention patterns of equally long sequences.
pub fn average_attention(params: &ModelParams<f32>, sequences: &[Vec<u8>]) -> Result<AveragedAttention> {
    let first = sequences
        .first()
        .ok_or_else(|| Error::Input("averaging needs at least one sequence".into()))?;
    let seq = first.len();
    if sequences.iter().any(|s| s.len() != seq) {
        return Err(Error::Input("sequences of different lengths cannot be averaged".into()));
    }
    let cfg = &params.config;
    let mut sums = vec![vec![Array2::<f64>::zeros((seq, seq)); cfg.n_heads]; cfg.n_layers];
    for chunk in sequences.chunks(128) {
        let flat: Vec<u8> = chunk.concat();
        let cache = model::forward_batch(params, &flat, chunk.len(), seq)?;
        for (l, lc) in cache.layers.iter().enumerate() {
            for (i, p) in lc.patterns.iter().enumerate() {
                sums[l][i % cfg.n_heads].zip_mut_with(p, |acc, &x| *acc += f64::from(x));
            }
        }
    }
    let n = sequences.len() as f64;
    Ok(AveragedAttention {
        count: sequences.len(),
        layers: sums
            .into_iter()
            .map(|heads| heads.into_iter().map(|h| h.mapv(|x| (x / n) as f32)).collect())
            .collect(),
    })
}

/// Links whose averaged strength over `sequences` exceeds `threshold`: the
/// positional skeleton that survives averaging away token content.
pub fn token_independent_links(
    params: &ModelParams<f32>,
    sequences: &[Vec<u8>],
    threshold: f32,
    dst_filter: Option<&[usize]>,
) -> Result<Vec<AttentionLink>> {
    if sequences.len() < 2 {
        return Err(Error::Input("token independence needs at least two sequences".into()));
    }
    let avg = average_attention(params, sequences)?;
    Ok(avg
        .all_links(threshold, dst_filter)
        .into_iter()
        .filter(|l| l.strength > threshold)
        .collect())
}

/// Cumulative singular-value fractions kept when retro-projecting each projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SThresholds {
    pub q: f64,
    pub k: f64,
    pub v: f64,
}

impl Default for SThresholds {
    fn default() -> Self {
        SThresholds { q: 0.80, k: 0.97, v: 0.80 }
    }
}

impl SThresholds {
    pub fn get(&self, p: Projection) -> f64 {
        match p {
            Projection::Q => self.q,
            Projection::K => self.k,
            Projection::V => self.v,
        }
    }
}

/// Memoized pseudoinverses of one parameter set.
#[derive(Debug, Default)]
pub struct PinvCache {
    entries: HashMap<(MatrixTag, u64), Arc<TruncatedPinv>>,
}

impl PinvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pseudoinverse of one head's rows of `W_Q`, `W_K` or `W_V` in `layer` (1-based).
    pub fn get(&mut self, params: &ModelParams<f32>, tag: MatrixTag, threshold: f64) -> Result<Arc<TruncatedPinv>> {
        if let Some(p) = self.entries.get(&(tag, threshold.to_bits())) {
            return Ok(p.clone());
        }
        let w = head_weight(params, tag)?;
        let mut p = truncated_pinv(w.view(), threshold)?;
        p.tag = Some(tag);
        let p = Arc::new(p);
        self.entries.insert((tag, threshold.to_bits()), p.clone());
        Ok(p)
    }
}

fn layer_params(params: &ModelParams<f32>, layer: usize) -> Result<&model::LayerParams<f32>> {
    layer
        .checked_sub(1)
        .and_then(|l| params.layers.get(l))
        .ok_or_else(|| Error::Input(format!("layer {layer} not in 1..={}", params.layers.len())))
}

/// `[d_head, d_model]` rows of a projection belonging to one head.
pub fn head_weight(params: &ModelParams<f32>, tag: MatrixTag) -> Result<Array2<f32>> {
    let lp = layer_params(params, tag.layer)?;
    let dh = params.config.d_head();
    if tag.head >= params.config.n_heads {
        return Err(Error::Input(format!("head {} out of range", tag.head)));
    }
    let (w, _) = lp.projection(tag.projection);
    Ok(w.slice(s![tag.head * dh..(tag.head + 1) * dh, ..]).to_owned())
}

/// Retro-projects one head's projected vector (bias removed) at `pos` into
/// residual space.
pub fn retro_project(
    params: &ModelParams<f32>,
    trace: &ActivationTrace,
    tag: MatrixTag,
    pos: usize,
    threshold: f64,
    cache: &mut PinvCache,
) -> Result<Array1<f32>> {
    let lp = layer_params(params, tag.layer)?;
    let lt = &trace.layers[tag.layer - 1];
    if pos >= trace.tokens.len() {
        return Err(Error::Input(format!("position {pos} outside the trace")));
    }
    let dh = params.config.d_head();
    let cols = tag.head * dh..(tag.head + 1) * dh;
    let (projected, bias) = match tag.projection {
        Projection::Q => (&lt.q, &lp.b_q),
        Projection::K => (&lt.k, &lp.b_k),
        Projection::V => (&lt.v, &lp.b_v),
    };
    let y = &projected.slice(s![pos, cols.clone()]) - &bias.slice(s![cols]);
    let pinv = cache.get(params, tag, threshold)?;
    Ok(pinv.retro_project(y.view()))
}

/// Query at the link's destination, key and value at its source, each
/// retro-projected and decoded with the logit lens.
pub fn decode_qkv(
    params: &ModelParams<f32>,
    trace: &ActivationTrace,
    link: &AttentionLink,
    s: &SThresholds,
    top_k: usize,
    cache: &mut PinvCache,
) -> Result<QkvDecoding> {
    let mut decode = |projection, pos| -> Result<Vec<DecodedToken>> {
        let tag = MatrixTag {
            projection,
            layer: link.layer,
            head: link.head,
        };
        let r = retro_project(params, trace, tag, pos, s.get(projection), cache)?;
        logit_lens(params, r.view(), top_k)
    };
    Ok(QkvDecoding {
        q: decode(Projection::Q, link.dst)?,
        k: decode(Projection::K, link.src)?,
        v: decode(Projection::V, link.src)?,
    })
}

/// Retained ranks at the given thresholds for every layer and head.
pub fn retained_ranks(
    params: &ModelParams<f32>,
    s: &SThresholds,
    cache: &mut PinvCache,
) -> Result<Vec<(MatrixTag, usize)>> {
    let mut out = Vec::new();
    for layer in 1..=params.config.n_layers {
        for head in 0..params.config.n_heads {
            for projection in [Projection::Q, Projection::K, Projection::V] {
                let tag = MatrixTag { projection, layer, head };
                out.push((tag, cache.get(params, tag, s.get(projection))?.k));
            }
        }
    }
    Ok(out)
}
