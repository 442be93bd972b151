//! Tiny decoder-only transformer: tied token embedding, learned positions,
//! pre-norm attention blocks (MLP optional, off by default), final norm and a
//! tied unembedding.
//!
//! Linear weights are stored `[out, in]` and applied to row vectors as
//! `y = x W^T + b`, so `W_Q` maps a residual column vector `h` to `W_Q h`.

mod backward;
mod decode;
mod forward;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array, Array1, Array2, Dimension};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{self, VOCAB_SIZE};

pub(crate) use backward::loss_grad_hits;
pub use backward::{cross_entropy, loss_and_grad, Gradients};
pub use decode::{generate, generate_batch};
pub use forward::{
    attention_output, attention_pattern, forward, forward_batch, layer_norm, ActivationTrace, ForwardCache,
    LayerTrace, LN_EPS,
};

/// Floating-point element type of the model (`f32` in production, `f64` for gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ndarray::LinalgScalar
        + ndarray::ScalarOperand
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

pub(crate) fn lit<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub mlp_enabled: bool,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 2,
            n_heads: 1,
            context_len: 45,
            vocab_size: VOCAB_SIZE,
            mlp_enabled: false,
            d_ff: 512,
        }
    }
}

impl ModelConfig {
    /// Six-layer, eight-head, MLP-equipped configuration of the original nanoGPT
    /// character model at `d_model = 64`.
    pub fn nanogpt_reference() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 6,
            n_heads: 8,
            mlp_enabled: true,
            d_ff: 256,
            ..ModelConfig::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.context_len == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size must be {VOCAB_SIZE}, got {}",
                self.vocab_size
            )));
        }
        if self.mlp_enabled && self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive when the MLP is enabled".into()));
        }
        Ok(())
    }

    /// Checks that a sequence layout fits the positional table.
    pub fn check_layout(&self, layout: &vocab::Layout) -> Result<()> {
        if layout.seq_len() > self.context_len {
            return Err(Error::Config(format!(
                "sequence length {} exceeds context_len {}",
                layout.seq_len(),
                self.context_len
            )));
        }
        Ok(())
    }
}

/// Per-tensor learnable parameter counts, tied embedding counted once.
pub fn param_breakdown(config: &ModelConfig) -> Vec<(String, usize)> {
    let d = config.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), config.vocab_size * d),
        ("pos_emb".to_string(), config.context_len * d),
    ];
    for l in 0..config.n_layers {
        out.push((format!("blocks.{l}.ln1"), 2 * d));
        out.push((format!("blocks.{l}.attn.qkvo"), 4 * (d * d + d)));
        if config.mlp_enabled {
            out.push((format!("blocks.{l}.ln2"), 2 * d));
            out.push((format!("blocks.{l}.mlp"), 2 * d * config.d_ff + config.d_ff + d));
        }
    }
    out.push(("ln_f".to_string(), 2 * d));
    out
}

pub fn param_count(config: &ModelConfig) -> usize {
    param_breakdown(config).iter().map(|(_, n)| n).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F> {
    pub ln2_scale: Array1<F>,
    pub ln2_shift: Array1<F>,
    pub w_fc: Array2<F>,
    pub b_fc: Array1<F>,
    pub w_proj: Array2<F>,
    pub b_proj: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_scale: Array1<F>,
    pub ln1_shift: Array1<F>,
    pub w_q: Array2<F>,
    pub b_q: Array1<F>,
    pub w_k: Array2<F>,
    pub b_k: Array1<F>,
    pub w_v: Array2<F>,
    pub b_v: Array1<F>,
    pub w_o: Array2<F>,
    pub b_o: Array1<F>,
    pub mlp: Option<MlpParams<F>>,
}

/// Which attention projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
    V,
}

impl<F: Scalar> LayerParams<F> {
    pub fn projection(&self, which: Projection) -> (&Array2<F>, &Array1<F>) {
        match which {
            Projection::Q => (&self.w_q, &self.b_q),
            Projection::K => (&self.w_k, &self.b_k),
            Projection::V => (&self.w_v, &self.b_v),
        }
    }
}

/// All learnable tensors. The unembedding is `tok_emb^T`; no separate tensor exists.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F = f32> {
    pub config: ModelConfig,
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_scale: Array1<F>,
    pub lnf_shift: Array1<F>,
}

fn named<'a, F, D: Dimension>(name: String, a: &'a Array<F, D>) -> (String, Vec<usize>, &'a [F]) {
    (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
}

fn named_mut<F, D: Dimension>(a: &mut Array<F, D>) -> &mut [F] {
    a.as_slice_mut().expect("standard layout")
}

impl<F: Scalar> ModelParams<F> {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::filled(config, F::zero(), F::zero())
    }

    fn filled(config: &ModelConfig, weight: F, scale: F) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mat = |r, c| Array2::from_elem((r, c), weight);
        let vec0 = |n| Array1::from_elem(n, F::zero());
        let ones = |n| Array1::from_elem(n, scale);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_scale: ones(d),
                ln1_shift: vec0(d),
                w_q: mat(d, d),
                b_q: vec0(d),
                w_k: mat(d, d),
                b_k: vec0(d),
                w_v: mat(d, d),
                b_v: vec0(d),
                w_o: mat(d, d),
                b_o: vec0(d),
                mlp: config.mlp_enabled.then(|| MlpParams {
                    ln2_scale: ones(d),
                    ln2_shift: vec0(d),
                    w_fc: mat(config.d_ff, d),
                    b_fc: vec0(config.d_ff),
                    w_proj: mat(d, config.d_ff),
                    b_proj: vec0(d),
                }),
            })
            .collect();
        Ok(ModelParams {
            config: *config,
            tok_emb: mat(config.vocab_size, d),
            pos_emb: mat(config.context_len, d),
            layers,
            lnf_scale: ones(d),
            lnf_shift: vec0(d),
        })
    }

    /// Gaussian(0, 0.02^2) weights, zero biases, unit norm scales.
    ///
    /// Weights are drawn in [`ModelParams::tensors`] order from a ChaCha8 stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::filled(config, F::zero(), F::one())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid normal");
        for (name, data) in params.tensors_mut() {
            if is_weight(&name) {
                for x in data.iter_mut() {
                    *x = lit(normal.sample(&mut rng));
                }
            }
        }
        Ok(params)
    }

    /// Tensors in canonical order with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out = vec![
            named("tok_emb".into(), &self.tok_emb),
            named("pos_emb".into(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.push(named(p("ln1.scale"), &layer.ln1_scale));
            out.push(named(p("ln1.shift"), &layer.ln1_shift));
            out.push(named(p("attn.w_q"), &layer.w_q));
            out.push(named(p("attn.b_q"), &layer.b_q));
            out.push(named(p("attn.w_k"), &layer.w_k));
            out.push(named(p("attn.b_k"), &layer.b_k));
            out.push(named(p("attn.w_v"), &layer.w_v));
            out.push(named(p("attn.b_v"), &layer.b_v));
            out.push(named(p("attn.w_o"), &layer.w_o));
            out.push(named(p("attn.b_o"), &layer.b_o));
            if let Some(mlp) = &layer.mlp {
                out.push(named(p("ln2.scale"), &mlp.ln2_scale));
                out.push(named(p("ln2.shift"), &mlp.ln2_shift));
                out.push(named(p("mlp.w_fc"), &mlp.w_fc));
                out.push(named(p("mlp.b_fc"), &mlp.b_fc));
                out.push(named(p("mlp.w_proj"), &mlp.w_proj));
                out.push(named(p("mlp.b_proj"), &mlp.b_proj));
            }
        }
        out.push(named("ln_f.scale".into(), &self.lnf_scale));
        out.push(named("ln_f.shift".into(), &self.lnf_shift));
        out
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _, _)| n).collect();
        let ModelParams {
            tok_emb,
            pos_emb,
            layers,
            lnf_scale,
            lnf_shift,
            ..
        } = self;
        let mut slices: Vec<&mut [F]> = vec![named_mut(tok_emb), named_mut(pos_emb)];
        for layer in layers.iter_mut() {
            let LayerParams {
                ln1_scale,
                ln1_shift,
                w_q,
                b_q,
                w_k,
                b_k,
                w_v,
                b_v,
                w_o,
                b_o,
                mlp,
            } = layer;
            slices.extend([
                named_mut(ln1_scale),
                named_mut(ln1_shift),
                named_mut(w_q),
                named_mut(b_q),
                named_mut(w_k),
                named_mut(b_k),
                named_mut(w_v),
                named_mut(b_v),
                named_mut(w_o),
                named_mut(b_o),
            ]);
            if let Some(MlpParams {
                ln2_scale,
                ln2_shift,
                w_fc,
                b_fc,
                w_proj,
                b_proj,
            }) = mlp
            {
                slices.extend([
                    named_mut(ln2_scale),
                    named_mut(ln2_shift),
                    named_mut(w_fc),
                    named_mut(b_fc),
                    named_mut(w_proj),
                    named_mut(b_proj),
                ]);
            }
        }
        slices.extend([named_mut(lnf_scale), named_mut(lnf_shift)]);
        names.into_iter().zip(slices).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, s)| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, s)| s.iter().all(|x| x.is_finite()))
    }

    /// Element-wise conversion to another float type.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(&self.config).expect("config already validated");
        for ((_, _, src), (_, dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = G::from_f64(s.to_f64().expect("finite float")).expect("representable");
            }
        }
        out
    }
}

fn is_weight(name: &str) -> bool {
    name.ends_with("emb") || name.contains(".w_")
}
