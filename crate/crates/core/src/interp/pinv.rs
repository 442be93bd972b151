use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Projection;

/// Which weight matrix a pseudoinverse was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatrixTag {
    pub projection: Projection,
    /// 1-based layer number.
    pub layer: usize,
    pub head: usize,
}

/// Rank-`k` pseudoinverse `V_k Σ_k⁺ U_kᵀ` of a `[out, in]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedPinv {
    pub tag: Option<MatrixTag>,
    /// Non-increasing, all non-negative.
    pub singular_values: Vec<f64>,
    pub k: usize,
    pub threshold: f64,
    /// `[in, out]`.
    pub pinv: Array2<f64>,
    /// Top-`k` right singular vectors as rows, `[k, in]`.
    pub right: Array2<f64>,
}

/// Smallest `k` whose leading singular values hold at least `threshold` of the total.
pub fn retained_rank(singular_values: &[f64], threshold: f64) -> usize {
    let total: f64 = singular_values.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    // relative slack so that s = 1 stops at the numerical rank
    let target = threshold * total - 1e-12 * total;
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s;
        if acc >= target {
            return i + 1;
        }
    }
    singular_values.len()
}

pub fn truncated_pinv(w: ArrayView2<f32>, threshold: f64) -> Result<TruncatedPinv> {
    truncated_pinv_f64(w.mapv(f64::from).view(), threshold)
}

pub fn truncated_pinv_f64(w: ArrayView2<f64>, threshold: f64) -> Result<TruncatedPinv> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("s threshold {threshold} outside (0, 1]")));
    }
    let (rows, cols) = w.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Input("empty matrix".into()));
    }
    let m = DMatrix::from_fn(rows, cols, |i, j| w[[i, j]]);
    let svd = m
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].max(0.0)).collect();
    let k = retained_rank(&singular_values, threshold);

    let mut pinv = Array2::zeros((cols, rows));
    let mut right = Array2::zeros((k, cols));
    for (r, &i) in order.iter().take(k).enumerate() {
        let s = singular_values[r];
        if s <= 0.0 {
            continue;
        }
        for c in 0..cols {
            right[[r, c]] = v_t[(i, c)];
        }
        for a in 0..cols {
            let va = v_t[(i, a)] / s;
            for b in 0..rows {
                pinv[[a, b]] += va * u[(b, i)];
            }
        }
    }
    Ok(TruncatedPinv {
        tag: None,
        singular_values,
        k,
        threshold,
        pinv,
        right,
    })
}

impl TruncatedPinv {
    /// Maps a vector from the projected space back into residual space.
    pub fn retro_project(&self, y: ArrayView1<f32>) -> Array1<f32> {
        self.pinv.dot(&y.mapv(f64::from)).mapv(|x| x as f32)
    }

    /// Orthogonal projection of `x` onto the span of the top-`k` right singular vectors.
    pub fn project(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.right.t().dot(&self.right.dot(&x))
    }

    pub fn retained_fraction(&self) -> f64 {
        let total: f64 = self.singular_values.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        self.singular_values[..self.k].iter().sum::<f64>() / total
    }
}
