//! Graph-free entry points for one-off evaluation.
//!
//! Each function runs the corresponding [`Graph`] op on a throwaway inference
//! graph, so results are bit-identical to the differentiable path.

use crate::error::{dim_err, Result};
use crate::graph::{log_sum_exp, rope_angles, rotate, Graph};
use crate::real::Real;
use crate::tensor::Tensor;

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.into_value(out))
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let out = g.softmax_rows(v)?;
    Ok(g.into_value(out))
}

pub fn rms_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let (vx, vg) = (g.constant(x.clone()), g.constant(gain.clone()));
    let out = g.rms_norm(vx, vg, eps)?;
    Ok(g.into_value(out))
}

pub fn swiglu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let out = g.swiglu(v)?;
    Ok(g.into_value(out))
}

/// Rotary embedding of single-head rows `[n, head_dim]`, row i at `positions[i]`.
pub fn rope_apply<T: Real>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    let head_dim = x.last_dim();
    if head_dim % 2 != 0 {
        return dim_err("rope_apply", format!("head dimension {head_dim} is odd"));
    }
    if positions.len() != x.rows() {
        return dim_err("rope_apply", format!("{} positions for {} rows", positions.len(), x.rows()));
    }
    let angles = rope_angles(positions, head_dim, base);
    let half = head_dim / 2;
    let mut data = x.data().to_vec();
    for (r, row) in data.chunks_mut(head_dim.max(1)).enumerate() {
        rotate(row, &angles[r * half..(r + 1) * half], false);
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Cross-entropy summed over rows whose flag is set.
///
/// Returns the total and the per-row losses; unflagged rows report exactly 0.
pub fn masked_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask_flags: &[bool],
) -> Result<(f64, Vec<f64>)> {
    let weights: Vec<f64> = mask_flags.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mut g = Graph::inference();
    let v = g.constant(logits.clone());
    let ce = g.cross_entropy(v, targets, &weights)?;
    let per_row = g
        .row_losses(ce)
        .expect("cross-entropy node")
        .into_iter()
        .zip(mask_flags)
        .map(|(l, &m)| if m { l } else { 0.0 })
        .collect();
    Ok((g.value(ce).data()[0].f64(), per_row))
}

/// Row-wise `log softmax` computed in f64.
pub fn log_softmax_rows_f64<T: Real>(x: &Tensor<T>) -> Vec<f64> {
    let cols = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = x.row(r);
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|v| v.f64() - lse));
    }
    debug_assert_eq!(out.len(), x.rows() * cols);
    out
}
