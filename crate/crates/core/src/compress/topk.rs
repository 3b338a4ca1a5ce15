//! Per-sample top-k sparsification. Kept values travel as 32-bit floats.

use alloc::vec::Vec;

use super::SelectionMode;
use crate::linalg::Matrix;
use crate::{Error, Result};

/// For every column: the kept row indices in ascending order and their values.
pub(crate) fn encode(
    h: &Matrix,
    k: usize,
    mode: SelectionMode,
    stale_grad: Option<&Matrix>,
) -> Result<(Vec<u32>, Vec<f32>)> {
    let (width, batch) = h.shape();
    let scores = match (mode, stale_grad) {
        (SelectionMode::StaleGradient, Some(g)) => {
            if g.shape() != h.shape() {
                return Err(Error::shape("top-k stale gradient", h.shape(), g.shape()));
            }
            g
        }
        _ => h,
    };
    let mut indices = Vec::with_capacity(batch * k);
    let mut values = Vec::with_capacity(batch * k);
    let mut order: Vec<usize> = Vec::with_capacity(width);
    for c in 0..batch {
        order.clear();
        order.extend(0..width);
        // stable: equal scores keep the lower row first
        order.sort_by(|&a, &b| {
            let (sa, sb) = (scores.get(a, c).abs(), scores.get(b, c).abs());
            sb.partial_cmp(&sa).unwrap_or(core::cmp::Ordering::Equal)
        });
        let kept = &mut order[..k];
        kept.sort_unstable();
        for &r in kept.iter() {
            indices.push(r as u32);
            values.push(h.get(r, c) as f32);
        }
    }
    Ok((indices, values))
}

pub(crate) fn reconstruct(indices: &[u32], values: &[f32], width: usize, batch: usize) -> Result<Matrix> {
    if batch == 0 {
        return Ok(Matrix::zeros(width, 0));
    }
    let k = indices.len() / batch;
    let mut out = Matrix::zeros(width, batch);
    for c in 0..batch {
        for s in c * k..(c + 1) * k {
            let v = values[s] as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "top-k value", index: s });
            }
            out.set(indices[s] as usize, c, v);
        }
    }
    Ok(out)
}
