//! Worst-case compression error per codec and the parameter choices that
//! keep it at or below `1/sqrt(T)`.

use super::{CompressorKind, CompressorSpec};
use crate::Result;

/// `B P_m (h_max - h_min)^2 / 12 * 2^(-2q)`
pub fn scalar_error_bound(batch: usize, width: usize, min: f64, max: f64, q: u32) -> f64 {
    let range = max - min;
    (batch * width) as f64 * range * range / 12.0 * libm::exp2(-2.0 * q as f64)
}

/// Cell area of the lattice codebook in the original (unscaled) coordinates.
pub fn lattice_cell_volume(bits: u8, min: f64, max: f64) -> f64 {
    let range = max - min;
    range * range * libm::exp2(-2.0 * bits as f64)
}

/// `V B P_m / 24`
pub fn lattice_error_bound(batch: usize, width: usize, cell_volume: f64) -> f64 {
    cell_volume * (batch * width) as f64 / 24.0
}

/// `B (1 - k / P_m) (||h||^2)_max`
pub fn topk_error_bound(batch: usize, width: usize, k: usize, h_sq_max: f64) -> f64 {
    batch as f64 * (1.0 - k as f64 / width as f64) * h_sq_max
}

/// The error bound for `spec` on a `width x batch` embedding matrix.
/// `h_sq_max` only matters for top-k.
pub fn table1_bound(spec: &CompressorSpec, batch: usize, width: usize, h_sq_max: f64) -> Result<f64> {
    spec.validate()?;
    Ok(match spec.effective_kind() {
        CompressorKind::None => 0.0,
        CompressorKind::Scalar => {
            scalar_error_bound(batch, width, spec.value_min, spec.value_max, spec.bits as u32)
        }
        CompressorKind::Lattice2d => lattice_error_bound(
            batch,
            width,
            lattice_cell_volume(spec.bits, spec.value_min, spec.value_max),
        ),
        CompressorKind::TopK => topk_error_bound(batch, width, spec.topk_k(width)?, h_sq_max),
    })
}

fn target(t: f64) -> f64 {
    1.0 / libm::sqrt(t)
}

/// Smallest `q >= 1` with the scalar bound at most `1/sqrt(T)`.
pub fn required_q(t: f64, batch: usize, width: usize, min: f64, max: f64) -> u32 {
    let goal = target(t);
    let mut q = 1;
    while q < 63 && scalar_error_bound(batch, width, min, max, q) > goal {
        q += 1;
    }
    q
}

/// Largest cell volume with the lattice bound at most `1/sqrt(T)`.
pub fn required_v(t: f64, batch: usize, width: usize) -> f64 {
    24.0 / ((batch * width) as f64 * libm::sqrt(t))
}

/// Smallest `k` in `[1, P_m]` with the top-k bound at most `1/sqrt(T)`.
pub fn required_k(t: f64, batch: usize, width: usize, h_sq_max: f64) -> usize {
    let goal = target(t);
    (1..=width)
        .find(|&k| topk_error_bound(batch, width, k, h_sq_max) <= goal)
        .unwrap_or(width)
}
