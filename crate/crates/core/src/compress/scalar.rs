//! Uniform scalar quantizer with `2^q` levels at bin midpoints and optional
//! subtractive dither.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clamp_in_range, CompressorSpec};
use crate::linalg::Matrix;
use crate::Result;

pub(crate) fn bin_width(spec: &CompressorSpec) -> f64 {
    (spec.value_max - spec.value_min) / (1u64 << spec.bits) as f64
}

struct Dither {
    rng: Option<ChaCha8Rng>,
    half: f64,
}

impl Dither {
    fn new(spec: &CompressorSpec, key: u64) -> Self {
        Dither {
            rng: spec.dither.then(|| ChaCha8Rng::seed_from_u64(key)),
            half: bin_width(spec) / 2.0,
        }
    }

    fn next(&mut self) -> f64 {
        match &mut self.rng {
            Some(rng) => rng.random_range(-self.half..self.half),
            None => 0.0,
        }
    }
}

/// Level index per component, row-major.
pub(crate) fn encode(h: &Matrix, spec: &CompressorSpec, key: u64) -> Result<Vec<u32>> {
    let delta = bin_width(spec);
    let top = (1u64 << spec.bits) - 1;
    let mut dither = Dither::new(spec, key);
    h.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = clamp_in_range(v, i, spec)?;
            let s = x + dither.next();
            let idx = libm::floor((s - spec.value_min) / delta);
            Ok(idx.clamp(0.0, top as f64) as u32)
        })
        .collect()
}

pub(crate) fn reconstruct(levels: &[u32], rows: usize, cols: usize, spec: &CompressorSpec, key: u64) -> Matrix {
    let delta = bin_width(spec);
    let mut dither = Dither::new(spec, key);
    let data = levels
        .iter()
        .map(|&l| spec.value_min + (l as f64 + 0.5) * delta - dither.next())
        .collect();
    Matrix::from_vec(rows, cols, data).expect("levels map to finite values")
}

#[cfg(test)]
mod tests {
    use super::super::{compress, DitherKey};
    use super::*;

    fn one(v: f64, spec: &CompressorSpec) -> f64 {
        let h = Matrix::from_vec(1, 1, alloc::vec![v]).unwrap();
        compress(&h, spec, DitherKey::new(0, 0, 0), None).unwrap().reconstructed.get(0, 0)
    }

    #[test]
    fn midpoint_levels_without_dither() {
        let spec = CompressorSpec::scalar(2).with_dither(false);
        assert_eq!(one(0.3, &spec), 0.25);
        assert_eq!(one(-1.0, &spec), -0.75);
        assert_eq!(one(1.0, &spec), 0.75);
        assert_eq!(one(-0.3, &spec), -0.25);
        for level in [-0.75, -0.25, 0.25, 0.75] {
            assert_eq!(one(level, &spec), level);
        }
    }

    #[test]
    fn dithered_error_is_within_one_bin() {
        let spec = CompressorSpec::scalar(3);
        let delta = bin_width(&spec);
        let h = Matrix::from_fn(8, 50, |r, c| libm::sin((r * 50 + c) as f64 * 0.37));
        for round in 0..20 {
            let c = compress(&h, &spec, DitherKey::new(3, round, 1), None).unwrap();
            let e = c.reconstructed.sub(&h).unwrap();
            assert!(e.max_abs() <= delta);
        }
    }
}
