//! Two-dimensional hexagonal lattice quantizer.
//!
//! Each column of an embedding batch is cut into pairs; every pair is mapped
//! affinely from `[value_min, value_max]^2` onto the unit square and snapped
//! to one of `n^2 = 2^(2b)` codewords. Codewords are the points of the
//! lattice generated by `(d, 0)` and `(d/2, d)` with `d = 1/n`, i.e. rows of
//! `n` points with every other row shifted by half a step. Voronoi cells are
//! hexagons of area `d^2`, so the codebook tiles the unit square. Codeword
//! `j * n + i` sits at `((i + 1/4 + (j mod 2)/2) d, (j + 1/2) d)`.
//!
//! With dithering enabled the dither is uniform over the hexagonal cell.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clamp_in_range, CompressorSpec};
use crate::linalg::Matrix;
use crate::Result;

fn side(bits: u8) -> i64 {
    1i64 << bits
}

/// Unit-square position of codeword `index` for `bits` bits per component.
pub fn codeword(index: u32, bits: u8) -> (f64, f64) {
    let n = side(bits);
    let d = 1.0 / n as f64;
    let (j, i) = (index as i64 / n, index as i64 % n);
    let shift = if j & 1 == 1 { 0.5 } else { 0.0 };
    ((i as f64 + 0.25 + shift) * d, (j as f64 + 0.5) * d)
}

/// Index of the codeword nearest to `(x, y)`; ties go to the lower index.
/// Points outside the unit square snap to boundary codewords.
pub fn nearest_codeword(x: f64, y: f64, bits: u8) -> u32 {
    let n = side(bits);
    let d = 1.0 / n as f64;
    // outside the square the nearest codeword sits in the two edge rows
    let row0 = libm::floor(y.clamp(0.0, 1.0) / d - 0.5) as i64;
    let mut best = (f64::INFINITY, 0u32);
    let mut last_row = -1;
    for j in (row0 - 1..=row0 + 2).map(|j| j.clamp(0, n - 1)) {
        if j == last_row {
            continue;
        }
        last_row = j;
        let shift = if j & 1 == 1 { 0.5 } else { 0.0 };
        let ic = libm::round(x / d - 0.25 - shift) as i64;
        let mut last_col = -1;
        for i in (ic - 1..=ic + 1).map(|i| i.clamp(0, n - 1)) {
            if i == last_col {
                continue;
            }
            last_col = i;
            let index = (j * n + i) as u32;
            let (cx, cy) = codeword(index, bits);
            let dist = (cx - x) * (cx - x) + (cy - y) * (cy - y);
            if dist < best.0 {
                best = (dist, index);
            }
        }
    }
    best.1
}

/// Offset from `(x, y)` to the nearest point of the unbounded lattice
/// through the origin.
fn reduce_to_cell(x: f64, y: f64, d: f64) -> (f64, f64) {
    let row0 = libm::floor(y / d) as i64;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for j in row0 - 1..=row0 + 2 {
        let ox = j as f64 * d / 2.0;
        let ic = libm::round((x - ox) / d) as i64;
        for i in ic - 1..=ic + 1 {
            let (px, py) = (i as f64 * d + ox, j as f64 * d);
            let dist = (px - x) * (px - x) + (py - y) * (py - y);
            if dist < best.0 {
                best = (dist, x - px, y - py);
            }
        }
    }
    (best.1, best.2)
}

struct CellDither {
    rng: Option<ChaCha8Rng>,
    d: f64,
}

impl CellDither {
    fn new(spec: &CompressorSpec, key: u64) -> Self {
        CellDither {
            rng: spec.dither.then(|| ChaCha8Rng::seed_from_u64(key)),
            d: 1.0 / side(spec.bits) as f64,
        }
    }

    /// Uniform over the fundamental parallelogram, folded into the cell.
    fn next(&mut self) -> (f64, f64) {
        match &mut self.rng {
            Some(rng) => {
                let a: f64 = rng.random_range(0.0..1.0);
                let b: f64 = rng.random_range(0.0..1.0);
                reduce_to_cell(self.d * (a + b / 2.0), self.d * b, self.d)
            }
            None => (0.0, 0.0),
        }
    }
}

fn to_unit(v: f64, spec: &CompressorSpec) -> f64 {
    (v - spec.value_min) / (spec.value_max - spec.value_min)
}

fn from_unit(u: f64, spec: &CompressorSpec) -> f64 {
    spec.value_min + u * (spec.value_max - spec.value_min)
}

/// Pairs walk down each column; an odd last row is padded with zero
/// (clamped into range).
fn pair_rows(width: usize) -> usize {
    width.div_ceil(2)
}

pub(crate) fn encode(h: &Matrix, spec: &CompressorSpec, key: u64) -> Result<Vec<u32>> {
    let (width, batch) = h.shape();
    let pad = 0.0f64.clamp(spec.value_min, spec.value_max);
    let mut dither = CellDither::new(spec, key);
    let mut words = Vec::with_capacity(batch * pair_rows(width));
    for c in 0..batch {
        for p in 0..pair_rows(width) {
            let r0 = 2 * p;
            let a = clamp_in_range(h.get(r0, c), r0 * batch + c, spec)?;
            let b = if r0 + 1 < width {
                clamp_in_range(h.get(r0 + 1, c), (r0 + 1) * batch + c, spec)?
            } else {
                pad
            };
            let (ux, uy) = dither.next();
            words.push(nearest_codeword(to_unit(a, spec) + ux, to_unit(b, spec) + uy, spec.bits));
        }
    }
    Ok(words)
}

pub(crate) fn reconstruct(words: &[u32], width: usize, batch: usize, spec: &CompressorSpec, key: u64) -> Matrix {
    let mut out = Matrix::zeros(width, batch);
    let mut dither = CellDither::new(spec, key);
    let mut it = words.iter();
    for c in 0..batch {
        for p in 0..pair_rows(width) {
            let (cx, cy) = codeword(*it.next().expect("one codeword per pair"), spec.bits);
            let (ux, uy) = dither.next();
            out.set(2 * p, c, from_unit(cx - ux, spec));
            if 2 * p + 1 < width {
                out.set(2 * p + 1, c, from_unit(cy - uy, spec));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{compress, DitherKey};
    use super::*;

    fn brute_nearest(x: f64, y: f64, bits: u8) -> u32 {
        let n = side(bits) as u32;
        let mut best = (f64::INFINITY, 0);
        for idx in 0..n * n {
            let (cx, cy) = codeword(idx, bits);
            let dist = (cx - x) * (cx - x) + (cy - y) * (cy - y);
            if dist < best.0 {
                best = (dist, idx);
            }
        }
        best.1
    }

    #[test]
    fn nearest_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bits in 1..=4u8 {
            for _ in 0..4000 {
                let x: f64 = rng.random_range(-0.3..1.3);
                let y: f64 = rng.random_range(-0.3..1.3);
                let fast = nearest_codeword(x, y, bits);
                let slow = brute_nearest(x, y, bits);
                let (fx, fy) = codeword(fast, bits);
                let (sx, sy) = codeword(slow, bits);
                let df = (fx - x) * (fx - x) + (fy - y) * (fy - y);
                let ds = (sx - x) * (sx - x) + (sy - y) * (sy - y);
                assert!(df <= ds, "bits {bits} at ({x}, {y}): {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn codebook_tiles_unit_square() {
        // b = 2: 16 codewords, cell area 1/16
        let bits = 2;
        let n = side(bits) as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = alloc::vec![0u32; (n * n) as usize];
        let samples = 160_000;
        for _ in 0..samples {
            let x: f64 = rng.random_range(0.0..1.0);
            let y: f64 = rng.random_range(0.0..1.0);
            counts[nearest_codeword(x, y, bits) as usize] += 1;
        }
        let mean_area: f64 = counts.iter().map(|&c| c as f64 / samples as f64).sum::<f64>() / (n * n) as f64;
        assert!((mean_area - 1.0 / 16.0).abs() < 1e-12);
        // every codeword owns some of the square
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn cell_dither_stays_in_cell() {
        let d = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let a: f64 = rng.random_range(0.0..1.0);
            let b: f64 = rng.random_range(0.0..1.0);
            let (ux, uy) = reduce_to_cell(d * (a + b / 2.0), d * b, d);
            // the folded point is at least as close to 0 as to any neighbour
            for (nx, ny) in [(d, 0.0), (-d, 0.0), (d / 2.0, d), (-d / 2.0, d), (d / 2.0, -d), (-d / 2.0, -d)] {
                let own = ux * ux + uy * uy;
                let other = (ux - nx) * (ux - nx) + (uy - ny) * (uy - ny);
                assert!(own <= other + 1e-15);
            }
        }
    }

    #[test]
    fn codeword_inputs_reconstruct_exactly() {
        let spec = CompressorSpec::lattice2d(2).with_range(0.0, 1.0).with_dither(false);
        let (x, y) = codeword(6, 2);
        let h = Matrix::from_vec(2, 1, alloc::vec![x, y]).unwrap();
        let c = compress(&h, &spec, DitherKey::new(0, 0, 0), None).unwrap();
        assert_eq!(c.reconstructed, h);
        assert_eq!(c.error_sq_fro, 0.0);
    }

    #[test]
    fn odd_width_pads_and_excludes_padding_from_error() {
        let spec = CompressorSpec::lattice2d(3);
        let h = Matrix::from_fn(3, 5, |r, c| 0.8 * libm::cos((r * 5 + c) as f64));
        let c = compress(&h, &spec, DitherKey::new(9, 2, 1), None).unwrap();
        assert_eq!(c.reconstructed.shape(), (3, 5));
        assert_eq!(c.payload_bits, 5 * 2 * 2 * 3);
        let direct = c.reconstructed.sub(&h).unwrap().fro_norm_sq();
        assert_eq!(direct, c.error_sq_fro);
    }
}
