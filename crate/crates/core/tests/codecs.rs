use cvfl_core::compress::{
    compress, decode_wire, encode_raw, encode_wire, lattice_cell_volume, lattice_codeword, lattice_error_bound,
    lattice_nearest_codeword, required_k, required_q, required_v, scalar_error_bound, table1_bound, topk_error_bound,
    CompressorSpec, DitherKey, SelectionMode, WireExpectation, HEADER_LEN,
};
use cvfl_core::rng::stream;
use cvfl_core::Matrix;
use rand::Rng;

fn uniform_batch(rows: usize, cols: usize, seed: u64, trial: u64) -> Matrix {
    let mut rng = stream(seed, &[trial]);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0))
}

fn mean_error(spec: &CompressorSpec, rows: usize, cols: usize, trials: u64) -> f64 {
    (0..trials)
        .map(|t| {
            let h = uniform_batch(rows, cols, 11, t);
            compress(&h, spec, DitherKey::new(5, t as u32, 1), None).unwrap().error_sq_fro
        })
        .sum::<f64>()
        / trials as f64
}

#[test]
fn scalar_midpoint_convention() {
    let spec = CompressorSpec::scalar(2).with_dither(false);
    let h = Matrix::from_vec(1, 6, vec![0.3, -0.75, -0.25, 0.25, 0.75, -1.0]).unwrap();
    let c = compress(&h, &spec, DitherKey::new(0, 0, 0), None).unwrap();
    assert_eq!(c.reconstructed.data(), &[0.25, -0.75, -0.25, 0.25, 0.75, -0.75]);
    // levels are reproduced exactly
    assert_eq!(c.error_sq_fro, 0.05f64.powi(2) + 0.25f64.powi(2));
}

#[test]
fn undithered_scalar_meets_its_bound() {
    // B=4, P_m=3, q=3: 4*3*4/12 * 2^-6
    let bound = scalar_error_bound(4, 3, -1.0, 1.0, 3);
    assert_eq!(bound, 0.0625);
    let mean = mean_error(&CompressorSpec::scalar(3).with_dither(false), 3, 4, 1000);
    assert!(mean <= bound * 1.05, "{mean}");
}

#[test]
fn dithered_scalar_overload_inflates_error_by_one_cell() {
    // With subtractive dither over [min, max] and 2^q cells, inputs within
    // half a cell of either end overload. Integrating over uniform inputs
    // gives E = delta^2/12 * (n + 1)/n with n = 2^q.
    for q in [2u8, 3, 4] {
        let n = (1u64 << q) as f64;
        let mean = mean_error(&CompressorSpec::scalar(q), 8, 16, 1000);
        let expect = scalar_error_bound(16, 8, -1.0, 1.0, q as u32) * (n + 1.0) / n;
        assert!((mean / expect - 1.0).abs() < 0.02, "q={q}: {mean} vs {expect}");
    }
}

#[test]
fn dither_is_unbiased_inside_the_range() {
    let spec = CompressorSpec::scalar(2);
    let mut rng = stream(3, &[]);
    let h = Matrix::from_fn(100, 1000, |_, _| rng.random_range(-0.7..0.7));
    let c = compress(&h, &spec, DitherKey::new(1, 0, 1), None).unwrap();
    let n = h.data().len() as f64;
    let mean: f64 = c.reconstructed.data().iter().zip(h.data()).map(|(a, b)| a - b).sum::<f64>() / n;
    let sd = 0.5 / 12f64.sqrt();
    assert!(mean.abs() <= 5.0 * sd / n.sqrt(), "{mean}");
}

#[test]
fn error_shrinks_with_bits() {
    for make in [CompressorSpec::scalar as fn(u8) -> CompressorSpec, CompressorSpec::lattice2d] {
        let errs: Vec<f64> = (2..=6).map(|b| mean_error(&make(b), 8, 16, 50)).collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }
}

#[test]
fn lattice_cell_volume_tiles_unit_square() {
    assert_eq!(lattice_cell_volume(2, 0.0, 1.0), 1.0 / 16.0);
    // rows are d apart and shifted by d/2, so an interior codeword has two
    // neighbours at distance d and four at d sqrt(5)/2
    let bits = 3;
    let d = 1.0 / 8.0;
    let (x, y) = lattice_codeword(3 * 8 + 4, bits);
    let mut near: Vec<f64> = (0..64)
        .filter(|&j| j != 3 * 8 + 4)
        .map(|j| {
            let (a, b) = lattice_codeword(j, bits);
            ((a - x).powi(2) + (b - y).powi(2)).sqrt()
        })
        .collect();
    near.sort_by(f64::total_cmp);
    let far = d * 5f64.sqrt() / 2.0;
    assert!(near[..2].iter().all(|v| (v - d).abs() < 1e-12));
    assert!(near[2..6].iter().all(|v| (v - far).abs() < 1e-12));
    assert!(near[6] > far + 1e-3);
}

#[test]
fn nearest_codeword_matches_brute_force() {
    let mut rng = stream(8, &[]);
    for bits in [1u8, 2, 3, 4] {
        let n = 1u32 << (2 * bits);
        for _ in 0..2000 {
            let (x, y) = (rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2));
            let got = lattice_nearest_codeword(x, y, bits);
            let dist = |j: u32| {
                let (a, b) = lattice_codeword(j, bits);
                (a - x).powi(2) + (b - y).powi(2)
            };
            let best = (0..n).map(dist).fold(f64::INFINITY, f64::min);
            assert!((dist(got) - best).abs() < 1e-15, "bits {bits} at ({x}, {y})");
        }
    }
}

#[test]
fn lattice_codeword_round_trip_is_exact() {
    let spec = CompressorSpec::lattice2d(3).with_dither(false).with_range(0.0, 1.0);
    let (a, b) = lattice_codeword(19, 3);
    let h = Matrix::from_vec(2, 1, vec![a, b]).unwrap();
    let c = compress(&h, &spec, DitherKey::new(0, 0, 0), None).unwrap();
    assert!(c.error_sq_fro < 1e-30);
}

#[test]
fn lattice_error_is_near_hexagon_second_moment() {
    // Cells of the sheared lattice have normalized second moment 0.0807,
    // just above the regular hexagon's 5/(36 sqrt 3) = 0.0802. Without
    // dither there is no overload, so the mean error per component is that
    // times the cell area; both sit far above the V/24 bound.
    for bits in [3u8, 4] {
        let v = lattice_cell_volume(bits, -1.0, 1.0);
        let mean = mean_error(&CompressorSpec::lattice2d(bits).with_dither(false), 8, 16, 400);
        let expect = 0.0807 * v * 128.0;
        assert!((mean / expect - 1.0).abs() < 0.05, "b={bits}: {mean} vs {expect}");
        assert!(mean > 1.9 * lattice_error_bound(16, 8, v));
        let dithered = mean_error(&CompressorSpec::lattice2d(bits), 8, 16, 400);
        assert!(dithered > mean);
    }
}

#[test]
fn topk_keeps_largest_and_meets_bound_every_trial() {
    let mut rng = stream(4, &[]);
    for trial in 0..300 {
        let k = 1 + trial % 7;
        let spec = CompressorSpec::topk(8).with_k(k);
        let h = Matrix::from_fn(8, 5, |_, _| rng.random_range(-1.0..1.0));
        let c = compress(&h, &spec, DitherKey::new(0, trial as u32, 1), None).unwrap();
        let mut worst_norm = 0.0f64;
        for col in 0..5 {
            let mut mags: Vec<f64> = h.column(col).iter().map(|v| v * v).collect();
            worst_norm = worst_norm.max(mags.iter().sum());
            mags.sort_by(f64::total_cmp);
            let dropped: f64 = mags[..8 - k].iter().sum();
            let got: f64 = c
                .reconstructed
                .column(col)
                .iter()
                .zip(h.column(col))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            // kept values are f32
            assert!((got - dropped).abs() < 1e-12);
        }
        assert!(c.error_sq_fro <= topk_error_bound(5, 8, k, worst_norm));
    }
}

#[test]
fn topk_full_width_is_exact_and_stale_mode_uses_scores() {
    let h = Matrix::from_vec(3, 1, vec![0.5, -0.25, 0.125]).unwrap();
    let full = compress(&h, &CompressorSpec::topk(8).with_k(3), DitherKey::new(0, 0, 0), None).unwrap();
    assert_eq!(full.error_sq_fro, 0.0);
    let scores = Matrix::from_vec(3, 1, vec![0.0, 0.0, 9.0]).unwrap();
    let spec = CompressorSpec::topk(8).with_k(1).with_selection(SelectionMode::StaleGradient);
    let c = compress(&h, &spec, DitherKey::new(0, 0, 0), Some(&scores)).unwrap();
    assert_eq!(c.reconstructed.column(0), vec![0.0, 0.0, 0.125]);
    // no scores yet: magnitude
    let c = compress(&h, &spec, DitherKey::new(0, 0, 0), None).unwrap();
    assert_eq!(c.reconstructed.column(0), vec![0.5, 0.0, 0.0]);
}

#[test]
fn table1_dispatch() {
    assert_eq!(table1_bound(&CompressorSpec::none(), 16, 8, 1.0).unwrap(), 0.0);
    assert_eq!(table1_bound(&CompressorSpec::scalar(2), 16, 8, 1.0).unwrap(), 16.0 * 8.0 * 4.0 / 12.0 / 16.0);
    assert_eq!(table1_bound(&CompressorSpec::lattice2d(2), 16, 8, 1.0).unwrap(), 0.25 * 128.0 / 24.0);
    assert_eq!(table1_bound(&CompressorSpec::topk(8).with_k(2), 16, 8, 3.0).unwrap(), 16.0 * 0.75 * 3.0);
}

#[test]
fn calculators_scale_with_horizon() {
    for t in [1e2, 1e3, 1e4, 1e5] {
        let q1 = required_q(t, 16, 8, -1.0, 1.0);
        let q4 = required_q(4.0 * t, 16, 8, -1.0, 1.0);
        assert!(q4 <= q1 + 1 && q4 >= q1);
        assert!((required_v(4.0 * t, 16, 8) - required_v(t, 16, 8) / 2.0).abs() < 1e-15);
        assert_eq!(required_k(t, 16, 8, 8.0), 8);
    }
}

fn all_specs() -> Vec<CompressorSpec> {
    let mut specs = vec![CompressorSpec::none()];
    for b in [1u8, 2, 3, 5, 8] {
        specs.push(CompressorSpec::scalar(b));
        specs.push(CompressorSpec::scalar(b).with_dither(false));
        specs.push(CompressorSpec::lattice2d(b));
        specs.push(CompressorSpec::topk(b * 4));
    }
    specs
}

#[test]
fn wire_round_trip_on_seeded_payloads() {
    let specs = all_specs();
    for i in 0..100u64 {
        let spec = specs[i as usize % specs.len()];
        let mut rng = stream(21, &[i]);
        let (rows, cols) = (rng.random_range(1..10), rng.random_range(1..12));
        let h = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0));
        let key = DitherKey::new(i, i as u32 * 3, (i % 5) as u16);
        let c = compress(&h, &spec, key, None).unwrap();
        let bytes = encode_wire(&c);
        assert_eq!(bytes.len(), HEADER_LEN + c.payload_bits.div_ceil(8) as usize);
        assert_eq!(bytes.len(), c.wire_len());
        let expect = WireExpectation {
            spec: &spec,
            key,
            batch: cols,
            width: rows,
        };
        let d = decode_wire(&bytes, &expect).unwrap();
        assert_eq!(d.reconstructed, c.reconstructed);
        assert_eq!(d.header, c.header);
    }
}

#[test]
fn any_corrupted_header_byte_is_rejected() {
    let spec = CompressorSpec::scalar(3);
    let key = DitherKey::new(7, 2, 1);
    let h = uniform_batch(4, 3, 1, 0);
    let bytes = encode_wire(&compress(&h, &spec, key, None).unwrap());
    let expect = WireExpectation {
        spec: &spec,
        key,
        batch: 3,
        width: 4,
    };
    for i in 0..HEADER_LEN {
        for flip in [1u8, 0x80] {
            let mut bad = bytes.clone();
            bad[i] ^= flip;
            assert!(decode_wire(&bad, &expect).is_err(), "byte {i}");
        }
    }
    assert!(decode_wire(&bytes[..bytes.len() - 1], &expect).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_wire(&long, &expect).is_err());
}

#[test]
fn raw_messages_carry_exact_doubles() {
    let m = Matrix::from_vec(3, 1, vec![1e-300, -2.5, std::f64::consts::PI]).unwrap();
    let key = DitherKey::new(1, 1, 0);
    let bytes = encode_raw(&m, key);
    assert_eq!(bytes.len(), HEADER_LEN + 24);
    let spec = CompressorSpec::none();
    let expect = WireExpectation {
        spec: &spec,
        key,
        batch: 1,
        width: 3,
    };
    assert_eq!(decode_wire(&bytes, &expect).unwrap().reconstructed, m);
}

#[test]
fn scalar_payload_ratio_between_two_and_thirty_two_bits() {
    let h = uniform_batch(8, 16, 2, 0);
    let key = DitherKey::new(0, 0, 1);
    let b2 = compress(&h, &CompressorSpec::scalar(2), key, None).unwrap();
    let b32 = compress(&h, &CompressorSpec::scalar(32), key, None).unwrap();
    assert_eq!(b32.paper_bits, 16 * b2.paper_bits);
    assert_eq!(b2.payload_bits, 2 * 128);
}
