use cvfl_core::compress::{
    compress, decode_wire, encode_wire, lattice_codeword, lattice_nearest_codeword, topk_error_bound, CompressorKind,
    CompressorSpec, DitherKey, WireExpectation,
};
use cvfl_core::data::{partition_features, sample_minibatch, PartitionScheme};
use cvfl_core::model::{init_model, Activation};
use cvfl_core::Matrix;
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1.0f64..=1.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn spec() -> impl Strategy<Value = CompressorSpec> {
    (0u8..4, 1u8..=12, any::<bool>()).prop_map(|(kind, bits, dither)| match kind {
        0 => CompressorSpec::none(),
        1 => CompressorSpec::scalar(bits).with_dither(dither),
        2 => CompressorSpec::lattice2d(bits).with_dither(dither),
        _ => CompressorSpec::topk(bits * 2),
    })
}

proptest! {
    #[test]
    fn decoded_wire_equals_reported_reconstruction(h in matrix(9, 9), spec in spec(), seed in any::<u64>(), round in any::<u32>()) {
        let key = DitherKey::new(seed, round, 3);
        let c = compress(&h, &spec, key, None).unwrap();
        let err: f64 = c.reconstructed.data().iter().zip(h.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        prop_assert!((err - c.error_sq_fro).abs() <= 1e-12 * (1.0 + err));
        let expect = WireExpectation { spec: &spec, key, batch: h.cols(), width: h.rows() };
        let d = decode_wire(&encode_wire(&c), &expect).unwrap();
        prop_assert_eq!(d.reconstructed, c.reconstructed);
    }

    #[test]
    fn scalar_error_per_component_is_bounded(h in matrix(6, 6), bits in 1u8..=10, dither in any::<bool>(), seed in any::<u64>()) {
        let spec = CompressorSpec::scalar(bits).with_dither(dither);
        let delta = 2.0 / f64::from(1u32 << bits);
        let c = compress(&h, &spec, DitherKey::new(seed, 0, 1), None).unwrap();
        // overload near the ends can push a dithered error up to a full cell
        let limit = if dither { delta } else { delta / 2.0 } + 1e-12;
        for (a, b) in c.reconstructed.data().iter().zip(h.data()) {
            prop_assert!((a - b).abs() <= limit);
        }
    }

    #[test]
    fn topk_never_exceeds_worst_case(h in matrix(8, 6), k in 1usize..=8) {
        let k = k.min(h.rows());
        let c = compress(&h, &CompressorSpec::topk(8).with_k(k), DitherKey::new(0, 0, 1), None).unwrap();
        let worst = (0..h.cols()).map(|j| h.column(j).iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
        prop_assert!(c.error_sq_fro <= topk_error_bound(h.cols(), h.rows(), k, worst) + 1e-12);
    }

    #[test]
    fn nearest_codeword_is_nearest(x in -0.5f64..1.5, y in -0.5f64..1.5, bits in 1u8..=4) {
        let got = lattice_nearest_codeword(x, y, bits);
        let dist = |j: u32| {
            let (a, b) = lattice_codeword(j, bits);
            (a - x).powi(2) + (b - y).powi(2)
        };
        let best = (0..1u32 << (2 * bits)).map(dist).fold(f64::INFINITY, f64::min);
        prop_assert!(dist(got) <= best + 1e-15);
    }

    #[test]
    fn identity_codecs_are_exact(h in matrix(5, 5), kind in 0u8..3) {
        let spec = match kind {
            0 => CompressorSpec::none(),
            1 => CompressorSpec::scalar(32),
            _ => CompressorSpec::lattice2d(32),
        };
        let c = compress(&h, &spec, DitherKey::new(1, 2, 3), None).unwrap();
        prop_assert_eq!(c.header.codec, CompressorKind::None);
        prop_assert_eq!(c.reconstructed, h);
    }

    #[test]
    fn minibatch_indices_are_distinct_and_in_range(n in 1usize..200, frac in 0.0f64..=1.0, round in 0usize..1000, seed in any::<u64>()) {
        let b = ((n as f64 * frac) as usize).max(1);
        let mut idx = sample_minibatch(n, b, round, seed).unwrap().indices;
        prop_assert_eq!(idx.len(), b);
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), b);
        prop_assert!(idx.iter().all(|&i| i < n));
    }

    #[test]
    fn partitions_reassemble(x in matrix(5, 12), parties in 1usize..=4, robin in any::<bool>(), seed in any::<u64>()) {
        prop_assume!(parties <= x.cols());
        let labels = vec![0; x.rows()];
        let scheme = if robin { PartitionScheme::RoundRobin } else { PartitionScheme::Contiguous };
        let ds = partition_features(&x, &labels, parties, scheme, seed).unwrap();
        prop_assert_eq!(ds.reassemble(), x);
        let widths = ds.feature_widths();
        prop_assert!(widths.iter().max().unwrap() - widths.iter().min().unwrap() <= 1);
    }

    #[test]
    fn params_round_trip(a in 1usize..5, b in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let m = init_model(&[a, b, c], &[Activation::Tanh, Activation::Identity], seed).unwrap();
        let p = m.params();
        prop_assert_eq!(p.len(), m.param_count());
        prop_assert_eq!(m.with_params(&p).unwrap(), m);
    }
}
