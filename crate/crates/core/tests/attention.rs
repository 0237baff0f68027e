use longattn_core::attention::{attend_tensors, build_mask, exact_attention, masked_attention, AttentionConfig, Overlap, Variant, VARIANT_TAGS};
use longattn_core::attention::attention_specs;
use longattn_core::tensor::{seeded_sample, Distribution, Rng};
use longattn_core::{ParamStore, Tensor};
use proptest::prelude::*;

fn rand(rng: &mut Rng, l: usize, d: usize) -> Tensor<f64> {
    seeded_sample(rng, Distribution::Gaussian, &[l, d]).unwrap()
}

fn fixed_pattern() -> impl Strategy<Value = (Variant, usize)> {
    prop_oneof![
        (1usize..12, 4usize..40).prop_map(|(w, l)| (Variant::SlidingWindow { w }, l)),
        (1usize..5, 1usize..6).prop_map(|(b, n)| (Variant::Blockwise { block: 2 * b, overlap: Overlap::Half }, 2 * b * n)),
        (1usize..9, 1usize..6).prop_map(|(b, n)| (Variant::Blockwise { block: b, overlap: Overlap::None }, b * n)),
        (2usize..24).prop_map(|l| (Variant::Exact, l)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn local_kernels_agree_with_masked_exact((variant, l) in fixed_pattern(), g in 0usize..3, d in 1usize..6, seed in any::<u64>()) {
        let g = g.min(l);
        let cfg = AttentionConfig::new(variant, l, d).with_globals(g);
        let mut rng = Rng::new(seed);
        let (q, k, v) = (rand(&mut rng, l, d), rand(&mut rng, l, d), rand(&mut rng, l, d));
        let fast = masked_attention(&q, &k, &v, &cfg).unwrap().values;
        let slow = exact_attention(&q, &k, &v, &build_mask(&cfg).unwrap(), false).unwrap().values;
        prop_assert!(fast.max_abs_diff(&slow) < 1e-10, "{}", fast.max_abs_diff(&slow));
    }

    #[test]
    fn masks_are_reflexive_and_symmetric_unless_half_overlap((variant, l) in fixed_pattern(), g in 0usize..3) {
        let symmetric = variant.overlap() != Some(Overlap::Half);
        let m = build_mask(&AttentionConfig::new(variant, l, 2).with_globals(g.min(l))).unwrap();
        for i in 0..l {
            prop_assert!(m.allows(i, i));
            for j in 0..l {
                if symmetric {
                    prop_assert_eq!(m.allows(i, j), m.allows(j, i));
                }
            }
        }
    }

    #[test]
    fn half_overlap_reaches_half_a_block_past_each_edge(b in 1usize..5, n in 1usize..6, i in any::<prop::sample::Index>()) {
        let (block, l) = (2 * b, 2 * b * n);
        let m = build_mask(&AttentionConfig::new(Variant::Blockwise { block, overlap: Overlap::Half }, l, 2)).unwrap();
        let i = i.index(l);
        let start = i / block * block;
        for j in 0..l {
            let inside = j + b >= start && j < start + block + b;
            prop_assert_eq!(m.allows(i, j), inside);
        }
    }

    #[test]
    fn disjoint_blocks_cover_l_times_b(b in 1usize..9, n in 1usize..6) {
        let m = build_mask(&AttentionConfig::new(Variant::Blockwise { block: b, overlap: Overlap::None }, b * n, 2)).unwrap();
        prop_assert_eq!(m.count(), b * n * b);
    }

    #[test]
    fn exact_output_is_a_convex_combination_of_values(l in 1usize..20, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (q, k, v) = (rand(&mut rng, l, d), rand(&mut rng, l, d), rand(&mut rng, l, d));
        let out = exact_attention(&q, &k, &v, &build_mask(&AttentionConfig::new(Variant::Exact, l, d)).unwrap(), true).unwrap();
        let w = out.weights.unwrap();
        for i in 0..l {
            let s: f64 = w.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        for c in 0..d {
            let col: Vec<f64> = (0..l).map(|j| v.at(&[j, c])).collect();
            let (lo, hi) = (col.iter().cloned().fold(f64::INFINITY, f64::min), col.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            for i in 0..l {
                let x = out.values.at(&[i, c]);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn every_variant_produces_finite_outputs_of_the_input_shape() {
    let (l, d) = (64, 8);
    for tag in VARIANT_TAGS {
        let v = match Variant::defaults(tag).unwrap() {
            Variant::SlidingWindow { .. } => Variant::SlidingWindow { w: 8 },
            Variant::Blockwise { overlap, .. } => Variant::Blockwise { block: 16, overlap },
            Variant::Lsh { n_hash, .. } => Variant::Lsh { n_hash, chunk: 16, n_buckets: 4 },
            Variant::Sinkhorn { iters, temperature, hard, .. } => Variant::Sinkhorn { block: 16, iters, temperature, hard },
            Variant::Nystrom { pinv_iters, conv_kernel, .. } => Variant::Nystrom { landmarks: 16, pinv_iters, conv_kernel },
            Variant::Performer { kernel, .. } => Variant::Performer { features: 32, kernel },
            Variant::LongShort { .. } => Variant::LongShort { block: 16, landmarks: 4 },
            other => other,
        };
        for g in [0, 1] {
            let cfg = AttentionConfig::new(v.clone(), l, d).with_globals(g);
            let mut rng = Rng::new(3);
            let params = ParamStore::<f64>::init(&attention_specs(&cfg, l, ""), &mut rng).unwrap();
            let (q, k, vv) = (rand(&mut rng, l, d), rand(&mut rng, l, d), rand(&mut rng, l, d));
            let out = attend_tensors(&cfg, &q, &k, &vv, &params).unwrap();
            assert_eq!(out.shape(), &[l, d], "{tag}");
            assert!(out.is_finite(), "{tag} g={g}");
        }
    }
}

#[test]
fn invalid_geometry_is_rejected() {
    let bad = [
        AttentionConfig::new(Variant::Blockwise { block: 5, overlap: Overlap::None }, 32, 4),
        AttentionConfig::new(Variant::Blockwise { block: 3, overlap: Overlap::Half }, 30, 4),
        AttentionConfig::new(Variant::Nystrom { landmarks: 64, pinv_iters: 6, conv_kernel: 0 }, 32, 4),
        AttentionConfig::new(Variant::Exact, 8, 4).with_globals(9),
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}
