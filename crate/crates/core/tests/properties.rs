use fined_core::evaluation::{fuse_annotations, match_edges, BinaryMap, Matching};
use fined_core::inference::nms_thin;
use fined_core::kernels::bilinear_resize;
use fined_core::loss::{class_weights, pixel_loss, DEFAULT_GAMMA, DEFAULT_THRESHOLD};
use fined_core::network::{load_params, save_params};
use fined_core::{EdgeMap, GroundTruth, ParamStore, Shape, Tensor};
use proptest::prelude::*;

fn edge_map() -> impl Strategy<Value = EdgeMap> {
    (3usize..16, 3usize..16).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f32..=1.0, h * w)
            .prop_map(move |v| EdgeMap::from_values(h, w, v).unwrap())
    })
}

fn binary(h: usize, w: usize) -> impl Strategy<Value = BinaryMap> {
    prop::collection::vec(prop::bool::weighted(0.2), h * w)
        .prop_map(move |b| BinaryMap::new(h, w, b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nms_only_removes(em in edge_map()) {
        let t = nms_thin(&em);
        prop_assert_eq!(t.hw(), em.hw());
        for (a, b) in t.values().iter().zip(em.values()) {
            prop_assert!(*a == 0.0 || a == b);
        }
    }

    #[test]
    fn matching_is_one_to_one_within_radius(
        (p, g) in (2usize..10, 2usize..10).prop_flat_map(|(h, w)| (binary(h, w), binary(h, w))),
        r in 0.0f64..3.0,
    ) {
        let (_, w) = p.hw();
        let greedy = match_edges(&p, &g, r, Matching::Greedy).unwrap();
        let best = match_edges(&p, &g, r, Matching::Maximum).unwrap();
        prop_assert!(best.matched_pred >= greedy.matched_pred);
        for m in [&greedy, &best] {
            prop_assert_eq!(m.matched_pred, m.matched_gt);
            prop_assert_eq!(m.pairs.len(), m.matched_pred);
            let mut seen_p = std::collections::HashSet::new();
            let mut seen_g = std::collections::HashSet::new();
            for &(a, b) in &m.pairs {
                prop_assert!(seen_p.insert(a) && seen_g.insert(b));
                prop_assert!(p.bits()[a] && g.bits()[b]);
                let (dy, dx) = ((a / w) as f64 - (b / w) as f64, (a % w) as f64 - (b % w) as f64);
                prop_assert!((dy * dy + dx * dx).sqrt() <= r);
            }
        }
    }

    #[test]
    fn fused_values_are_annotator_fractions(maps in (1usize..5).prop_flat_map(|k| prop::collection::vec(binary(4, 5), k))) {
        let gt = fuse_annotations(&maps).unwrap();
        let k = maps.len();
        for (i, &v) in gt.values().iter().enumerate() {
            let n = maps.iter().filter(|m| m.bits()[i]).count();
            prop_assert_eq!(v, n as f32 / k as f32);
        }
    }

    #[test]
    fn class_weights_sum_to_one_when_both_classes_present(bits in prop::collection::vec(any::<bool>(), 2..64)) {
        prop_assume!(bits.iter().any(|&b| b) && bits.iter().any(|&b| !b));
        let n = bits.len();
        let gt = GroundTruth::from_values(1, n, bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        let cw = class_weights(&gt, DEFAULT_GAMMA, DEFAULT_THRESHOLD).unwrap();
        prop_assert!(cw.alpha > 0.0 && cw.beta > 0.0);
        let pos = bits.iter().filter(|&&b| b).count() as f64;
        prop_assert!((cw.beta - (n as f64 - pos) / n as f64).abs() < 1e-12);
    }

    #[test]
    fn pixel_loss_is_non_negative(p in -30.0f64..30.0, y in 0.0f64..=1.0) {
        let gt = GroundTruth::from_values(1, 2, vec![0.0, 1.0]).unwrap();
        let cw = class_weights(&gt, DEFAULT_GAMMA, DEFAULT_THRESHOLD).unwrap();
        prop_assert!(pixel_loss(p, y, &cw) >= 0.0);
    }

    #[test]
    fn resizing_a_constant_is_constant(c in -5.0f64..5.0, h in 1usize..9, w in 1usize..9, oh in 1usize..17, ow in 1usize..17) {
        let x = Tensor::from_vec(Shape::new(1, 2, h, w), vec![c; 2 * h * w]).unwrap();
        let y = bilinear_resize(&x, oh, ow).unwrap();
        for &v in y.data() {
            prop_assert!((v - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }

    #[test]
    fn weights_round_trip_bit_exactly(values in prop::collection::vec(any::<f32>(), 1..40), name in "[a-z][a-z0-9_.]{0,12}") {
        let mut store = ParamStore::new();
        store.insert(format!("{name}.weight"), Tensor::from_vec(Shape::new(values.len(), 1, 1, 1), values.clone()).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_params(&store, &path).unwrap();
        let back = load_params(&path).unwrap();
        let got = back.get(&format!("{name}.weight")).unwrap().data();
        prop_assert_eq!(got.len(), values.len());
        for (a, b) in got.iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
