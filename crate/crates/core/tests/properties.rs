use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;

use avsam::config::{ApMode, ModelConfig};
use avsam::fusion::{fuse_stage, StageFusion};
use avsam::metrics::{average_precision, f_score, iou, pixel_ap};
use avsam::nn::{Init, ParamStore};
use avsam::seg_head::{positional_encoding, PromptBox, PromptPoint, PromptSet, PointLabel};
use avsam::synth::assign_splits;
use avsam::train::{epoch_order, Adam, Checkpoint};
use avsam::config::TrainConfig;
use avsam::AvSamF64;

fn mask(bits: &[bool], w: usize) -> Array2<u8> {
    Array2::from_shape_fn((bits.len() / w, w), |(y, x)| u8::from(bits[y * w + x]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in prop::collection::vec(any::<bool>(), 36), b in prop::collection::vec(any::<bool>(), 36)) {
        let (a, b) = (mask(&a, 6), mask(&b, 6));
        let ab = iou(a.view(), b.view()).unwrap();
        prop_assert_eq!(ab, iou(b.view(), a.view()).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(a.view(), a.view()).unwrap(), 1.0);
    }

    #[test]
    fn f_score_lies_between_precision_and_recall(a in prop::collection::vec(any::<bool>(), 36), b in prop::collection::vec(any::<bool>(), 36), beta_sq in 0.05f64..4.0) {
        let (p, g) = (mask(&a, 6), mask(&b, 6));
        let tp = p.iter().zip(g.iter()).filter(|(x, y)| **x == 1 && **y == 1).count() as f64;
        let (np, ng) = (p.sum() as f64, g.sum() as f64);
        prop_assume!(tp > 0.0);
        let (prec, rec) = (tp / np, tp / ng);
        let f = f_score(p.view(), g.view(), beta_sq).unwrap();
        prop_assert!(f >= prec.min(rec) - 1e-12 && f <= prec.max(rec) + 1e-12);
    }

    #[test]
    fn ap_ignores_monotone_rescaling(scores in prop::collection::vec(0u8..6, 30), labels in prop::collection::vec(0u8..2, 30)) {
        prop_assume!(labels.contains(&1));
        let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 5.0).collect();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v - 1.0).exp()).collect();
        let a = average_precision(&s, &labels).unwrap();
        prop_assert!((a - average_precision(&t, &labels).unwrap()).abs() < 1e-12);
        prop_assert!(a > 0.0 && a <= 1.0);
    }

    #[test]
    fn perfect_ranking_has_unit_ap(labels in prop::collection::vec(0u8..2, 2..40)) {
        prop_assume!(labels.contains(&1));
        let s: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        prop_assert_eq!(average_precision(&s, &labels).unwrap(), 1.0);
    }

    #[test]
    fn pooled_and_per_image_agree_on_one_image(scores in prop::collection::vec(0.0f64..1.0, 16), bits in prop::collection::vec(any::<bool>(), 16)) {
        prop_assume!(bits.iter().any(|&b| b));
        let s = Array2::from_shape_vec((4, 4), scores).unwrap();
        let g = mask(&bits, 4);
        let pooled = pixel_ap(&[s.view()], &[g.view()], ApMode::Pooled).unwrap();
        let per = pixel_ap(&[s.view()], &[g.view()], ApMode::PerImage).unwrap();
        prop_assert_eq!(pooled, per);
    }

    #[test]
    fn similarity_rows_are_constant(seed in 0u64..1000, d in 1usize..10, h in 1usize..7, w in 1usize..7, scale in 0.1f64..10.0) {
        let mut store = ParamStore::<f64>::new();
        let stage = StageFusion::new(&mut Init::new(&mut store, seed), 0, d, false);
        let v = Array3::from_shape_fn((d, h, w), |(c, y, x)| scale * ((c * 7 + y * 3 + x) as f64 * 0.37 + seed as f64).sin());
        let a = Array1::from_shape_fn(d, |c| scale * (c as f64 * 1.3 - seed as f64).cos());
        let (z, cache) = fuse_stage(&store, v.view(), a.view(), &stage, false).unwrap();
        prop_assert_eq!(z.dim(), v.dim());
        for row in cache.similarity().rows() {
            prop_assert!(row.iter().all(|&x| (x - row[0]).abs() <= 1e-12 * row[0].abs().max(1.0)));
        }
    }

    #[test]
    fn positional_encoding_is_bounded(u in 0.0f64..1.0, v in 0.0f64..1.0) {
        let pe = positional_encoding::<f64>(u, v, 32);
        prop_assert_eq!(pe.len(), 32);
        prop_assert!(pe.iter().all(|x| x.abs() <= 1.0));
        // sin² + cos² = 1 for every frequency.
        for k in 0..8 {
            prop_assert!((pe[k] * pe[k] + pe[8 + k] * pe[8 + k] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 1usize..200, seed in any::<u64>(), epoch in 0usize..50) {
        let mut o = epoch_order(n, seed, epoch);
        o.sort_unstable();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn split_sizes_follow_rounding(n in 1usize..400, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        let splits = assign_splits(&ids, (0.8, 0.1), seed);
        let train = splits.iter().filter(|s| s.name() == "train").count();
        let val = splits.iter().filter(|s| s.name() == "val").count();
        prop_assert_eq!(train, (n as f64 * 0.8).round() as usize);
        prop_assert_eq!(val, ((n as f64 * 0.1).round() as usize).min(n - train));
    }

    #[test]
    fn prompts_inside_the_frame_validate(x in 0.0f64..=64.0, y in 0.0f64..=64.0, off in 64.001f64..1e6) {
        let ok = PromptSet {
            points: vec![PromptPoint { x, y, label: PointLabel::Foreground }],
            boxes: vec![PromptBox { x0: 0.0, y0: 0.0, x1: x, y1: y }],
        };
        prop_assert!(ok.validate(64).is_ok());
        let bad = PromptSet {
            points: vec![PromptPoint { x: off, y, label: PointLabel::Background }],
            boxes: vec![],
        };
        prop_assert!(bad.validate(64).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip_any_seed(seed in any::<u64>()) {
        let mut cfg = ModelConfig::tiny();
        cfg.backbone.seed = seed;
        let model = AvSamF64::new(&cfg).unwrap();
        let adam = Adam::new(&model.params, &TrainConfig::default());
        let c = Checkpoint::capture(&model, &adam);
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back.model::<f64>().unwrap().params, model.params);
    }
}
