use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use texrec::data::{augment, generate_sample, GenConfig, TrainSample};
use texrec::denoiser::{DenoiseInput, NoiseModel};
use texrec::diffusion::{
    estimate_x0, forward_sample, make_schedule, reverse_step, PredictionSequenceSet, StepSubsequence, Trajectory,
};
use texrec::grid::{ClassMap, Grid, Image, NoiseField, SignalMask};
use texrec::metrics::{confusion, metrics, sliding_window_infer, ClassRecall, ConfusionCounts, PixelTally, WindowConfig};
use texrec::supervision::{loss_mask, unsupervised_loss, MaskMode};
use texrec::texture::{consistency_feature, max_entropy, structural_encoding, texture_entropy};

fn grid(h: usize, w: usize, lo: f64, hi: f64) -> impl Strategy<Value = Grid<f64>> {
    prop::collection::vec(lo..=hi, h * w).prop_map(move |v| Grid::from_vec(h, w, v).unwrap())
}

fn class_map(h: usize, w: usize, k: u8) -> impl Strategy<Value = ClassMap> {
    prop::collection::vec(0..k, h * w).prop_map(move |v| ClassMap::new(h, w, k, v).unwrap())
}

/// `n` trajectories of `m` clamped estimates on a `2 x 3` grid.
fn sequence_set(n: usize, m: usize) -> impl Strategy<Value = PredictionSequenceSet<f64>> {
    prop::collection::vec(prop::collection::vec(grid(2, 3, -1.0, 1.0), m + 1), n).prop_map(move |trs| {
        PredictionSequenceSet {
            steps: StepSubsequence::evenly_spaced(100, m).unwrap(),
            trajectories: trs
                .into_iter()
                .map(|mut gs| {
                    let output = SignalMask(gs.pop().unwrap());
                    let x0_preds: Vec<SignalMask<f64>> = gs.into_iter().map(SignalMask).collect();
                    Trajectory {
                        noisy: x0_preds.clone(),
                        eps_hat: x0_preds.iter().map(|x| NoiseField(x.0.clone())).collect(),
                        x0_preds,
                        output,
                    }
                })
                .collect(),
        }
    })
}

struct Zero;

impl NoiseModel<f64> for Zero {
    fn predict_batch(&self, inputs: &[DenoiseInput<'_, f64>]) -> texrec::Result<Vec<NoiseField<f64>>> {
        Ok(inputs.iter().map(|i| NoiseField::zeros(i.x_t.height(), i.x_t.width())).collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn double_precision_round_trip(y in grid(4, 5, -1.0, 1.0), e in grid(4, 5, -4.0, 4.0), t in 1usize..=100) {
        let sched = make_schedule(100, "linear").unwrap();
        let x = forward_sample(&SignalMask(y.clone()), t, &NoiseField(e.clone()), &sched).unwrap();
        let back = estimate_x0(&x, t, &NoiseField(e), &sched).unwrap();
        prop_assert!(back.0.max_abs_diff(&y) <= 1e-10);
    }

    #[test]
    fn alpha_bar_strictly_decreasing(steps in 1usize..400, cosine in any::<bool>()) {
        let sched = make_schedule(steps, if cosine { "cosine" } else { "linear" }).unwrap();
        let ab = sched.alpha_bars();
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(ab.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn noiseless_reverse_step_is_pure(x in grid(3, 3, -3.0, 3.0), e in grid(3, 3, -3.0, 3.0), t in 1usize..=100) {
        let sched = make_schedule(100, "linear").unwrap();
        let (x, e, z) = (SignalMask(x), NoiseField(e), NoiseField::zeros(3, 3));
        let a = reverse_step(&x, t, &e, &z, &sched).unwrap();
        let b = reverse_step(&x, t, &e, &z, &sched).unwrap();
        let bits = |m: &SignalMask<f64>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn entropy_within_bounds(binary in class_map(7, 9, 2), ternary in class_map(5, 6, 3)) {
        for (m, window) in [(&binary, 3), (&ternary, 2)] {
            let e = texture_entropy(&structural_encoding(m, window).unwrap());
            prop_assert!(e >= 0.0);
            prop_assert!(e <= max_entropy(m.classes(), window) + 1e-12);
        }
    }

    #[test]
    fn lambda_in_unit_interval(seq in prop::collection::vec(-1e3f64..1e3, 2..40), tau in 0usize..20) {
        let tau = tau.min(seq.len() / 2);
        let lam = consistency_feature(&[seq], tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&lam));
    }

    #[test]
    fn positive_offset_never_raises_lambda(seq in prop::collection::vec(0.0f64..9.0, 13), offset in 0.0f64..50.0) {
        let base = consistency_feature(std::slice::from_ref(&seq), 1).unwrap();
        let shifted: Vec<f64> = seq.iter().map(|v| v + offset).collect();
        let moved = consistency_feature(&[shifted], 1).unwrap();
        prop_assert!(moved <= base + 1e-12);
    }

    #[test]
    fn reversal_keeps_lambda(seq in prop::collection::vec(0.0f64..9.0, 3..30), tau in 0usize..6) {
        let tau = tau.min(seq.len() / 2);
        let rev: Vec<f64> = seq.iter().rev().copied().collect();
        let a = consistency_feature(&[seq], tau).unwrap();
        let b = consistency_feature(&[rev], tau).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn shrinking_tau_v_never_grows_the_gate(set in sequence_set(3, 4), lambda in 0.0f64..=1.0, tv in 0.0f64..1.0, shrink in 0.0f64..=1.0) {
        let wide = loss_mask(&set, lambda, 0.6, tv, MaskMode::Consistency).unwrap();
        let narrow = loss_mask(&set, lambda, 0.6, tv * shrink, MaskMode::Consistency).unwrap();
        prop_assert!(narrow.as_slice().iter().zip(wide.as_slice()).all(|(n, w)| n <= w));
    }

    #[test]
    fn full_lambda_opens_the_confidence_term(set in sequence_set(2, 3), tc in 0.0f64..1.0, tv in 0.0f64..1.0) {
        // Literal mode with lambda = 1 compares dispersion against 0, which
        // always holds, so only the confidence term could close the gate.
        let gate = loss_mask(&set, 1.0, tc, tv, MaskMode::Literal).unwrap();
        prop_assert!(gate.as_slice().iter().all(|&v| v == 1));
    }

    #[test]
    fn unsupervised_loss_non_negative(set in sequence_set(2, 3), label in class_map(2, 3, 2), gate in class_map(2, 3, 2)) {
        let sched = make_schedule(100, "linear").unwrap();
        let loss = unsupervised_loss(&set, &label, &gate, &sched).unwrap();
        prop_assert!(loss >= 0.0);
        let empty = ClassMap::zeros(2, 3, 2);
        prop_assert_eq!(unsupervised_loss(&set, &label, &empty, &sched).unwrap(), 0.0);
    }

    #[test]
    fn dice_iou_identity(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000, tn in 0u64..10_000) {
        let none = ClassRecall { detected: 0, total: 0 };
        let r = metrics(&ConfusionCounts { tp, fp, fn_, tn }, none, none);
        if !r.iou_undefined {
            prop_assert!((r.dice - 2.0 * r.iou / (1.0 + r.iou)).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_pixel_order(pred in class_map(1, 40, 2), gt in class_map(1, 40, 3), perm in Just((0..40).collect::<Vec<usize>>()).prop_shuffle()) {
        let shuffle = |m: &ClassMap| {
            ClassMap::new(1, 40, m.classes(), perm.iter().map(|&i| m.as_slice()[i]).collect()).unwrap()
        };
        prop_assert_eq!(confusion(&pred, &gt).unwrap(), confusion(&shuffle(&pred), &shuffle(&gt)).unwrap());
        prop_assert_eq!(
            PixelTally::of(&pred, &gt).unwrap().report(),
            PixelTally::of(&shuffle(&pred), &shuffle(&gt)).unwrap().report()
        );
    }

    #[test]
    fn stitched_probability_in_unit_interval(img in grid(11, 14, -2.0, 2.0), win in 3usize..8, stride in 1usize..6, seed in any::<u64>()) {
        let sched = make_schedule(100, "linear").unwrap();
        let steps = StepSubsequence::evenly_spaced(100, 3).unwrap();
        let cfg = WindowConfig::new(win, stride.min(win));
        let out = sliding_window_infer(&Image::from_grid(img), &Zero, &sched, &steps, &cfg, seed).unwrap();
        prop_assert!(out.probability.as_slice().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn augmentation_adds_no_classes(sample_seed in 0u64..1000, aug_seed in any::<u64>()) {
        let rec = generate_sample(&GenConfig::small(), sample_seed).unwrap();
        let before: BTreeSet<u8> = rec.classes.as_ref().unwrap().as_slice().iter().copied().collect();
        let out: TrainSample<f32> = augment(&rec, &mut ChaCha8Rng::seed_from_u64(aug_seed));
        let after: BTreeSet<u8> = out.classes.unwrap().as_slice().iter().copied().collect();
        prop_assert!(after.is_subset(&before));
    }
}
