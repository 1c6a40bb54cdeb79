//! Property tests for the data and metric invariants.

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use decoseg_core::data::{
    apply_augment, default_benchmark, generate_scene, sample_episode, AugmentDraw, MaskGrid,
};
use decoseg_core::decomp::MemoryBank;
use decoseg_core::head::{downsample_mask, miou, IouAccumulator, Prediction};

fn arb_draw() -> impl Strategy<Value = AugmentDraw> {
    (
        any::<bool>(),
        any::<bool>(),
        0u8..4,
        -0.15f64..0.15,
        -0.5f64..0.5,
    )
        .prop_map(|(hflip, vflip, quarter_turns, brightness, hue_angle)| AugmentDraw {
            hflip,
            vflip,
            quarter_turns,
            brightness,
            hue_angle,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Geometric transforms commute with mask extraction and preserve the
    /// foreground pixel count; outputs stay binary and in range.
    #[test]
    fn augmentation_commutes_with_masks(seed in 0u64..500, class in 1u32..13, d in arb_draw()) {
        let b = default_benchmark();
        let (img, mask) = generate_scene(seed, &b.source, class, 32).unwrap();
        let (ai, am) = apply_augment(&img, &mask, &d.geometric_only());
        prop_assert_eq!(am.foreground_count(), mask.foreground_count());
        prop_assert!(am.labels.iter().all(|&v| v <= 1));
        prop_assert!(ai.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        // photometric parts leave the mask untouched entirely
        let (_, am2) = apply_augment(&img, &mask, &d);
        prop_assert_eq!(&am2.labels, &am.labels);
    }

    /// The episode stream is a pure function of its seed.
    #[test]
    fn episode_stream_is_pure(seed in 0u64..300, k in 1usize..4) {
        let b = default_benchmark();
        let e1 = sample_episode(seed, &b.targets[0], k, 24).unwrap();
        let e2 = sample_episode(seed, &b.targets[0], k, 24).unwrap();
        prop_assert_eq!(e1.class_id, e2.class_id);
        prop_assert_eq!(&e1.query_mask.labels, &e2.query_mask.labels);
        prop_assert_eq!(&e1.query_image.pixels, &e2.query_image.pixels);
        for (a, b) in e1.support.iter().zip(&e2.support) {
            prop_assert_eq!(&a.0.pixels, &b.0.pixels);
        }
    }

    /// Scene coverage postcondition holds across the class range.
    #[test]
    fn coverage_bounds(seed in 0u64..400, class in 1u32..13) {
        let b = default_benchmark();
        let (_, mask) = generate_scene(seed, &b.source, class, 40).unwrap();
        let cov = mask.coverage();
        prop_assert!((0.05..=0.60).contains(&cov), "coverage {}", cov);
    }

    /// Memory bank: bounded size, FIFO order, unit entries.
    #[test]
    fn memory_bank_invariants(cap in 1usize..16, pushes in 1usize..48, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = MemoryBank::new(cap);
        let mut expected_tail: Vec<u32> = Vec::new();
        for i in 0..pushes {
            let mut v: Array1<f64> = Array1::from_shape_fn(6, |_| {
                rand::Rng::random_range(&mut rng, -1.0..1.0)
            });
            let n = v.dot(&v).sqrt();
            if n < 1e-9 { continue; }
            v /= n;
            bank.push(v, i as u32);
            expected_tail.push(i as u32);
        }
        prop_assert!(bank.len() <= cap);
        let stored: Vec<u32> = bank.iter().map(|(_, c)| *c).collect();
        let tail: Vec<u32> = expected_tail[expected_tail.len().saturating_sub(cap)..].to_vec();
        prop_assert_eq!(stored, tail);
        for (e, _) in bank.iter() {
            prop_assert!((e.dot(e).sqrt() - 1.0).abs() < 1e-5);
        }
    }

    /// mIoU is bounded and permutation invariant over the episode list.
    #[test]
    fn miou_bounded_and_permutation_invariant(seeds in proptest::collection::vec(0u64..200, 2..5)) {
        let b = default_benchmark();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for (i, &s) in seeds.iter().enumerate() {
            let (_, gt) = generate_scene(s, &b.source, 1 + (i as u32 % 12), 16).unwrap();
            let (_, other) = generate_scene(s.wrapping_add(7), &b.source, 1 + (i as u32 % 12), 16).unwrap();
            preds.push(Prediction {
                fg_score: other.labels.mapv(f64::from),
                mask: other.labels.clone(),
            });
            gts.push(gt);
        }
        let m = miou(&preds, &gts, false).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        // reverse the episode order: totals-based accumulation is invariant
        let mr = miou(
            &preds.iter().rev().cloned().collect::<Vec<_>>(),
            &gts.iter().rev().cloned().collect::<Vec<_>>(),
            false,
        ).unwrap();
        prop_assert_eq!(m, mr);
    }

    /// Downsampled masks stay binary and represent the area-majority rule.
    #[test]
    fn downsample_majority(seed in 0u64..200, class in 1u32..13) {
        let b = default_benchmark();
        let (_, mask) = generate_scene(seed, &b.source, class, 32).unwrap();
        let ds = downsample_mask(&mask, 8);
        prop_assert!(ds.iter().all(|&v| v <= 1));
        let block = 4;
        for y in 0..8 {
            for x in 0..8 {
                let mut s = 0usize;
                for by in 0..block {
                    for bx in 0..block {
                        s += mask.labels[[y * block + by, x * block + bx]] as usize;
                    }
                }
                prop_assert_eq!(ds[[y, x]], u8::from(2 * s >= block * block));
            }
        }
    }
}

/// Vacuous-class convention: zero union yields IoU 1 for that class.
#[test]
fn iou_vacuous_class_is_one() {
    let mut acc = IouAccumulator::default();
    let empty_pred = Array2::<u8>::zeros((4, 4));
    let empty_gt = MaskGrid::new(Array2::zeros((4, 4))).unwrap();
    acc.add(&empty_pred, &empty_gt);
    assert_eq!(acc.foreground_iou(), 1.0);
    assert_eq!(acc.background_iou(), 1.0);
}
