use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tea::cropping::{frames_for_ratio, prefix_crop, random_crop, sliding_windows, CropMode};
use tea::data::{zero_pad, SitsSample};
use tea::metrics::{ldiou, ldiou_weights, miou, mmiou, ConfusionMatrix};
use tea::prototype::{apply_confidence, PrototypeBank};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn vectors(count: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, count * d).prop_filter("norms bounded away from zero", move |v| {
        v.chunks(d).all(|c| norm(c) >= 0.5)
    })
}

fn similarity(tokens: &[f64], protos: &[f64], days: &[u32], valid: &[f64], n: usize, t: usize, k: usize, slots: usize, d: usize) -> Vec<f64> {
    let dev = Device::Cpu;
    let bank = PrototypeBank::from_tensors(
        Tensor::from_slice(protos, (k, slots, d), &dev).unwrap(),
        Tensor::new(&[1.0f64], &dev).unwrap(),
        30,
    );
    bank.similarity_map(
        &Tensor::from_slice(tokens, (1, n, t, d), &dev).unwrap(),
        &Tensor::from_slice(days, (1, t), &dev).unwrap(),
        &Tensor::from_slice(valid, (1, t), &dev).unwrap(),
    )
    .unwrap()
    .flatten_all()
    .unwrap()
    .to_vec1()
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_is_bounded_and_scale_free(
        tokens in vectors(3 * 4, 4),
        protos in vectors(2 * 3, 4),
        days in prop::collection::vec(0u32..120, 4),
        mask in prop::collection::vec(any::<bool>(), 4),
        scale in 0.01f64..250.0,
    ) {
        let mut valid: Vec<f64> = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
        valid[0] = 1.0;
        let base = similarity(&tokens, &protos, &days, &valid, 3, 4, 2, 3, 4);
        for s in &base {
            prop_assert!(s.abs() <= 1.0 + 1e-6);
        }
        let scaled: Vec<f64> = tokens.iter().map(|x| x * scale).collect();
        let other = similarity(&scaled, &protos, &days, &valid, 3, 4, 2, 3, 4);
        for (a, b) in base.iter().zip(&other) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn confidence_keeps_agreeing_argmax(
        scores in prop::collection::vec(-3.0f64..3.0, 6 * 4),
        sim in prop::collection::vec(-1.0f64..1.0, 6 * 4),
        scale in 0.0f64..5.0,
    ) {
        let dev = Device::Cpu;
        let s = Tensor::from_slice(&scores, (6, 4), &dev).unwrap();
        let m = Tensor::from_slice(&sim, (6, 4), &dev).unwrap();
        let out: Vec<Vec<f64>> = apply_confidence(&s, &m, &Tensor::new(&[scale], &dev).unwrap())
            .unwrap()
            .to_vec2()
            .unwrap();
        let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
        for p in 0..6 {
            let a = argmax(&scores[p * 4..p * 4 + 4]);
            if a == argmax(&sim[p * 4..p * 4 + 4]) {
                prop_assert_eq!(argmax(&out[p]), a);
            }
        }
    }

    #[test]
    fn miou_is_invariant_to_consistent_relabeling(
        gt in prop::collection::vec(0u32..4, 1..200),
        noise in prop::collection::vec(0u32..4, 200),
        perm in Just([0u32, 1, 2, 3]).prop_shuffle(),
    ) {
        let pred: Vec<u32> = gt.iter().zip(&noise).map(|(g, n)| if n % 2 == 0 { *g } else { *n }).collect();
        let mut a = ConfusionMatrix::new(4);
        a.add_all(&gt, &pred).unwrap();
        let mut b = ConfusionMatrix::new(4);
        let relabel = |v: &[u32]| v.iter().map(|x| perm[*x as usize]).collect::<Vec<_>>();
        b.add_all(&relabel(&gt), &relabel(&pred)).unwrap();
        let (ma, mb) = (miou(&a).unwrap(), miou(&b).unwrap());
        prop_assert!((ma - mb).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ma));
    }

    #[test]
    fn ldiou_below_mmiou_for_nondecreasing_rows(
        mut row in prop::collection::vec(0.0f64..1.0, 1..12),
    ) {
        row.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let taus: Vec<f64> = (1..=row.len()).map(|i| i as f64 / row.len() as f64).collect();
        prop_assert!(ldiou(&row, &taus).unwrap() <= mmiou(&row).unwrap() + 1e-12);
    }

    #[test]
    fn zero_pad_is_idempotent_and_preserves_frames(
        frames in 1usize..8,
        extra in 0usize..6,
        revisit in 1u32..20,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = SitsSample::new(
            "p",
            [frames, 2, 1, 2],
            (0..frames * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            (0..frames as u32).map(|t| 1 + t * revisit).collect(),
            vec![true; frames],
            vec![0, 1],
        )
        .unwrap();
        let target = frames + extra;
        let once = zero_pad(&s, target, revisit).unwrap();
        prop_assert_eq!(&zero_pad(&once, target, revisit).unwrap(), &once);
        prop_assert_eq!(once.frames, target);
        prop_assert_eq!(&once.values[..s.values.len()], &s.values[..]);
        prop_assert!(once.values[s.values.len()..].iter().all(|v| *v == 0.0));
        prop_assert!(once.day_offsets.windows(2).all(|w| w[1] > w[0]));
        prop_assert!(once.validate(2).is_ok());
    }

    #[test]
    fn crops_are_contiguous_slices(
        frames in 1usize..40,
        min_ratio in 0.05f64..1.0,
        seed in any::<u64>(),
        random_start in any::<bool>(),
    ) {
        let s = SitsSample::new(
            "c",
            [frames, 1, 1, 1],
            (0..frames).map(|i| if i % 3 != 1 { i as f32 + 1.0 } else { 0.0 }).collect(),
            (0..frames as u32).map(|t| 5 * t).collect(),
            (0..frames).map(|i| i % 3 != 1).collect(),
            vec![0],
        )
        .unwrap();
        let mode = if random_start { CropMode::RatioAndStart } else { CropMode::RatioOnly };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (crop, w) = random_crop(&s, &mut rng, min_ratio, mode).unwrap();
        prop_assert!(w.length >= 1 && w.start_index + w.length <= frames);
        prop_assert_eq!(w.length, frames_for_ratio(w.ratio, frames));
        prop_assert!(w.ratio >= min_ratio - 1e-12 && w.ratio <= 1.0);
        if !random_start {
            prop_assert_eq!(w.start_index, 0);
        }
        let r = w.start_index..w.start_index + w.length;
        prop_assert_eq!(&crop.values[..], &s.values[r.clone()]);
        prop_assert_eq!(&crop.day_offsets[..], &s.day_offsets[r.clone()]);
        prop_assert_eq!(&crop.valid_mask[..], &s.valid_mask[r]);
        prop_assert_eq!(&crop.labels, &s.labels);

        let mut again = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(random_crop(&s, &mut again, min_ratio, mode).unwrap().1, w);
    }

    #[test]
    fn prefix_and_sliding_windows_stay_in_range(
        frames in 1usize..100,
        ratio in 0.01f64..1.0,
        step in 0.05f64..0.5,
    ) {
        let n = frames_for_ratio(ratio, frames);
        prop_assert!(n >= 1 && n <= frames);
        let s = SitsSample::new(
            "w",
            [frames, 1, 1, 1],
            vec![1.0; frames],
            (0..frames as u32).collect(),
            vec![true; frames],
            vec![0],
        )
        .unwrap();
        prop_assert_eq!(prefix_crop(&s, ratio).unwrap().frames, n);
        for w in sliding_windows(frames, ratio, step) {
            prop_assert!(w.length >= 1 && w.start_index + w.length <= frames);
        }
    }
}

#[test]
fn ldiou_weight_properties_on_random_inputs() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let m = rng.random_range(1..16);
        let taus: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..100.0)).collect();
        let row: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let w = ldiou_weights(&taus).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let c = rng.random_range(0.001..1000.0);
        let scaled: Vec<f64> = taus.iter().map(|t| t * c).collect();
        let (a, b) = (ldiou(&row, &taus).unwrap(), ldiou(&row, &scaled).unwrap());
        assert!((a - b).abs() < 1e-12);
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo - 1e-12 <= a && a <= hi + 1e-12);
    }
}
