use cosformer::continual::buffer::{importance_score, kmeans, reservoir_offers};
use cosformer::continual::{BufferEntry, RehearsalBuffer};
use cosformer::numerics::{pinv_newton_schulz, pinv_with_residuals, softmax_rows, Tensor};
use cosformer::rng::substream;
use cosformer::synthdata::{make_stream, StreamConfig};
use proptest::prelude::*;
use rand::Rng;

fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn entry(bag_id: usize) -> BufferEntry {
    BufferEntry {
        bag_id,
        task: 0,
        class: 0,
        score: bag_id as f64,
        patches: Tensor::zeros(1, 1),
        snapshot: Tensor::zeros(1, 1),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let mut rng = substream(seed, "softmax");
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..9));
        let m = random(&mut rng, r, c).scale(rng.random_range(0.1..20.0));
        let s = softmax_rows(&m).unwrap();
        for i in 0..r {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = Tensor::new(r, c, m.data().iter().map(|v| v + shift).collect()).unwrap();
        prop_assert!(softmax_rows(&shifted).unwrap().max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn identity_is_a_pinv_fixed_point(n in 1usize..12, iters in 1usize..30) {
        prop_assert_eq!(pinv_newton_schulz(&Tensor::identity(n), iters).unwrap(), Tensor::identity(n));
    }

    #[test]
    fn pinv_residual_decreases_on_well_conditioned_inputs(seed in 0u64..10_000) {
        let mut rng = substream(seed, "pinv-monotone");
        let n = rng.random_range(2..10);
        let noise = random(&mut rng, n, n).scale(0.3 / n as f64);
        let a = Tensor::new(n, n, Tensor::identity(n).data().iter().zip(noise.data()).map(|(x, y)| x + y).collect()).unwrap();
        let (_, residuals) = pinv_with_residuals(&a, 24).unwrap();
        for w in residuals.windows(2) {
            if w[0] > 1e-12 {
                prop_assert!(w[1] < w[0], "{:?}", residuals);
            }
        }
    }

    #[test]
    fn importance_score_is_the_best_patch_and_order_free(seed in 0u64..10_000) {
        let mut rng = substream(seed, "score");
        let (n, d) = (rng.random_range(1..12), rng.random_range(1..8));
        let bag = random(&mut rng, n, d);
        let emb: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let brute = (0..n)
            .map(|r| bag.row(r).iter().zip(&emb).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        let score = importance_score(&bag, &emb).unwrap();
        prop_assert_eq!(score, brute);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|r| bag.row(r).to_vec()).collect();
        rows.reverse();
        rows.rotate_left(seed as usize % n);
        prop_assert_eq!(importance_score(&Tensor::from_rows(&rows).unwrap(), &emb).unwrap(), score);
    }

    #[test]
    fn shrink_respects_capacity_and_is_deterministic(capacity in 0usize..30, len in 0usize..60, seed in 0u64..1000) {
        let mut a = RehearsalBuffer::new(capacity);
        a.entries = (0..len).map(entry).collect();
        let mut b = a.clone();
        a.shrink(&mut substream(seed, "deletion"));
        b.shrink(&mut substream(seed, "deletion"));
        prop_assert_eq!(a.len(), len.min(capacity));
        prop_assert!(a.entries.windows(2).all(|w| w[0].bag_id < w[1].bag_id));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn reservoir_never_exceeds_capacity(capacity in 1usize..20, rounds in prop::collection::vec(0usize..30, 1..6), seed in 0u64..1000) {
        let mut buf = RehearsalBuffer::new(capacity);
        let mut rng = substream(seed, "reservoir");
        let mut next = 0;
        for count in rounds {
            for (i, slot) in reservoir_offers(&mut buf, count, &mut rng) {
                match slot {
                    None => buf.entries.push(entry(next + i)),
                    Some(j) => buf.entries[j] = entry(next + i),
                }
            }
            next += count;
            prop_assert!(buf.len() <= capacity);
            prop_assert_eq!(buf.seen, next as u64);
        }
    }

    #[test]
    fn kmeans_labels_are_valid_and_deterministic(seed in 0u64..10_000, k in 1usize..6) {
        let mut rng = substream(seed, "points");
        let n = rng.random_range(1..25);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let a = kmeans(&points, k, &mut substream(seed, "km")).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.iter().all(|&c| c < k.min(n)));
        prop_assert_eq!(a, kmeans(&points, k, &mut substream(seed, "km")).unwrap());
    }

    #[test]
    fn streams_are_pure_and_bags_in_range(seed in 0u64..1000, lo in 3usize..6, span in 0usize..6) {
        let config = StreamConfig {
            tasks: 2,
            bags_per_class: 5,
            bag_size: [lo, lo + span],
            signal_patches: 3,
            seed,
            ..StreamConfig::default()
        };
        let a = make_stream(&config).unwrap();
        prop_assert_eq!(&a, &make_stream(&config).unwrap());
        for bag in &a.bags {
            prop_assert!((lo..=lo + span).contains(&bag.patches.rows()));
            prop_assert!(bag.patches.data().iter().all(|v| v.is_finite()));
        }
    }
}
