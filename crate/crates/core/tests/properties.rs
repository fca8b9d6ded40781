use escore::autodiff::Tensor;
use escore::data::rng::Stream;
use escore::data::{parse_points_csv, write_points_csv};
use escore::heads::{energy_loss_m, energy_loss_pair};
use escore::mar::{apply_mask, cfg_combine, unmask_counts, ContextualRepresentation, Origin, UnmaskSchedule};
use escore::nn::{Checkpoint, Init, ParamStore};
use escore::stats::{
    brute_force_assignment, energy_statistic, mmd_gaussian, wasserstein_assignment, Bandwidth,
    EnergyEstimatorConfig, WassersteinOrder,
};
use proptest::prelude::*;

fn vec_of(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, d)
}

fn set(n: std::ops::RangeInclusive<usize>, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(vec_of(d), n).prop_map(move |rows| {
        let n = rows.len();
        Tensor::from_vec(&[n, d], rows.concat())
    })
}

fn pair_of_sets() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=4).prop_flat_map(|d| (set(1..=12, d), set(1..=12, d)))
}

proptest! {
    #[test]
    fn energy_pair_is_symmetric_in_samples(x1 in vec_of(3), x2 in vec_of(3), y in vec_of(3)) {
        prop_assert_eq!(energy_loss_pair(&x1, &x2, &y), energy_loss_pair(&x2, &x1, &y));
    }

    #[test]
    fn energy_pair_is_translation_invariant(x1 in vec_of(2), x2 in vec_of(2), y in vec_of(2), c in vec_of(2)) {
        let shift = |v: &[f64]| v.iter().zip(&c).map(|(a, b)| a + b).collect::<Vec<_>>();
        let a = energy_loss_pair(&x1, &x2, &y);
        let b = energy_loss_pair(&shift(&x1), &shift(&x2), &shift(&y));
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn energy_m_matches_pair_at_two(x1 in vec_of(4), x2 in vec_of(4), y in vec_of(4)) {
        let m = energy_loss_m(&[&x1, &x2], &y).unwrap();
        prop_assert!((m - energy_loss_pair(&x1, &x2, &y)).abs() <= 1e-12);
    }

    #[test]
    fn energy_m_is_permutation_invariant(
        xs in prop::collection::vec(vec_of(2), 2..6),
        y in vec_of(2),
        seed in any::<u64>(),
    ) {
        let perm = Stream::new(seed, "perm").permutation(xs.len());
        let a: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let b: Vec<&[f64]> = perm.iter().map(|&i| xs[i].as_slice()).collect();
        let (va, vb) = (energy_loss_m(&a, &y).unwrap(), energy_loss_m(&b, &y).unwrap());
        prop_assert!((va - vb).abs() <= 1e-12 * (1.0 + va.abs()), "{va} vs {vb}");
    }

    #[test]
    fn v_statistic_is_nonnegative((x, y) in pair_of_sets()) {
        prop_assert!(energy_statistic(&x, &y, EnergyEstimatorConfig::V).unwrap() >= -1e-12);
    }

    #[test]
    fn v_statistic_vanishes_on_reordered_copies(x in set(1..=16, 3), seed in any::<u64>()) {
        let perm = Stream::new(seed, "perm").permutation(x.rows());
        let data: Vec<f64> = perm.iter().flat_map(|&i| x.row(i).to_vec()).collect();
        let y = Tensor::from_vec(x.shape(), data);
        prop_assert!(energy_statistic(&x, &y, EnergyEstimatorConfig::V).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn mmd_is_symmetric_and_zero_on_self((x, y) in pair_of_sets()) {
        let (a, _) = mmd_gaussian(&x, &y, Bandwidth::Fixed(1.0)).unwrap();
        let (b, _) = mmd_gaussian(&y, &x, Bandwidth::Fixed(1.0)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a >= -1e-12);
        prop_assert!(mmd_gaussian(&x, &x, Bandwidth::Fixed(1.0)).unwrap().0.abs() <= 1e-12);
    }

    #[test]
    fn assignment_matches_exhaustive_search(
        (x, y) in (1usize..=5).prop_flat_map(|n| (set(n..=n, 2), set(n..=n, 2)))
    ) {
        let n = x.rows();
        let w = wasserstein_assignment(&x, &y, WassersteinOrder::W1).unwrap();
        let cost: Vec<f64> = (0..n)
            .flat_map(|i| {
                let (x, y) = (&x, &y);
                (0..n).map(move |j| {
                    x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                })
            })
            .collect();
        let best = brute_force_assignment(&cost, n) / n as f64;
        prop_assert!((w - best).abs() <= 1e-12 * (1.0 + best), "{w} vs {best}");
    }

    #[test]
    fn points_csv_round_trips_bitwise(x in set(1..=10, 3), tags in prop::collection::vec(0u32..100, 10)) {
        let extra: Vec<f64> = tags[..x.rows()].iter().map(|&t| t as f64).collect();
        let text = write_points_csv(&x, &[("class", &extra)]);
        let table = parse_points_csv(&text).unwrap();
        prop_assert_eq!(table.points.shape(), x.shape());
        for (a, b) in table.points.data().iter().zip(x.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(table.column("class").unwrap(), extra.as_slice());
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5, step in any::<u32>()) {
        let mut store = ParamStore::new(seed);
        store.register("a.weight", &[rows, cols], Init::Normal { std: 1.0 });
        store.register("a.bias", &[cols], Init::Zeros);
        let ck = Checkpoint::new(store, serde_json::json!({"seed": seed}), "d".repeat(64), step as u64);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn unmask_schedules_cover_every_position(len in 1usize..64, frac in 0.0..1.0f64, cosine in any::<bool>()) {
        let iterations = 1 + ((len - 1) as f64 * frac) as usize;
        let schedule = if cosine { UnmaskSchedule::Cosine } else { UnmaskSchedule::Uniform };
        let counts = unmask_counts(len, iterations, schedule).unwrap();
        prop_assert_eq!(counts.len(), iterations);
        prop_assert!(counts.iter().all(|&c| c >= 1));
        prop_assert_eq!(counts.iter().sum::<usize>(), len);
    }

    #[test]
    fn masks_hide_at_least_one_position(len in 1usize..40, lo in 0.0..1.0f64, w in 0.0..1.0f64, seed in any::<u64>()) {
        let hi = (lo + w).min(1.0);
        let y = Tensor::full(&[len, 2], 1.0);
        let (masked, pattern) = apply_mask(&y, lo, hi, &mut Stream::new(seed, "mask"));
        let count = pattern.count();
        prop_assert!((1..=len).contains(&count));
        for i in 0..len {
            let zero = masked.row(i).iter().all(|&v| v == 0.0);
            prop_assert_eq!(zero, pattern.masked[i]);
        }
    }

    #[test]
    fn unit_guidance_returns_conditional_bits(h in set(1..=8, 4), u in set(8..=8, 4)) {
        let n = h.rows();
        let uncond = Tensor::from_vec(h.shape(), u.data()[..h.len()].to_vec());
        let c = ContextualRepresentation { h: h.clone(), origin: Origin::Student };
        let nc = ContextualRepresentation { h: uncond, origin: Origin::Student };
        let out = cfg_combine(&c, &nc, 1.0).unwrap();
        prop_assert_eq!(out.h.rows(), n);
        for (a, b) in out.h.data().iter().zip(h.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn streams_are_pure_functions_of_seed_and_label(seed in any::<u64>(), k in 0u64..1000) {
        let a = Stream::new(seed, "x").child_index("k", k).normals(4);
        let b = Stream::new(seed, "x").child_index("k", k).normals(4);
        prop_assert_eq!(a, b);
    }
}
