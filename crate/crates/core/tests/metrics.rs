use mdvc_core::corpus::FeatureSequence;
use mdvc_core::metrics::{dtw_align, dtw_align_with, global_variance, mcd, msd, MCD_SCALE};
use mdvc_core::FEATURE_DIM as D;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_seq(rng: &mut ChaCha8Rng, frames: usize) -> FeatureSequence {
    let data = (0..frames * D).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureSequence::new("r", 0, data).unwrap()
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Minimum cost over every monotone path, enumerated recursively.
fn brute_force(n: usize, m: usize, dist: &dyn Fn(usize, usize) -> f64) -> f64 {
    fn go(i: usize, j: usize, n: usize, m: usize, dist: &dyn Fn(usize, usize) -> f64) -> f64 {
        let here = dist(i, j);
        if i == n - 1 && j == m - 1 {
            return here;
        }
        let mut best = f64::INFINITY;
        for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
            if i + di < n && j + dj < m {
                best = best.min(go(i + di, j + dj, n, m, dist));
            }
        }
        here + best
    }
    go(0, 0, n, m, dist)
}

fn check_path(pairs: &[(usize, usize)], n: usize, m: usize) {
    assert_eq!(pairs.first(), Some(&(0, 0)));
    assert_eq!(pairs.last(), Some(&(n - 1, m - 1)));
    for w in pairs.windows(2) {
        let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        assert!(matches!(step, (1, 0) | (0, 1) | (1, 1)), "bad step {step:?}");
    }
}

#[test]
fn dtw_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=6);
        let a = random_seq(&mut rng, n);
        let b = random_seq(&mut rng, m);
        let p = dtw_align(&a, &b);
        check_path(&p.pairs, n, m);
        let path_cost: f64 = p.pairs.iter().map(|&(i, j)| euclid(a.frame(i), b.frame(j))).sum();
        assert!((path_cost - p.cost).abs() < 1e-9);
        let best = brute_force(n, m, &|i, j| euclid(a.frame(i), b.frame(j)));
        assert!((p.cost - best).abs() < 1e-9, "dtw {} brute {}", p.cost, best);
    }
}

#[test]
fn dtw_prefers_the_diagonal_on_ties() {
    let p = dtw_align_with(3, 3, |_, _| 0.0);
    assert_eq!(p.pairs, vec![(0, 0), (1, 1), (2, 2)]);
}

#[test]
fn mcd_of_unequal_lengths_uses_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_seq(&mut rng, 5);
    // b repeats frame 2 of a; the alignment absorbs the repetition
    let mut data = Vec::new();
    for f in [0, 1, 2, 2, 3, 4] {
        data.extend_from_slice(a.frame(f));
    }
    let b = FeatureSequence::new("b", 1, data).unwrap();
    assert_eq!(mcd(&a, &b), 0.0);
}

#[test]
fn mcd_is_linear_in_a_constant_offset() {
    let base = FeatureSequence::new("a", 0, vec![0.25; 4 * D]).unwrap();
    let shifted = |delta: f32| {
        let mut v = base.data().to_vec();
        for f in 0..4 {
            v[f * D + 11] += delta;
        }
        FeatureSequence::new("b", 0, v).unwrap()
    };
    let m1 = mcd(&base, &shifted(0.5));
    let m2 = mcd(&base, &shifted(-1.5));
    assert!((m2 / m1 - 3.0).abs() < 1e-5);
    assert!((m1 - MCD_SCALE * (2.0f64 * 0.25).sqrt()).abs() < 1e-5);
}

fn seq_strategy(max: usize) -> impl Strategy<Value = FeatureSequence> {
    (1..=max).prop_flat_map(|t| {
        prop::collection::vec(-2.0f32..2.0, t * D).prop_map(|v| FeatureSequence::new("p", 0, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mcd_symmetric_for_equal_lengths(a in seq_strategy(6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_seq(&mut rng, a.frames());
        prop_assert_eq!(mcd(&a, &a), 0.0);
        prop_assert!((mcd(&a, &b) - mcd(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn dtw_never_exceeds_the_diagonal(a in seq_strategy(8), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_seq(&mut rng, a.frames());
        let diag: f64 = (0..a.frames()).map(|i| euclid(a.frame(i), b.frame(i))).sum();
        prop_assert!(dtw_align(&a, &b).cost <= diag + 1e-12);
    }

    #[test]
    fn gv_invariant_under_frame_permutation(a in seq_strategy(8), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..a.frames()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut data = Vec::new();
        for &f in &order {
            data.extend_from_slice(a.frame(f));
        }
        let b = FeatureSequence::new("q", 0, data).unwrap();
        let (ga, gb) = (global_variance([&a]).unwrap(), global_variance([&b]).unwrap());
        for (x, y) in ga.per_dim.iter().zip(&gb.per_dim) {
            prop_assert!(*x >= 0.0);
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
        prop_assert!((ga.average - ga.per_dim.iter().sum::<f64>() / D as f64).abs() < 1e-12);
    }
}

#[test]
fn msd_symmetric_and_zero_on_self() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let t = rng.random_range(64..160);
        let a = random_seq(&mut rng, t);
        let b = random_seq(&mut rng, t);
        assert_eq!(msd(&a, &a).unwrap(), 0.0);
        let (x, y) = (msd(&a, &b).unwrap(), msd(&b, &a).unwrap());
        assert!(x > 0.0 && (x - y).abs() < 1e-12);
    }
}
