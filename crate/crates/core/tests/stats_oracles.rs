//! Independent oracles for the rank test: full enumeration of the exact U
//! distribution for small samples, and a permutation Monte-Carlo oracle for
//! the large-sample normal approximation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tspas_core::features::FeatureMatrix;
use tspas_core::scoring::Solver;
use tspas_core::stats::{mann_whitney_u, minmax_scale, rank_features};

/// U statistic of the first sample given distinct values.
fn u_statistic(xs: &[f64], ys: &[f64]) -> f64 {
    let mut u = 0.0;
    for &x in xs {
        for &y in ys {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

#[test]
fn exact_p_matches_full_enumeration_up_to_12() {
    // For every split size and every arrangement of tie-free ranks, the
    // implementation's exact path must match a brute-force subset
    // enumeration to 1e-12.
    for total in 2..=12usize {
        for nx in 1..total {
            let ny = total - nx;
            // Null distribution of U by full enumeration over subsets.
            let mut counts = vec![0u64; nx * ny + 1];
            let masks: Vec<u32> = (0u32..1 << total)
                .filter(|m| m.count_ones() as usize == nx)
                .collect();
            let mut u_of_mask = Vec::with_capacity(masks.len());
            for &mask in &masks {
                let xs: Vec<f64> = (0..total)
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| (i + 1) as f64)
                    .collect();
                let ys: Vec<f64> = (0..total)
                    .filter(|i| mask >> i & 1 == 0)
                    .map(|i| (i + 1) as f64)
                    .collect();
                let u = u_statistic(&xs, &ys);
                counts[u as usize] += 1;
                u_of_mask.push((xs, ys, u));
            }
            let all: f64 = masks.len() as f64;
            for (xs, ys, u) in u_of_mask {
                let u_min = u.min((nx * ny) as f64 - u) as usize;
                let tail: u64 = counts[..=u_min].iter().sum();
                let expected = (2.0 * tail as f64 / all).min(1.0);
                let (u_impl, p_impl) = mann_whitney_u(&xs, &ys).unwrap();
                assert_eq!(u_impl, u, "U mismatch at nx={nx}, ny={ny}");
                assert!(
                    (p_impl - expected).abs() <= 1e-12,
                    "nx={nx} ny={ny} u={u}: {p_impl} vs {expected}"
                );
            }
        }
    }
}

#[test]
fn fixed_case_is_one_tenth() {
    let (u, p) = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert_eq!(u, 0.0);
    assert_eq!(p, 0.1);
}

#[test]
fn approximation_matches_permutation_oracle() {
    // Two shifted near-normal samples of 50 each: the tie-corrected normal
    // approximation must sit within 0.01 of a permutation Monte-Carlo
    // estimate (1e5 permutations, fixed seed).
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        // Sum of three uniforms: light-tailed, plenty for the oracle.
        rng.random::<f64>() + rng.random::<f64>() + rng.random::<f64>() - 1.5
    };
    let xs: Vec<f64> = (0..50).map(|_| normal(&mut rng)).collect();
    let ys: Vec<f64> = (0..50).map(|_| normal(&mut rng) + 0.25).collect();
    let (_, p_impl) = mann_whitney_u(&xs, &ys).unwrap();

    let observed = u_statistic(&xs, &ys);
    let center = (50.0 * 50.0) / 2.0;
    let mut pooled: Vec<f64> = xs.iter().chain(&ys).copied().collect();
    let mut extreme = 0usize;
    let trials = 100_000;
    for _ in 0..trials {
        pooled.shuffle(&mut rng);
        let u = u_statistic(&pooled[..50], &pooled[50..]);
        if (u - center).abs() >= (observed - center).abs() {
            extreme += 1;
        }
    }
    let p_oracle = extreme as f64 / trials as f64;
    assert!(
        (p_impl - p_oracle).abs() < 0.01,
        "approx {p_impl} vs permutation {p_oracle}"
    );
}

#[test]
fn p_invariant_under_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let xs: Vec<f64> = (0..14).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let ys: Vec<f64> = (0..11).map(|_| rng.random::<f64>() * 4.0 - 1.0).collect();
        let (u, p) = mann_whitney_u(&xs, &ys).unwrap();
        let tx: Vec<f64> = xs.iter().map(|&v| v.exp()).collect();
        let ty: Vec<f64> = ys.iter().map(|&v| v.exp()).collect();
        let (u_t, p_t) = mann_whitney_u(&tx, &ty).unwrap();
        assert_eq!(u, u_t);
        assert_eq!(p, p_t);
    }
}

#[test]
fn scaling_does_not_change_the_ranking() {
    // rank_features scales columns internally; an unscaled re-computation
    // must produce identical statistics because the test is rank-based.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 30;
    let labels: Vec<Solver> = (0..n)
        .map(|i| if i < 15 { Solver::Eax } else { Solver::Lkh })
        .collect();
    let names = ["shifted", "noise_wide", "noise_tiny"];
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let class_shift = if i < 15 { 0.0 } else { 1.5 };
            vec![
                rng.random::<f64>() + class_shift,
                rng.random::<f64>() * 1000.0,
                rng.random::<f64>() * 1e-6,
            ]
        })
        .collect();
    let matrix = FeatureMatrix {
        instance_ids: (0..n).map(|i| format!("i{i:02}")).collect(),
        feature_names: names.iter().map(|s| s.to_string()).collect(),
        rows,
        costs: vec![0.0; n],
    };
    let ranking = rank_features(&matrix, &labels, 3, 0.05).unwrap();

    for entry in &ranking.entries {
        let j = names.iter().position(|n| n == &entry.feature).unwrap();
        let column = matrix.column(j);
        let xs: Vec<f64> = column[..15].to_vec();
        let ys: Vec<f64> = column[15..].to_vec();
        let (_, p_raw) = mann_whitney_u(&xs, &ys).unwrap();
        assert_eq!(entry.p_value, p_raw, "feature {}", entry.feature);
    }
    assert_eq!(ranking.entries[0].feature, "shifted");
}

#[test]
fn minmax_output_bounds_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let len = rng.random_range(2..40);
        let column: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 100.0 - 50.0).collect();
        let (scaled, constant) = minmax_scale(&column).unwrap();
        if constant {
            assert!(scaled.iter().all(|&v| v == 0.5));
        } else {
            assert!(scaled.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(scaled.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
    }
}
