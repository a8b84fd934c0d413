//! Harness-level oracles: brute-force threshold tuning, exact baseline
//! reproduction by the oracle/constant selectors, wrapper feature selection
//! against exhaustive search, and the test-fold leakage canary.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tspas_core::features::FeatureMatrix;
use tspas_core::models::TreeParams;
use tspas_core::scoring::{vbs_sbs, ParScores, Solver};
use tspas_core::selection::{
    exhaustive_selection, fit_fold, make_folds, run_cv_selector, sfbs, sffs, tune_threshold,
    wrapper_objective, LearnerSpec, TunedOn, WrapperConfig,
};

fn scores_from_pairs(pairs: &[(String, f64, f64)]) -> ParScores {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    ParScores {
        ids: sorted.iter().map(|p| p.0.clone()).collect(),
        eax: sorted.iter().map(|p| p.1).collect(),
        lkh: sorted.iter().map(|p| p.2).collect(),
    }
}

#[test]
fn threshold_matches_brute_force_grid() {
    // 50 random probability/performance configurations; the tuned theta must
    // equal an independent argmin over the same 101-point grid exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(314);
    for case in 0..50 {
        let n = rng.random_range(3..20);
        let mut pairs = Vec::new();
        let mut probs = BTreeMap::new();
        let mut costs = BTreeMap::new();
        for i in 0..n {
            let id = format!("c{case}_{i:02}");
            pairs.push((
                id.clone(),
                (rng.random::<f64>() * 8.0).exp(),
                (rng.random::<f64>() * 8.0).exp(),
            ));
            probs.insert(id.clone(), rng.random::<f64>());
            costs.insert(id, rng.random::<f64>() * 0.5);
        }
        let scores = scores_from_pairs(&pairs);
        let include_cost = case % 2 == 0;
        let policy =
            tune_threshold(&probs, &scores, &costs, include_cost, 0.01, TunedOn::Oob).unwrap();

        // Independent brute force over the same grid.
        let mut entries = Vec::new();
        for (id, &p) in &probs {
            let idx = scores.index_of(id).unwrap();
            let cost = if include_cost { costs[id] } else { 0.0 };
            entries.push((p, scores.eax[idx] + cost, scores.lkh[idx] + cost));
        }
        let mut best_theta = 0.0;
        let mut best_obj = f64::INFINITY;
        for s in 0..=100u32 {
            let theta = (s as f64 * 0.01).min(1.0);
            let sum: f64 = entries
                .iter()
                .map(|&(p, e, l)| if p >= theta { e } else { l })
                .sum();
            let obj = sum / entries.len() as f64;
            if obj < best_obj {
                best_obj = obj;
                best_theta = theta;
            }
        }
        assert_eq!(
            policy.theta.to_bits(),
            best_theta.to_bits(),
            "case {case}: {} vs {best_theta}",
            policy.theta
        );
    }
}

/// A 40-instance synthetic corpus: EAX-easy instances get (5, 50) seconds,
/// LKH-easy ones (50, 5); feature 0 separates the classes, the rest is noise.
fn toy_corpus(noise_features: usize, seed: u64) -> (FeatureMatrix, ParScores) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 40;
    let mut pairs = Vec::new();
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for i in 0..n {
        let id = format!("t{i:02}");
        let eax_easy = i % 2 == 0;
        let (e, l) = if eax_easy { (5.0, 50.0) } else { (50.0, 5.0) };
        pairs.push((id.clone(), e, l));
        let mut row = vec![if eax_easy {
            rng.random::<f64>()
        } else {
            2.0 + rng.random::<f64>()
        }];
        for _ in 0..noise_features {
            row.push(rng.random::<f64>() * 10.0);
        }
        ids.push(id);
        rows.push(row);
    }
    let mut names = vec!["informative".to_string()];
    for j in 0..noise_features {
        names.push(format!("noise_{j}"));
    }
    let matrix = FeatureMatrix {
        instance_ids: ids,
        feature_names: names,
        rows,
        costs: vec![0.01; n],
    };
    (matrix, scores_from_pairs(&pairs))
}

#[test]
fn oracle_selector_reproduces_vbs_exactly() {
    let (matrix, scores) = toy_corpus(3, 1);
    let labels = scores.labels();
    let folds = make_folds(&matrix.instance_ids, &labels, 4, 9).unwrap();
    let report = run_cv_selector(
        &matrix,
        &labels,
        &scores,
        LearnerSpec::Oracle,
        &folds,
        9,
        false,
        0.01,
    )
    .unwrap();
    let (vbs, _, _) = vbs_sbs(&scores);
    assert_eq!(report.aggregate.mean_par10.to_bits(), vbs.to_bits());
    assert_eq!(report.aggregate.gap_closed, 1.0);
    assert_eq!(report.aggregate.accuracy, 1.0);
    assert_eq!(report.aggregate.f1, 1.0);
}

#[test]
fn oracle_with_costs_adds_mean_cost() {
    let (matrix, scores) = toy_corpus(3, 2);
    let labels = scores.labels();
    let folds = make_folds(&matrix.instance_ids, &labels, 4, 9).unwrap();
    let report = run_cv_selector(
        &matrix,
        &labels,
        &scores,
        LearnerSpec::Oracle,
        &folds,
        9,
        true,
        0.01,
    )
    .unwrap();
    let (vbs, _, _) = vbs_sbs(&scores);
    let mean_cost: f64 = matrix.costs.iter().sum::<f64>() / matrix.costs.len() as f64;
    assert!((report.aggregate.mean_par10 - (vbs + mean_cost)).abs() < 1e-9);
}

#[test]
fn constant_selector_reproduces_sbs_exactly() {
    let (matrix, scores) = toy_corpus(3, 3);
    let labels = scores.labels();
    let folds = make_folds(&matrix.instance_ids, &labels, 4, 5).unwrap();
    let report = run_cv_selector(
        &matrix,
        &labels,
        &scores,
        LearnerSpec::ConstantProb(1.0),
        &folds,
        5,
        false,
        0.01,
    )
    .unwrap();
    let (_, sbs, sbs_solver) = vbs_sbs(&scores);
    assert_eq!(sbs_solver, Solver::Eax); // symmetric corpus resolves to EAX
    assert_eq!(report.aggregate.mean_par10.to_bits(), sbs.to_bits());
    assert_eq!(report.aggregate.gap_closed, 0.0);
}

#[test]
fn cv_run_is_deterministic() {
    let (matrix, scores) = toy_corpus(4, 4);
    let labels = scores.labels();
    let folds = make_folds(&matrix.instance_ids, &labels, 4, 11).unwrap();
    let learner = LearnerSpec::Forest {
        n_trees: 30,
        mtry: None,
        tree: TreeParams::default(),
    };
    let a = run_cv_selector(&matrix, &labels, &scores, learner, &folds, 11, true, 0.01).unwrap();
    let b = run_cv_selector(&matrix, &labels, &scores, learner, &folds, 11, true, 0.01).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn sffs_finds_the_informative_feature() {
    let (matrix, scores) = toy_corpus(9, 5);
    let labels = scores.labels();
    let cfg = WrapperConfig {
        learner: LearnerSpec::Tree(TreeParams::default()),
        inner_folds: 5,
        seed: 3,
        include_cost: false,
        grid_step: 0.01,
        budget: 12,
    };
    let subset = sffs(&matrix, &labels, &scores, &cfg).unwrap();
    assert!(subset.contains(&0), "sffs returned {subset:?}");

    // Exhaustive oracle over all 2^10 - 1 subsets: the global optimum also
    // contains the informative feature, and no subset beats it.
    let best = exhaustive_selection(&matrix, &labels, &scores, &cfg, 1 << 15).unwrap();
    assert!(best.contains(&0), "exhaustive returned {best:?}");
    let sffs_obj = wrapper_objective(&matrix, &labels, &scores, &cfg, &subset).unwrap();
    let best_obj = wrapper_objective(&matrix, &labels, &scores, &cfg, &best).unwrap();
    assert!(best_obj <= sffs_obj);

    // The backward variant must also keep the informative feature and can
    // never beat the exhaustive optimum.
    let backward = sfbs(&matrix, &labels, &scores, &cfg).unwrap();
    assert!(backward.contains(&0), "sfbs returned {backward:?}");
    let sfbs_obj = wrapper_objective(&matrix, &labels, &scores, &cfg, &backward).unwrap();
    assert!(best_obj <= sfbs_obj);
    let full_obj =
        wrapper_objective(&matrix, &labels, &scores, &cfg, &(0..10).collect::<Vec<_>>()).unwrap();
    assert!(sfbs_obj <= full_obj);
}

#[test]
fn sffs_budget_one_returns_best_single_feature() {
    let (matrix, scores) = toy_corpus(4, 6);
    let labels = scores.labels();
    let cfg = WrapperConfig {
        learner: LearnerSpec::Tree(TreeParams::default()),
        inner_folds: 5,
        seed: 3,
        include_cost: false,
        grid_step: 0.01,
        budget: 1,
    };
    let subset = sffs(&matrix, &labels, &scores, &cfg).unwrap();
    assert_eq!(subset.len(), 1);
    // The best single feature by the same objective.
    let mut best = (f64::INFINITY, 0usize);
    for f in 0..matrix.n_features() {
        let obj = wrapper_objective(&matrix, &labels, &scores, &cfg, &[f]).unwrap();
        if obj < best.0 {
            best = (obj, f);
        }
    }
    assert_eq!(subset[0], best.1);

    let zero_budget = WrapperConfig { budget: 0, ..cfg };
    assert!(sffs(&matrix, &labels, &scores, &zero_budget).is_err());
}

#[test]
fn identical_features_fall_back_to_first() {
    let (mut matrix, scores) = toy_corpus(0, 7);
    // Three identical copies of one uninformative constant column.
    matrix.feature_names = vec!["a".into(), "b".into(), "c".into()];
    matrix.rows = matrix.rows.iter().map(|_| vec![1.0, 1.0, 1.0]).collect();
    let labels = scores.labels();
    let cfg = WrapperConfig {
        learner: LearnerSpec::Tree(TreeParams::default()),
        inner_folds: 5,
        seed: 3,
        include_cost: false,
        grid_step: 0.01,
        budget: 8,
    };
    let subset = sffs(&matrix, &labels, &scores, &cfg).unwrap();
    assert_eq!(subset, vec![0]);
    let best = exhaustive_selection(&matrix, &labels, &scores, &cfg, 1 << 15).unwrap();
    assert_eq!(best, vec![0]);
}

#[test]
fn exhaustive_prefers_the_lean_optimum() {
    let (matrix, scores) = toy_corpus(1, 8);
    let labels = scores.labels();
    let cfg = WrapperConfig {
        learner: LearnerSpec::Tree(TreeParams::default()),
        inner_folds: 5,
        seed: 13,
        include_cost: false,
        grid_step: 0.01,
        budget: 8,
    };
    let best = exhaustive_selection(&matrix, &labels, &scores, &cfg, 1 << 15).unwrap();
    // Feature 0 alone is optimal; {0} also wins the lexicographic tie against
    // {0,1} when the noise feature is inert.
    assert_eq!(best, vec![0]);
    assert!(exhaustive_selection(&matrix, &labels, &scores, &cfg, 2).is_err());
}

#[test]
fn exhaustive_rejects_more_than_15_features() {
    let (matrix, scores) = toy_corpus(15, 9); // 16 features total
    let labels = scores.labels();
    let cfg = WrapperConfig {
        learner: LearnerSpec::Tree(TreeParams::default()),
        inner_folds: 5,
        seed: 3,
        include_cost: false,
        grid_step: 0.01,
        budget: 8,
    };
    assert!(exhaustive_selection(&matrix, &labels, &scores, &cfg, 1 << 20).is_err());
}

#[test]
fn leakage_canary_test_labels_do_not_matter() {
    // Permuting the labels of a fold's test instances must leave that fold's
    // trained model and tuned threshold bitwise unchanged.
    let (matrix, scores) = toy_corpus(4, 10);
    let labels = scores.labels();
    let folds = make_folds(&matrix.instance_ids, &labels, 4, 21).unwrap();
    for learner in [
        LearnerSpec::Forest {
            n_trees: 20,
            mtry: None,
            tree: TreeParams::default(),
        },
        LearnerSpec::Tree(TreeParams::default()),
    ] {
        for fold_id in 0..folds.n_folds {
            let baseline = fit_fold(
                &matrix, &labels, &scores, &folds, fold_id, learner, 17, true, 0.01,
            )
            .unwrap();
            let mut permuted = labels.clone();
            for id in folds.test_ids(fold_id) {
                let row = matrix.instance_ids.iter().position(|i| *i == id).unwrap();
                permuted[row] = permuted[row].other();
            }
            let shuffled = fit_fold(
                &matrix, &permuted, &scores, &folds, fold_id, learner, 17, true, 0.01,
            )
            .unwrap();
            let model_a = baseline.model.as_ref().unwrap().to_json().unwrap();
            let model_b = shuffled.model.as_ref().unwrap().to_json().unwrap();
            assert_eq!(model_a, model_b, "fold {fold_id}");
            assert_eq!(
                baseline.threshold.theta.to_bits(),
                shuffled.threshold.theta.to_bits()
            );
        }
    }
}
