//! The experiment harness: stratified k-fold cross-validation, PAR10-driven
//! classification-threshold tuning, hardest-subset extraction, wrapper
//! feature selection (floating forward/backward and exhaustive), and report
//! assembly.
//!
//! Per fold, a learner is fit on the training folds only; the classification
//! threshold is tuned on out-of-bag predictions (forests) or resubstitution
//! (single trees), never on the test fold. All iteration orders are fixed
//! (sorted instance ids, ascending fold ids, ascending feature indices), so a
//! run is reproducible for any worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::features::FeatureMatrix;
use crate::models::{DecisionTree, ForestParams, Model, RandomForest, TreeParams};
use crate::scoring::{
    classification_metrics, gap_closed, misclassification_costs, selector_par10, vbs_sbs,
    AggregateMetrics, Baselines, FoldResult, ParScores, SelectorReport, Solver,
};
use crate::Result;

/// A stratified partition of instances into folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_of: BTreeMap<String, usize>,
    pub n_folds: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn ids(&self) -> Vec<String> {
        self.fold_of.keys().cloned().collect()
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.fold_of.get(id).copied()
    }

    /// Sorted ids of one test fold.
    pub fn test_ids(&self, fold: usize) -> Vec<String> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Sorted ids of the complementary training folds.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// CSV interchange: `instance_id,fold`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["instance_id", "fold"])?;
        for (id, fold) in &self.fold_of {
            w.write_record([id.clone(), fold.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, path: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["instance_id", "fold"] {
            return Err(Error::BadFileFormat {
                path: path.to_string(),
                reason: "fold CSV header must be `instance_id,fold`".into(),
            });
        }
        let mut fold_of = BTreeMap::new();
        for (row_idx, record) in r.records().enumerate() {
            let record = record?;
            let row_no = row_idx + 2;
            let fold: usize = record
                .get(1)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::CsvData {
                    path: path.to_string(),
                    row: row_no,
                    reason: "unparsable fold index".into(),
                })?;
            if fold_of.insert(record[0].to_string(), fold).is_some() {
                return Err(Error::CsvData {
                    path: path.to_string(),
                    row: row_no,
                    reason: format!("duplicate instance id `{}`", &record[0]),
                });
            }
        }
        if fold_of.is_empty() {
            return Err(Error::BadFileFormat {
                path: path.to_string(),
                reason: "fold CSV has no rows".into(),
            });
        }
        let n_folds = fold_of.values().max().unwrap() + 1;
        Ok(FoldAssignment {
            fold_of,
            n_folds,
            seed: 0,
        })
    }
}

/// Seeded stratified fold assignment: within each class, instances are
/// shuffled and dealt round-robin, so per-fold class counts stay within one
/// instance of the proportional share.
pub fn make_folds(
    ids: &[String],
    labels: &[Solver],
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if ids.len() != labels.len() {
        return Err(Error::mismatch(format!(
            "{} ids for {} labels",
            ids.len(),
            labels.len()
        )));
    }
    if n_folds < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    let mut by_class: BTreeMap<Solver, Vec<&String>> = BTreeMap::new();
    for (id, &label) in ids.iter().zip(labels) {
        by_class.entry(label).or_default().push(id);
    }
    for (class, members) in &by_class {
        if members.len() < n_folds {
            return Err(Error::invalid(format!(
                "class {class} has only {} instances for {n_folds} folds",
                members.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = BTreeMap::new();
    for (_, members) in by_class.iter_mut() {
        members.sort();
        members.shuffle(&mut rng);
        for (pos, id) in members.iter().enumerate() {
            if fold_of.insert((*id).clone(), pos % n_folds).is_some() {
                return Err(Error::mismatch(format!("duplicate instance id `{id}`")));
            }
        }
    }
    Ok(FoldAssignment {
        fold_of,
        n_folds,
        seed,
    })
}

/// What data a classification threshold was tuned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunedOn {
    Oob,
    InnerCv,
    TrainResubstitution,
    Holdout,
}

/// Tuned classification threshold: predict EAX iff `p_eax >= theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub theta: f64,
    pub tuned_on: TunedOn,
}

impl ThresholdPolicy {
    pub fn choose(&self, p_eax: f64) -> Solver {
        if p_eax >= self.theta {
            Solver::Eax
        } else {
            Solver::Lkh
        }
    }
}

/// Grid-searches theta over {0, step, 2*step, ..., 1}, minimizing the mean
/// penalized runtime of the induced choices on the tuning set. Ties take the
/// smallest theta.
pub fn tune_threshold(
    probs: &BTreeMap<String, f64>,
    scores: &ParScores,
    costs: &BTreeMap<String, f64>,
    include_cost: bool,
    grid_step: f64,
    tuned_on: TunedOn,
) -> Result<ThresholdPolicy> {
    if probs.is_empty() {
        return Err(Error::invalid("tune_threshold needs a non-empty tuning set"));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::invalid(format!("bad threshold grid step {grid_step}")));
    }
    // Resolve indices once; the objective loop then only does arithmetic.
    let mut entries = Vec::with_capacity(probs.len());
    for (id, &p) in probs {
        let i = scores
            .index_of(id)
            .ok_or_else(|| Error::mismatch(format!("no performance scores for `{id}`")))?;
        let cost = if include_cost {
            *costs
                .get(id)
                .ok_or_else(|| Error::mismatch(format!("no feature cost for `{id}`")))?
        } else {
            0.0
        };
        entries.push((p, scores.eax[i] + cost, scores.lkh[i] + cost));
    }

    let steps = (1.0 / grid_step).round() as usize;
    let mut best_theta = 0.0;
    let mut best_obj = f64::INFINITY;
    for s in 0..=steps {
        let theta = (s as f64 * grid_step).min(1.0);
        let sum: f64 = entries
            .iter()
            .map(|&(p, eax, lkh)| if p >= theta { eax } else { lkh })
            .sum();
        let obj = sum / entries.len() as f64;
        if obj < best_obj {
            best_obj = obj;
            best_theta = theta;
        }
    }
    Ok(ThresholdPolicy {
        theta: best_theta,
        tuned_on,
    })
}

/// Learner configuration for the harness. `Oracle` and `ConstantProb` are
/// reference selectors: the oracle emits the true per-instance best solver as
/// an extreme probability, a constant emits the same probability everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearnerSpec {
    Tree(TreeParams),
    Forest {
        n_trees: usize,
        mtry: Option<usize>,
        tree: TreeParams,
    },
    Oracle,
    ConstantProb(f64),
}

impl LearnerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Tree(_) => "tree",
            LearnerSpec::Forest { .. } => "forest",
            LearnerSpec::Oracle => "oracle",
            LearnerSpec::ConstantProb(_) => "constant",
        }
    }
}

/// One fold's fitted state: the model (when the learner has one), the tuned
/// threshold, and the predicted `p_eax` for the fold's test instances.
#[derive(Debug, Clone)]
pub struct FoldFit {
    pub fold_id: usize,
    pub model: Option<Model>,
    pub threshold: ThresholdPolicy,
    pub test_probs: BTreeMap<String, f64>,
}

/// Fits one fold: trains on the training folds, tunes the threshold on
/// training-fold data only (OOB for forests, resubstitution for trees), and
/// predicts the test fold. Test-fold rows never influence fitting or tuning.
#[allow(clippy::too_many_arguments)]
pub fn fit_fold(
    matrix: &FeatureMatrix,
    labels: &[Solver],
    scores: &ParScores,
    folds: &FoldAssignment,
    fold_id: usize,
    learner: LearnerSpec,
    seed: u64,
    include_cost: bool,
    grid_step: f64,
) -> Result<FoldFit> {
    let train_ids = folds.train_ids(fold_id);
    let test_ids = folds.test_ids(fold_id);
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(Error::invalid(format!("fold {fold_id} is empty")));
    }

    let row_of: BTreeMap<&str, usize> = matrix
        .instance_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let train_rows: Vec<usize> = train_ids
        .iter()
        .map(|id| {
            row_of
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::mismatch(format!("instance `{id}` not in feature matrix")))
        })
        .collect::<Result<_>>()?;
    let x_train: Vec<Vec<f64>> = train_rows.iter().map(|&r| matrix.rows[r].clone()).collect();
    let y_train: Vec<Solver> = train_rows.iter().map(|&r| labels[r]).collect();

    let costs: BTreeMap<String, f64> = matrix
        .instance_ids
        .iter()
        .zip(&matrix.costs)
        .map(|(id, &c)| (id.clone(), c))
        .collect();

    let oracle_prob = |id: &str| -> Result<f64> {
        let i = scores
            .index_of(id)
            .ok_or_else(|| Error::mismatch(format!("no performance scores for `{id}`")))?;
        Ok(match scores.best(i) {
            Solver::Eax => 1.0,
            Solver::Lkh => 0.0,
        })
    };

    let (model, tuning_probs, tuned_on) = match learner {
        LearnerSpec::Forest { n_trees, mtry, tree } => {
            let forest = RandomForest::fit(
                &x_train,
                &y_train,
                ForestParams {
                    n_trees,
                    mtry,
                    bootstrap: true,
                    tree,
                    seed: fold_seed(seed, fold_id),
                },
            )?;
            let oob = forest.oob_p_eax(&x_train)?;
            let probs: BTreeMap<String, f64> =
                train_ids.iter().cloned().zip(oob).collect();
            (Some(Model::Forest(forest)), probs, TunedOn::Oob)
        }
        LearnerSpec::Tree(params) => {
            let tree = DecisionTree::fit(&x_train, &y_train, params)?;
            let mut probs = BTreeMap::new();
            for (id, row) in train_ids.iter().zip(&x_train) {
                probs.insert(id.clone(), tree.predict_proba(row)?.0);
            }
            (Some(Model::Tree(tree)), probs, TunedOn::TrainResubstitution)
        }
        LearnerSpec::Oracle => {
            let mut probs = BTreeMap::new();
            for id in &train_ids {
                probs.insert(id.clone(), oracle_prob(id)?);
            }
            (None, probs, TunedOn::TrainResubstitution)
        }
        LearnerSpec::ConstantProb(p) => {
            let probs = train_ids.iter().map(|id| (id.clone(), p)).collect();
            (None, probs, TunedOn::TrainResubstitution)
        }
    };

    let threshold = tune_threshold(&tuning_probs, scores, &costs, include_cost, grid_step, tuned_on)?;

    let mut test_probs = BTreeMap::new();
    for id in &test_ids {
        let p = match (&model, learner) {
            (Some(m), _) => {
                let r = *row_of
                    .get(id.as_str())
                    .ok_or_else(|| Error::mismatch(format!("instance `{id}` not in feature matrix")))?;
                m.predict_proba(&matrix.rows[r])?.0
            }
            (None, LearnerSpec::Oracle) => oracle_prob(id)?,
            (None, LearnerSpec::ConstantProb(p)) => p,
            (None, _) => unreachable!("model-less learners are oracle/constant"),
        };
        test_probs.insert(id.clone(), p);
    }

    Ok(FoldFit {
        fold_id,
        model,
        threshold,
        test_probs,
    })
}

fn fold_seed(seed: u64, fold_id: usize) -> u64 {
    // splitmix64 finalizer over (seed, fold).
    let mut z = seed ^ (fold_id as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One fold's final decisions, ready for aggregation.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold_id: usize,
    pub threshold: ThresholdPolicy,
    /// Chosen solver per test instance of this fold.
    pub choices: BTreeMap<String, Solver>,
}

/// Combines per-fold outcomes into a [`SelectorReport`]. The folds' test sets
/// must partition the score table's instances; the aggregate PAR10 is the
/// unweighted mean over all instances.
pub fn assemble_report(
    selector: &str,
    scores: &ParScores,
    costs: &BTreeMap<String, f64>,
    include_cost: bool,
    outcomes: &[FoldOutcome],
) -> Result<SelectorReport> {
    let mut all_choices: BTreeMap<String, Solver> = BTreeMap::new();
    for outcome in outcomes {
        for (id, &solver) in &outcome.choices {
            if all_choices.insert(id.clone(), solver).is_some() {
                return Err(Error::mismatch(format!(
                    "instance `{id}` appears in more than one test fold"
                )));
            }
        }
    }
    if all_choices.len() != scores.n() {
        return Err(Error::mismatch(format!(
            "folds cover {} instances but the score table has {}",
            all_choices.len(),
            scores.n()
        )));
    }

    let (vbs, sbs, sbs_solver) = vbs_sbs(scores);
    let mean_par10 = selector_par10(&all_choices, scores, costs, include_cost)?;
    let actual = scores.oracle_choices();
    let metrics = classification_metrics(&all_choices, &actual)?;
    let miscls = misclassification_costs(&all_choices, &actual, scores)?;
    let gap = gap_closed(vbs, sbs, mean_par10)?;

    let mut per_fold = Vec::with_capacity(outcomes.len());
    let mut sorted: Vec<&FoldOutcome> = outcomes.iter().collect();
    sorted.sort_by_key(|o| o.fold_id);
    for outcome in sorted {
        let ids: Vec<String> = outcome.choices.keys().cloned().collect();
        let fold_scores = subset_scores(scores, &ids)?;
        let par10 = selector_par10(&outcome.choices, &fold_scores, costs, include_cost)?;
        per_fold.push(FoldResult {
            fold_id: outcome.fold_id,
            par10,
            threshold: outcome.threshold.theta,
        });
    }

    Ok(SelectorReport {
        schema_version: SelectorReport::SCHEMA_VERSION,
        selector: selector.to_string(),
        include_cost,
        baselines: Baselines {
            vbs_par10: vbs,
            sbs_par10: sbs,
            sbs_solver,
        },
        per_fold,
        aggregate: AggregateMetrics {
            mean_par10,
            accuracy: metrics.accuracy,
            f1: metrics.f1,
            confusion: metrics.confusion,
            gap_closed: gap,
        },
        misclassification: miscls,
    })
}

/// Restriction of a score table to a sorted id subset.
pub fn subset_scores(scores: &ParScores, ids: &[String]) -> Result<ParScores> {
    let mut out = ParScores {
        ids: Vec::with_capacity(ids.len()),
        eax: Vec::with_capacity(ids.len()),
        lkh: Vec::with_capacity(ids.len()),
    };
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    for id in sorted {
        let i = scores
            .index_of(id)
            .ok_or_else(|| Error::mismatch(format!("no performance scores for `{id}`")))?;
        out.ids.push(scores.ids[i].clone());
        out.eax.push(scores.eax[i]);
        out.lkh.push(scores.lkh[i]);
    }
    Ok(out)
}

/// Runs the full cross-validated selector: per fold fit + threshold tuning +
/// test-fold prediction, then aggregation.
#[allow(clippy::too_many_arguments)]
pub fn run_cv_selector(
    matrix: &FeatureMatrix,
    labels: &[Solver],
    scores: &ParScores,
    learner: LearnerSpec,
    folds: &FoldAssignment,
    seed: u64,
    include_cost: bool,
    grid_step: f64,
) -> Result<SelectorReport> {
    check_consistency(matrix, labels, scores, folds)?;
    let costs: BTreeMap<String, f64> = matrix
        .instance_ids
        .iter()
        .zip(&matrix.costs)
        .map(|(id, &c)| (id.clone(), c))
        .collect();

    let mut outcomes = Vec::with_capacity(folds.n_folds);
    for fold_id in 0..folds.n_folds {
        let fit = fit_fold(
            matrix, labels, scores, folds, fold_id, learner, seed, include_cost, grid_step,
        )?;
        let choices = fit
            .test_probs
            .iter()
            .map(|(id, &p)| (id.clone(), fit.threshold.choose(p)))
            .collect();
        outcomes.push(FoldOutcome {
            fold_id,
            threshold: fit.threshold,
            choices,
        });
    }
    assemble_report(learner.name(), scores, &costs, include_cost, &outcomes)
}

fn check_consistency(
    matrix: &FeatureMatrix,
    labels: &[Solver],
    scores: &ParScores,
    folds: &FoldAssignment,
) -> Result<()> {
    if labels.len() != matrix.n_instances() {
        return Err(Error::mismatch(format!(
            "{} labels for {} instances",
            labels.len(),
            matrix.n_instances()
        )));
    }
    if matrix.instance_ids != scores.ids {
        return Err(Error::mismatch(
            "feature matrix and performance records cover different instances",
        ));
    }
    if folds.ids() != matrix.instance_ids {
        return Err(Error::mismatch(
            "fold assignment covers different instances than the feature matrix",
        ));
    }
    Ok(())
}

/// How the hardest instances are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardestMode {
    /// Largest penalized runtime of the instance's non-favored solver.
    Par10Score,
    /// Largest ratio of the two solvers' penalized runtimes.
    Par10Ratio,
}

/// The union, over both classes, of each class's `m` hardest instances.
/// Returns `2 m` ids.
pub fn hardest_subset(
    scores: &ParScores,
    mode: HardestMode,
    m: usize,
) -> Result<BTreeSet<String>> {
    let mut per_class: BTreeMap<Solver, Vec<(f64, &String)>> = BTreeMap::new();
    for (i, id) in scores.ids.iter().enumerate() {
        let best = scores.best(i);
        let hardness = match mode {
            HardestMode::Par10Score => scores.score(i, best.other()),
            HardestMode::Par10Ratio => {
                let (hi, lo) = (
                    scores.eax[i].max(scores.lkh[i]),
                    scores.eax[i].min(scores.lkh[i]),
                );
                hi / lo
            }
        };
        per_class.entry(best).or_default().push((hardness, id));
    }
    let mut out = BTreeSet::new();
    for (class, mut members) in per_class {
        if members.len() < m {
            return Err(Error::invalid(format!(
                "class {class} has only {} instances, cannot take {m} hardest",
                members.len()
            )));
        }
        members.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        for (_, id) in members.into_iter().take(m) {
            out.insert(id.clone());
        }
    }
    Ok(out)
}

/// Configuration of the wrapper feature-selection searches.
#[derive(Debug, Clone, Copy)]
pub struct WrapperConfig {
    pub learner: LearnerSpec,
    pub inner_folds: usize,
    pub seed: u64,
    pub include_cost: bool,
    pub grid_step: f64,
    /// Maximum number of completed candidate scans (one scan evaluates every
    /// addition or removal candidate once).
    pub budget: usize,
}

/// Wrapper objective: mean PAR10 of the learner under an inner stratified CV
/// restricted to the given feature subset. Lower is better.
pub fn wrapper_objective(
    matrix: &FeatureMatrix,
    labels: &[Solver],
    scores: &ParScores,
    cfg: &WrapperConfig,
    subset: &[usize],
) -> Result<f64> {
    let projected = matrix.select_columns(subset);
    let folds = make_folds(&projected.instance_ids, labels, cfg.inner_folds, cfg.seed)?;
    let report = run_cv_selector(
        &projected,
        labels,
        scores,
        cfg.learner,
        &folds,
        cfg.seed,
        cfg.include_cost,
        cfg.grid_step,
    )?;
    Ok(report.aggregate.mean_par10)
}

/// Sequential floating forward selection: greedily add the best feature by
/// the wrapper objective, then attempt conditional removals while they
/// strictly improve it. Stops when no addition improves or the scan budget is
/// exhausted; returns the best subset encountered.
pub fn sffs(
    matrix: &FeatureMatrix,
    labels: &[Solver],
    scores: &ParScores,
    cfg: &WrapperConfig,
) -> Result<Vec<usize>> {
    floating_search(matrix, labels, scores, cfg, SearchDirection::Forward)
}

/// Sequential floating backward selection: the mirror of [`sffs`], starting
/// from the full feature set with conditional re-additions.
pub fn sfbs(
    matrix: &FeatureMatrix,
    labels: &[Solver],
    scores: &ParScores,
    cfg: &WrapperConfig,
) -> Result<Vec<usize>> {
    floating_search(matrix, labels, scores, cfg, SearchDirection::Backward)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SearchDirection {
    Forward,
    Backward,
}

fn floating_search(
    matrix: &FeatureMatrix,
    labels: &[Solver],
    scores: &ParScores,
    cfg: &WrapperConfig,
    direction: SearchDirection,
) -> Result<Vec<usize>> {
    let p = matrix.n_features();
    if p == 0 {
        return Err(Error::invalid("no features to select from"));
    }
    if cfg.budget == 0 {
        return Err(Error::invalid("wrapper search budget must be at least 1"));
    }

    let mut selected: Vec<usize> = match direction {
        SearchDirection::Forward => Vec::new(),
        SearchDirection::Backward => (0..p).collect(),
    };
    let mut current_obj = match direction {
        SearchDirection::Forward => f64::INFINITY,
        SearchDirection::Backward => wrapper_objective(matrix, labels, scores, cfg, &selected)?,
    };
    let mut best_subset = selected.clone();
    let mut best_obj = current_obj;
    let mut scans_left = cfg.budget;

    // One primary move (add for forward, remove for backward), then floating
    // counter-moves while they strictly improve.
    loop {
        if scans_left == 0 {
            break;
        }
        let primary_add = direction == SearchDirection::Forward;
        let Some((obj, subset)) =
            best_move(matrix, labels, scores, cfg, &selected, primary_add)?
        else {
            break; // no legal move left
        };
        scans_left -= 1;
        if obj >= current_obj {
            break; // no improvement
        }
        selected = subset;
        current_obj = obj;
        if obj < best_obj || (obj == best_obj && selected.len() < best_subset.len()) {
            best_obj = obj;
            best_subset = selected.clone();
        }

        // Floating phase: counter-moves while strictly improving.
        while scans_left > 0 {
            let counter_add = !primary_add;
            let legal = if counter_add {
                selected.len() < p
            } else {
                selected.len() > 1
            };
            if !legal {
                break;
            }
            let Some((obj, subset)) =
                best_move(matrix, labels, scores, cfg, &selected, counter_add)?
            else {
                break;
            };
            scans_left -= 1;
            if obj >= current_obj {
                break;
            }
            selected = subset;
            current_obj = obj;
            if obj < best_obj || (obj == best_obj && selected.len() < best_subset.len()) {
                best_obj = obj;
                best_subset = selected.clone();
            }
        }
    }

    if best_subset.is_empty() {
        // Forward search whose first scan was cut by the budget cannot happen
        // (budget >= 1 guarantees one scan), but an all-constant feature set
        // can leave every candidate tied; fall back to the first feature.
        best_subset = vec![best_move(matrix, labels, scores, cfg, &[], true)?
            .map(|(_, s)| s[0])
            .unwrap_or(0)];
    }
    Ok(best_subset)
}

/// Evaluates all single-feature additions (or removals) and returns the best
/// resulting subset; ties prefer the lowest feature index.
fn best_move(
    matrix: &FeatureMatrix,
    labels: &[Solver],
    scores: &ParScores,
    cfg: &WrapperConfig,
    selected: &[usize],
    add: bool,
) -> Result<Option<(f64, Vec<usize>)>> {
    let p = matrix.n_features();
    let mut best: Option<(f64, Vec<usize>)> = None;
    if add {
        for f in 0..p {
            if selected.contains(&f) {
                continue;
            }
            let mut candidate = selected.to_vec();
            candidate.push(f);
            candidate.sort_unstable();
            let obj = wrapper_objective(matrix, labels, scores, cfg, &candidate)?;
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, candidate));
            }
        }
    } else {
        if selected.len() <= 1 {
            return Ok(None);
        }
        for &f in selected {
            let candidate: Vec<usize> = selected.iter().copied().filter(|&g| g != f).collect();
            let obj = wrapper_objective(matrix, labels, scores, cfg, &candidate)?;
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, candidate));
            }
        }
    }
    Ok(best)
}

/// Evaluates every non-empty feature subset (feature count must be at most
/// 15) and returns the objective minimizer; ties prefer the lexicographically
/// smallest subset. Errors when the subset count exceeds `budget_cap`.
pub fn exhaustive_selection(
    matrix: &FeatureMatrix,
    labels: &[Solver],
    scores: &ParScores,
    cfg: &WrapperConfig,
    budget_cap: usize,
) -> Result<Vec<usize>> {
    let p = matrix.n_features();
    if p == 0 {
        return Err(Error::invalid("no features to select from"));
    }
    if p > 15 {
        return Err(Error::invalid(format!(
            "exhaustive selection supports at most 15 features, got {p}"
        )));
    }
    let n_subsets = (1usize << p) - 1;
    if n_subsets > budget_cap {
        return Err(Error::invalid(format!(
            "exhaustive selection needs {n_subsets} evaluations, budget cap is {budget_cap}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 1usize..=n_subsets {
        let subset: Vec<usize> = (0..p).filter(|f| mask >> f & 1 == 1).collect();
        let obj = wrapper_objective(matrix, labels, scores, cfg, &subset)?;
        let better = match &best {
            None => true,
            Some((b, s)) => obj < *b || (obj == *b && subset < *s),
        };
        if better {
            best = Some((obj, subset));
        }
    }
    Ok(best.expect("at least one subset").1)
}

/// Which wrapper feature selection to run per fold, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSelection {
    None,
    Sffs,
    Sfbs,
    Exhaustive,
}

impl std::str::FromStr for FeatureSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FeatureSelection::None),
            "sffs" => Ok(FeatureSelection::Sffs),
            "sfbs" => Ok(FeatureSelection::Sfbs),
            "exhaustive" => Ok(FeatureSelection::Exhaustive),
            other => Err(Error::invalid(format!("unknown feature selection `{other}`"))),
        }
    }
}

/// Flat key-value experiment configuration (`key = value` lines, `#`
/// comments).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub learner: String,
    pub constant_p: f64,
    pub n_trees: usize,
    pub mtry: Option<usize>,
    pub max_depth: usize,
    pub min_leaf_size: usize,
    pub seed: u64,
    pub n_folds: usize,
    pub include_cost: bool,
    pub feature_selection: FeatureSelection,
    pub threshold_grid_step: f64,
    pub wrapper_budget: usize,
    pub inner_folds: usize,
    /// When set, rank features on the full data first and keep the top k
    /// (the global univariate pre-selection step).
    pub top_features: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            learner: "forest".into(),
            constant_p: 1.0,
            n_trees: 500,
            mtry: None,
            max_depth: 64,
            min_leaf_size: 1,
            seed: 42,
            n_folds: 10,
            include_cost: true,
            feature_selection: FeatureSelection::None,
            threshold_grid_step: 0.01,
            wrapper_budget: 50,
            inner_folds: 5,
            top_features: None,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, ExperimentConfig::default())
    }

    /// Parses config lines on top of a caller-supplied base (command-line
    /// defaults); explicit lines win.
    pub fn parse_with_base(text: &str, base: ExperimentConfig) -> Result<Self> {
        let mut cfg = base;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |reason: String| Error::Config {
                line: line_no,
                reason,
            };
            let parse_err = |k: &str, v: &str| bad(format!("unparsable value `{v}` for `{k}`"));
            match key {
                "learner" => {
                    if !["tree", "forest", "oracle", "constant"].contains(&value) {
                        return Err(bad(format!("unknown learner `{value}`")));
                    }
                    cfg.learner = value.to_string();
                }
                "constant_p" => {
                    cfg.constant_p = value.parse().map_err(|_| parse_err(key, value))?
                }
                "n_trees" => cfg.n_trees = value.parse().map_err(|_| parse_err(key, value))?,
                "mtry" => {
                    cfg.mtry = if value == "sqrt" {
                        None
                    } else {
                        Some(value.parse().map_err(|_| parse_err(key, value))?)
                    }
                }
                "max_depth" => {
                    cfg.max_depth = value.parse().map_err(|_| parse_err(key, value))?
                }
                "min_leaf_size" => {
                    cfg.min_leaf_size = value.parse().map_err(|_| parse_err(key, value))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| parse_err(key, value))?,
                "n_folds" => cfg.n_folds = value.parse().map_err(|_| parse_err(key, value))?,
                "include_cost" => {
                    cfg.include_cost = match value {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        _ => return Err(parse_err(key, value)),
                    }
                }
                "feature_selection" => {
                    cfg.feature_selection = value.parse().map_err(|_| {
                        bad(format!(
                            "feature_selection must be none|sffs|sfbs|exhaustive, got `{value}`"
                        ))
                    })?
                }
                "threshold_grid_step" => {
                    cfg.threshold_grid_step = value.parse().map_err(|_| parse_err(key, value))?
                }
                "wrapper_budget" => {
                    cfg.wrapper_budget = value.parse().map_err(|_| parse_err(key, value))?
                }
                "inner_folds" => {
                    cfg.inner_folds = value.parse().map_err(|_| parse_err(key, value))?
                }
                "top_features" => {
                    cfg.top_features =
                        Some(value.parse().map_err(|_| parse_err(key, value))?)
                }
                other => return Err(bad(format!("unknown config key `{other}`"))),
            }
        }
        Ok(cfg)
    }

    pub fn learner_spec(&self) -> LearnerSpec {
        let tree = TreeParams {
            max_depth: self.max_depth,
            min_leaf_size: self.min_leaf_size,
        };
        match self.learner.as_str() {
            "tree" => LearnerSpec::Tree(tree),
            "oracle" => LearnerSpec::Oracle,
            "constant" => LearnerSpec::ConstantProb(self.constant_p),
            _ => LearnerSpec::Forest {
                n_trees: self.n_trees,
                mtry: self.mtry,
                tree,
            },
        }
    }
}

/// Runs a configured experiment end to end: derives labels from the score
/// table, builds folds when none are supplied, optionally applies the global
/// top-k ranking and the per-run wrapper selection, and evaluates the
/// selector.
pub fn run_experiment(
    matrix: &FeatureMatrix,
    scores: &ParScores,
    config: &ExperimentConfig,
    folds: Option<FoldAssignment>,
) -> Result<(SelectorReport, FoldAssignment)> {
    if matrix.instance_ids != scores.ids {
        let missing: Vec<String> = matrix
            .instance_ids
            .iter()
            .filter(|id| scores.index_of(id).is_none())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::mismatch(format!(
                "instances without performance records: {}",
                missing.join(", ")
            )));
        }
        return Err(Error::mismatch(
            "performance records cover instances absent from the feature matrix",
        ));
    }
    let labels = scores.labels();

    let mut working = matrix.clone();
    if let Some(top_k) = config.top_features {
        let ranking = crate::stats::rank_features(&working, &labels, top_k, 0.05)?;
        let indices: Vec<usize> = ranking
            .feature_names()
            .iter()
            .map(|name| {
                working
                    .feature_names
                    .iter()
                    .position(|n| n == name)
                    .expect("ranked feature exists")
            })
            .collect();
        working = working.select_columns(&indices);
    }

    let folds = match folds {
        Some(f) => {
            if f.ids() != working.instance_ids {
                return Err(Error::mismatch(
                    "fold assignment covers different instances than the feature matrix",
                ));
            }
            f
        }
        None => make_folds(&working.instance_ids, &labels, config.n_folds, config.seed)?,
    };

    if config.feature_selection != FeatureSelection::None {
        let wrapper = WrapperConfig {
            learner: config.learner_spec(),
            inner_folds: config.inner_folds,
            seed: config.seed,
            include_cost: config.include_cost,
            grid_step: config.threshold_grid_step,
            budget: config.wrapper_budget,
        };
        let subset = match config.feature_selection {
            FeatureSelection::Sffs => sffs(&working, &labels, scores, &wrapper)?,
            FeatureSelection::Sfbs => sfbs(&working, &labels, scores, &wrapper)?,
            FeatureSelection::Exhaustive => {
                exhaustive_selection(&working, &labels, scores, &wrapper, 1 << 15)?
            }
            FeatureSelection::None => unreachable!(),
        };
        working = working.select_columns(&subset);
    }

    let report = run_cv_selector(
        &working,
        &labels,
        scores,
        config.learner_spec(),
        &folds,
        config.seed,
        config.include_cost,
        config.threshold_grid_step,
    )?;
    Ok((report, folds))
}
