//! PAR10 scoring, portfolio baselines, selector evaluation arithmetic, and
//! classification metrics.
//!
//! A run that does not solve its instance within the cutoff T is scored at
//! `penalty_factor * T` (10 by default, hence PAR10) regardless of its
//! recorded time. All aggregation iterates instances in sorted-id order with
//! plain sequential summation, so results are reproducible across runs and
//! worker counts, and an oracle selector reproduces the VBS bit for bit.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::features::fmt_f64;
use crate::Result;

/// The two portfolio solvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Solver {
    #[serde(rename = "EAX")]
    Eax,
    #[serde(rename = "LKH")]
    Lkh,
}

impl Solver {
    pub fn as_str(&self) -> &'static str {
        match self {
            Solver::Eax => "EAX",
            Solver::Lkh => "LKH",
        }
    }

    pub fn other(&self) -> Solver {
        match self {
            Solver::Eax => Solver::Lkh,
            Solver::Lkh => Solver::Eax,
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "EAX" => Ok(Solver::Eax),
            "LKH" => Ok(Solver::Lkh),
            other => Err(Error::invalid(format!("unknown solver `{other}`"))),
        }
    }
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One solver run on one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOutcome {
    pub time_seconds: f64,
    pub solved: bool,
}

/// All runs of one solver on one instance under a common cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceRecord {
    pub instance_id: String,
    pub solver: Solver,
    pub runs: Vec<RunOutcome>,
    pub cutoff: f64,
}

impl PerformanceRecord {
    fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::invalid(format!(
                "instance `{}`, solver {}: no runs",
                self.instance_id, self.solver
            )));
        }
        for (i, run) in self.runs.iter().enumerate() {
            if !run.time_seconds.is_finite() || run.time_seconds < 0.0 {
                return Err(Error::invalid(format!(
                    "instance `{}`, solver {}, run {}: bad time {}",
                    self.instance_id,
                    self.solver,
                    i + 1,
                    run.time_seconds
                )));
            }
            if run.solved && run.time_seconds > self.cutoff {
                return Err(Error::invalid(format!(
                    "instance `{}`, solver {}, run {}: solved run exceeds cutoff ({} > {})",
                    self.instance_id,
                    self.solver,
                    i + 1,
                    run.time_seconds,
                    self.cutoff
                )));
            }
        }
        Ok(())
    }
}

/// Mean penalized runtime of a record: unsolved runs count
/// `penalty_factor * cutoff` regardless of their recorded time.
pub fn penalized_average_runtime(record: &PerformanceRecord, penalty_factor: f64) -> f64 {
    let penalty = penalty_factor * record.cutoff;
    let sum: f64 = record
        .runs
        .iter()
        .map(|r| if r.solved { r.time_seconds } else { penalty })
        .sum();
    sum / record.runs.len() as f64
}

/// PAR10 of a record (penalty factor 10).
pub fn par10(record: &PerformanceRecord) -> f64 {
    penalized_average_runtime(record, 10.0)
}

/// Performance records for a set of instances; every instance carries records
/// for both solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfDb {
    records: BTreeMap<String, (PerformanceRecord, PerformanceRecord)>,
}

impl PerfDb {
    /// Builds a database from records, requiring both solvers per instance.
    pub fn new(records: Vec<PerformanceRecord>) -> Result<Self> {
        let mut by_instance: BTreeMap<String, (Option<PerformanceRecord>, Option<PerformanceRecord>)> =
            BTreeMap::new();
        for rec in records {
            rec.validate()?;
            let slot = by_instance.entry(rec.instance_id.clone()).or_default();
            let cell = match rec.solver {
                Solver::Eax => &mut slot.0,
                Solver::Lkh => &mut slot.1,
            };
            if cell.is_some() {
                return Err(Error::mismatch(format!(
                    "duplicate records for instance `{}`, solver {}",
                    rec.instance_id, rec.solver
                )));
            }
            *cell = Some(rec);
        }
        let mut map = BTreeMap::new();
        let mut missing = Vec::new();
        for (id, (eax, lkh)) in by_instance {
            match (eax, lkh) {
                (Some(e), Some(l)) => {
                    map.insert(id, (e, l));
                }
                _ => missing.push(id),
            }
        }
        if !missing.is_empty() {
            return Err(Error::mismatch(format!(
                "instances missing a solver's records: {}",
                missing.join(", ")
            )));
        }
        if map.is_empty() {
            return Err(Error::mismatch("no performance records"));
        }
        Ok(PerfDb { records: map })
    }

    pub fn n_instances(&self) -> usize {
        self.records.len()
    }

    /// Instance ids in sorted order.
    pub fn instance_ids(&self) -> Vec<String> {
        self.records.keys().cloned().collect()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    pub fn record(&self, id: &str, solver: Solver) -> Option<&PerformanceRecord> {
        self.records.get(id).map(|(e, l)| match solver {
            Solver::Eax => e,
            Solver::Lkh => l,
        })
    }

    /// Ingests the CSV interchange format
    /// (`instance_id,solver,run,time_seconds,solved`).
    pub fn from_csv<R: Read>(reader: R, path: &str, cutoff: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let expected = ["instance_id", "solver", "run", "time_seconds", "solved"];
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(Error::BadFileFormat {
                path: path.to_string(),
                reason: format!(
                    "performance CSV header must be `{}`",
                    expected.join(",")
                ),
            });
        }
        let mut groups: BTreeMap<(String, Solver), Vec<(u64, RunOutcome)>> = BTreeMap::new();
        for (row_idx, record) in r.records().enumerate() {
            let record = record?;
            let row_no = row_idx + 2;
            let fail = |reason: String| Error::CsvData {
                path: path.to_string(),
                row: row_no,
                reason,
            };
            if record.len() != 5 {
                return Err(fail(format!("expected 5 fields, found {}", record.len())));
            }
            let id = record[0].to_string();
            let solver: Solver = record[1]
                .parse()
                .map_err(|_| fail(format!("unknown solver `{}`", &record[1])))?;
            let run: u64 = record[2]
                .parse()
                .map_err(|_| fail(format!("unparsable run index `{}`", &record[2])))?;
            let time: f64 = record[3]
                .parse()
                .map_err(|_| fail(format!("unparsable time `{}`", &record[3])))?;
            let solved = match &record[4] {
                "0" => false,
                "1" => true,
                other => return Err(fail(format!("solved must be 0 or 1, got `{other}`"))),
            };
            groups.entry((id, solver)).or_default().push((
                run,
                RunOutcome {
                    time_seconds: time,
                    solved,
                },
            ));
        }
        let mut records = Vec::with_capacity(groups.len());
        for ((id, solver), mut runs) in groups {
            runs.sort_by_key(|(idx, _)| *idx);
            records.push(PerformanceRecord {
                instance_id: id,
                solver,
                runs: runs.into_iter().map(|(_, r)| r).collect(),
                cutoff,
            });
        }
        PerfDb::new(records)
    }

    /// Writes the CSV interchange format with 1-based run indices.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["instance_id", "solver", "run", "time_seconds", "solved"])?;
        for (id, (eax, lkh)) in &self.records {
            for rec in [eax, lkh] {
                for (i, run) in rec.runs.iter().enumerate() {
                    w.write_record([
                        id.clone(),
                        rec.solver.to_string(),
                        (i + 1).to_string(),
                        fmt_f64(run.time_seconds),
                        if run.solved { "1" } else { "0" }.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-instance penalized scores for both solvers, in sorted-id order.
/// This is the common currency of all downstream evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParScores {
    pub ids: Vec<String>,
    pub eax: Vec<f64>,
    pub lkh: Vec<f64>,
}

impl ParScores {
    pub fn from_db(db: &PerfDb, penalty_factor: f64) -> Self {
        let mut ids = Vec::with_capacity(db.n_instances());
        let mut eax = Vec::with_capacity(db.n_instances());
        let mut lkh = Vec::with_capacity(db.n_instances());
        for (id, (e, l)) in &db.records {
            ids.push(id.clone());
            eax.push(penalized_average_runtime(e, penalty_factor));
            lkh.push(penalized_average_runtime(l, penalty_factor));
        }
        ParScores { ids, eax, lkh }
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|probe| probe.as_str().cmp(id)).ok()
    }

    pub fn score(&self, index: usize, solver: Solver) -> f64 {
        match solver {
            Solver::Eax => self.eax[index],
            Solver::Lkh => self.lkh[index],
        }
    }

    /// Per-instance best solver; ties resolve to EAX.
    pub fn best(&self, index: usize) -> Solver {
        if self.eax[index] <= self.lkh[index] {
            Solver::Eax
        } else {
            Solver::Lkh
        }
    }

    /// Labels aligned with `ids`.
    pub fn labels(&self) -> Vec<Solver> {
        (0..self.n()).map(|i| self.best(i)).collect()
    }

    /// The oracle per-instance choice (the VBS decision rule).
    pub fn oracle_choices(&self) -> BTreeMap<String, Solver> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), self.best(i)))
            .collect()
    }

    /// Per-instance labels plus an ambiguity flag: an instance is flagged when
    /// the winning solver's slowest run scores worse than the losing solver's
    /// fastest run, i.e. the run-level score ranges overlap.
    pub fn labels_with_ambiguity(&self, db: &PerfDb, penalty_factor: f64) -> Vec<(String, Solver, bool)> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let best = self.best(i);
                let win = db.record(id, best).expect("id from db");
                let lose = db.record(id, best.other()).expect("id from db");
                let run_score = |rec: &PerformanceRecord, r: &RunOutcome| {
                    if r.solved {
                        r.time_seconds
                    } else {
                        penalty_factor * rec.cutoff
                    }
                };
                let win_max = win
                    .runs
                    .iter()
                    .map(|r| run_score(win, r))
                    .fold(f64::NEG_INFINITY, f64::max);
                let lose_min = lose
                    .runs
                    .iter()
                    .map(|r| run_score(lose, r))
                    .fold(f64::INFINITY, f64::min);
                (id.clone(), best, win_max > lose_min)
            })
            .collect()
    }
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

/// Virtual best solver, single best solver, and the SBS identity
/// (ties resolve to EAX).
pub fn vbs_sbs(scores: &ParScores) -> (f64, f64, Solver) {
    let n = scores.n();
    let vbs = mean((0..n).map(|i| scores.score(i, scores.best(i))), n);
    let eax_mean = mean(scores.eax.iter().copied(), n);
    let lkh_mean = mean(scores.lkh.iter().copied(), n);
    if eax_mean <= lkh_mean {
        (vbs, eax_mean, Solver::Eax)
    } else {
        (vbs, lkh_mean, Solver::Lkh)
    }
}

/// Fraction of the SBS-VBS gap closed by a selector. 0 at the SBS, 1 at the
/// VBS; negative when the selector is worse than the SBS.
pub fn gap_closed(vbs: f64, sbs: f64, selector_par10: f64) -> Result<f64> {
    if !(sbs > vbs) {
        return Err(Error::invalid(format!(
            "gap_closed needs sbs > vbs, got sbs={sbs}, vbs={vbs}"
        )));
    }
    Ok((sbs - selector_par10) / (sbs - vbs))
}

/// Mean penalized runtime of a per-instance solver choice; with
/// `include_cost`, each instance's feature-computation cost is added to its
/// score (the convention for feature-based selectors; image-based selectors
/// pass `false`).
pub fn selector_par10(
    choices: &BTreeMap<String, Solver>,
    scores: &ParScores,
    costs: &BTreeMap<String, f64>,
    include_cost: bool,
) -> Result<f64> {
    let n = scores.n();
    let mut sum = 0.0;
    for (i, id) in scores.ids.iter().enumerate() {
        let solver = *choices
            .get(id)
            .ok_or_else(|| Error::mismatch(format!("no choice for instance `{id}`")))?;
        let mut value = scores.score(i, solver);
        if include_cost {
            let cost = *costs
                .get(id)
                .ok_or_else(|| Error::mismatch(format!("no feature cost for instance `{id}`")))?;
            value += cost;
        }
        sum += value;
    }
    Ok(sum / n as f64)
}

/// Confusion counts with EAX as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Accuracy, F1 (EAX positive), and confusion counts of a per-instance
/// prediction against the per-instance best solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: ConfusionCounts,
}

pub fn classification_metrics(
    predicted: &BTreeMap<String, Solver>,
    actual_best: &BTreeMap<String, Solver>,
) -> Result<ClassificationMetrics> {
    if actual_best.is_empty() {
        return Err(Error::invalid("classification_metrics needs instances"));
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (id, &actual) in actual_best {
        let pred = *predicted
            .get(id)
            .ok_or_else(|| Error::mismatch(format!("no prediction for instance `{id}`")))?;
        match (pred, actual) {
            (Solver::Eax, Solver::Eax) => c.tp += 1,
            (Solver::Eax, Solver::Lkh) => c.fp += 1,
            (Solver::Lkh, Solver::Lkh) => c.tn += 1,
            (Solver::Lkh, Solver::Eax) => c.fn_ += 1,
        }
    }
    let total = c.total() as f64;
    let accuracy = (c.tp + c.tn) as f64 / total;
    let f1 = if 2 * c.tp + c.fp + c.fn_ == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64
    };
    Ok(ClassificationMetrics {
        accuracy,
        f1,
        confusion: c,
    })
}

/// Counts and average per-instance overheads of the two misclassification
/// directions. A direction with no misclassifications reports count 0 and
/// average 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisclassificationCosts {
    pub count_eax_instead_of_lkh: usize,
    pub avg_overhead_eax_instead_of_lkh: f64,
    pub count_lkh_instead_of_eax: usize,
    pub avg_overhead_lkh_instead_of_eax: f64,
}

pub fn misclassification_costs(
    predicted: &BTreeMap<String, Solver>,
    actual_best: &BTreeMap<String, Solver>,
    scores: &ParScores,
) -> Result<MisclassificationCosts> {
    let mut count_e = 0usize;
    let mut sum_e = 0.0f64;
    let mut count_l = 0usize;
    let mut sum_l = 0.0f64;
    for (id, &actual) in actual_best {
        let pred = *predicted
            .get(id)
            .ok_or_else(|| Error::mismatch(format!("no prediction for instance `{id}`")))?;
        if pred == actual {
            continue;
        }
        let i = scores
            .index_of(id)
            .ok_or_else(|| Error::mismatch(format!("no scores for instance `{id}`")))?;
        let overhead = scores.score(i, pred) - scores.score(i, actual);
        match pred {
            Solver::Eax => {
                count_e += 1;
                sum_e += overhead;
            }
            Solver::Lkh => {
                count_l += 1;
                sum_l += overhead;
            }
        }
    }
    Ok(MisclassificationCosts {
        count_eax_instead_of_lkh: count_e,
        avg_overhead_eax_instead_of_lkh: if count_e > 0 { sum_e / count_e as f64 } else { 0.0 },
        count_lkh_instead_of_eax: count_l,
        avg_overhead_lkh_instead_of_eax: if count_l > 0 { sum_l / count_l as f64 } else { 0.0 },
    })
}

/// Portfolio baselines included in every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub vbs_par10: f64,
    pub sbs_par10: f64,
    pub sbs_solver: Solver,
}

/// One cross-validation fold's outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_id: usize,
    pub par10: f64,
    pub threshold: f64,
}

/// Aggregate selector quality over all instances (each instance is scored in
/// exactly one test fold).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mean_par10: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: ConfusionCounts,
    pub gap_closed: f64,
}

/// Full evaluation report for one selector configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorReport {
    pub schema_version: u32,
    pub selector: String,
    pub include_cost: bool,
    pub baselines: Baselines,
    pub per_fold: Vec<FoldResult>,
    pub aggregate: AggregateMetrics,
    pub misclassification: MisclassificationCosts,
}

impl SelectorReport {
    pub const SCHEMA_VERSION: u32 = 1;
}
