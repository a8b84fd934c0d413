//! Implementations of the five subcommands.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use tspas_core::cnn::{
    run_cv_cnn, write_checkpoint, write_training_log, CnnExperimentConfig, NetworkConfig,
    TrainConfig,
};
use tspas_core::features::{compute_features, FeatureMatrix, FeatureVector};
use tspas_core::instance::parse_tsplib;
use tspas_core::render::{export_pgm, export_tensor, import_tensor, render, ImageTensor, RoleSet};
use tspas_core::scoring::{ParScores, PerfDb, SelectorReport, Solver};
use tspas_core::selection::{ExperimentConfig, FoldAssignment, HardestMode};
use tspas_core::stats::rank_features;
use tspas_core::Error as CoreError;

use crate::manifest::RunManifest;

/// Global flags shared by all subcommands.
#[derive(Debug, Clone, Copy)]
pub struct Globals {
    pub seed: u64,
    pub jobs: usize,
    pub cutoff: f64,
    pub penalty_factor: f64,
}

/// Command errors carrying their process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Data(msg) | CliError::Internal(msg) => {
                f.write_str(msg)
            }
        }
    }
}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        match err {
            CoreError::Json(_) => CliError::Internal(err.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Data(err.to_string())
    }
}

type CmdResult = Result<(), CliError>;

/// Sorted list of `.tsp` files in a directory.
fn instance_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "tsp") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn run_pool<T: Send, F: Fn(&PathBuf) -> T + Sync>(
    jobs: usize,
    items: &[PathBuf],
    work: F,
) -> Vec<T> {
    if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            items.par_iter().map(|p| work(p)).collect()
        })
    } else {
        items.iter().map(work).collect()
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn cmd_features(globals: &Globals, instances_dir: &Path, out: &Path, k: usize) -> CmdResult {
    let files = instance_files(instances_dir)?;
    let results = run_pool(globals.jobs, &files, |path| {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let inst = parse_tsplib(&text, Some(&file_stem(path)))
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let fv = compute_features(&inst, k).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok::<(String, FeatureVector), String>((inst.id().to_string(), fv))
    });

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok(entry) => entries.push(entry),
            Err(msg) => failures.push(msg),
        }
    }
    let matrix = FeatureMatrix::from_vectors(entries).map_err(CliError::from)?;
    let file = fs::File::create(out)?;
    matrix.write_csv(std::io::BufWriter::new(file))?;

    for failure in &failures {
        eprintln!("error: {failure}");
    }
    if files.is_empty() {
        eprintln!("warning: no instance files found in {}", instances_dir.display());
        return Err(CliError::data("no instances processed (header-only CSV written)"));
    }
    if !failures.is_empty() {
        return Err(CliError::data(format!(
            "{} of {} instance files failed",
            failures.len(),
            files.len()
        )));
    }
    Ok(())
}

fn read_labels_csv(path: &Path) -> Result<BTreeMap<String, Solver>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| CliError::data(e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["instance_id", "label"] {
        return Err(CliError::data(format!(
            "{}: labels CSV header must be `instance_id,label`",
            path.display()
        )));
    }
    let mut labels = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::data(e.to_string()))?;
        let solver: Solver = record[1].parse().map_err(|_| {
            CliError::data(format!(
                "{}: row {}: unknown label `{}`",
                path.display(),
                idx + 2,
                &record[1]
            ))
        })?;
        labels.insert(record[0].to_string(), solver);
    }
    Ok(labels)
}

pub fn cmd_rank(
    globals: &Globals,
    features: &Path,
    perf: &Path,
    labels_path: Option<&Path>,
    top: usize,
    subset: &str,
    out: &Path,
) -> CmdResult {
    let matrix = read_feature_csv(features)?;
    let db = read_perf_csv(perf, globals.cutoff)?;
    let scores = ParScores::from_db(&db, globals.penalty_factor);
    check_ids(&matrix, &scores)?;

    let mut labels: BTreeMap<String, Solver> = scores
        .ids
        .iter()
        .zip(scores.labels())
        .map(|(id, l)| (id.clone(), l))
        .collect();
    if let Some(path) = labels_path {
        let explicit = read_labels_csv(path)?;
        let mut conflicts = 0usize;
        for (id, solver) in explicit {
            match labels.get_mut(&id) {
                Some(current) => {
                    if *current != solver {
                        conflicts += 1;
                        *current = solver;
                    }
                }
                None => {
                    return Err(CliError::data(format!(
                        "label for unknown instance `{id}`"
                    )));
                }
            }
        }
        if conflicts > 0 {
            eprintln!(
                "warning: {conflicts} explicit labels disagree with the performance-derived ones; explicit labels win"
            );
        }
    }

    let (working, working_labels) = match subset {
        "all" => {
            let labels_vec: Vec<Solver> =
                matrix.instance_ids.iter().map(|id| labels[id]).collect();
            (matrix, labels_vec)
        }
        other => {
            let (mode, m) = parse_subset(other)?;
            let keep = tspas_core::selection::hardest_subset(&scores, mode, m)
                .map_err(CliError::from)?;
            let ids: Vec<String> = keep.into_iter().collect();
            let working = matrix.select_instances(&ids).map_err(CliError::from)?;
            let labels_vec: Vec<Solver> =
                working.instance_ids.iter().map(|id| labels[id]).collect();
            (working, labels_vec)
        }
    };

    let ranking = rank_features(&working, &working_labels, top, 0.05)?;
    let file = fs::File::create(out)?;
    ranking.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}

fn parse_subset(text: &str) -> Result<(HardestMode, usize), CliError> {
    let (mode, rest) = match text.split_at(1) {
        ("r", rest) => (HardestMode::Par10Ratio, rest),
        ("s", rest) => (HardestMode::Par10Score, rest),
        _ => {
            return Err(CliError::Usage(format!(
                "subset must be `all`, `rN`, or `sN`, got `{text}`"
            )))
        }
    };
    let m: usize = rest.parse().map_err(|_| {
        CliError::Usage(format!("subset must be `all`, `rN`, or `sN`, got `{text}`"))
    })?;
    Ok((mode, m))
}

pub fn cmd_render(
    globals: &Globals,
    instances_dir: &Path,
    out_dir: &Path,
    roles_text: &str,
    size: usize,
    k: usize,
) -> CmdResult {
    let roles = RoleSet::parse(roles_text).map_err(|e| CliError::Usage(e.to_string()))?;
    if roles.is_empty() {
        return Err(CliError::Usage("at least one channel role is required".into()));
    }
    let files = instance_files(instances_dir)?;
    if files.is_empty() {
        return Err(CliError::data(format!(
            "no instance files found in {}",
            instances_dir.display()
        )));
    }
    fs::create_dir_all(out_dir)?;

    let results = run_pool(globals.jobs, &files, |path| {
        let work = || -> Result<(), String> {
            let text =
                fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let inst = parse_tsplib(&text, Some(&file_stem(path)))
                .map_err(|e| format!("{}: {e}", path.display()))?;
            let img = render(&inst, roles, size, size, k)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            let base = out_dir.join(inst.id());
            export_tensor(&img, &base.with_extension("tsr"))
                .map_err(|e| format!("{}: {e}", path.display()))?;
            for (c, role) in img.channel_roles.iter().enumerate() {
                let pgm = out_dir.join(format!("{}.{}.pgm", inst.id(), role.as_str()));
                export_pgm(&img, c, &pgm).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok(())
        };
        work()
    });

    let failures: Vec<String> = results.into_iter().filter_map(|r| r.err()).collect();
    for failure in &failures {
        eprintln!("error: {failure}");
    }
    if !failures.is_empty() {
        return Err(CliError::data(format!(
            "{} of {} instance files failed",
            failures.len(),
            files.len()
        )));
    }
    Ok(())
}

fn read_feature_csv(path: &Path) -> Result<FeatureMatrix, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    FeatureMatrix::read_csv(std::io::BufReader::new(file), &path.display().to_string())
        .map_err(CliError::from)
}

fn read_perf_csv(path: &Path, cutoff: f64) -> Result<PerfDb, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    PerfDb::from_csv(
        std::io::BufReader::new(file),
        &path.display().to_string(),
        cutoff,
    )
    .map_err(CliError::from)
}

fn check_ids(matrix: &FeatureMatrix, scores: &ParScores) -> Result<(), CliError> {
    let missing: Vec<&String> = matrix
        .instance_ids
        .iter()
        .filter(|id| scores.index_of(id).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::data(format!(
            "instances without performance records: {}",
            missing
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let extra: Vec<&String> = scores
        .ids
        .iter()
        .filter(|id| !matrix.instance_ids.contains(id))
        .collect();
    if !extra.is_empty() {
        return Err(CliError::data(format!(
            "performance records for instances missing from the feature CSV: {}",
            extra
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    manifest: &'a RunManifest,
    report: &'a SelectorReport,
}

fn write_report(path: &Path, manifest: &RunManifest, report: &SelectorReport) -> CmdResult {
    let file = ReportFile { manifest, report };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let mut out = fs::File::create(path)?;
    out.write_all(json.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn cmd_evaluate(
    globals: &Globals,
    features: &Path,
    perf: &Path,
    config_path: &Path,
    folds_path: Option<&Path>,
    emit_folds: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let matrix = read_feature_csv(features)?;
    let db = read_perf_csv(perf, globals.cutoff)?;
    let scores = ParScores::from_db(&db, globals.penalty_factor);

    let config_text = fs::read_to_string(config_path)
        .map_err(|e| CliError::data(format!("{}: {e}", config_path.display())))?;
    let base = ExperimentConfig {
        seed: globals.seed,
        ..ExperimentConfig::default()
    };
    let config = ExperimentConfig::parse_with_base(&config_text, base)?;

    let folds = match folds_path {
        Some(path) => {
            let file = fs::File::open(path)
                .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            Some(FoldAssignment::read_csv(
                std::io::BufReader::new(file),
                &path.display().to_string(),
            )?)
        }
        None => None,
    };

    let (report, used_folds) =
        tspas_core::selection::run_experiment(&matrix, &scores, &config, folds)?;

    if let Some(path) = emit_folds {
        let file = fs::File::create(path)?;
        used_folds.write_csv(std::io::BufWriter::new(file))?;
    }

    let mut manifest = RunManifest::new(
        "evaluate",
        config.seed,
        globals.jobs,
        globals.cutoff,
        globals.penalty_factor,
        serde_json::to_value(&config).map_err(|e| CliError::Internal(e.to_string()))?,
    );
    manifest.add_file(features)?;
    manifest.add_file(perf)?;
    manifest.add_file(config_path)?;
    if let Some(path) = folds_path {
        manifest.add_file(path)?;
    }
    write_report(out, &manifest, &report)
}

/// Flat key-value training configuration for `train-cnn`.
#[derive(Debug, Clone, Serialize)]
pub struct CnnCliConfig {
    pub channels: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: Option<usize>,
    pub seed: u64,
    pub threshold_grid_step: f64,
    pub tuning_fraction: f64,
}

impl CnnCliConfig {
    fn parse(text: &str, default_seed: u64) -> Result<Self, CliError> {
        let mut cfg = CnnCliConfig {
            channels: "points".into(),
            epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            patience: Some(10),
            seed: default_seed,
            threshold_grid_step: 0.01,
            tuning_fraction: 0.1,
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| CliError::data(format!("config line {}: {msg}", idx + 1));
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(format!("expected `key = value`, got `{line}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            let parse_err = || bad(format!("unparsable value `{value}` for `{key}`"));
            match key {
                "channels" => cfg.channels = value.to_string(),
                "epochs" => cfg.epochs = value.parse().map_err(|_| parse_err())?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| parse_err())?,
                "lr" => cfg.lr = value.parse().map_err(|_| parse_err())?,
                "patience" => {
                    cfg.patience = if value == "none" {
                        None
                    } else {
                        Some(value.parse().map_err(|_| parse_err())?)
                    }
                }
                "seed" => cfg.seed = value.parse().map_err(|_| parse_err())?,
                "threshold_grid_step" => {
                    cfg.threshold_grid_step = value.parse().map_err(|_| parse_err())?
                }
                "tuning_fraction" => {
                    cfg.tuning_fraction = value.parse().map_err(|_| parse_err())?
                }
                other => return Err(bad(format!("unknown config key `{other}`"))),
            }
        }
        Ok(cfg)
    }
}

/// Restricts a tensor to the requested channel roles (which must all be
/// present).
fn select_channels(img: &ImageTensor, roles: &RoleSet) -> Result<ImageTensor, CliError> {
    let wanted = roles.roles();
    if img.channel_roles == wanted {
        return Ok(img.clone());
    }
    let size = img.height * img.width;
    let mut data = Vec::with_capacity(wanted.len() * size);
    for role in &wanted {
        let Some(c) = img.channel_roles.iter().position(|r| r == role) else {
            return Err(CliError::data(format!(
                "channel mismatch: tensor provides {:?}, config needs {:?}",
                img.channel_roles
                    .iter()
                    .map(|r| r.as_str())
                    .collect::<Vec<_>>(),
                wanted.iter().map(|r| r.as_str()).collect::<Vec<_>>()
            )));
        };
        data.extend_from_slice(img.channel(c));
    }
    Ok(ImageTensor {
        height: img.height,
        width: img.width,
        channel_roles: wanted,
        data,
    })
}

pub fn cmd_train_cnn(
    globals: &Globals,
    tensors_dir: &Path,
    perf: &Path,
    config_path: &Path,
    folds_path: &Path,
    out_dir: &Path,
) -> CmdResult {
    let config_text = fs::read_to_string(config_path)
        .map_err(|e| CliError::data(format!("{}: {e}", config_path.display())))?;
    let config = CnnCliConfig::parse(&config_text, globals.seed)?;
    let roles = RoleSet::parse(&config.channels).map_err(|e| CliError::data(e.to_string()))?;
    if roles.is_empty() {
        return Err(CliError::data("config selects no channels"));
    }

    let db = read_perf_csv(perf, globals.cutoff)?;
    let scores = ParScores::from_db(&db, globals.penalty_factor);

    let folds_file = fs::File::open(folds_path)
        .map_err(|e| CliError::data(format!("{}: {e}", folds_path.display())))?;
    let folds = FoldAssignment::read_csv(
        std::io::BufReader::new(folds_file),
        &folds_path.display().to_string(),
    )?;

    // Load tensors for every scored instance.
    let mut images = BTreeMap::new();
    for id in &scores.ids {
        let path = tensors_dir.join(format!("{id}.tsr"));
        if !path.is_file() {
            return Err(CliError::data(format!(
                "missing tensor file for instance `{id}` ({})",
                path.display()
            )));
        }
        let img = import_tensor(&path)?;
        images.insert(id.clone(), select_channels(&img, &roles)?);
    }

    let in_channels = roles.roles().len();
    let cnn_cfg = CnnExperimentConfig {
        network: NetworkConfig::standard(in_channels),
        train: TrainConfig {
            batch_size: config.batch_size,
            lr: config.lr,
            epochs: config.epochs,
            patience: config.patience,
            seed: config.seed,
            ..TrainConfig::default()
        },
        grid_step: config.threshold_grid_step,
        tuning_fraction: config.tuning_fraction,
    };

    let (report, artifacts) = run_cv_cnn(&images, &scores, &folds, &cnn_cfg, globals.jobs)?;

    fs::create_dir_all(out_dir)?;
    for artifact in &artifacts {
        let ckpt = fs::File::create(out_dir.join(format!("fold_{}.ckpt", artifact.fold_id)))?;
        write_checkpoint(&artifact.params, std::io::BufWriter::new(ckpt))?;
        let log = fs::File::create(out_dir.join(format!("fold_{}_log.csv", artifact.fold_id)))?;
        write_training_log(&artifact.metrics, std::io::BufWriter::new(log))?;
    }

    let mut manifest = RunManifest::new(
        "train-cnn",
        config.seed,
        globals.jobs,
        globals.cutoff,
        globals.penalty_factor,
        serde_json::to_value(&config).map_err(|e| CliError::Internal(e.to_string()))?,
    );
    manifest.add_dir(tensors_dir)?;
    manifest.add_file(perf)?;
    manifest.add_file(config_path)?;
    manifest.add_file(folds_path)?;
    write_report(&out_dir.join("report.json"), &manifest, &report)
}
