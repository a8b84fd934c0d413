//! The MST / nearest-neighbor-graph feature vector, plus the CSV feature
//! matrix that the ranking, learning, and evaluation stages consume.
//!
//! The feature set is a fixed list: summary statistics of MST edge lengths
//! and node degrees, of k-NN-graph component structure (strong and weak),
//! the fraction of mutual directed edges, and statistics of all directed
//! k-NN edge lengths. Feature names and order are identical across
//! instances; `cost_seconds` records the wall-clock cost of computing the
//! vector (graph construction plus statistics, excluding file I/O).

use std::io::{Read, Write};
use std::time::Instant;

use crate::error::Error;
use crate::graph;
use crate::instance::Instance;
use crate::Result;

/// Statistic suffixes emitted per value group, in fixed order.
pub const STAT_SUFFIXES: [&str; 10] = [
    "sum",
    "mean",
    "median",
    "sd",
    "var",
    "coef_of_var",
    "min",
    "max",
    "span",
    "skew",
];

/// Degenerate-input markers for [`SummaryStats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatFlags {
    /// Mean was zero, so the coefficient of variation is reported as 0.
    pub zero_mean: bool,
    /// Second central moment was zero, so skewness is reported as 0.
    pub zero_m2: bool,
    /// Single-element input: sd, var and skew are reported as 0.
    pub single_value: bool,
}

impl StatFlags {
    pub fn any(&self) -> bool {
        self.zero_mean || self.zero_m2 || self.single_value
    }
}

/// Summary statistics of a non-empty sample.
///
/// `sd`/`var` are sample statistics (divisor n-1); skewness is the moment
/// form g1 = m3 / m2^(3/2) with population moments; the median of an
/// even-length sample is the midpoint average. Degenerate cases report 0 and
/// set the corresponding flag instead of producing NaN, because downstream
/// learners require finite inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub sum: f64,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub var: f64,
    pub coef_of_var: f64,
    pub min: f64,
    pub max: f64,
    pub span: f64,
    pub skew: f64,
    pub flags: StatFlags,
}

impl SummaryStats {
    /// Values in [`STAT_SUFFIXES`] order.
    pub fn values(&self) -> [f64; 10] {
        [
            self.sum,
            self.mean,
            self.median,
            self.sd,
            self.var,
            self.coef_of_var,
            self.min,
            self.max,
            self.span,
            self.skew,
        ]
    }
}

/// Computes [`SummaryStats`] for a non-empty sample.
pub fn summary_stats(xs: &[f64]) -> Result<SummaryStats> {
    if xs.is_empty() {
        return Err(Error::invalid("summary_stats needs a non-empty sample"));
    }
    let n = xs.len();
    let nf = n as f64;
    let mut flags = StatFlags::default();

    let sum: f64 = xs.iter().sum();
    let mean = sum / nf;
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;

    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };

    // Population central moments.
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / nf;

    let (sd, var, skew) = if n == 1 {
        flags.single_value = true;
        (0.0, 0.0, 0.0)
    } else {
        let var = m2 * nf / (nf - 1.0);
        let sd = var.sqrt();
        let skew = if m2 == 0.0 {
            flags.zero_m2 = true;
            0.0
        } else {
            // m2^(3/2) via m2 * sqrt(m2): commutes exactly with power-of-two
            // input scaling, unlike powf.
            m3 / (m2 * m2.sqrt())
        };
        (sd, var, skew)
    };

    let coef_of_var = if mean == 0.0 {
        flags.zero_mean = true;
        0.0
    } else {
        sd / mean
    };

    Ok(SummaryStats {
        sum,
        mean,
        median,
        sd,
        var,
        coef_of_var,
        min,
        max,
        span,
        skew,
        flags,
    })
}

/// The ordered feature names for neighborhood size `k`.
pub fn feature_names(k: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(53);
    for suffix in STAT_SUFFIXES {
        names.push(format!("mst_dists_{suffix}"));
    }
    for suffix in STAT_SUFFIXES {
        names.push(format!("mst_degrees_{suffix}"));
    }
    names.push(format!("nng_{k}_strong_components_count"));
    for suffix in STAT_SUFFIXES {
        names.push(format!("nng_{k}_strong_components_sizes_{suffix}"));
    }
    names.push(format!("nng_{k}_weak_components_count"));
    for suffix in STAT_SUFFIXES {
        names.push(format!("nng_{k}_weak_components_sizes_{suffix}"));
    }
    names.push(format!("nng_{k}_strong_edge_fraction"));
    for suffix in STAT_SUFFIXES {
        names.push(format!("nng_{k}_dists_{suffix}"));
    }
    names
}

/// One instance's feature values, in [`feature_names`] order, plus the
/// wall-clock cost of computing them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub k: usize,
    pub values: Vec<f64>,
    pub cost_seconds: f64,
}

impl FeatureVector {
    pub fn names(&self) -> Vec<String> {
        feature_names(self.k)
    }

    /// Value of a named feature, for tests and inspection.
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names()
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

/// Computes the feature vector of one instance with neighborhood size `k`.
pub fn compute_features(inst: &Instance, k: usize) -> Result<FeatureVector> {
    let start = Instant::now();

    let mst = graph::minimum_spanning_tree(inst);
    let g = graph::knn_graph(inst, k)?;
    let strong = graph::strong_components(&g);
    let weak = graph::weak_components(&g);

    let mst_dists = summary_stats(&mst.edge_lengths())?;
    let mst_degrees =
        summary_stats(&mst.degrees.iter().map(|&d| d as f64).collect::<Vec<_>>())?;
    let strong_sizes =
        summary_stats(&strong.sizes.iter().map(|&s| s as f64).collect::<Vec<_>>())?;
    let weak_sizes = summary_stats(&weak.sizes.iter().map(|&s| s as f64).collect::<Vec<_>>())?;
    let nng_dists = summary_stats(&g.all_edge_lengths())?;
    let strong_fraction =
        g.strong_directed_edge_count() as f64 / (inst.n() as f64 * k as f64);

    let mut values = Vec::with_capacity(53);
    values.extend(mst_dists.values());
    values.extend(mst_degrees.values());
    values.push(strong.count() as f64);
    values.extend(strong_sizes.values());
    values.push(weak.count() as f64);
    values.extend(weak_sizes.values());
    values.push(strong_fraction);
    values.extend(nng_dists.values());

    let cost_seconds = start.elapsed().as_secs_f64();
    Ok(FeatureVector {
        k,
        values,
        cost_seconds,
    })
}

/// A feature matrix over a set of instances, with rows sorted by instance id.
///
/// CSV layout: header `instance_id,cost_seconds,<feature names...>`, one data
/// row per instance, deterministic column order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub instance_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
}

impl FeatureMatrix {
    /// Assembles a matrix from per-instance vectors, sorting rows by id.
    pub fn from_vectors(entries: Vec<(String, FeatureVector)>) -> Result<Self> {
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut feature_names: Option<Vec<String>> = None;
        let mut instance_ids = Vec::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len());
        let mut costs = Vec::with_capacity(entries.len());
        for (id, fv) in entries {
            let names = fv.names();
            match &feature_names {
                None => feature_names = Some(names),
                Some(existing) if *existing == names => {}
                Some(_) => {
                    return Err(Error::mismatch(format!(
                        "instance `{id}` has a different feature set"
                    )))
                }
            }
            if instance_ids.last() == Some(&id) {
                return Err(Error::mismatch(format!("duplicate instance id `{id}`")));
            }
            instance_ids.push(id);
            rows.push(fv.values);
            costs.push(fv.cost_seconds);
        }
        Ok(FeatureMatrix {
            instance_ids,
            feature_names: feature_names.unwrap_or_default(),
            rows,
            costs,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// One feature column across all instances.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Projection onto a subset of feature columns (indices kept in the
    /// given order).
    pub fn select_columns(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            instance_ids: self.instance_ids.clone(),
            feature_names: indices
                .iter()
                .map(|&j| self.feature_names[j].clone())
                .collect(),
            rows: self
                .rows
                .iter()
                .map(|r| indices.iter().map(|&j| r[j]).collect())
                .collect(),
            costs: self.costs.clone(),
        }
    }

    /// Restriction to a subset of instances (ids kept sorted).
    pub fn select_instances(&self, ids: &[String]) -> Result<FeatureMatrix> {
        let mut wanted: Vec<&String> = ids.iter().collect();
        wanted.sort();
        let mut instance_ids = Vec::with_capacity(wanted.len());
        let mut rows = Vec::with_capacity(wanted.len());
        let mut costs = Vec::with_capacity(wanted.len());
        for id in wanted {
            let idx = self
                .instance_ids
                .binary_search(id)
                .map_err(|_| Error::mismatch(format!("instance `{id}` not in feature matrix")))?;
            instance_ids.push(self.instance_ids[idx].clone());
            rows.push(self.rows[idx].clone());
            costs.push(self.costs[idx]);
        }
        Ok(FeatureMatrix {
            instance_ids,
            feature_names: self.feature_names.clone(),
            rows,
            costs,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["instance_id".to_string(), "cost_seconds".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_instances() {
            let mut record = vec![self.instance_ids[i].clone(), fmt_f64(self.costs[i])];
            record.extend(self.rows[i].iter().map(|&v| fmt_f64(v)));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, path: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 2 || &header[0] != "instance_id" || &header[1] != "cost_seconds" {
            return Err(Error::BadFileFormat {
                path: path.to_string(),
                reason: "feature CSV must start with instance_id,cost_seconds".into(),
            });
        }
        let feature_names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let mut entries: Vec<(String, Vec<f64>, f64)> = Vec::new();
        for (row_idx, record) in r.records().enumerate() {
            let record = record?;
            let row_no = row_idx + 2;
            if record.len() != header.len() {
                return Err(Error::CsvData {
                    path: path.to_string(),
                    row: row_no,
                    reason: format!(
                        "expected {} fields, found {}",
                        header.len(),
                        record.len()
                    ),
                });
            }
            let id = record[0].to_string();
            let parse = |field: &str| -> Result<f64> {
                field.parse::<f64>().map_err(|_| Error::CsvData {
                    path: path.to_string(),
                    row: row_no,
                    reason: format!("unparsable number `{field}`"),
                })
            };
            let cost = parse(&record[1])?;
            let values = record
                .iter()
                .skip(2)
                .map(parse)
                .collect::<Result<Vec<f64>>>()?;
            entries.push((id, values, cost));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::mismatch(format!(
                    "duplicate instance id `{}` in {path}",
                    pair[0].0
                )));
            }
        }
        Ok(FeatureMatrix {
            instance_ids: entries.iter().map(|e| e.0.clone()).collect(),
            feature_names,
            rows: entries.iter().map(|e| e.1.clone()).collect(),
            costs: entries.iter().map(|e| e.2).collect(),
        })
    }
}

/// Shortest round-trip decimal form; parsing the output recovers the exact
/// value.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
