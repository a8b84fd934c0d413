//! Feature scaling and univariate significance-based feature ranking.
//!
//! Each feature column is min-max scaled to [0,1], then compared across the
//! two solver classes with a two-sided Mann-Whitney U test; features are
//! ranked by ascending p-value. For small combined samples without ties the
//! p-value is exact (full enumeration of the U distribution); otherwise a
//! normal approximation with tie-corrected variance and continuity
//! correction 0.5 is used.

use std::io::Write;

use crate::error::Error;
use crate::features::{fmt_f64, FeatureMatrix};
use crate::scoring::Solver;
use crate::Result;

/// Combined sample size up to which the exact U distribution is enumerated
/// (requires a tie-free sample).
pub const EXACT_LIMIT: usize = 20;

/// Min-max scales a column to [0,1]. A constant column maps to all-0.5 and
/// is flagged.
pub fn minmax_scale(column: &[f64]) -> Result<(Vec<f64>, bool)> {
    if column.is_empty() {
        return Err(Error::invalid("minmax_scale needs a non-empty column"));
    }
    let min = column.iter().copied().fold(f64::INFINITY, f64::min);
    let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok((vec![0.5; column.len()], true));
    }
    let span = max - min;
    Ok((column.iter().map(|&x| (x - min) / span).collect(), false))
}

/// Two-sided Mann-Whitney U test.
///
/// Returns `(u, p)` where `u` is the U statistic of the first sample,
/// computed from rank sums with midranks for ties.
pub fn mann_whitney_u(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::invalid("mann_whitney_u needs non-empty samples"));
    }
    let nx = xs.len();
    let ny = ys.len();
    let total = nx + ny;

    let mut combined: Vec<(f64, bool)> = xs
        .iter()
        .map(|&v| (v, true))
        .chain(ys.iter().map(|&v| (v, false)))
        .collect();
    combined.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Midranks plus tie bookkeeping for the variance correction.
    let mut rank_sum_x = 0.0f64;
    let mut tie_term = 0.0f64;
    let mut has_ties = false;
    let mut i = 0;
    while i < total {
        let mut j = i + 1;
        while j < total && combined[j].0 == combined[i].0 {
            j += 1;
        }
        let group = (j - i) as f64;
        if j - i > 1 {
            has_ties = true;
            tie_term += group * group * group - group;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        for item in &combined[i..j] {
            if item.1 {
                rank_sum_x += midrank;
            }
        }
        i = j;
    }

    let u_x = rank_sum_x - (nx * (nx + 1)) as f64 / 2.0;
    let product = (nx * ny) as f64;

    if total <= EXACT_LIMIT && !has_ties {
        let p = exact_two_sided_p(u_x.round() as u64, nx, ny);
        return Ok((u_x, p));
    }

    let mean = product / 2.0;
    let n = total as f64;
    let variance = product / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if variance <= 0.0 {
        // All observations tied: no evidence against the null.
        return Ok((u_x, 1.0));
    }
    let u_max = u_x.max(product - u_x);
    // Continuity correction 0.5 toward the mean.
    let z = (u_max - mean - 0.5) / variance.sqrt();
    let p = (2.0 * (1.0 - std_normal_cdf(z))).clamp(0.0, 1.0);
    Ok((u_x, p))
}

/// Exact two-sided p-value: 2 * P(U <= min(u, nx*ny - u)) under the
/// enumerated null distribution, clamped to 1.
fn exact_two_sided_p(u: u64, nx: usize, ny: usize) -> f64 {
    let counts = u_distribution(nx, ny);
    let total: f64 = counts.iter().sum();
    let u_min = u.min((nx * ny) as u64 - u) as usize;
    let tail: f64 = counts[..=u_min].iter().sum();
    (2.0 * tail / total).min(1.0)
}

/// Counts of arrangements per U value for tie-free samples of sizes
/// `(nx, ny)`. `counts[u]` is the number of rank assignments with statistic
/// exactly `u`; the counts sum to C(nx+ny, nx).
fn u_distribution(nx: usize, ny: usize) -> Vec<f64> {
    let max_u = nx * ny;
    // table[m][n][u], built by recurrence on which sample holds the largest
    // remaining observation.
    let mut table = vec![vec![vec![0.0f64; max_u + 1]; ny + 1]; nx + 1];
    for n in 0..=ny {
        table[0][n][0] = 1.0;
    }
    for m in 1..=nx {
        table[m][0][0] = 1.0;
        for n in 1..=ny {
            for u in 0..=max_u {
                let take_x = if u >= n { table[m - 1][n][u - n] } else { 0.0 };
                let take_y = table[m][n - 1][u];
                table[m][n][u] = take_x + take_y;
            }
        }
    }
    table[nx][ny].clone()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// One ranked feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RankEntry {
    pub feature: String,
    pub u_statistic: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Features ordered by ascending p-value (ties broken by feature name).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRanking {
    pub entries: Vec<RankEntry>,
    pub alpha: f64,
}

impl FeatureRanking {
    /// Names of the ranked features, best first.
    pub fn feature_names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.feature.clone()).collect()
    }

    /// CSV export: `rank,feature,u,p,significant_at_alpha`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rank", "feature", "u", "p", "significant_at_alpha"])?;
        for (i, e) in self.entries.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                e.feature.clone(),
                fmt_f64(e.u_statistic),
                fmt_f64(e.p_value),
                if e.significant { "1" } else { "0" }.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ranks features by two-sided Mann-Whitney p-value between the two label
/// classes, after min-max scaling each column, and keeps the `top_k` most
/// significant ones.
pub fn rank_features(
    matrix: &FeatureMatrix,
    labels: &[Solver],
    top_k: usize,
    alpha: f64,
) -> Result<FeatureRanking> {
    if labels.len() != matrix.n_instances() {
        return Err(Error::mismatch(format!(
            "{} labels for {} instances",
            labels.len(),
            matrix.n_instances()
        )));
    }
    if top_k > matrix.n_features() {
        return Err(Error::invalid(format!(
            "top_k={} exceeds feature count {}",
            top_k,
            matrix.n_features()
        )));
    }
    let n_eax = labels.iter().filter(|&&l| l == Solver::Eax).count();
    if n_eax == 0 || n_eax == labels.len() {
        return Err(Error::invalid(
            "rank_features needs both classes present in the labels",
        ));
    }

    let mut entries = Vec::with_capacity(matrix.n_features());
    for j in 0..matrix.n_features() {
        let (scaled, _constant) = minmax_scale(&matrix.column(j))?;
        let xs: Vec<f64> = scaled
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == Solver::Eax)
            .map(|(&v, _)| v)
            .collect();
        let ys: Vec<f64> = scaled
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == Solver::Lkh)
            .map(|(&v, _)| v)
            .collect();
        let (u, p) = mann_whitney_u(&xs, &ys)?;
        entries.push(RankEntry {
            feature: matrix.feature_names[j].clone(),
            u_statistic: u,
            p_value: p,
            significant: p < alpha,
        });
    }
    entries.sort_by(|a, b| {
        a.p_value
            .partial_cmp(&b.p_value)
            .unwrap()
            .then_with(|| a.feature.cmp(&b.feature))
    });
    entries.truncate(top_k);
    Ok(FeatureRanking { entries, alpha })
}
