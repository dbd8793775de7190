//! Multivalidity reporting.
//!
//! A report is recomputed from the raw transcript, never from incremental
//! predictor state: every cell's statistics come from a fresh pass over the
//! recorded (groups, prediction, label) triples. Per cell S = G_T(·):
//!
//!   mean     V = Σ_{t∈S} (y_t − μ̄_t), stats (ȳ(S), μ̄(S))
//!   moment   V as above plus M = Σ_{t∈S} ((y_t − μ̂_i)ᵏ − m̄ᵏ_t), stats
//!            (mᵏ(S), m̄ᵏ(S)) where mᵏ(S) centers at the empirical mean of S
//!   interval V = Σ_{t∈S} (Cover_t − (1 − δ)), stats (H̄(S), 1 − δ)
//!
//! The headline α is the max over populated cells of the normalized table
//! error (both tables for the moment kind), compared against the matching
//! high-probability theorem bound at the configured failure rate λ.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use multivalid_core::{bucket_index, cover, BucketGrid, GroupId, GroupSystem, Transcript};
use multivalid_moment::bucket_midpoint;

use crate::HarnessError;

/// Which multivalidity notion a report measures, with the parameters the
/// error tables and the theorem bound need beyond the grid itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportKind {
    Mean,
    Moment { k: u32, lp_epsilon: f64 },
    Interval { delta: f64, rho: f64, lp_epsilon: f64 },
}

impl ReportKind {
    pub fn name(&self) -> &'static str {
        match self {
            ReportKind::Mean => "mean",
            ReportKind::Moment { .. } => "moment",
            ReportKind::Interval { .. } => "interval",
        }
    }
}

/// Per-cell detail only the moment kind carries: the mean-table statistics
/// next to the moment-table ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MomentCellDetail {
    /// ȳ(S), the empirical label mean of the cell.
    pub mean_true: f64,
    /// μ̄(S), the average published mean prediction over the cell.
    pub mean_pred: f64,
    /// |V|/T for the cell.
    pub mean_error_over_t: f64,
    /// |M|/T for the cell.
    pub moment_error_over_t: f64,
}

/// One populated (group, bucket key) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportCell {
    pub group: GroupId,
    pub bucket_i: u32,
    /// Moment kind: the moment-prediction bucket. Interval kind: the upper
    /// endpoint's bucket. Mean kind: absent.
    pub bucket_j: Option<u32>,
    pub count: u64,
    /// Empirical statistic of the cell: ȳ(S), mᵏ(S), or H̄(S) by kind.
    pub stat_true: f64,
    /// Predicted counterpart: μ̄(S), m̄ᵏ(S), or 1 − δ by kind.
    pub stat_pred: f64,
    /// Normalized table error |V|/T (max with |M|/T for the moment kind).
    pub abs_error_over_t: f64,
    pub detail: Option<MomentCellDetail>,
}

/// The full multivalidity audit of one transcript.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultivalidityReport {
    pub kind: ReportKind,
    pub t: u64,
    pub lambda: f64,
    /// Populated cells only, sorted by (group, bucket_i, bucket_j).
    pub cells: Vec<ReportCell>,
    /// max over cells of the normalized table error; 0 when no cell exists.
    pub alpha: f64,
    /// Moment kind: (k+1)·α + k/(2n), the induced central-moment error.
    pub beta: Option<f64>,
    /// Interval kind: overall empirical coverage across all rounds.
    pub coverage: Option<f64>,
    /// The matching theorem bound on α at rate λ; infinite when T = 0.
    pub bound: f64,
    /// Whether α ≤ bound.
    pub pass: bool,
}

/// 1/(rn) + 4√(2 ln(2|𝒢|n/λ)/T), the high-probability mean bound.
pub fn mean_alpha_bound(t: u64, group_count: u32, n: u32, r: u32, lambda: f64) -> f64 {
    let cells = 2.0 * f64::from(group_count) * f64::from(n);
    1.0 / f64::from(r * n) + 4.0 * (2.0 * (cells / lambda).ln() / t as f64).sqrt()
}

/// 1/(rn) + 1/(rn′) + 4√(2 ln(4|𝒢|nn′/λ)/T + 2ε), the moment bound with a
/// per-round LP tolerance of ε.
pub fn moment_alpha_bound(
    t: u64,
    group_count: u32,
    n: u32,
    n_prime: u32,
    r: u32,
    lambda: f64,
    lp_epsilon: f64,
) -> f64 {
    let cells = 4.0 * f64::from(group_count) * f64::from(n) * f64::from(n_prime);
    1.0 / f64::from(r * n)
        + 1.0 / f64::from(r * n_prime)
        + 4.0 * (2.0 * (cells / lambda).ln() / t as f64 + 2.0 * lp_epsilon).sqrt()
}

/// ρ + 4√(2 ln(2|𝒢|n²/λ)/T + 2ε), the interval coverage bound against
/// (ρ, rn)-smooth labels with a per-round LP tolerance of ε.
pub fn interval_alpha_bound(
    t: u64,
    group_count: u32,
    n: u32,
    rho: f64,
    lambda: f64,
    lp_epsilon: f64,
) -> f64 {
    let cells = 2.0 * f64::from(group_count) * f64::from(n) * f64::from(n);
    rho + 4.0 * (2.0 * (cells / lambda).ln() / t as f64 + 2.0 * lp_epsilon).sqrt()
}

/// (6+ε)√(2 ln(4|𝒢|n/λ)/T), the batch mixture-predictor mean bound.
pub fn batch_mean_alpha_bound(
    t: u64,
    group_count: u32,
    n: u32,
    lambda: f64,
    epsilon: f64,
) -> f64 {
    let cells = 4.0 * f64::from(group_count) * f64::from(n);
    (6.0 + epsilon) * (2.0 * (cells / lambda).ln() / t as f64).sqrt()
}

/// √((ln(4|𝒢|nn′) + εT)/(2T)), the learning rate the moment bound assumes.
pub fn moment_default_eta(t: u64, group_count: u32, n: u32, n_prime: u32, lp_epsilon: f64) -> f64 {
    let cells = 4.0 * f64::from(group_count) * f64::from(n) * f64::from(n_prime);
    ((cells.ln() + lp_epsilon * t as f64) / (2.0 * t as f64)).sqrt()
}

/// √((ln(2|𝒢|n²) + εT)/(2T)), the learning rate the interval bound assumes.
pub fn interval_default_eta(t: u64, group_count: u32, n: u32, lp_epsilon: f64) -> f64 {
    let cells = 2.0 * f64::from(group_count) * f64::from(n) * f64::from(n);
    ((cells.ln() + lp_epsilon * t as f64) / (2.0 * t as f64)).sqrt()
}

#[derive(Default)]
struct CellAcc {
    count: u64,
    sum_y: f64,
    sum_pred_primary: f64,
    sum_pred_moment: f64,
    v: f64,
    m: f64,
    central: f64,
}

/// Audits a finished transcript: every cell statistic is recomputed from the
/// raw rounds. The moment kind makes two passes because the empirical
/// central moment needs each cell's label mean first.
pub fn multivalidity_report(
    transcript: &Transcript,
    groups: &GroupSystem,
    grid: &BucketGrid,
    kind: ReportKind,
    lambda: f64,
) -> Result<MultivalidityReport, HarnessError> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(HarnessError::InvalidConfig {
            field: "lambda",
            reason: format!("{lambda} is not in (0, 1)"),
        });
    }
    let n = grid.n();
    let n_prime = grid.n_prime();
    if matches!(kind, ReportKind::Moment { .. }) && n_prime.is_none() {
        return Err(HarnessError::InvalidConfig {
            field: "grid",
            reason: "moment reports need a grid with moment buckets".to_string(),
        });
    }
    validate_kind(&kind)?;

    let t = transcript.len() as u64;
    let mut acc: BTreeMap<(GroupId, u32, Option<u32>), CellAcc> = BTreeMap::new();
    let mut covered_rounds = 0u64;

    for (idx, record) in transcript.rounds().iter().enumerate() {
        let (i, j, pred_primary, pred_moment, v_inc) = match kind {
            ReportKind::Mean => {
                let value = record.prediction.as_mean().ok_or_else(|| kind_mismatch(idx, "mean"))?;
                (bucket_index(value, n)?, None, value, 0.0, record.label - value)
            }
            ReportKind::Moment { .. } => {
                let (mean, moment) =
                    record.prediction.as_moment().ok_or_else(|| kind_mismatch(idx, "moment"))?;
                let j = bucket_index(moment, n_prime.expect("checked above"))?;
                (bucket_index(mean, n)?, Some(j), mean, moment, record.label - mean)
            }
            ReportKind::Interval { delta, .. } => {
                let (lower, upper) =
                    record.prediction.as_interval().ok_or_else(|| kind_mismatch(idx, "interval"))?;
                let covered = cover(lower, upper, record.label);
                covered_rounds += u64::from(covered);
                let v = if covered { delta } else { -(1.0 - delta) };
                (bucket_index(lower, n)?, Some(bucket_index(upper, n)?), lower, upper, v)
            }
        };
        for &g in &record.group_ids {
            let cell = acc.entry((g, i, j)).or_default();
            cell.count += 1;
            cell.sum_y += record.label;
            cell.sum_pred_primary += pred_primary;
            cell.sum_pred_moment += pred_moment;
            cell.v += v_inc;
            if let ReportKind::Moment { k, .. } = kind {
                let mu_hat = bucket_midpoint(i, n);
                cell.m += (record.label - mu_hat).powi(k as i32) - pred_moment;
            }
        }
    }

    // Second pass for the moment kind: the k-th moment of each cell's labels
    // around that cell's own empirical mean.
    if let ReportKind::Moment { k, .. } = kind {
        let means: BTreeMap<(GroupId, u32, Option<u32>), f64> =
            acc.iter().map(|(key, c)| (*key, c.sum_y / c.count as f64)).collect();
        for record in transcript.rounds() {
            let (mean, moment) = record.prediction.as_moment().expect("checked in first pass");
            let i = bucket_index(mean, n)?;
            let j = Some(bucket_index(moment, n_prime.expect("checked above"))?);
            for &g in &record.group_ids {
                let mean_s = means[&(g, i, j)];
                acc.get_mut(&(g, i, j)).expect("populated in first pass").central +=
                    (record.label - mean_s).powi(k as i32);
            }
        }
    }

    let mut alpha = 0.0f64;
    let cells: Vec<ReportCell> = acc
        .into_iter()
        .map(|((group, bucket_i, bucket_j), c)| {
            let count_f = c.count as f64;
            let (stat_true, stat_pred, err, detail) = match kind {
                ReportKind::Mean => {
                    (c.sum_y / count_f, c.sum_pred_primary / count_f, c.v.abs() / t as f64, None)
                }
                ReportKind::Moment { .. } => {
                    let mean_err = c.v.abs() / t as f64;
                    let moment_err = c.m.abs() / t as f64;
                    (
                        c.central / count_f,
                        c.sum_pred_moment / count_f,
                        mean_err.max(moment_err),
                        Some(MomentCellDetail {
                            mean_true: c.sum_y / count_f,
                            mean_pred: c.sum_pred_primary / count_f,
                            mean_error_over_t: mean_err,
                            moment_error_over_t: moment_err,
                        }),
                    )
                }
                ReportKind::Interval { delta, .. } => {
                    // sum_y reuses the slot as the covered count is not kept
                    // per cell; recover H̄(S) from V: V = |S|·(H̄ − (1−δ)).
                    let coverage = c.v / count_f + (1.0 - delta);
                    (coverage, 1.0 - delta, c.v.abs() / t as f64, None)
                }
            };
            alpha = alpha.max(err);
            ReportCell { group, bucket_i, bucket_j, count: c.count, stat_true, stat_pred, abs_error_over_t: err, detail }
        })
        .collect();

    let (beta, coverage, bound) = match kind {
        ReportKind::Mean => {
            (None, None, mean_alpha_bound(t, groups.group_count(), n, grid.r(), lambda))
        }
        ReportKind::Moment { k, lp_epsilon } => {
            let np = n_prime.expect("checked above");
            let beta = f64::from(k + 1) * alpha + f64::from(k) / (2.0 * f64::from(n));
            (
                Some(beta),
                None,
                moment_alpha_bound(t, groups.group_count(), n, np, grid.r(), lambda, lp_epsilon),
            )
        }
        ReportKind::Interval { rho, lp_epsilon, .. } => (
            None,
            (t > 0).then(|| covered_rounds as f64 / t as f64),
            interval_alpha_bound(t, groups.group_count(), n, rho, lambda, lp_epsilon),
        ),
    };

    Ok(MultivalidityReport {
        kind,
        t,
        lambda,
        cells,
        alpha,
        beta,
        coverage,
        bound,
        pass: alpha <= bound,
    })
}

fn validate_kind(kind: &ReportKind) -> Result<(), HarnessError> {
    match *kind {
        ReportKind::Mean => Ok(()),
        ReportKind::Moment { k, lp_epsilon } => {
            if k == 0 || k % 2 != 0 {
                return Err(HarnessError::InvalidConfig {
                    field: "k",
                    reason: format!("{k} is not a positive even integer"),
                });
            }
            check_nonnegative("lp_epsilon", lp_epsilon)
        }
        ReportKind::Interval { delta, rho, lp_epsilon } => {
            if !(0.0..1.0).contains(&delta) {
                return Err(HarnessError::InvalidConfig {
                    field: "delta",
                    reason: format!("{delta} is not in [0, 1)"),
                });
            }
            check_nonnegative("rho", rho)?;
            check_nonnegative("lp_epsilon", lp_epsilon)
        }
    }
}

fn check_nonnegative(field: &'static str, value: f64) -> Result<(), HarnessError> {
    if value >= 0.0 {
        Ok(())
    } else {
        Err(HarnessError::InvalidConfig { field, reason: format!("{value} is negative") })
    }
}

fn kind_mismatch(round: usize, expected: &str) -> HarnessError {
    HarnessError::InvalidConfig {
        field: "kind",
        reason: format!("round {round} does not hold a {expected} prediction"),
    }
}

/// Plot-ready table: one row per populated cell, `bucket_j` blank for the
/// mean kind.
pub fn write_report_csv<W: Write>(report: &MultivalidityReport, mut w: W) -> Result<(), HarnessError> {
    writeln!(w, "group_id,bucket_i,bucket_j,count,stat_true,stat_pred,abs_error_over_T")?;
    for cell in &report.cells {
        let j = cell.bucket_j.map(|j| j.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            cell.group, cell.bucket_i, j, cell.count, cell.stat_true, cell.stat_pred, cell.abs_error_over_t
        )?;
    }
    Ok(())
}

/// The machine-checkable summary: headline numbers plus the verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub version: u32,
    pub kind: String,
    pub t: u64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub coverage: Option<f64>,
    /// Serialized as null when infinite (T = 0).
    pub bound: f64,
    pub pass: bool,
}

pub const SUMMARY_VERSION: u32 = 1;

impl MultivalidityReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            version: SUMMARY_VERSION,
            kind: self.kind.name().to_string(),
            t: self.t,
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            coverage: self.coverage,
            bound: self.bound,
            pass: self.pass,
        }
    }
}
