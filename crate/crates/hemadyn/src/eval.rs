//! Model comparison harness: per-patient test SMSE on held-out cycles,
//! group-mean matrix aggregation and one-sided Wilcoxon significance flags
//! against the best model per column.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CycleSplit, Group, PatientRecord};
use crate::error::{Error, Result};
use crate::objective::{smse, SmseWeights};
use crate::pipeline::{predict_log, FitResult};

/// Default p-value threshold for the not-inferior flag. Stored in the
/// report so readers can re-flag at a different level.
pub const DEFAULT_SIGNIFICANCE: f64 = 0.05;

/// Minimum number of nonzero paired differences for the Wilcoxon test.
pub const MIN_WILCOXON_PAIRS: usize = 5;

/// Largest sample size handled by exact enumeration; larger samples use the
/// normal approximation with continuity correction.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// SMSE of a fitted model over the held-out test observations, in log
/// space, against daily predictions covering every test observation; the
/// horizon extends one day past the last one so its neighbor term exists.
pub fn test_smse(fit: &FitResult, record: &PatientRecord, split: &CycleSplit) -> Result<f64> {
    let horizon = split
        .test_obs
        .iter()
        .map(|o| o.day())
        .max()
        .ok_or_else(|| Error::Invalid("empty test split".into()))?;
    test_smse_with_horizon(fit, record, split, horizon + 1)
}

/// As [`test_smse`] with an explicit prediction horizon; errors when the
/// horizon is shorter than the last test observation.
pub fn test_smse_with_horizon(
    fit: &FitResult,
    record: &PatientRecord,
    split: &CycleSplit,
    horizon: i64,
) -> Result<f64> {
    let pred = predict_log(fit, record, split, horizon)?;
    let obs: Vec<(i64, f64)> = split
        .test_obs
        .iter()
        .map(|o| (o.day(), o.platelet_count.ln()))
        .collect();
    smse(&obs, 0, &pred, &SmseWeights::default())
}

/// One model's test SMSE on one patient, the atomic input to [`aggregate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEval {
    pub patient_id: String,
    pub model_id: String,
    pub group: Group,
    pub n_train_cycles: usize,
    pub smse: f64,
}

/// One (model, group, n_train) cell of the comparison matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub model_id: String,
    pub group: Group,
    pub n_train_cycles: usize,
    /// Patient ids, sorted; parallel to `smse`.
    pub patient_ids: Vec<String>,
    pub smse: Vec<f64>,
    pub mean: f64,
    /// Minimal mean in its (group, n_train) column; ties flag every minimum.
    pub best: bool,
    /// Best, or not significantly worse than the best at the report's
    /// threshold. False when the paired test is not computable.
    pub not_inferior: bool,
    /// One-sided p-value against the best model's paired SMSE values; None
    /// for best cells and when fewer than [`MIN_WILCOXON_PAIRS`] nonzero
    /// paired differences exist.
    pub p_value: Option<f64>,
}

/// A requested grid cell with no computed patient results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingCell {
    pub model_id: String,
    pub group: Group,
    pub n_train_cycles: usize,
    pub reason: String,
}

/// Reproducibility metadata carried into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    pub significance: f64,
}

/// The full models x n_train x groups comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub models: Vec<String>,
    pub groups: Vec<Group>,
    pub n_train_range: Vec<usize>,
    pub cells: Vec<EvalCell>,
    pub missing: Vec<MissingCell>,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn cell(&self, model: &str, group: Group, n_train: usize) -> Option<&EvalCell> {
        self.cells.iter().find(|c| {
            c.model_id == model && c.group == group && c.n_train_cycles == n_train
        })
    }
}

/// Builds the comparison grid: per-cell means over patients, best-in-column
/// flags (argmin of the mean, ties flag all) and one-sided Wilcoxon
/// not-inferior flags against the first best model of each column.
pub fn aggregate(
    evals: &[PatientEval],
    models: &[String],
    groups: &[Group],
    n_train_range: &[usize],
    meta: &ReportMeta,
) -> Result<EvalReport> {
    let mut by_cell: BTreeMap<(usize, Group, usize), BTreeMap<String, f64>> = BTreeMap::new();
    for e in evals {
        let Some(mi) = models.iter().position(|m| *m == e.model_id) else {
            return Err(Error::Invalid(format!("unknown model id {}", e.model_id)));
        };
        if !groups.contains(&e.group) || !n_train_range.contains(&e.n_train_cycles) {
            return Err(Error::Invalid(format!(
                "eval for ({}, {}, {}) outside the requested grid",
                e.model_id, e.group, e.n_train_cycles
            )));
        }
        let prev = by_cell
            .entry((mi, e.group, e.n_train_cycles))
            .or_default()
            .insert(e.patient_id.clone(), e.smse);
        if prev.is_some() {
            return Err(Error::Invalid(format!(
                "duplicate eval for patient {} in ({}, {}, {})",
                e.patient_id, e.model_id, e.group, e.n_train_cycles
            )));
        }
    }

    let mut cells = Vec::new();
    let mut missing = Vec::new();
    for &group in groups {
        for &n_train in n_train_range {
            // cells of this column, in model order
            let mut column: Vec<EvalCell> = Vec::new();
            for (mi, model) in models.iter().enumerate() {
                match by_cell.get(&(mi, group, n_train)) {
                    Some(per_patient) => {
                        let patient_ids: Vec<String> = per_patient.keys().cloned().collect();
                        let smse: Vec<f64> = per_patient.values().copied().collect();
                        let mean = smse.iter().sum::<f64>() / smse.len() as f64;
                        column.push(EvalCell {
                            model_id: model.clone(),
                            group,
                            n_train_cycles: n_train,
                            patient_ids,
                            smse,
                            mean,
                            best: false,
                            not_inferior: false,
                            p_value: None,
                        });
                    }
                    None => missing.push(MissingCell {
                        model_id: model.clone(),
                        group,
                        n_train_cycles: n_train,
                        reason: "no patient results".into(),
                    }),
                }
            }
            if column.is_empty() {
                continue;
            }
            let best_mean = column.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min);
            for c in &mut column {
                if c.mean == best_mean {
                    c.best = true;
                    c.not_inferior = true;
                }
            }
            let reference = column.iter().find(|c| c.best).cloned();
            if let Some(reference) = reference {
                for c in &mut column {
                    if c.best {
                        continue;
                    }
                    let (best_paired, other_paired) = pair_by_patient(&reference, c);
                    c.p_value = wilcoxon_one_sided(&best_paired, &other_paired)?;
                    c.not_inferior = c.p_value.map_or(false, |p| p >= meta.significance);
                }
            }
            cells.extend(column);
        }
    }

    Ok(EvalReport {
        models: models.to_vec(),
        groups: groups.to_vec(),
        n_train_range: n_train_range.to_vec(),
        cells,
        missing,
        meta: meta.clone(),
    })
}

/// Paired SMSE values over the patients present in both cells, in sorted
/// patient-id order.
fn pair_by_patient(a: &EvalCell, b: &EvalCell) -> (Vec<f64>, Vec<f64>) {
    let bi: BTreeMap<&str, f64> = b
        .patient_ids
        .iter()
        .map(String::as_str)
        .zip(b.smse.iter().copied())
        .collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (id, &x) in a.patient_ids.iter().zip(&a.smse) {
        if let Some(&y) = bi.get(id.as_str()) {
            xs.push(x);
            ys.push(y);
        }
    }
    (xs, ys)
}

/// One-sided Wilcoxon signed-rank p-value for H1 "other tends to exceed
/// best", i.e. P(W+ >= observed) under the null of symmetric differences.
///
/// Zero differences are dropped and tied magnitudes midranked (classical
/// convention). Exact enumeration for up to [`WILCOXON_EXACT_MAX_N`]
/// nonzero pairs, normal approximation with continuity correction above.
/// Returns None when fewer than [`MIN_WILCOXON_PAIRS`] nonzero pairs remain.
pub fn wilcoxon_one_sided(best: &[f64], other: &[f64]) -> Result<Option<f64>> {
    if best.len() != other.len() {
        return Err(Error::Invalid(format!(
            "unpaired samples: {} vs {}",
            best.len(),
            other.len()
        )));
    }
    let diffs: Vec<f64> = best
        .iter()
        .zip(other)
        .map(|(b, o)| o - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain("non-finite SMSE difference".into()));
    }
    let n = diffs.len();
    if n < MIN_WILCOXON_PAIRS {
        return Ok(None);
    }
    // Doubled midranks are integers even across ties, so the rank-sum
    // statistic is exact integer arithmetic.
    let (ranks2, w2) = doubled_signed_ranks(&diffs);
    let p = if n <= WILCOXON_EXACT_MAX_N {
        exact_upper_tail(&ranks2, w2)
    } else {
        normal_upper_tail(&ranks2, w2)
    };
    Ok(Some(p))
}

/// Doubled midranks of |d| plus the doubled rank sum over positive d.
fn doubled_signed_ranks(diffs: &[f64]) -> (Vec<u64>, u64) {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut ranks2 = vec![0u64; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len()
            && diffs[order[j + 1]].abs() == diffs[order[i]].abs()
        {
            j += 1;
        }
        // positions i..=j (0-based) share midrank ((i+1)+(j+1))/2; doubled
        let r2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks2[k] = r2;
        }
        i = j + 1;
    }
    let w2 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    (ranks2, w2)
}

/// P(W+ >= w2/2) by dynamic programming over all 2^n sign assignments.
fn exact_upper_tail(ranks2: &[u64], w2: u64) -> f64 {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0.0_f64; total as usize + 1];
    counts[0] = 1.0;
    for &r in ranks2 {
        for s in (r as usize..counts.len()).rev() {
            counts[s] += counts[s - r as usize];
        }
    }
    let at_least: f64 = counts[w2 as usize..].iter().sum();
    at_least / 2.0_f64.powi(ranks2.len() as i32)
}

/// Normal approximation with continuity correction and tie-corrected
/// variance.
fn normal_upper_tail(ranks2: &[u64], w2: u64) -> f64 {
    let n = ranks2.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // tie correction: subtract sum(t^3 - t)/48 over tie groups
    let mut tie_sizes: BTreeMap<u64, f64> = BTreeMap::new();
    for &r in ranks2 {
        *tie_sizes.entry(r).or_insert(0.0) += 1.0;
    }
    let tie_term: f64 = tie_sizes.values().map(|t| (t * t * t - t) / 48.0).sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    let w = w2 as f64 / 2.0;
    let z = (w - 0.5 - mean) / var.sqrt();
    1.0 - normal_cdf(z)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Complementary error function, fractional error below 1.2e-7.
fn erfc(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.5 * x.abs());
    let tau = t
        * (-x * x - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        tau
    } else {
        2.0 - tau
    }
}

/// Writes plot-ready report files under `out_dir`:
///
/// - `smse_{group}.csv`: mean-SMSE matrix, rows = models, columns =
///   n_train, empty cell for missing,
/// - `significance.csv`: per-cell best/not-inferior flags and p-values,
/// - `per_patient.csv`: long format, one row per (patient, model, cell),
/// - `metadata.json`: seed, config hash and threshold.
///
/// Output is deterministic: re-emitting an identical report yields
/// byte-identical files.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for &group in &report.groups {
        let mut out = String::from("model");
        for n in &report.n_train_range {
            out.push_str(&format!(",{n}"));
        }
        out.push('\n');
        for model in &report.models {
            out.push_str(model);
            for &n in &report.n_train_range {
                match report.cell(model, group, n) {
                    Some(c) => out.push_str(&format!(",{}", c.mean)),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        std::fs::write(out_dir.join(format!("smse_{group}.csv")), out)?;
    }

    let mut sig = String::from("model,group,n_train,mean_smse,best,not_inferior,p_value\n");
    for c in &report.cells {
        let p = c.p_value.map_or("NA".into(), |p| p.to_string());
        sig.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.model_id, c.group, c.n_train_cycles, c.mean, c.best, c.not_inferior, p
        ));
    }
    std::fs::write(out_dir.join("significance.csv"), sig)?;

    let mut long = String::from("patient_id,model,group,n_train,smse\n");
    for c in &report.cells {
        for (id, s) in c.patient_ids.iter().zip(&c.smse) {
            long.push_str(&format!(
                "{},{},{},{},{}\n",
                id, c.model_id, c.group, c.n_train_cycles, s
            ));
        }
    }
    std::fs::write(out_dir.join("per_patient.csv"), long)?;

    let meta = serde_json::json!({
        "seed": report.meta.seed,
        "config_hash": report.meta.config_hash,
        "significance": report.meta.significance,
        "models": report.models,
        "groups": report.groups,
        "n_train_range": report.n_train_range,
        "missing": report.missing,
    });
    std::fs::write(
        out_dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}
