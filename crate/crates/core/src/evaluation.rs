//! Per-length mean baseline, error metrics, cross-validation and the
//! earliness table.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encodings::ensure_encodings;
use crate::error::{Error, Result};
use crate::eventlog::{log_statistics, EventLog, SECONDS_PER_DAY};
use crate::graphbuild::{build_dataset, fit_stats};
use crate::model::ModelConfig;
use crate::prefixing::{build_prefixes, materialize_fold, EventPrefixRecord, SplitPlan};
use crate::training::{predict_graphs, train_model, TrainConfig};

/// Mean training remaining time per prefix length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DummyModel {
    pub means: BTreeMap<usize, f64>,
}

impl DummyModel {
    pub fn fit(train: &[EventPrefixRecord]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("baseline needs training records".into()));
        }
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in train {
            let e = sums.entry(r.k()).or_default();
            e.0 += r.remaining_seconds();
            e.1 += 1;
        }
        Ok(DummyModel {
            means: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        })
    }

    /// Mean for `k`, or for the nearest seen length (the smaller on ties).
    pub fn predict(&self, k: usize) -> f64 {
        if let Some(&m) = self.means.get(&k) {
            return m;
        }
        let below = self.means.range(..k).next_back();
        let above = self.means.range(k..).next();
        match (below, above) {
            (Some((&kb, &mb)), Some((&ka, &ma))) => {
                if k - kb <= ka - k {
                    mb
                } else {
                    ma
                }
            }
            (Some((_, &m)), None) | (None, Some((_, &m))) => m,
            (None, None) => 0.0,
        }
    }

    pub fn predict_records(&self, records: &[EventPrefixRecord]) -> Vec<f64> {
        records.iter().map(|r| self.predict(r.k())).collect()
    }
}

pub fn dummy_predict(train: &[EventPrefixRecord], k: usize) -> Result<f64> {
    Ok(DummyModel::fit(train)?.predict(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub count: usize,
    pub mae_days: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub count: usize,
    pub mae_days: f64,
    /// MAE divided by the average case duration of the full log.
    pub relative_mae: f64,
    pub per_prefix_length: BTreeMap<usize, LengthBucket>,
}

impl EvaluationReport {
    /// Pools several reports as if all their records were evaluated at once.
    pub fn pooled(reports: &[EvaluationReport], avg_case_duration_days: f64) -> EvaluationReport {
        let mut abs: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for r in reports {
            for (&k, b) in &r.per_prefix_length {
                let e = abs.entry(k).or_default();
                e.0 += b.count;
                e.1 += b.mae_days * b.count as f64;
            }
        }
        finish(abs, avg_case_duration_days)
    }
}

fn finish(abs: BTreeMap<usize, (usize, f64)>, avg_case_duration_days: f64) -> EvaluationReport {
    let count: usize = abs.values().map(|v| v.0).sum();
    let total: f64 = abs.values().map(|v| v.1).sum();
    let mae_days = if count == 0 { 0.0 } else { total / count as f64 };
    EvaluationReport {
        count,
        mae_days,
        relative_mae: if avg_case_duration_days > 0.0 {
            mae_days / avg_case_duration_days
        } else {
            f64::NAN
        },
        per_prefix_length: abs
            .into_iter()
            .map(|(k, (n, s))| {
                (
                    k,
                    LengthBucket {
                        count: n,
                        mae_days: s / n as f64,
                    },
                )
            })
            .collect(),
    }
}

/// MAE in days of `predictions` (seconds) against the records' targets.
pub fn evaluate(predictions: &[f64], records: &[EventPrefixRecord], avg_case_duration_days: f64) -> Result<EvaluationReport> {
    if predictions.len() != records.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: records.len(),
        });
    }
    let mut abs: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (p, r) in predictions.iter().zip(records) {
        let e = abs.entry(r.k()).or_default();
        e.0 += 1;
        e.1 += (p - r.remaining_seconds()).abs() / SECONDS_PER_DAY;
    }
    Ok(finish(abs, avg_case_duration_days))
}

/// Mean and sample standard deviation over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Aggregate {
        let n = values.len();
        if n == 0 {
            return Aggregate {
                runs: 0,
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Aggregate { runs: n, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub fold: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub model: EvaluationReport,
    pub baseline: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
    pub avg_case_duration_days: f64,
    pub runs: Vec<RunResult>,
    pub model_mae_days: Aggregate,
    pub baseline_mae_days: Aggregate,
    pub model_relative_mae: Aggregate,
    pub baseline_relative_mae: Aggregate,
    /// Test predictions of all runs pooled by prefix length.
    pub model_pooled: EvaluationReport,
    pub baseline_pooled: EvaluationReport,
}

impl CrossValidationReport {
    pub fn from_runs(runs: Vec<RunResult>, avg_case_duration_days: f64) -> Self {
        let pick = |f: &dyn Fn(&RunResult) -> f64| Aggregate::of(&runs.iter().map(f).collect::<Vec<_>>());
        let model_mae_days = pick(&|r| r.model.mae_days);
        let baseline_mae_days = pick(&|r| r.baseline.mae_days);
        let model_relative_mae = pick(&|r| r.model.relative_mae);
        let baseline_relative_mae = pick(&|r| r.baseline.relative_mae);
        let models: Vec<_> = runs.iter().map(|r| r.model.clone()).collect();
        let baselines: Vec<_> = runs.iter().map(|r| r.baseline.clone()).collect();
        CrossValidationReport {
            manifest_hash: None,
            avg_case_duration_days,
            model_pooled: EvaluationReport::pooled(&models, avg_case_duration_days),
            baseline_pooled: EvaluationReport::pooled(&baselines, avg_case_duration_days),
            runs,
            model_mae_days,
            baseline_mae_days,
            model_relative_mae,
            baseline_relative_mae,
        }
    }
}

/// Trains and evaluates every (fold, seed) pair of `plan`; all runs are
/// averaged uniformly.
pub fn cross_validate(
    log: &EventLog,
    plan: &SplitPlan,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
) -> Result<CrossValidationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let avg_days = log_statistics(log).avg_case_duration_days;
    let records = build_prefixes(log)?;
    let mut runs = Vec::with_capacity(plan.runs() * seeds.len());
    for fold in 0..plan.runs() {
        let split = materialize_fold(&records, plan, fold)?;
        let stats = fit_stats(&split.train, log)?;
        let enc = model_config.encoding_config();
        let mut train_graphs = build_dataset(&split.train, &stats);
        let mut val_graphs = build_dataset(&split.validation, &stats);
        let mut test_graphs = build_dataset(&split.test, &stats);
        ensure_encodings(&mut train_graphs, &enc);
        ensure_encodings(&mut val_graphs, &enc);
        ensure_encodings(&mut test_graphs, &enc);
        let dummy = DummyModel::fit(&split.train)?;
        let baseline = evaluate(&dummy.predict_records(&split.test), &split.test, avg_days)?;
        for &seed in seeds {
            let mc = ModelConfig {
                seed,
                ..model_config.clone()
            };
            let tc = TrainConfig {
                seed,
                ..train_config.clone()
            };
            let trained = train_model(&train_graphs, &val_graphs, &stats, &mc, &tc)?;
            trained.check_converged()?;
            let preds = predict_graphs(&trained, &test_graphs)?;
            runs.push(RunResult {
                fold,
                seed,
                best_epoch: trained.best_epoch,
                model: evaluate(&preds, &split.test, avg_days)?,
                baseline: baseline.clone(),
            });
        }
    }
    Ok(CrossValidationReport::from_runs(runs, avg_days))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlinessRow {
    pub k: usize,
    pub count: usize,
    pub mae_days: f64,
    /// Marks the smallest length covering at least 90% of all prefixes.
    pub cutoff: bool,
}

pub fn earliness_rows(report: &EvaluationReport) -> Vec<EarlinessRow> {
    let total: usize = report.per_prefix_length.values().map(|b| b.count).sum();
    let mut seen = 0;
    let mut marked = false;
    report
        .per_prefix_length
        .iter()
        .filter(|(_, b)| b.count > 0)
        .map(|(&k, b)| {
            seen += b.count;
            let cutoff = !marked && seen as f64 >= 0.9 * total as f64;
            marked |= cutoff;
            EarlinessRow {
                k,
                count: b.count,
                mae_days: b.mae_days,
                cutoff,
            }
        })
        .collect()
}

pub fn write_earliness<W: Write>(report: &EvaluationReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k", "count", "mae_days", "cutoff"])?;
    for r in earliness_rows(report) {
        w.write_record([
            r.k.to_string(),
            r.count.to_string(),
            r.mae_days.to_string(),
            u8::from(r.cutoff).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_earliness_csv(report: &EvaluationReport, path: impl AsRef<Path>) -> Result<()> {
    write_earliness(report, std::fs::File::create(path)?)
}
