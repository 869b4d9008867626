//! Prefix/target pairs and case-level data splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eventlog::{seconds_between, Event, EventLog, Trace};

/// The first `k` events of a trace together with the time left until the
/// trace's final event.
#[derive(Debug, Clone)]
pub struct EventPrefixRecord {
    trace: Arc<Trace>,
    k: usize,
    remaining_seconds: f64,
}

impl EventPrefixRecord {
    pub fn new(trace: Arc<Trace>, k: usize) -> Result<Self> {
        let n = trace.len();
        if k < 2 {
            return Err(Error::PrefixTooShort(k));
        }
        if k >= n {
            return Err(Error::InvalidLog(format!(
                "prefix length {k} of trace `{}` is not shorter than the trace ({n})",
                trace.case_id()
            )));
        }
        let events = trace.events();
        let remaining_seconds = seconds_between(events[k - 1].timestamp, events[n - 1].timestamp);
        Ok(EventPrefixRecord { trace, k, remaining_seconds })
    }

    pub fn case_id(&self) -> &str {
        self.trace.case_id()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn events(&self) -> &[Event] {
        &self.trace.events()[..self.k]
    }

    pub fn remaining_seconds(&self) -> f64 {
        self.remaining_seconds
    }

    pub fn trace(&self) -> &Arc<Trace> {
        &self.trace
    }
}

/// Emits prefixes `k = 2 ..= n-1` for every trace, in log order.
pub fn build_prefixes(log: &EventLog) -> Result<Vec<EventPrefixRecord>> {
    let mut out = Vec::new();
    for trace in log.traces() {
        if trace.len() < 3 {
            return Err(Error::TraceTooShort {
                case_id: trace.case_id().to_owned(),
                len: trace.len(),
                min: 3,
            });
        }
        let shared = Arc::new(trace.clone());
        for k in 2..trace.len() {
            out.push(EventPrefixRecord::new(Arc::clone(&shared), k)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Cv,
    Holdout,
}

/// Case-level assignment of a log to folds.
///
/// In cross-validation mode fold `f` is the test set of run `f`. In holdout
/// mode the latest-starting cases form fold 0 (test) and the rest fold 1.
/// Validation cases are drawn from the non-test pool with the plan's seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub folds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_ratio: Option<f64>,
    pub seed: u64,
    pub validation_fraction: f64,
    pub assignment: BTreeMap<String, usize>,
}

/// Case ids of one train/validation/test partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FoldCases {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

#[derive(Debug, Clone, Default)]
pub struct FoldRecords {
    pub train: Vec<EventPrefixRecord>,
    pub validation: Vec<EventPrefixRecord>,
    pub test: Vec<EventPrefixRecord>,
}

impl SplitPlan {
    /// Number of distinct test partitions the plan defines.
    pub fn runs(&self) -> usize {
        match self.mode {
            SplitMode::Cv => self.folds,
            SplitMode::Holdout => 1,
        }
    }

    pub fn fold_cases(&self, fold: usize) -> Result<FoldCases> {
        if fold >= self.runs() {
            return Err(Error::Config(format!(
                "fold {fold} out of range, plan has {} runs",
                self.runs()
            )));
        }
        let mut out = FoldCases::default();
        let mut pool: Vec<&String> = Vec::new();
        for (case, &f) in &self.assignment {
            if f == fold {
                out.test.insert(case.clone());
            } else {
                pool.push(case);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fold as u64 + 1);
        pool.shuffle(&mut rng);
        let n_val = ((pool.len() as f64) * self.validation_fraction).round() as usize;
        let n_val = n_val.clamp(1, pool.len().saturating_sub(1).max(1));
        for (i, case) in pool.into_iter().enumerate() {
            if i < n_val {
                out.validation.insert(case.clone());
            } else {
                out.train.insert(case.clone());
            }
        }
        if out.train.is_empty() || out.validation.is_empty() || out.test.is_empty() {
            return Err(Error::TooFewCases(format!(
                "fold {fold}: train {}, validation {}, test {}",
                out.train.len(),
                out.validation.len(),
                out.test.len()
            )));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Builds a deterministic case-level split.
///
/// `folds` is the fold count in cv mode and is ignored in holdout mode,
/// where `train_ratio` of the cases (by start time) are kept for training.
pub fn make_split(
    log: &EventLog,
    mode: SplitMode,
    folds: usize,
    train_ratio: f64,
    seed: u64,
    validation_fraction: f64,
) -> Result<SplitPlan> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    let traces = log.traces();
    let n = traces.len();
    let mut assignment = BTreeMap::new();
    let (folds, ratio) = match mode {
        SplitMode::Cv => {
            if folds < 2 {
                return Err(Error::Config(format!("cv needs at least 2 folds, got {folds}")));
            }
            if n < folds {
                return Err(Error::TooFewCases(format!("{n} cases for {folds} folds")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            for (pos, idx) in order.into_iter().enumerate() {
                assignment.insert(traces[idx].case_id().to_owned(), pos % folds);
            }
            (folds, None)
        }
        SplitMode::Holdout => {
            if !(train_ratio > 0.0 && train_ratio < 1.0) {
                return Err(Error::Config(format!(
                    "holdout ratio must lie in (0, 1), got {train_ratio}"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (traces[i].start(), i));
            let n_train = ((n as f64) * train_ratio).round() as usize;
            if n_train == 0 || n_train >= n {
                return Err(Error::TooFewCases(format!(
                    "holdout ratio {train_ratio} leaves an empty split of {n} cases"
                )));
            }
            for (pos, idx) in order.into_iter().enumerate() {
                let fold = if pos < n_train { 1 } else { 0 };
                assignment.insert(traces[idx].case_id().to_owned(), fold);
            }
            (2, Some(train_ratio))
        }
    };
    let plan = SplitPlan {
        mode,
        folds,
        train_ratio: ratio,
        seed,
        validation_fraction,
        assignment,
    };
    for f in 0..plan.runs() {
        plan.fold_cases(f)?;
    }
    Ok(plan)
}

/// Routes every record to train, validation, or test by its case id.
pub fn materialize_fold(
    records: &[EventPrefixRecord],
    plan: &SplitPlan,
    fold: usize,
) -> Result<FoldRecords> {
    let cases = plan.fold_cases(fold)?;
    let mut out = FoldRecords::default();
    for r in records {
        let id = r.case_id();
        if cases.test.contains(id) {
            out.test.push(r.clone());
        } else if cases.validation.contains(id) {
            out.validation.push(r.clone());
        } else if cases.train.contains(id) {
            out.train.push(r.clone());
        } else {
            return Err(Error::InvalidLog(format!("case `{id}` is not covered by the split plan")));
        }
    }
    Ok(out)
}
