//! Prefix graphs: one node per event class, one edge per directly-follows
//! pair, with every feature normalized by statistics of the training fold.
//!
//! Edge feature layout (fixed for a dataset, see [`FeatureLayout`]):
//!
//! ```text
//! [weight, t1, t2, t3, t4, t5,
//!  case numeric.., case one-hot.., event numeric.., event one-hot..,
//!  workload]
//! ```
//!
//! Attribute blocks are ordered by attribute name, one-hot segments by the
//! sorted training vocabulary of the attribute.

mod io;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::encodings::GraphEncodings;
use crate::error::{Error, Result};
use crate::eventlog::{
    event_class_of, seconds_between, AttrKind, AttrScope, AttrValue, Event, EventClass, EventLog, Trace,
};
use crate::prefixing::EventPrefixRecord;

pub use io::{read_dataset, read_sidecar, write_dataset, write_sidecar, DatasetSidecar, SCHEMA_VERSION};

/// Class id of event classes never seen in training.
pub const UNKNOWN_CLASS: usize = 0;

const SECONDS_PER_DAY: f64 = 86_400.0;
const SECONDS_PER_WEEK: f64 = 604_800.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericRange {
    pub min: f64,
    pub max: f64,
}

impl NumericRange {
    /// Min-max scaling without clamping; a zero-width range maps to 0.
    pub fn scale(&self, v: f64) -> f64 {
        let width = self.max - self.min;
        if width > 0.0 {
            (v - self.min) / width
        } else {
            0.0
        }
    }

    fn include(range: &mut Option<NumericRange>, v: f64) {
        match range {
            Some(r) => {
                r.min = r.min.min(v);
                r.max = r.max.max(v);
            }
            None => *range = Some(NumericRange { min: v, max: v }),
        }
    }
}

/// Closed activity intervals `[first, last]` of the training cases, in
/// microseconds since the epoch, used to count active cases at an instant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActiveCaseIndex {
    starts: Vec<i64>,
    ends: Vec<i64>,
}

impl ActiveCaseIndex {
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a Trace>) -> Self {
        let mut starts = Vec::new();
        let mut ends = Vec::new();
        for t in traces {
            if let (Some(a), Some(b)) = (t.start(), t.end()) {
                starts.push(a.timestamp_micros());
                ends.push(b.timestamp_micros());
            }
        }
        starts.sort_unstable();
        ends.sort_unstable();
        ActiveCaseIndex { starts, ends }
    }

    /// Number of cases with `first <= t <= last`.
    pub fn count_at(&self, t: DateTime<Utc>) -> usize {
        let t = t.timestamp_micros();
        let started = self.starts.partition_point(|&s| s <= t);
        let ended = self.ends.partition_point(|&e| e < t);
        started - ended
    }
}

/// Everything frozen from the training fold that graph building needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub max_df_count: usize,
    pub max_case_duration_seconds: f64,
    pub case_numeric: BTreeMap<String, NumericRange>,
    pub case_categorical: BTreeMap<String, Vec<String>>,
    pub event_numeric: BTreeMap<String, NumericRange>,
    pub event_categorical: BTreeMap<String, Vec<String>>,
    pub max_concurrent_cases: usize,
    /// Sorted known classes; class `i` has id `i + 1`, id 0 is UNKNOWN.
    pub event_class_vocab: Vec<EventClass>,
    pub active_cases: ActiveCaseIndex,
}

impl NormalizationStats {
    pub fn class_id(&self, class: &EventClass) -> usize {
        match self.event_class_vocab.binary_search(class) {
            Ok(i) => i + 1,
            Err(_) => UNKNOWN_CLASS,
        }
    }

    /// Size of the node-embedding table, UNKNOWN included.
    pub fn num_classes(&self) -> usize {
        self.event_class_vocab.len() + 1
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self)
    }

    pub fn edge_feature_len(&self) -> usize {
        6 + self.case_numeric.len()
            + self.case_categorical.values().map(Vec::len).sum::<usize>()
            + self.event_numeric.len()
            + self.event_categorical.values().map(Vec::len).sum::<usize>()
            + 1
    }

    /// Case-scoped attribute values of a trace (first event carrying each).
    pub fn case_attrs(&self, trace: &Trace) -> BTreeMap<String, AttrValue> {
        let mut out = BTreeMap::new();
        for name in self.case_numeric.keys().chain(self.case_categorical.keys()) {
            if let Some(v) = trace.events().iter().find_map(|e| e.attrs.get(name)) {
                out.insert(name.clone(), v.clone());
            }
        }
        out
    }
}

/// Column spans of the edge feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub width: usize,
    pub blocks: Vec<LayoutBlock>,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl FeatureLayout {
    fn new(stats: &NormalizationStats) -> Self {
        let mut columns: Vec<String> = Vec::new();
        let mut blocks = Vec::new();
        let mut push_block = |name: &str, cols: Vec<String>, columns: &mut Vec<String>| {
            blocks.push(LayoutBlock {
                name: name.to_owned(),
                start: columns.len(),
                len: cols.len(),
            });
            columns.extend(cols);
        };
        push_block("weight", vec!["weight".into()], &mut columns);
        push_block(
            "temporal",
            ["t1", "t2", "t3", "t4", "t5"].iter().map(|s| s.to_string()).collect(),
            &mut columns,
        );
        let numeric = |scope: &str, m: &BTreeMap<String, NumericRange>| -> Vec<String> {
            m.keys().map(|n| format!("{scope}:{n}")).collect()
        };
        let onehot = |scope: &str, m: &BTreeMap<String, Vec<String>>| -> Vec<String> {
            m.iter()
                .flat_map(|(n, vals)| vals.iter().map(move |v| format!("{scope}:{n}={v}")))
                .collect()
        };
        push_block("case_numeric", numeric("case", &stats.case_numeric), &mut columns);
        push_block("case_onehot", onehot("case", &stats.case_categorical), &mut columns);
        push_block("event_numeric", numeric("event", &stats.event_numeric), &mut columns);
        push_block("event_onehot", onehot("event", &stats.event_categorical), &mut columns);
        push_block("workload", vec!["workload".into()], &mut columns);
        FeatureLayout {
            width: columns.len(),
            blocks,
            columns,
        }
    }

    pub fn block(&self, name: &str) -> Option<&LayoutBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// A directed attributed graph encoding one prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixGraph {
    pub case_id: String,
    pub k: usize,
    /// Vocabulary id of each node; nodes are listed in order of first
    /// appearance in the prefix.
    pub node_class_ids: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub edge_features: Vec<Vec<f64>>,
    /// Remaining time divided by the longest training case duration.
    pub target: f64,
    pub encodings: Option<GraphEncodings>,
}

impl PrefixGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_class_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// One directly-follows pair of a prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct DfEdge {
    pub source: usize,
    pub target: usize,
    pub count: usize,
    pub total_seconds: f64,
    pub last_seconds: f64,
    /// Index, within the prefix, of the target event of the last occurrence.
    pub last_target_event: usize,
}

/// Nodes and directly-follows edges of an event sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DfSummary {
    /// Distinct classes in order of first appearance.
    pub classes: Vec<EventClass>,
    /// Edges in order of first occurrence.
    pub edges: Vec<DfEdge>,
}

pub fn directly_follows(events: &[Event]) -> DfSummary {
    let mut classes = Vec::new();
    let mut node_of: HashMap<EventClass, usize> = HashMap::new();
    let nodes: Vec<usize> = events
        .iter()
        .map(|e| {
            let c = event_class_of(e);
            *node_of.entry(c.clone()).or_insert_with(|| {
                classes.push(c);
                classes.len() - 1
            })
        })
        .collect();
    let mut edges: Vec<DfEdge> = Vec::new();
    let mut edge_of: HashMap<(usize, usize), usize> = HashMap::new();
    for i in 1..events.len() {
        let key = (nodes[i - 1], nodes[i]);
        let dt = seconds_between(events[i - 1].timestamp, events[i].timestamp);
        let idx = *edge_of.entry(key).or_insert_with(|| {
            edges.push(DfEdge {
                source: key.0,
                target: key.1,
                count: 0,
                total_seconds: 0.0,
                last_seconds: 0.0,
                last_target_event: i,
            });
            edges.len() - 1
        });
        let e = &mut edges[idx];
        e.count += 1;
        e.total_seconds += dt;
        e.last_seconds = dt;
        e.last_target_event = i;
    }
    DfSummary { classes, edges }
}

fn max_pair_count(events: &[Event]) -> usize {
    directly_follows(events).edges.iter().map(|e| e.count).max().unwrap_or(0)
}

/// Fits normalization statistics on the training records.
///
/// Training traces are the traces of `log` whose case ids occur in
/// `train`. Attribute ranges, vocabularies, durations, and concurrency are
/// measured on those traces only.
pub fn fit_stats(train: &[EventPrefixRecord], log: &EventLog) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(Error::DegenerateStat("no training records".into()));
    }
    // Prefix counts only grow with k, so the longest prefix per case suffices.
    let mut longest: BTreeMap<&str, &EventPrefixRecord> = BTreeMap::new();
    for r in train {
        longest
            .entry(r.case_id())
            .and_modify(|cur| {
                if r.k() > cur.k() {
                    *cur = r
                }
            })
            .or_insert(r);
    }
    let max_df_count = longest.values().map(|r| max_pair_count(r.events())).max().unwrap_or(0);

    let vocab: BTreeSet<EventClass> = longest
        .values()
        .flat_map(|r| r.events().iter().map(event_class_of))
        .collect();

    let traces: Vec<&Trace> = log
        .traces()
        .iter()
        .filter(|t| longest.contains_key(t.case_id()))
        .collect();
    if traces.len() != longest.len() {
        return Err(Error::InvalidLog("training records reference cases missing from the log".into()));
    }
    let max_case_duration_seconds = traces.iter().map(|t| t.duration_seconds()).fold(0.0, f64::max);

    let schema = log.schema();
    let mut numeric: BTreeMap<(AttrScope, String), Option<NumericRange>> = BTreeMap::new();
    let mut categorical: BTreeMap<(AttrScope, String), BTreeSet<String>> = BTreeMap::new();
    for (name, spec) in schema.iter() {
        match spec.kind {
            AttrKind::Numeric => {
                numeric.insert((spec.scope, name.clone()), None);
            }
            AttrKind::Categorical => {
                categorical.insert((spec.scope, name.clone()), BTreeSet::new());
            }
        }
    }
    for t in &traces {
        let case_attrs = t.case_attrs(schema);
        let mut observe = |scope: AttrScope, name: &str, v: &AttrValue| {
            let key = (scope, name.to_owned());
            if let Some(range) = numeric.get_mut(&key) {
                if let Some(x) = v.as_f64() {
                    NumericRange::include(range, x);
                }
            } else if let Some(set) = categorical.get_mut(&key) {
                set.insert(v.as_category());
            }
        };
        for (name, v) in &case_attrs {
            observe(AttrScope::Case, name, v);
        }
        for e in t.events() {
            for (name, v) in &e.attrs {
                if schema.get(name).map(|s| s.scope) == Some(AttrScope::Event) {
                    observe(AttrScope::Event, name, v);
                }
            }
        }
    }
    let split_numeric = |scope: AttrScope| -> BTreeMap<String, NumericRange> {
        numeric
            .iter()
            .filter(|((s, _), _)| *s == scope)
            .map(|((_, n), r)| (n.clone(), r.unwrap_or(NumericRange { min: 0.0, max: 0.0 })))
            .collect()
    };
    let split_categorical = |scope: AttrScope| -> BTreeMap<String, Vec<String>> {
        categorical
            .iter()
            .filter(|((s, _), _)| *s == scope)
            .map(|((_, n), v)| (n.clone(), v.iter().cloned().collect()))
            .collect()
    };

    let active_cases = ActiveCaseIndex::from_traces(traces.iter().copied());
    let max_concurrent_cases = traces
        .iter()
        .flat_map(|t| t.events().iter().map(|e| e.timestamp))
        .map(|ts| active_cases.count_at(ts))
        .max()
        .unwrap_or(0);

    if max_df_count == 0 {
        return Err(Error::DegenerateStat("maximum directly-follows count is 0".into()));
    }
    if !(max_case_duration_seconds > 0.0) {
        return Err(Error::DegenerateStat("every training case has zero duration".into()));
    }
    if max_concurrent_cases == 0 {
        return Err(Error::DegenerateStat("no concurrent training cases".into()));
    }
    Ok(NormalizationStats {
        max_df_count,
        max_case_duration_seconds,
        case_numeric: split_numeric(AttrScope::Case),
        case_categorical: split_categorical(AttrScope::Case),
        event_numeric: split_numeric(AttrScope::Event),
        event_categorical: split_categorical(AttrScope::Event),
        max_concurrent_cases,
        event_class_vocab: vocab.into_iter().collect(),
        active_cases,
    })
}

fn seconds_since_midnight(t: DateTime<Utc>) -> f64 {
    t.num_seconds_from_midnight() as f64 + t.nanosecond().min(999_999_999) as f64 * 1e-9
}

fn push_numeric(out: &mut Vec<f64>, ranges: &BTreeMap<String, NumericRange>, attrs: &BTreeMap<String, AttrValue>) {
    for (name, range) in ranges {
        out.push(attrs.get(name).and_then(AttrValue::as_f64).map_or(0.0, |v| range.scale(v)));
    }
}

fn push_onehot(out: &mut Vec<f64>, vocabs: &BTreeMap<String, Vec<String>>, attrs: &BTreeMap<String, AttrValue>) {
    for (name, vocab) in vocabs {
        let start = out.len();
        out.resize(start + vocab.len(), 0.0);
        if let Some(v) = attrs.get(name) {
            if let Ok(i) = vocab.binary_search(&v.as_category()) {
                out[start + i] = 1.0;
            }
        }
    }
}

/// Builds the graph of one prefix record.
pub fn build_graph(record: &EventPrefixRecord, stats: &NormalizationStats) -> PrefixGraph {
    let events = record.events();
    let df = directly_follows(events);
    let max_dur = stats.max_case_duration_seconds;
    let case_start = events[0].timestamp;
    let case_attrs = stats.case_attrs(record.trace());

    let mut case_block = Vec::new();
    push_numeric(&mut case_block, &stats.case_numeric, &case_attrs);
    push_onehot(&mut case_block, &stats.case_categorical, &case_attrs);

    let mut edges = Vec::with_capacity(df.edges.len());
    let mut edge_features = Vec::with_capacity(df.edges.len());
    for e in &df.edges {
        let target_event = &events[e.last_target_event];
        let t = target_event.timestamp;
        let mut f = Vec::with_capacity(stats.edge_feature_len());
        f.push(e.count as f64 / stats.max_df_count as f64);
        f.push(e.total_seconds / max_dur);
        f.push(e.last_seconds / max_dur);
        f.push(seconds_between(case_start, t) / max_dur);
        f.push(seconds_since_midnight(t) / SECONDS_PER_DAY);
        let weekday = t.weekday().num_days_from_monday() as f64;
        f.push((weekday * SECONDS_PER_DAY + seconds_since_midnight(t)) / SECONDS_PER_WEEK);
        f.extend_from_slice(&case_block);
        push_numeric(&mut f, &stats.event_numeric, &target_event.attrs);
        push_onehot(&mut f, &stats.event_categorical, &target_event.attrs);
        f.push(stats.active_cases.count_at(t) as f64 / stats.max_concurrent_cases as f64);
        edges.push((e.source, e.target));
        edge_features.push(f);
    }
    PrefixGraph {
        case_id: record.case_id().to_owned(),
        k: record.k(),
        node_class_ids: df.classes.iter().map(|c| stats.class_id(c)).collect(),
        edges,
        edge_features,
        target: record.remaining_seconds() / max_dur,
        encodings: None,
    }
}

pub fn build_dataset(records: &[EventPrefixRecord], stats: &NormalizationStats) -> Vec<PrefixGraph> {
    records.iter().map(|r| build_graph(r, stats)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventlog::{AttributeSchema, EventLog};
    use crate::prefixing::build_prefixes;
    use chrono::TimeZone;

    fn at(s: i64) -> DateTime<Utc> {
        // 2024-01-01 is a Monday.
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap() + chrono::Duration::seconds(s)
    }

    fn trace(id: &str, steps: &[(&str, i64)]) -> Trace {
        let events = steps.iter().map(|(a, s)| Event::new(id, *a, at(*s))).collect();
        Trace::new(id, events).unwrap()
    }

    #[test]
    fn repeated_class_gives_self_loop() {
        let log = EventLog::new(
            vec![trace("1", &[("A", 0), ("A", 10), ("B", 20)]), trace("2", &[("A", 0), ("B", 5), ("C", 100)])],
            AttributeSchema::default(),
        )
        .unwrap();
        let recs = build_prefixes(&log).unwrap();
        let stats = fit_stats(&recs, &log).unwrap();
        assert_eq!(stats.max_df_count, 1);
        let g = build_graph(&recs[0], &stats);
        assert_eq!(g.num_nodes(), 1);
        assert_eq!(g.edges, vec![(0, 0)]);
        assert_eq!(g.edge_features[0][0], 1.0 / stats.max_df_count as f64);
        assert_eq!(g.edge_features[0].len(), stats.layout().width);
    }

    #[test]
    fn temporal_features() {
        // Monday 06:00 + 1 day => Tuesday 06:00 for the target of the second edge.
        let log = EventLog::new(
            vec![trace("1", &[("A", 21_600), ("B", 21_600 + 3_600), ("C", 21_600 + 86_400), ("D", 21_600 + 200_000)])],
            AttributeSchema::default(),
        )
        .unwrap();
        let recs = build_prefixes(&log).unwrap();
        let stats = fit_stats(&recs, &log).unwrap();
        assert_eq!(stats.max_case_duration_seconds, 200_000.0);
        let g = build_graph(&recs[1], &stats);
        assert_eq!(g.k, 3);
        let f = &g.edge_features[1];
        let dt = 86_400.0 - 3_600.0;
        assert_eq!(f[1], dt / 200_000.0);
        assert_eq!(f[2], dt / 200_000.0);
        assert_eq!(f[3], 86_400.0 / 200_000.0);
        assert_eq!(f[4], 21_600.0 / 86_400.0);
        assert_eq!(f[5], (86_400.0 + 21_600.0) / 604_800.0);
        assert_eq!(g.target, (200_000.0 - 86_400.0) / 200_000.0);
        assert_eq!(*f.last().unwrap(), 1.0);
    }

    #[test]
    fn zero_duration_is_degenerate() {
        let log = EventLog::new(vec![trace("1", &[("A", 5), ("B", 5), ("C", 5)])], AttributeSchema::default()).unwrap();
        let recs = build_prefixes(&log).unwrap();
        assert!(matches!(fit_stats(&recs, &log), Err(Error::DegenerateStat(_))));
    }

    #[test]
    fn unseen_class_maps_to_unknown() {
        let log = EventLog::new(
            vec![trace("1", &[("A", 0), ("B", 10), ("C", 20)]), trace("2", &[("A", 0), ("Z", 10), ("C", 20)])],
            AttributeSchema::default(),
        )
        .unwrap();
        let recs = build_prefixes(&log).unwrap();
        let stats = fit_stats(&recs[..1], &log).unwrap();
        assert_eq!(stats.event_class_vocab.len(), 2);
        let g = build_graph(&recs[1], &stats);
        assert_eq!(g.node_class_ids, vec![1, UNKNOWN_CLASS]);
    }

    #[test]
    fn active_case_index_counts_closed_intervals() {
        let traces = vec![trace("1", &[("A", 0), ("B", 10)]), trace("2", &[("A", 10), ("B", 20)])];
        let idx = ActiveCaseIndex::from_traces(&traces);
        assert_eq!(idx.count_at(at(-1)), 0);
        assert_eq!(idx.count_at(at(0)), 1);
        assert_eq!(idx.count_at(at(10)), 2);
        assert_eq!(idx.count_at(at(15)), 1);
        assert_eq!(idx.count_at(at(20)), 1);
        assert_eq!(idx.count_at(at(21)), 0);
    }
}
