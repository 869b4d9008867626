//! Event logs: events, traces, and the attribute schema that describes them.
//!
//! Logs are ingested from CSV ([`parse_csv`]) or a minimal XES subset
//! ([`parse_xes`]). Every constructor re-checks the trace invariants, so a
//! value of type [`EventLog`] always holds traces whose events share one
//! case id and have non-decreasing timestamps.

mod csv_io;
mod xes;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{canonical_options, parse_csv, parse_csv_reader, write_canonical_csv, CsvOptions, SchemaFile};
pub use xes::{parse_xes, parse_xes_reader};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Value of an event or case attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Num(f64),
    Str(String),
}

impl AttrValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            AttrValue::Num(v) => Some(*v),
            AttrValue::Str(_) => None,
        }
    }

    /// Categorical view of the value. Numbers use their shortest decimal form.
    pub fn as_category(&self) -> String {
        match self {
            AttrValue::Num(v) => v.to_string(),
            AttrValue::Str(s) => s.clone(),
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Num(v) => write!(f, "{v}"),
            AttrValue::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrScope {
    Case,
    #[default]
    Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrSpec {
    pub kind: AttrKind,
    #[serde(default)]
    pub scope: AttrScope,
}

/// Declared kind and scope of every attribute in a log, keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeSchema {
    pub attributes: BTreeMap<String, AttrSpec>,
}

impl AttributeSchema {
    pub fn get(&self, name: &str) -> Option<&AttrSpec> {
        self.attributes.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: AttrKind, scope: AttrScope) {
        self.attributes.insert(name.into(), AttrSpec { kind, scope });
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &AttrSpec)> {
        self.attributes.iter()
    }

    pub fn names_with(&self, kind: AttrKind, scope: AttrScope) -> Vec<String> {
        self.attributes
            .iter()
            .filter(|(_, s)| s.kind == kind && s.scope == scope)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub activity: String,
    pub case_id: String,
    pub timestamp: DateTime<Utc>,
    pub lifecycle: Option<String>,
    pub attrs: BTreeMap<String, AttrValue>,
}

impl Event {
    pub fn new(
        case_id: impl Into<String>,
        activity: impl Into<String>,
        timestamp: DateTime<Utc>,
    ) -> Self {
        Event {
            activity: activity.into(),
            case_id: case_id.into(),
            timestamp,
            lifecycle: None,
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_lifecycle(mut self, lifecycle: impl Into<String>) -> Self {
        self.lifecycle = Some(lifecycle.into());
        self
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: AttrValue) -> Self {
        self.attrs.insert(name.into(), value);
        self
    }

    pub fn class(&self) -> EventClass {
        event_class_of(self)
    }
}

/// An activity label paired with its lifecycle transition, if any.
///
/// Ordered lexicographically on `(activity, lifecycle)` with a missing
/// lifecycle sorting first, which fixes vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventClass {
    pub activity: String,
    pub lifecycle: Option<String>,
}

impl EventClass {
    pub fn new(activity: impl Into<String>, lifecycle: Option<&str>) -> Self {
        EventClass {
            activity: activity.into(),
            lifecycle: lifecycle.map(str::to_owned),
        }
    }
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.lifecycle {
            Some(l) => write!(f, "('{}', '{}')", self.activity, l),
            None => write!(f, "('{}')", self.activity),
        }
    }
}

pub fn event_class_of(e: &Event) -> EventClass {
    EventClass {
        activity: e.activity.clone(),
        lifecycle: e.lifecycle.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    case_id: String,
    events: Vec<Event>,
}

impl Trace {
    /// Builds a trace, checking that every event carries `case_id` and that
    /// timestamps never decrease.
    pub fn new(case_id: impl Into<String>, events: Vec<Event>) -> Result<Self> {
        let case_id = case_id.into();
        if case_id.is_empty() {
            return Err(Error::InvalidLog("empty case id".into()));
        }
        for (i, e) in events.iter().enumerate() {
            if e.case_id != case_id {
                return Err(Error::InvalidLog(format!(
                    "event {i} of trace `{case_id}` belongs to case `{}`",
                    e.case_id
                )));
            }
            if e.activity.is_empty() {
                return Err(Error::InvalidLog(format!(
                    "event {i} of trace `{case_id}` has an empty activity"
                )));
            }
            if i > 0 && events[i - 1].timestamp > e.timestamp {
                return Err(Error::InvalidLog(format!(
                    "timestamps of trace `{case_id}` decrease at event {i}"
                )));
            }
        }
        Ok(Trace { case_id, events })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn start(&self) -> Option<DateTime<Utc>> {
        self.events.first().map(|e| e.timestamp)
    }

    pub fn end(&self) -> Option<DateTime<Utc>> {
        self.events.last().map(|e| e.timestamp)
    }

    /// Last minus first timestamp, in seconds.
    pub fn duration_seconds(&self) -> f64 {
        match (self.start(), self.end()) {
            (Some(a), Some(b)) => seconds_between(a, b),
            _ => 0.0,
        }
    }

    /// Case-scoped attribute values; the first event carrying an attribute
    /// provides its value.
    pub fn case_attrs(&self, schema: &AttributeSchema) -> BTreeMap<String, AttrValue> {
        let mut out = BTreeMap::new();
        for (name, spec) in schema.iter() {
            if spec.scope != AttrScope::Case {
                continue;
            }
            if let Some(v) = self.events.iter().find_map(|e| e.attrs.get(name)) {
                out.insert(name.clone(), v.clone());
            }
        }
        out
    }

    pub fn variant(&self) -> Vec<EventClass> {
        self.events.iter().map(event_class_of).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    traces: Vec<Trace>,
    schema: AttributeSchema,
}

impl EventLog {
    pub fn new(traces: Vec<Trace>, schema: AttributeSchema) -> Result<Self> {
        if traces.is_empty() || traces.iter().all(Trace::is_empty) {
            return Err(Error::EmptyLog);
        }
        let mut seen = HashSet::new();
        for t in &traces {
            if !seen.insert(t.case_id.as_str()) {
                return Err(Error::InvalidLog(format!(
                    "case `{}` appears in two traces",
                    t.case_id
                )));
            }
            for e in &t.events {
                if let Some(name) = e.attrs.keys().find(|k| schema.get(k).is_none()) {
                    return Err(Error::InvalidLog(format!(
                        "attribute `{name}` is not in the schema"
                    )));
                }
            }
        }
        Ok(EventLog { traces, schema })
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn num_events(&self) -> usize {
        self.traces.iter().map(Trace::len).sum()
    }

    pub fn trace(&self, case_id: &str) -> Option<&Trace> {
        self.traces.iter().find(|t| t.case_id == case_id)
    }

    pub fn into_traces(self) -> Vec<Trace> {
        self.traces
    }
}

/// Keeps the traces with at least `min_events` events, preserving order.
pub fn filter_short_traces(log: &EventLog, min_events: usize) -> Result<EventLog> {
    let traces: Vec<Trace> = log
        .traces
        .iter()
        .filter(|t| t.len() >= min_events)
        .cloned()
        .collect();
    EventLog::new(traces, log.schema.clone())
}

/// Counts reported for a log: sizes, variants, case lengths and durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogStatistics {
    pub cases: usize,
    pub events: usize,
    pub event_classes: usize,
    pub variants: usize,
    pub avg_case_length: f64,
    pub max_case_length: usize,
    pub avg_case_duration_days: f64,
    pub max_case_duration_days: f64,
}

pub fn log_statistics(log: &EventLog) -> LogStatistics {
    let traces = log.traces();
    let cases = traces.len();
    let events = log.num_events();
    let classes: BTreeSet<EventClass> = traces
        .iter()
        .flat_map(|t| t.events.iter().map(event_class_of))
        .collect();
    let variants: HashSet<Vec<EventClass>> = traces.iter().map(Trace::variant).collect();
    let durations: Vec<f64> = traces
        .iter()
        .map(|t| t.duration_seconds() / SECONDS_PER_DAY)
        .collect();
    LogStatistics {
        cases,
        events,
        event_classes: classes.len(),
        variants: variants.len(),
        avg_case_length: events as f64 / cases as f64,
        max_case_length: traces.iter().map(Trace::len).max().unwrap_or(0),
        avg_case_duration_days: durations.iter().sum::<f64>() / cases as f64,
        max_case_duration_days: durations.iter().copied().fold(0.0, f64::max),
    }
}

/// `b - a` in seconds with microsecond resolution.
pub fn seconds_between(a: DateTime<Utc>, b: DateTime<Utc>) -> f64 {
    let d = b - a;
    match d.num_microseconds() {
        Some(us) => us as f64 / 1e6,
        None => d.num_milliseconds() as f64 / 1e3,
    }
}

/// Orders events by timestamp, keeping source order among equal timestamps.
pub(crate) fn sort_events(events: &mut [Event]) {
    events.sort_by_key(|e| e.timestamp);
}
