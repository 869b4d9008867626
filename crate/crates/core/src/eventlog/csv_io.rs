use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::{sort_events, AttrKind, AttrScope, AttrSpec, AttrValue, AttributeSchema, Event, EventLog, Trace};
use crate::error::{Error, Result};

/// Column mapping and parsing options for CSV logs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvOptions {
    pub case_column: String,
    pub activity_column: String,
    pub timestamp_column: String,
    /// Used only when the header contains it.
    pub lifecycle_column: Option<String>,
    pub delimiter: char,
    /// chrono format string; ISO-8601 variants are tried when absent.
    pub timestamp_format: Option<String>,
    pub ignore_columns: Vec<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            case_column: "case_id".into(),
            activity_column: "activity".into(),
            timestamp_column: "timestamp".into(),
            lifecycle_column: Some("lifecycle".into()),
            delimiter: ',',
            timestamp_format: None,
            ignore_columns: Vec::new(),
        }
    }
}

/// On-disk schema file: CSV options plus declared attributes.
///
/// ```json
/// {"csv": {"case_column": "Case ID"}, "attributes": {"Amount": {"kind": "numeric", "scope": "case"}}}
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaFile {
    pub csv: CsvOptions,
    pub attributes: AttributeSchema,
}

impl SchemaFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn parse_csv(
    path: impl AsRef<Path>,
    options: &CsvOptions,
    declared: &AttributeSchema,
) -> Result<EventLog> {
    let file = File::open(path)?;
    parse_csv_reader(BufReader::new(file), options, declared)
}

/// Parses a CSV log. Rows are grouped by case id in order of first
/// appearance and stably sorted by timestamp within each case. Columns not
/// named by `options` become attributes; undeclared ones are numeric when
/// every non-empty value parses as a number, categorical otherwise, and
/// event-scoped.
pub fn parse_csv_reader<R: Read>(
    reader: R,
    options: &CsvOptions,
    declared: &AttributeSchema,
) -> Result<EventLog> {
    if !options.delimiter.is_ascii() {
        return Err(Error::Config("CSV delimiter must be ASCII".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter as u8)
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let case_col = column(&options.case_column)?;
    let act_col = column(&options.activity_column)?;
    let ts_col = column(&options.timestamp_column)?;
    let life_col = options
        .lifecycle_column
        .as_deref()
        .and_then(|name| headers.iter().position(|h| h == name));

    let attr_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| {
            ![Some(case_col), Some(act_col), Some(ts_col), life_col].contains(&Some(*i))
                && !options.ignore_columns.contains(h)
        })
        .map(|(i, h)| (i, h.clone()))
        .collect();

    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(Error::EmptyLog);
    }

    let mut schema = AttributeSchema::default();
    for (col, name) in &attr_cols {
        let spec = match declared.get(name) {
            Some(spec) => *spec,
            None => {
                let mut values = rows.iter().map(|r| r.get(*col).unwrap_or("").trim()).filter(|v| !v.is_empty()).peekable();
                if values.peek().is_none() {
                    continue;
                }
                let kind = if values.all(|v| v.parse::<f64>().is_ok()) {
                    AttrKind::Numeric
                } else {
                    AttrKind::Categorical
                };
                AttrSpec { kind, scope: AttrScope::Event }
            }
        };
        schema.attributes.insert(name.clone(), spec);
    }
    let attr_cols: Vec<(usize, String, AttrKind)> = attr_cols
        .into_iter()
        .filter_map(|(c, n)| schema.get(&n).map(|s| (c, n.clone(), s.kind)))
        .collect();

    let mut order: Vec<String> = Vec::new();
    let mut by_case: HashMap<String, Vec<Event>> = HashMap::new();
    for (i, row) in rows.iter().enumerate() {
        let row_no = i + 1;
        let field = |c: usize| row.get(c).unwrap_or("").trim();
        let case_id = field(case_col);
        let activity = field(act_col);
        if case_id.is_empty() || activity.is_empty() {
            return Err(Error::InvalidLog(format!(
                "row {row_no} has an empty case id or activity"
            )));
        }
        let raw_ts = field(ts_col);
        let timestamp = parse_timestamp(raw_ts, options.timestamp_format.as_deref()).ok_or_else(
            || Error::UnparseableTimestamp {
                row: row_no,
                value: raw_ts.to_owned(),
            },
        )?;
        let mut event = Event::new(case_id, activity, timestamp);
        if let Some(c) = life_col {
            let l = field(c);
            if !l.is_empty() {
                event.lifecycle = Some(l.to_owned());
            }
        }
        for (c, name, kind) in &attr_cols {
            let raw = field(*c);
            if raw.is_empty() {
                continue;
            }
            let value = match kind {
                AttrKind::Numeric => AttrValue::Num(raw.parse::<f64>().map_err(|_| {
                    Error::Format(format!("row {row_no}: `{raw}` in numeric column `{name}`"))
                })?),
                AttrKind::Categorical => AttrValue::Str(raw.to_owned()),
            };
            event.attrs.insert(name.clone(), value);
        }
        match by_case.get_mut(case_id) {
            Some(events) => events.push(event),
            None => {
                order.push(case_id.to_owned());
                by_case.insert(case_id.to_owned(), vec![event]);
            }
        }
    }

    let mut traces = Vec::with_capacity(order.len());
    for case_id in order {
        let mut events = by_case.remove(&case_id).unwrap_or_default();
        sort_events(&mut events);
        traces.push(Trace::new(case_id, events)?);
    }
    EventLog::new(traces, schema)
}

pub(crate) fn parse_timestamp(raw: &str, format: Option<&str>) -> Option<DateTime<Utc>> {
    if let Some(fmt) = format {
        if let Ok(dt) = DateTime::parse_from_str(raw, fmt) {
            return Some(dt.with_timezone(&Utc));
        }
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc());
        }
        return NaiveDate::parse_from_str(raw, fmt)
            .ok()
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .map(|dt| dt.and_utc());
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc));
    }
    const WITH_OFFSET: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S%.f%z",
        "%Y-%m-%d %H:%M:%S%.f%z",
        "%Y-%m-%d %H:%M:%S%.f%:z",
        "%Y-%m-%d %H:%M:%S%.f %z",
    ];
    for fmt in WITH_OFFSET {
        if let Ok(dt) = DateTime::parse_from_str(raw, fmt) {
            return Some(dt.with_timezone(&Utc));
        }
    }
    const NAIVE: [&str; 6] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y/%m/%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
        "%Y/%m/%d %H:%M",
    ];
    for fmt in NAIVE {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc());
        }
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc())
}

/// Writes the log as canonical CSV: `case_id, activity, timestamp, lifecycle`
/// followed by every schema attribute sorted by name. Timestamps are
/// RFC 3339 in UTC with as many fractional digits as needed.
pub fn write_canonical_csv<W: Write>(log: &EventLog, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names: Vec<&String> = log.schema().attributes.keys().collect();
    let mut header = vec!["case_id", "activity", "timestamp", "lifecycle"];
    header.extend(names.iter().map(|n| n.as_str()));
    w.write_record(&header)?;
    for trace in log.traces() {
        for e in trace.events() {
            let mut rec: Vec<String> = vec![
                e.case_id.clone(),
                e.activity.clone(),
                e.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
                e.lifecycle.clone().unwrap_or_default(),
            ];
            rec.extend(names.iter().map(|n| {
                e.attrs.get(*n).map(ToString::to_string).unwrap_or_default()
            }));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Canonical-CSV options matching [`write_canonical_csv`].
pub fn canonical_options() -> CsvOptions {
    CsvOptions::default()
}
