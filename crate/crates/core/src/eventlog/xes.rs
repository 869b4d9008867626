//! Minimal XES reader.
//!
//! Only `<trace>` and `<event>` children of `<log>` are read, together with
//! their direct `string`, `date`, `int`, `float`, `boolean` and `id`
//! attributes. Extensions, globals, classifiers, lists, and nested meta
//! attributes are skipped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use quick_xml::events::{BytesStart, Event as XmlEvent};
use quick_xml::Reader;

use super::csv_io::parse_timestamp;
use super::{sort_events, AttrKind, AttrScope, AttrValue, AttributeSchema, Event, EventLog, Trace};
use crate::error::{Error, Result};

const NAME: &str = "concept:name";
const TIMESTAMP: &str = "time:timestamp";
const LIFECYCLE: &str = "lifecycle:transition";

pub fn parse_xes(path: impl AsRef<Path>) -> Result<EventLog> {
    let file = File::open(path)?;
    parse_xes_reader(BufReader::new(file))
}

#[derive(Default)]
struct RawEvent {
    attrs: BTreeMap<String, (String, String)>,
}

#[derive(Default)]
struct RawTrace {
    attrs: BTreeMap<String, (String, String)>,
    events: Vec<RawEvent>,
}

pub fn parse_xes_reader<R: BufRead>(input: R) -> Result<EventLog> {
    let mut reader = Reader::from_reader(input);
    reader.config_mut().trim_text(true);
    let mut buf = Vec::new();
    let mut stack: Vec<String> = Vec::new();
    let mut traces: Vec<RawTrace> = Vec::new();
    let mut current_trace: Option<RawTrace> = None;
    let mut current_event: Option<RawEvent> = None;
    let mut saw_log = false;

    loop {
        let ev = reader
            .read_event_into(&mut buf)
            .map_err(|e| Error::MalformedXml(format!("at byte {}: {e}", reader.buffer_position())))?;
        match ev {
            XmlEvent::Start(ref e) | XmlEvent::Empty(ref e) => {
                let is_empty = matches!(ev, XmlEvent::Empty(_));
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                let parent = stack.last().map(String::as_str);
                match (parent, name.as_str()) {
                    (None, "log") => saw_log = true,
                    (None, other) => {
                        return Err(Error::MalformedXml(format!("unexpected root element `{other}`")))
                    }
                    (Some("log"), "trace") => current_trace = Some(RawTrace::default()),
                    (Some("trace"), "event") => current_event = Some(RawEvent::default()),
                    (Some(p @ ("trace" | "event")), ty) if is_attribute_type(ty) => {
                        if let Some((key, value)) = key_value(e)? {
                            let slot = if p == "event" {
                                current_event.as_mut().map(|ev| &mut ev.attrs)
                            } else {
                                current_trace.as_mut().map(|t| &mut t.attrs)
                            };
                            if let Some(attrs) = slot {
                                attrs.insert(key, (ty.to_owned(), value));
                            }
                        }
                    }
                    _ => {}
                }
                if is_empty {
                    close(&name, &mut current_trace, &mut current_event, &mut traces);
                } else {
                    stack.push(name);
                }
            }
            XmlEvent::End(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if stack.pop().as_deref() != Some(name.as_str()) {
                    return Err(Error::MalformedXml(format!("unexpected closing tag `{name}`")));
                }
                close(&name, &mut current_trace, &mut current_event, &mut traces);
            }
            XmlEvent::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    if !stack.is_empty() {
        return Err(Error::MalformedXml(format!("unclosed element `{}`", stack.join("/"))));
    }
    if !saw_log {
        return Err(Error::MalformedXml("no <log> element".into()));
    }
    assemble(traces)
}

fn is_attribute_type(ty: &str) -> bool {
    matches!(ty, "string" | "date" | "int" | "float" | "boolean" | "id")
}

fn key_value(e: &BytesStart<'_>) -> Result<Option<(String, String)>> {
    let mut key = None;
    let mut value = None;
    for attr in e.attributes() {
        let attr = attr.map_err(|err| Error::MalformedXml(err.to_string()))?;
        let v = attr
            .unescape_value()
            .map_err(|err| Error::MalformedXml(err.to_string()))?
            .into_owned();
        match attr.key.as_ref() {
            b"key" => key = Some(v),
            b"value" => value = Some(v),
            _ => {}
        }
    }
    Ok(key.zip(value))
}

fn close(
    name: &str,
    trace: &mut Option<RawTrace>,
    event: &mut Option<RawEvent>,
    traces: &mut Vec<RawTrace>,
) {
    match name {
        "event" => {
            if let (Some(t), Some(e)) = (trace.as_mut(), event.take()) {
                t.events.push(e);
            }
        }
        "trace" => {
            if let Some(t) = trace.take() {
                traces.push(t);
            }
        }
        _ => {}
    }
}

fn typed_value(ty: &str, raw: &str) -> Option<AttrValue> {
    match ty {
        "int" | "float" => raw.trim().parse::<f64>().ok().map(AttrValue::Num),
        "string" | "boolean" | "id" => Some(AttrValue::Str(raw.to_owned())),
        _ => None,
    }
}

fn assemble(raw: Vec<RawTrace>) -> Result<EventLog> {
    let mut kinds: BTreeMap<String, AttrKind> = BTreeMap::new();
    let mut scopes: BTreeMap<String, AttrScope> = BTreeMap::new();
    let mut note = |key: &str, value: &AttrValue, scope: AttrScope| {
        let kind = match value {
            AttrValue::Num(_) => AttrKind::Numeric,
            AttrValue::Str(_) => AttrKind::Categorical,
        };
        kinds
            .entry(key.to_owned())
            .and_modify(|k| {
                if *k != kind {
                    *k = AttrKind::Categorical
                }
            })
            .or_insert(kind);
        scopes
            .entry(key.to_owned())
            .and_modify(|s| {
                if scope == AttrScope::Event {
                    *s = AttrScope::Event
                }
            })
            .or_insert(scope);
    };

    let mut event_index = 0usize;
    let mut traces = Vec::with_capacity(raw.len());
    for (ti, rt) in raw.into_iter().enumerate() {
        let case_id = rt
            .attrs
            .get(NAME)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::InvalidLog(format!("trace {ti} lacks `{NAME}`")))?;
        let mut case_attrs = BTreeMap::new();
        for (k, (ty, v)) in &rt.attrs {
            if k == NAME {
                continue;
            }
            if let Some(val) = typed_value(ty, v) {
                note(k, &val, AttrScope::Case);
                case_attrs.insert(k.clone(), val);
            }
        }
        let mut events = Vec::with_capacity(rt.events.len());
        for re in rt.events {
            let missing = |key: &str| Error::MissingMandatoryAttribute {
                event_index,
                key: key.to_owned(),
            };
            let activity = re.attrs.get(NAME).map(|(_, v)| v.clone()).ok_or_else(|| missing(NAME))?;
            let raw_ts = re.attrs.get(TIMESTAMP).map(|(_, v)| v.clone()).ok_or_else(|| missing(TIMESTAMP))?;
            let timestamp = parse_timestamp(&raw_ts, None).ok_or(Error::UnparseableTimestamp {
                row: event_index,
                value: raw_ts,
            })?;
            let mut event = Event::new(case_id.clone(), activity, timestamp);
            event.lifecycle = re.attrs.get(LIFECYCLE).map(|(_, v)| v.clone());
            event.attrs = case_attrs.clone();
            for (k, (ty, v)) in &re.attrs {
                if k == NAME || k == TIMESTAMP || k == LIFECYCLE {
                    continue;
                }
                if let Some(val) = typed_value(ty, v) {
                    note(k, &val, AttrScope::Event);
                    event.attrs.insert(k.clone(), val);
                }
            }
            events.push(event);
            event_index += 1;
        }
        if events.is_empty() {
            continue;
        }
        sort_events(&mut events);
        traces.push(Trace::new(case_id, events)?);
    }

    // Mixed-type keys are categorical; convert stray numbers accordingly.
    for t in &mut traces {
        for e in &mut t.events {
            for (k, v) in e.attrs.iter_mut() {
                if kinds.get(k) == Some(&AttrKind::Categorical) {
                    if let AttrValue::Num(_) = v {
                        *v = AttrValue::Str(v.as_category());
                    }
                }
            }
        }
    }
    let mut schema = AttributeSchema::default();
    for (k, kind) in kinds {
        let scope = scopes.get(&k).copied().unwrap_or_default();
        schema.insert(k, kind, scope);
    }
    EventLog::new(traces, schema)
}
