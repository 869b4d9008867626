//! JSON-lines graph datasets and their statistics sidecar.
//!
//! The dataset file starts with a header line `{"schema_version": ...}` and
//! then holds one graph per line. Reals are written in shortest round-trip
//! form, so reading back reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureLayout, NormalizationStats, PrefixGraph};
use crate::encodings::GraphEncodings;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "remtime-graphs/1";

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: String,
}

#[derive(Serialize, Deserialize)]
struct GraphLine {
    case_id: String,
    k: usize,
    node_class_ids: Vec<usize>,
    edges: Vec<[usize; 2]>,
    edge_features: Vec<Vec<f64>>,
    target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lap_pe: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lap_eigs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rwse: Option<Vec<Vec<f64>>>,
}

impl From<&PrefixGraph> for GraphLine {
    fn from(g: &PrefixGraph) -> Self {
        let enc = g.encodings.as_ref();
        GraphLine {
            case_id: g.case_id.clone(),
            k: g.k,
            node_class_ids: g.node_class_ids.clone(),
            edges: g.edges.iter().map(|&(s, t)| [s, t]).collect(),
            edge_features: g.edge_features.clone(),
            target: g.target,
            lap_pe: enc.map(|e| e.lap_pe.clone()),
            lap_eigs: enc.map(|e| e.lap_eigenvalues.clone()),
            rwse: enc.map(|e| e.rwse.clone()),
        }
    }
}

impl TryFrom<GraphLine> for PrefixGraph {
    type Error = Error;

    fn try_from(l: GraphLine) -> Result<Self> {
        let n = l.node_class_ids.len();
        if l.edges.iter().any(|e| e[0] >= n || e[1] >= n) {
            return Err(Error::Format(format!("edge index out of range in graph `{}`", l.case_id)));
        }
        if l.edges.len() != l.edge_features.len() {
            return Err(Error::Format(format!("edge/feature count mismatch in graph `{}`", l.case_id)));
        }
        let encodings = match (l.lap_pe, l.lap_eigs, l.rwse) {
            (Some(lap_pe), Some(lap_eigenvalues), Some(rwse)) => Some(GraphEncodings {
                lap_pe,
                lap_eigenvalues,
                rwse,
            }),
            (None, None, None) => None,
            _ => {
                return Err(Error::Format(format!(
                    "graph `{}` has a partial set of cached encodings",
                    l.case_id
                )))
            }
        };
        Ok(PrefixGraph {
            case_id: l.case_id,
            k: l.k,
            node_class_ids: l.node_class_ids,
            edges: l.edges.into_iter().map(|[s, t]| (s, t)).collect(),
            edge_features: l.edge_features,
            target: l.target,
            encodings,
        })
    }
}

pub fn write_dataset(graphs: &[PrefixGraph], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &Header { schema_version: SCHEMA_VERSION.into() })?;
    w.write_all(b"\n")?;
    for g in graphs {
        serde_json::to_writer(&mut w, &GraphLine::from(g))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PrefixGraph>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header: Header = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Format("dataset file is empty".into())),
    };
    check_version(&header.schema_version)?;
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GraphLine = serde_json::from_str(&line)?;
        out.push(PrefixGraph::try_from(g)?);
    }
    Ok(out)
}

fn check_version(found: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersionMismatch {
            expected: SCHEMA_VERSION.into(),
            found: found.into(),
        });
    }
    Ok(())
}

/// Statistics sidecar: normalization statistics plus the feature layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub schema_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
    pub layout: FeatureLayout,
    pub stats: NormalizationStats,
}

impl DatasetSidecar {
    pub fn new(stats: NormalizationStats) -> Self {
        DatasetSidecar {
            schema_version: SCHEMA_VERSION.into(),
            manifest_hash: None,
            layout: stats.layout(),
            stats,
        }
    }
}

pub fn write_sidecar(sidecar: &DatasetSidecar, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<DatasetSidecar> {
    let s: DatasetSidecar = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    check_version(&s.schema_version)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(i: usize) -> PrefixGraph {
        PrefixGraph {
            case_id: format!("case {i}"),
            k: 2 + i,
            node_class_ids: vec![1, 0, 3],
            edges: vec![(0, 1), (1, 1), (1, 2)],
            edge_features: vec![vec![0.1, 1.0 / 3.0, 2e-300]; 3],
            target: std::f64::consts::PI / 7.0,
            encodings: None,
        }
    }

    #[test]
    fn empty_and_single_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&[], &p).unwrap();
        assert!(read_dataset(&p).unwrap().is_empty());
        let mut g = graph(0);
        g.encodings = Some(GraphEncodings {
            lap_pe: vec![vec![0.5, -0.5]; 3],
            lap_eigenvalues: vec![1.0, 1.5],
            rwse: vec![vec![0.0, 1.0]; 3],
        });
        write_dataset(std::slice::from_ref(&g), &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), vec![g]);
    }

    #[test]
    fn version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"schema_version\":\"other/9\"}\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::SchemaVersionMismatch { .. })));
    }
}
