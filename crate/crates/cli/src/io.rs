//! Plain-text dataset files, matrix dumps, solver traces and teacher files.
//!
//! Dataset layout (UTF-8, one record per line, fields separated by commas or
//! whitespace, blank lines and lines starting with `#` ignored):
//!
//! * edges: two non-negative integer node ids per line, 0-based;
//! * features: one row of `N0` numbers per node;
//! * labels: one number per node.

use std::fs;
use std::path::{Path, PathBuf};

use branchnet_core::datagen::Graph;
use branchnet_core::network::{Activation, NetworkParams};
use branchnet_core::saddle::TracePoint;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
}

impl DatasetPaths {
    /// `edges.txt`, `features.txt` and `labels.txt` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            edges: dir.join("edges.txt"),
            features: dir.join("features.txt"),
            labels: dir.join("labels.txt"),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-empty, non-comment lines with their 1-based line numbers, split into
/// fields.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let fields = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        Some((i + 1, fields))
    })
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("`{field}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("`{field}` is not finite"),
        });
    }
    Ok(v)
}

pub fn read_features(path: &Path) -> Result<DMatrix<f64>> {
    let text = read(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, fields) in records(&text) {
        let row = fields
            .iter()
            .map(|f| parse_f64(path, line, f))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "no feature rows".into(),
        });
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn read_labels(path: &Path, expected: usize) -> Result<DVector<f64>> {
    let text = read(path)?;
    let mut labels = Vec::new();
    for (line, fields) in records(&text) {
        if fields.len() != 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected one label, found {} fields", fields.len()),
            });
        }
        labels.push(parse_f64(path, line, fields[0])?);
    }
    if labels.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "expected {expected} labels (one per feature row), found {}",
                labels.len()
            ),
        });
    }
    Ok(DVector::from_vec(labels))
}

pub fn read_edges(path: &Path, num_nodes: usize) -> Result<Vec<(usize, usize)>> {
    let text = read(path)?;
    let mut edges = Vec::new();
    for (line, fields) in records(&text) {
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if fields.len() != 2 {
            return Err(err(format!(
                "expected two node ids, found {} fields",
                fields.len()
            )));
        }
        let mut ids = [0usize; 2];
        for (slot, f) in ids.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|_| err(format!("`{f}` is not a node id")))?;
            if *slot >= num_nodes {
                return Err(err(format!(
                    "node id {slot} is dangling (only {num_nodes} nodes)"
                )));
            }
        }
        edges.push((ids[0], ids[1]));
    }
    Ok(edges)
}

/// Loads a graph; the node count is the number of feature rows.
pub fn load_dataset(paths: &DatasetPaths) -> Result<Graph> {
    let features = read_features(&paths.features)?;
    let labels = read_labels(&paths.labels, features.nrows())?;
    let edges = read_edges(&paths.edges, features.nrows())?;
    Ok(Graph::from_edges(&edges, features, labels)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the three dataset files. Numbers use the shortest representation
/// that parses back to the same bits.
pub fn save_dataset(graph: &Graph, paths: &DatasetPaths) -> Result<()> {
    let mut edges = String::new();
    for (i, j) in &graph.edges {
        edges.push_str(&format!("{i} {j}\n"));
    }
    write(&paths.edges, &edges)?;
    write(&paths.features, &matrix_text(&graph.raw_features, ' '))?;
    let mut labels = String::new();
    for y in graph.labels.iter() {
        labels.push_str(&format!("{y}\n"));
    }
    write(&paths.labels, &labels)
}

fn matrix_text(m: &DMatrix<f64>, sep: char) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join(&sep.to_string()));
        out.push('\n');
    }
    out
}

/// Dense matrix as headerless CSV.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write(path, &matrix_text(m, ','))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    read_features(path)
}

pub fn write_trace_csv(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let branches = trace.first().map_or(0, |t| t.u.len());
    let mut header = vec!["iteration".to_string()];
    header.extend((0..branches).map(|l| format!("u{l}")));
    header.extend(["residual".to_string(), "hamiltonian".to_string()]);
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for t in trace {
        let mut rec = vec![t.iteration.to_string()];
        rec.extend(t.u.iter().map(|u| u.to_string()));
        rec.push(t.residual.to_string());
        rec.push(t.hamiltonian.to_string());
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct TeacherFile {
    activations: Vec<String>,
    input_dim: usize,
    width: usize,
    /// `[W_0 column-major, a_0, W_1, a_1, …]`.
    params: Vec<f64>,
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::Relu => "relu",
    }
}

pub fn save_teacher(path: &Path, teacher: &NetworkParams) -> Result<()> {
    let file = TeacherFile {
        activations: teacher
            .activations
            .iter()
            .map(|a| activation_name(*a).to_string())
            .collect(),
        input_dim: teacher.input_dim(),
        width: teacher.width(),
        params: teacher.to_flat(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write(path, &text)
}

pub fn load_teacher(path: &Path) -> Result<NetworkParams> {
    let text = read(path)?;
    let file: TeacherFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let activations = file
        .activations
        .iter()
        .map(|a| match a.as_str() {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unknown activation `{other}`"),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkParams::from_flat(
        &file.params,
        activations,
        file.input_dim,
        file.width,
    )?)
}
