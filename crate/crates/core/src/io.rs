//! File formats: family JSON, data CSVs, edge lists, orders and
//! diagnostics.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! value reads back bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Permutation;
use crate::joint::OuterDiagnostics;
use crate::sim::{SemFamily, SemModel, SimConfig};

/// One weighted edge of one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskRecord {
    noise_vars: Vec<f64>,
    edges: Vec<(usize, usize, f64)>,
}

/// On-disk form of a [`SemFamily`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyFile {
    pub p: usize,
    /// Rank of each node in the shared order.
    pub order: Vec<usize>,
    pub union_support: Vec<(usize, usize)>,
    pub k_identifiable: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    tasks: Vec<TaskRecord>,
}

impl FamilyFile {
    pub fn new(family: &SemFamily, config: Option<SimConfig>, seed: Option<u64>) -> Self {
        let tasks = family
            .models
            .iter()
            .map(|m| TaskRecord {
                noise_vars: m.noise_vars.clone(),
                edges: m
                    .edges()
                    .into_iter()
                    .map(|(i, j)| (i, j, m.weights[(i, j)]))
                    .collect(),
            })
            .collect();
        Self {
            p: family.p(),
            order: family.shared_order.ranks().to_vec(),
            union_support: family.union_support.clone(),
            k_identifiable: family.n_identifiable,
            config,
            seed,
            tasks,
        }
    }

    pub fn to_family(&self) -> Result<SemFamily> {
        let order = Permutation::from_ranks(self.order.clone())?;
        if order.len() != self.p {
            return Err(Error::DimensionMismatch(format!(
                "order has {} nodes, p = {}",
                order.len(),
                self.p
            )));
        }
        let models = self
            .tasks
            .iter()
            .map(|t| {
                let mut w = DMatrix::zeros(self.p, self.p);
                for &(i, j, v) in &t.edges {
                    if i >= self.p || j >= self.p {
                        return Err(Error::DimensionMismatch(format!(
                            "edge ({i},{j}) outside p = {}",
                            self.p
                        )));
                    }
                    w[(i, j)] = v;
                }
                SemModel::new(w, t.noise_vars.clone(), order.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SemFamily {
            models,
            shared_order: order,
            union_support: self.union_support.clone(),
            n_identifiable: self.k_identifiable,
        })
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line() as u64,
        msg: e.to_string(),
    })
}

pub fn write_family(
    path: &Path,
    family: &SemFamily,
    config: Option<SimConfig>,
    seed: Option<u64>,
) -> Result<()> {
    write_json(path, &FamilyFile::new(family, config, seed))
}

pub fn read_family(path: &Path) -> Result<SemFamily> {
    read_json::<FamilyFile>(path)?.to_family()
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    create_parent(path)?;
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.position() {
        Some(pos) => Error::Parse {
            path: path.into(),
            line: pos.line(),
            msg: e.to_string(),
        },
        None => Error::io(path, e),
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        msg: msg.into(),
    }
}

/// Writes an `n x p` matrix under the header `x1,...,xp`.
pub fn write_data(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    let mut w = writer(path)?;
    let header: Vec<String> = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for row in x.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a data CSV with a header row; every row must have the header's
/// width and parse as finite floats.
pub fn read_data(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::io(path, e))?;
    let p = r.headers().map_err(|e| csv_err(path, e))?.len();
    if p == 0 {
        return Err(parse_err(path, 1, "empty header"));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |pos| pos.line());
        if rec.len() != p {
            return Err(parse_err(
                path,
                line,
                format!("expected {p} fields, found {}", rec.len()),
            ));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(
                    path,
                    line,
                    format!("column {}: cannot parse {field:?} as a number", j + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    line,
                    format!("column {}: non-finite value", j + 1),
                ));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Ok(DMatrix::from_row_slice(rows, p, &values))
}

/// Nonzero off-diagonal entries of each task, row-major within a task.
pub fn edges_of(tasks: &[DMatrix<f64>]) -> Vec<Edge> {
    let mut out = Vec::new();
    for (task, g) in tasks.iter().enumerate() {
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                if i != j && g[(i, j)] != 0.0 {
                    out.push(Edge {
                        src: i,
                        dst: j,
                        weight: g[(i, j)],
                        task,
                    });
                }
            }
        }
    }
    out
}

pub fn write_edges(path: &Path, tasks: &[DMatrix<f64>]) -> Result<()> {
    let mut w = writer(path)?;
    let edges = edges_of(tasks);
    if edges.is_empty() {
        w.write_record(["src", "dst", "weight", "task"])
            .map_err(|e| csv_err(path, e))?;
    }
    for e in edges {
        w.serialize(e).map_err(|err| csv_err(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_edge_list(path: &Path) -> Result<Vec<Edge>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
    r.deserialize()
        .map(|e| e.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Rebuilds `k` dense `p x p` matrices from an edge list.
pub fn read_edges(path: &Path, p: usize, k: usize) -> Result<Vec<DMatrix<f64>>> {
    let mut out = vec![DMatrix::zeros(p, p); k];
    for (idx, e) in read_edge_list(path)?.into_iter().enumerate() {
        if e.src >= p || e.dst >= p || e.task >= k || e.src == e.dst {
            return Err(parse_err(
                path,
                idx as u64 + 2,
                format!(
                    "edge {}->{} of task {} is outside p = {p}, K = {k}",
                    e.src, e.dst, e.task
                ),
            ));
        }
        out[e.task][(e.src, e.dst)] = e.weight;
    }
    Ok(out)
}

/// Writes `position,node` rows, earliest node first.
pub fn write_order(path: &Path, order: &Permutation) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["position", "node"])
        .map_err(|e| csv_err(path, e))?;
    for (pos, node) in order.sequence().into_iter().enumerate() {
        w.write_record([pos.to_string(), node.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_order(path: &Path) -> Result<Permutation> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(usize, usize)> = r
        .deserialize()
        .map(|e| e.map_err(|e| csv_err(path, e)))
        .collect::<Result<_>>()?;
    rows.sort_unstable();
    if rows.iter().enumerate().any(|(i, &(pos, _))| pos != i) {
        return Err(parse_err(path, 1, "positions must be 0..p without gaps"));
    }
    let seq: Vec<usize> = rows.into_iter().map(|(_, node)| node).collect();
    Permutation::from_sequence(&seq)
}

pub fn write_diagnostics(path: &Path, diagnostics: &[OuterDiagnostics]) -> Result<()> {
    let mut w = writer(path)?;
    for d in diagnostics {
        w.serialize(d).map_err(|e| csv_err(path, e))?;
    }
    if diagnostics.is_empty() {
        w.write_record(["iteration", "objective", "h", "beta", "alpha"])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<OuterDiagnostics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
    r.deserialize()
        .map(|e| e.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Paths written by [`crate::harness::simulate_to_dir`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub family: PathBuf,
    pub data: Vec<PathBuf>,
    pub n: usize,
    pub seed: u64,
}
