//! Text formats: edge lists, per-unit CSV columns and parameter files.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::adjustment::StratumLabels;
use crate::design::Assignment;
use crate::graph::{DirectedGraph, GraphError, HiddenNetwork};
use crate::hate_model::HateParameters;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{path}: {message}")]
    Content { path: String, message: String },
    #[error("{path}: {source}")]
    Graph { path: String, source: GraphError },
}

/// Parsed rows with their 1-based line numbers.
struct Rows {
    path: String,
    rows: Vec<(u64, Vec<String>)>,
}

impl Rows {
    fn parse_error(&self, line: u64, message: impl Into<String>) -> IoError {
        IoError::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn content_error(&self, message: impl Into<String>) -> IoError {
        IoError::Content {
            path: self.path.clone(),
            message: message.into(),
        }
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| IoError::Open {
            path: path.display().to_string(),
            source,
        })?;
    Ok(text)
}

/// Splits comma-separated text, dropping `#` comments, blank lines and a
/// header row (detected by a non-numeric first field).
fn parse_rows(text: &str, path: &str, columns: usize) -> Result<Rows, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Rows {
        path: path.to_string(),
        rows: Vec::new(),
    };
    let mut first = true;
    for record in reader.records() {
        let record = record.map_err(|e| IoError::Parse {
            path: path.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let is_header = first && record.get(0).is_some_and(|f| f.parse::<f64>().is_err());
        first = false;
        if is_header {
            continue;
        }
        if record.len() != columns {
            return Err(rows.parse_error(
                line,
                format!("expected {columns} fields, found {}", record.len()),
            ));
        }
        rows.rows
            .push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn parse_index(rows: &Rows, line: u64, field: &str) -> Result<usize, IoError> {
    field
        .parse::<usize>()
        .map_err(|_| rows.parse_error(line, format!("'{field}' is not a non-negative integer")))
}

fn parse_real(rows: &Rows, line: u64, field: &str) -> Result<f64, IoError> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(rows.parse_error(line, format!("'{field}' is not a finite number"))),
    }
}

/// Loaded edge list with the number of collapsed duplicates.
#[derive(Debug, Clone)]
pub struct EdgeListLoad {
    pub graph: DirectedGraph,
    pub duplicates: usize,
}

/// Parses `source,target` lines. With `n = None` the unit count is one more
/// than the largest index.
pub fn parse_edge_list(text: &str, path: &str, n: Option<usize>) -> Result<EdgeListLoad, IoError> {
    let rows = parse_rows(text, path, 2)?;
    let mut edges = Vec::with_capacity(rows.rows.len());
    for (line, fields) in &rows.rows {
        let s = parse_index(&rows, *line, &fields[0])?;
        let t = parse_index(&rows, *line, &fields[1])?;
        if s == t {
            return Err(rows.parse_error(*line, format!("self-loop on unit {s}")));
        }
        if let Some(n) = n {
            if s >= n || t >= n {
                return Err(rows.parse_error(*line, format!("edge ({s}, {t}) outside 0..{n}")));
            }
        }
        edges.push((s, t));
    }
    let n = n.unwrap_or_else(|| edges.iter().map(|&(s, t)| s.max(t) + 1).max().unwrap_or(0));
    let (graph, duplicates) =
        DirectedGraph::from_edge_list_counted(&edges, n).map_err(|source| IoError::Graph {
            path: path.to_string(),
            source,
        })?;
    Ok(EdgeListLoad { graph, duplicates })
}

pub fn read_edge_list(path: &Path, n: Option<usize>) -> Result<EdgeListLoad, IoError> {
    parse_edge_list(&read_text(path)?, &path.display().to_string(), n)
}

/// Reads `i,v1,...` rows that must cover units `0..n` exactly once.
fn unit_table(rows: &Rows, n: Option<usize>) -> Result<Vec<(u64, Vec<String>)>, IoError> {
    let n = n.unwrap_or(rows.rows.len());
    let mut slots: Vec<Option<(u64, Vec<String>)>> = vec![None; n];
    for (line, fields) in &rows.rows {
        let i = parse_index(rows, *line, &fields[0])?;
        if i >= n {
            return Err(rows.parse_error(*line, format!("unit {i} outside 0..{n}")));
        }
        if slots[i].is_some() {
            return Err(rows.parse_error(*line, format!("unit {i} listed twice")));
        }
        slots[i] = Some((*line, fields[1..].to_vec()));
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| rows.content_error(format!("unit {i} is missing"))))
        .collect()
}

/// `i,y` outcomes.
pub fn parse_outcomes(text: &str, path: &str, n: Option<usize>) -> Result<Vec<f64>, IoError> {
    let rows = parse_rows(text, path, 2)?;
    unit_table(&rows, n)?
        .iter()
        .map(|(line, f)| parse_real(&rows, *line, &f[0]))
        .collect()
}

/// `i,z` assignments with `z ∈ {0, 1}`.
pub fn parse_assignment(text: &str, path: &str, n: Option<usize>) -> Result<Assignment, IoError> {
    let rows = parse_rows(text, path, 2)?;
    let z = unit_table(&rows, n)?
        .iter()
        .map(|(line, f)| match f[0].as_str() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(rows.parse_error(*line, format!("treatment '{other}' is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Assignment::new(z))
}

/// Stratum labels: `i,stratum` or `i,row_stratum,col_stratum`.
#[derive(Debug, Clone, PartialEq)]
pub enum StrataFile {
    Merged(StratumLabels),
    TwoWay {
        rows: StratumLabels,
        cols: StratumLabels,
    },
}

pub fn parse_strata(text: &str, path: &str, n: Option<usize>) -> Result<StrataFile, IoError> {
    let width = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .map_or(2, |l| l.split(',').count());
    if width != 2 && width != 3 {
        return Err(IoError::Content {
            path: path.to_string(),
            message: format!("strata file needs 2 or 3 columns, found {width}"),
        });
    }
    let rows = parse_rows(text, path, width)?;
    let table = unit_table(&rows, n)?;
    let column = |c: usize| -> Result<StratumLabels, IoError> {
        let labels = table
            .iter()
            .map(|(line, f)| parse_index(&rows, *line, &f[c]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(StratumLabels::from_labels(labels))
    };
    if width == 2 {
        Ok(StrataFile::Merged(column(0)?))
    } else {
        Ok(StrataFile::TwoWay {
            rows: column(0)?,
            cols: column(1)?,
        })
    }
}

/// Parameters from `i,alpha,theta` and sparse `i,j,gamma` files. The hidden
/// network is the support of the gamma file and must lie inside `graph`.
pub fn parse_parameters(
    units_text: &str,
    units_path: &str,
    gamma_text: Option<(&str, &str)>,
    graph: &DirectedGraph,
) -> Result<HateParameters, IoError> {
    let n = graph.n();
    let rows = parse_rows(units_text, units_path, 3)?;
    let table = unit_table(&rows, Some(n))?;
    let mut alpha = Vec::with_capacity(n);
    let mut theta = Vec::with_capacity(n);
    for (line, f) in &table {
        alpha.push(parse_real(&rows, *line, &f[0])?);
        theta.push(parse_real(&rows, *line, &f[1])?);
    }
    let mut triplets = Vec::new();
    let mut edges = Vec::new();
    if let Some((text, path)) = gamma_text {
        let g_rows = parse_rows(text, path, 3)?;
        for (line, f) in &g_rows.rows {
            let i = parse_index(&g_rows, *line, &f[0])?;
            let j = parse_index(&g_rows, *line, &f[1])?;
            let v = parse_real(&g_rows, *line, &f[2])?;
            if i >= n || j >= n || !graph.has_edge(i, j) {
                return Err(
                    g_rows.parse_error(*line, format!("({i}, {j}) is not an observed edge"))
                );
            }
            triplets.push((i, j, v));
            edges.push((i, j));
        }
    }
    let hidden = HiddenNetwork::from_edges(graph, &edges).map_err(|source| IoError::Graph {
        path: units_path.to_string(),
        source,
    })?;
    HateParameters::from_triplets(alpha, theta, hidden, &triplets).map_err(|e| IoError::Content {
        path: units_path.to_string(),
        message: e.to_string(),
    })
}

pub fn read_outcomes(path: &Path, n: Option<usize>) -> Result<Vec<f64>, IoError> {
    parse_outcomes(&read_text(path)?, &path.display().to_string(), n)
}

pub fn read_assignment(path: &Path, n: Option<usize>) -> Result<Assignment, IoError> {
    parse_assignment(&read_text(path)?, &path.display().to_string(), n)
}

pub fn read_strata(path: &Path, n: Option<usize>) -> Result<StrataFile, IoError> {
    parse_strata(&read_text(path)?, &path.display().to_string(), n)
}

pub fn read_parameters(
    units: &Path,
    gamma: Option<&Path>,
    graph: &DirectedGraph,
) -> Result<HateParameters, IoError> {
    let units_text = read_text(units)?;
    let gamma_text = gamma.map(read_text).transpose()?;
    let gamma_path = gamma.map(|p| p.display().to_string());
    parse_parameters(
        &units_text,
        &units.display().to_string(),
        gamma_text.as_deref().zip(gamma_path.as_deref()),
        graph,
    )
}
