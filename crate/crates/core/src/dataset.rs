//! Tabular regression data: loading (CSV and libsvm), min-max normalization,
//! and per-node partitioning for balanced, non-IID and imbalanced runs.
//!
//! Samples are stored as rows: a dataset with `N` points in `d` dimensions
//! holds an `N × d` feature matrix.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng_for;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableFormat {
    /// Header row plus one named target column; every other column is a feature.
    Csv { target_column: String },
    /// `<target> idx:val ...` with 1-based indices.
    Libsvm,
}

#[derive(Debug, Clone)]
pub struct RawDataset {
    pub name: String,
    pub features: Array2<f64>,
    pub targets: Array1<f64>,
}

impl RawDataset {
    pub fn new(name: impl Into<String>, features: Array2<f64>, targets: Array1<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Empty("dataset has no rows".into()));
        }
        if features.ncols() == 0 {
            return Err(Error::Empty("dataset has no feature columns".into()));
        }
        if features.nrows() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                got: targets.len(),
            });
        }
        Ok(RawDataset {
            name: name.into(),
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Per-column `(min, max)` of the raw data, enough to undo [`normalize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub feature_min: Vec<f64>,
    pub feature_max: Vec<f64>,
    pub target_min: f64,
    pub target_max: f64,
}

impl ScalingRecord {
    pub fn denormalize_row(&self, row: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(row.iter().enumerate().map(|(c, &v)| {
            let (lo, hi) = (self.feature_min[c], self.feature_max[c]);
            if hi > lo {
                lo + v * (hi - lo)
            } else {
                lo
            }
        }))
    }

    pub fn denormalize_target(&self, y: f64) -> f64 {
        let (lo, hi) = (self.target_min, self.target_max);
        if hi > lo {
            lo + (y + 1.0) * 0.5 * (hi - lo)
        } else {
            lo
        }
    }
}

/// Features in `[0,1]`, targets in `[-1,1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub features: Array2<f64>,
    pub targets: Array1<f64>,
    pub scaling: ScalingRecord,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows `idx` as a new `(features, targets)` pair.
    pub fn select(&self, idx: &[usize]) -> (Array2<f64>, Array1<f64>) {
        (
            self.features.select(Axis(0), idx),
            self.targets.select(Axis(0), idx),
        )
    }
}

pub fn load_table(path: impl AsRef<Path>, format: &TableFormat) -> Result<RawDataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        TableFormat::Csv { target_column } => parse_csv(name, file, target_column),
        TableFormat::Libsvm => {
            let mut text = String::new();
            std::io::BufReader::new(file)
                .read_to_string(&mut text)
                .map_err(|e| Error::io(path, e))?;
            parse_libsvm(name, &text, None)
        }
    }
}

pub fn parse_csv(name: impl Into<String>, reader: impl Read, target_column: &str) -> Result<RawDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Empty("csv has no header row".into()));
    }
    let target_at = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("target column `{target_column}` not in header"),
        })?;
    let d = headers.len() - 1;
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: cannot parse `{field}` as a number", &headers[c]),
            })?;
            if c == target_at {
                targets.push(v);
            } else {
                feats.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::Empty("csv has no data rows".into()));
    }
    let n = targets.len();
    let features = Array2::from_shape_vec((n, d), feats).map_err(|e| Error::invalid(e.to_string()))?;
    RawDataset::new(name, features, Array1::from(targets))
}

/// Parses libsvm text. Missing indices are zero; the dimension is the largest
/// index seen unless `dim` is given.
pub fn parse_libsvm(name: impl Into<String>, text: &str, dim: Option<usize>) -> Result<RawDataset> {
    let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut max_index = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let target: f64 = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse {
                line,
                message: "missing or non-numeric target".into(),
            })?;
        let mut entries = Vec::new();
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected idx:val, found `{tok}`"),
            })?;
            let idx: usize = idx.parse().ok().filter(|&i| i >= 1).ok_or_else(|| Error::Parse {
                line,
                message: format!("bad feature index `{idx}`"),
            })?;
            let val: f64 = val.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad feature value `{val}`"),
            })?;
            max_index = max_index.max(idx);
            entries.push((idx - 1, val));
        }
        rows.push((target, entries));
    }
    if rows.is_empty() {
        return Err(Error::Empty("libsvm input has no rows".into()));
    }
    let d = match dim {
        Some(d) if d < max_index => {
            return Err(Error::invalid(format!(
                "feature index {max_index} exceeds declared dimension {d}"
            )))
        }
        Some(d) => d,
        None => max_index,
    };
    let mut features = Array2::<f64>::zeros((rows.len(), d));
    let mut targets = Array1::<f64>::zeros(rows.len());
    for (i, (y, entries)) in rows.into_iter().enumerate() {
        targets[i] = y;
        for (c, v) in entries {
            features[[i, c]] = v;
        }
    }
    RawDataset::new(name, features, targets)
}

/// Global min-max scaling. Constant feature columns map to 0 and a constant
/// target maps to 0.
pub fn normalize(raw: &RawDataset) -> Dataset {
    let d = raw.dim();
    let mut feature_min = vec![f64::INFINITY; d];
    let mut feature_max = vec![f64::NEG_INFINITY; d];
    for row in raw.features.rows() {
        for (c, &v) in row.iter().enumerate() {
            feature_min[c] = feature_min[c].min(v);
            feature_max[c] = feature_max[c].max(v);
        }
    }
    let mut features = raw.features.clone();
    for (c, mut col) in features.columns_mut().into_iter().enumerate() {
        let (lo, hi) = (feature_min[c], feature_max[c]);
        let span = hi - lo;
        col.mapv_inplace(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
    }
    let target_min = raw.targets.iter().copied().fold(f64::INFINITY, f64::min);
    let target_max = raw.targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = target_max - target_min;
    let targets = raw
        .targets
        .mapv(|v| if span > 0.0 { 2.0 * (v - target_min) / span - 1.0 } else { 0.0 });
    Dataset {
        name: raw.name.clone(),
        features,
        targets,
        scaling: ScalingRecord {
            feature_min,
            feature_max,
            target_min,
            target_max,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Balanced,
    NoniidAbsY,
    NoniidXNorm,
    Imbalanced,
}

impl std::str::FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(PartitionMode::Balanced),
            "noniid_abs_y" => Ok(PartitionMode::NoniidAbsY),
            "noniid_x_norm" => Ok(PartitionMode::NoniidXNorm),
            "imbalanced" => Ok(PartitionMode::Imbalanced),
            other => Err(Error::invalid(format!("unknown partition mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PartitionMode::Balanced => "balanced",
            PartitionMode::NoniidAbsY => "noniid_abs_y",
            PartitionMode::NoniidXNorm => "noniid_x_norm",
            PartitionMode::Imbalanced => "imbalanced",
        })
    }
}

/// Disjoint row-index sets, one per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub mode: PartitionMode,
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn nodes(&self) -> usize {
        self.shards.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// JSON index lists for audit.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Permutes node labels: node `j` of the result is node `perm[j]` of `self`.
    pub fn relabel(&self, perm: &[usize]) -> Partition {
        Partition {
            mode: self.mode,
            shards: perm.iter().map(|&p| self.shards[p].clone()).collect(),
        }
    }
}

/// `⌊n/j⌋` each, one extra for the first `n mod j` nodes.
pub fn chunk_sizes(n: usize, nodes: usize) -> Vec<usize> {
    let base = n / nodes;
    let extra = n % nodes;
    (0..nodes).map(|j| base + usize::from(j < extra)).collect()
}

fn chunk(order: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        out.push(order[start..start + s].to_vec());
        start += s;
    }
    out
}

fn check_nodes(n: usize, nodes: usize) -> Result<()> {
    if nodes == 0 {
        return Err(Error::invalid("node count must be at least 1"));
    }
    if nodes > n {
        return Err(Error::invalid(format!("{nodes} nodes but only {n} rows")));
    }
    Ok(())
}

/// Seeded uniform shuffle, then equal contiguous chunks.
pub fn partition_balanced(ds: &Dataset, nodes: usize, seed: u64) -> Result<Partition> {
    check_nodes(ds.len(), nodes)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng_for(seed, 0x5041_5254));
    Ok(Partition {
        mode: PartitionMode::Balanced,
        shards: chunk(&order, &chunk_sizes(ds.len(), nodes)),
    })
}

/// Sorts rows by `|y|` (or `‖x‖₂`) in descending order and deals contiguous
/// blocks to nodes in that order. Ties keep the original row order.
pub fn partition_noniid(ds: &Dataset, nodes: usize, mode: PartitionMode) -> Result<Partition> {
    check_nodes(ds.len(), nodes)?;
    let key: Vec<f64> = match mode {
        PartitionMode::NoniidAbsY => ds.targets.iter().map(|y| y.abs()).collect(),
        PartitionMode::NoniidXNorm => crate::linalg::row_norms(ds.features.view()).to_vec(),
        other => return Err(Error::invalid(format!("{other} is not a non-IID mode"))),
    };
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| key[b].total_cmp(&key[a]));
    Ok(Partition {
        mode,
        shards: chunk(&order, &chunk_sizes(ds.len(), nodes)),
    })
}

/// Node sizes proportional to `(2j−1)/J²` for `j = 1..J`.
///
/// Each size is floored and the leftover rows go one at a time to the nodes
/// with the largest fractional parts (ties to the later node), so every size
/// stays within one row of its nominal value.
pub fn imbalanced_sizes(n: usize, nodes: usize) -> Result<Vec<usize>> {
    if nodes == 0 {
        return Err(Error::invalid("node count must be at least 1"));
    }
    let denom = (nodes * nodes) as f64;
    let nominal: Vec<f64> = (1..=nodes)
        .map(|j| n as f64 * (2 * j - 1) as f64 / denom)
        .collect();
    let mut sizes: Vec<usize> = nominal.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut by_fraction: Vec<usize> = (0..nodes).collect();
    by_fraction.sort_by(|&a, &b| {
        let fa = nominal[a] - nominal[a].floor();
        let fb = nominal[b] - nominal[b].floor();
        fb.total_cmp(&fa).then(b.cmp(&a))
    });
    for &j in by_fraction.iter().take(n - assigned) {
        sizes[j] += 1;
    }
    if let Some(j) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::invalid(format!(
            "node {} would receive no rows; use at least {} rows for {nodes} nodes",
            j + 1,
            nodes * nodes
        )));
    }
    Ok(sizes)
}

pub fn partition_imbalanced(ds: &Dataset, nodes: usize, seed: u64) -> Result<Partition> {
    let sizes = imbalanced_sizes(ds.len(), nodes)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng_for(seed, 0x494d_4241));
    Ok(Partition {
        mode: PartitionMode::Imbalanced,
        shards: chunk(&order, &sizes),
    })
}

pub fn partition(ds: &Dataset, nodes: usize, mode: PartitionMode, seed: u64) -> Result<Partition> {
    match mode {
        PartitionMode::Balanced => partition_balanced(ds, nodes, seed),
        PartitionMode::NoniidAbsY | PartitionMode::NoniidXNorm => partition_noniid(ds, nodes, mode),
        PartitionMode::Imbalanced => partition_imbalanced(ds, nodes, seed),
    }
}

/// One node's local data, split in half for training and testing.
#[derive(Debug, Clone)]
pub struct Shard {
    pub node: usize,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub train_x: Array2<f64>,
    pub train_y: Array1<f64>,
    pub test_x: Array2<f64>,
    pub test_y: Array1<f64>,
}

impl Shard {
    pub fn from_indices(ds: &Dataset, node: usize, train_idx: Vec<usize>, test_idx: Vec<usize>) -> Shard {
        let (train_x, train_y) = ds.select(&train_idx);
        let (test_x, test_y) = ds.select(&test_idx);
        Shard {
            node,
            train_idx,
            test_idx,
            train_x,
            train_y,
            test_x,
            test_y,
        }
    }

    pub fn n_train(&self) -> usize {
        self.train_y.len()
    }
}

/// Per node: seeded shuffle, first `⌈n/2⌉` rows train, the rest test.
pub fn split_train_test(p: &Partition, ds: &Dataset, seed: u64) -> Result<Vec<Shard>> {
    p.shards
        .iter()
        .enumerate()
        .map(|(j, idx)| {
            if idx.len() < 2 {
                return Err(Error::invalid(format!(
                    "node {j} holds {} rows; a train/test split needs at least 2",
                    idx.len()
                )));
            }
            let mut order = idx.clone();
            order.shuffle(&mut rng_for(seed, 0x5350_0000 + j as u64));
            let n_train = idx.len().div_ceil(2);
            let test = order.split_off(n_train);
            Ok(Shard::from_indices(ds, j, order, test))
        })
        .collect()
}

/// Checks that shards are disjoint and cover `0..n`.
pub fn is_complete(p: &Partition, n: usize) -> bool {
    let mut seen: HashMap<usize, usize> = HashMap::new();
    for s in &p.shards {
        for &i in s {
            *seen.entry(i).or_default() += 1;
        }
    }
    seen.len() == n && seen.iter().all(|(&i, &c)| i < n && c == 1)
}
