//! Whole-graph representation and text-format I/O.
//!
//! A graph directory holds three files:
//! - `edges.tsv`: one `u<TAB>v` edge per line, 0-indexed decimal, `#` comments;
//! - `features.csv`: n lines of d comma-separated reals;
//! - `labels.tsv`: n lines, one integer each.
//!
//! Graphs are undirected; directed input is symmetrized on load, duplicates
//! are collapsed, and self-loops are dropped (counted in [`LoadReport`]).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::rng;
use crate::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    d: usize,
    num_classes: usize,
    /// CSR offsets, length n + 1.
    offsets: Vec<usize>,
    /// Neighbor lists, sorted ascending within each node; both directions stored.
    neighbors: Vec<u32>,
    /// Row-major n x d feature matrix.
    features: Vec<f32>,
    labels: Vec<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub self_loops_dropped: usize,
    pub duplicate_edges_dropped: usize,
}

impl Graph {
    /// Builds a validated graph from raw parts. Edges may appear in either or
    /// both directions; the result is symmetric and deduplicated.
    pub fn from_parts(
        features: Vec<f32>,
        d: usize,
        labels: Vec<u32>,
        edges: &[(u32, u32)],
    ) -> Result<(Self, LoadReport)> {
        if d == 0 && !features.is_empty() {
            return Err(Error::Invalid("feature dimension is zero".into()));
        }
        let n = if d == 0 { labels.len() } else { features.len() / d };
        if d != 0 && features.len() != n * d {
            return Err(Error::Invalid("feature matrix is not n x d".into()));
        }
        if labels.len() != n {
            return Err(Error::Invalid(format!(
                "labels length {} != node count {}",
                labels.len(),
                n
            )));
        }
        let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);

        let mut report = LoadReport::default();
        let mut adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u as usize >= n || v as usize >= n {
                return Err(Error::Invalid(format!(
                    "edge ({u}, {v}) references a node >= n = {n}"
                )));
            }
            if u == v {
                report.self_loops_dropped += 1;
                continue;
            }
            let fresh = adj[u as usize].insert(v);
            adj[v as usize].insert(u);
            if !fresh {
                report.duplicate_edges_dropped += 1;
            }
        }

        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for set in &adj {
            neighbors.extend(set.iter().copied());
            offsets.push(neighbors.len());
        }

        Ok((
            Graph {
                n,
                d,
                num_classes,
                offsets,
                neighbors,
                features,
                labels,
            },
            report,
        ))
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors(&self, v: u32) -> &[u32] {
        &self.neighbors[self.offsets[v as usize]..self.offsets[v as usize + 1]]
    }

    pub fn degree(&self, v: u32) -> usize {
        self.neighbors(v).len()
    }

    pub fn feature_row(&self, v: u32) -> &[f32] {
        let v = v as usize;
        &self.features[v * self.d..(v + 1) * self.d]
    }

    pub fn label(&self, v: u32) -> u32 {
        self.labels[v as usize]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn has_edge(&self, u: u32, v: u32) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edge list with u < v, ascending.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for u in 0..self.n as u32 {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Empirical label distribution (counts normalized to sum 1).
    pub fn label_distribution(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_classes.max(1)];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        let total = self.n.max(1) as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    }
}

// ---------------------------------------------------------------------------
// Text format parsers. These accept raw bytes so untrusted files can be
// parsed without touching the filesystem.
// ---------------------------------------------------------------------------

fn bad_line(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses `edges.tsv` content: `u<TAB>v` per line, `#` comments, blank lines ok.
pub fn parse_edges_tsv(bytes: &[u8], path: &Path) -> Result<Vec<(u32, u32)>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| bad_line(path, 0, "file is not valid UTF-8"))?;
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let u = parts
            .next()
            .ok_or_else(|| bad_line(path, idx + 1, "missing source node"))?;
        let v = parts
            .next()
            .ok_or_else(|| bad_line(path, idx + 1, "missing target node"))?;
        if parts.next().is_some() {
            return Err(bad_line(path, idx + 1, "expected exactly two columns"));
        }
        let u: u32 = u
            .trim()
            .parse()
            .map_err(|_| bad_line(path, idx + 1, format!("bad node id {u:?}")))?;
        let v: u32 = v
            .trim()
            .parse()
            .map_err(|_| bad_line(path, idx + 1, format!("bad node id {v:?}")))?;
        edges.push((u, v));
    }
    Ok(edges)
}

/// Parses `features.csv` content into (row-major values, d). Rejects ragged rows.
pub fn parse_features_csv(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, usize)> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| bad_line(path, 0, "file is not valid UTF-8"))?;
    let mut values = Vec::new();
    let mut d = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0usize;
        for field in line.split(',') {
            let x: f32 = field.trim().parse().map_err(|_| {
                bad_line(path, idx + 1, format!("bad real value {field:?}"))
            })?;
            if !x.is_finite() {
                return Err(bad_line(path, idx + 1, "non-finite feature value"));
            }
            values.push(x);
            count += 1;
        }
        match d {
            None => d = Some(count),
            Some(expect) if expect != count => {
                return Err(bad_line(
                    path,
                    idx + 1,
                    format!("ragged row: {count} fields, expected {expect}"),
                ));
            }
            _ => {}
        }
    }
    Ok((values, d.unwrap_or(0)))
}

/// Parses `labels.tsv` content: one nonnegative integer per line.
pub fn parse_labels_tsv(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| bad_line(path, 0, "file is not valid UTF-8"))?;
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let y: i64 = line
            .parse()
            .map_err(|_| bad_line(path, idx + 1, format!("bad label {line:?}")))?;
        if y < 0 || y > u32::MAX as i64 {
            return Err(bad_line(path, idx + 1, format!("label {y} out of range")));
        }
        labels.push(y as u32);
    }
    Ok(labels)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads a graph directory (`edges.tsv`, `features.csv`, `labels.tsv`).
pub fn load_graph(dir: &Path) -> Result<(Graph, LoadReport)> {
    let edges_path = dir.join("edges.tsv");
    let features_path = dir.join("features.csv");
    let labels_path = dir.join("labels.tsv");
    let edges = parse_edges_tsv(&read_file(&edges_path)?, &edges_path)?;
    let (features, d) = parse_features_csv(&read_file(&features_path)?, &features_path)?;
    let labels = parse_labels_tsv(&read_file(&labels_path)?, &labels_path)?;
    if d == 0 {
        return Err(Error::Invalid(format!(
            "{} contains no feature rows",
            features_path.display()
        )));
    }
    let n = features.len() / d;
    if labels.len() != n {
        return Err(Error::Invalid(format!(
            "{} has {} labels but features.csv has {} rows",
            labels_path.display(),
            labels.len(),
            n
        )));
    }
    Graph::from_parts(features, d, labels, &edges)
}

/// Saves a graph directory in the load formats, bit-exactly: reals are
/// rendered with the shortest decimal that round-trips to the same f32.
pub fn save_graph(graph: &Graph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut edges = String::new();
    for (u, v) in graph.edges() {
        writeln!(edges, "{u}\t{v}").unwrap();
    }
    write_file(&dir.join("edges.tsv"), edges.as_bytes())?;

    let mut features = String::new();
    for v in 0..graph.n as u32 {
        let row = graph.feature_row(v);
        for (i, x) in row.iter().enumerate() {
            if i > 0 {
                features.push(',');
            }
            write!(features, "{x}").unwrap();
        }
        features.push('\n');
    }
    write_file(&dir.join("features.csv"), features.as_bytes())?;

    let mut labels = String::new();
    for &y in &graph.labels {
        writeln!(labels, "{y}").unwrap();
    }
    write_file(&dir.join("labels.tsv"), labels.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Scenario perturbation: noisy edges.
// ---------------------------------------------------------------------------

/// Adds `num_per_node` edges from each node to uniformly random distinct
/// non-neighbors. Deterministic in `(g, num_per_node, seed)`. Returns the new
/// graph and the total shortfall when some nodes lacked enough non-neighbors.
pub fn add_noisy_edges(g: &Graph, num_per_node: usize, seed: u64) -> (Graph, usize) {
    if num_per_node == 0 {
        return (g.clone(), 0);
    }
    let n = g.node_count();
    let mut adj: Vec<BTreeSet<u32>> = (0..n as u32)
        .map(|v| g.neighbors(v).iter().copied().collect())
        .collect();
    let mut shortfall = 0usize;
    for v in 0..n as u32 {
        let mut rng = rng::stream(seed, rng::STAGE_PERTURB ^ u64::from(v).wrapping_mul(0x9E37));
        for _ in 0..num_per_node {
            let candidates = n - 1 - adj[v as usize].len();
            if candidates == 0 {
                shortfall += 1;
                continue;
            }
            // Index into the set of non-neighbors (excluding v itself) without
            // materializing it: walk node ids, skipping v and neighbors.
            let target_rank = rng.random_range(0..candidates);
            let mut rank = 0usize;
            let mut chosen = None;
            for u in 0..n as u32 {
                if u == v || adj[v as usize].contains(&u) {
                    continue;
                }
                if rank == target_rank {
                    chosen = Some(u);
                    break;
                }
                rank += 1;
            }
            let u = chosen.expect("candidate count was positive");
            adj[v as usize].insert(u);
            adj[u as usize].insert(v);
        }
    }

    let mut edges = Vec::new();
    for v in 0..n as u32 {
        for &u in &adj[v as usize] {
            if v < u {
                edges.push((v, u));
            }
        }
    }
    let (graph, _) = Graph::from_parts(
        g.features.clone(),
        g.d,
        g.labels.clone(),
        &edges,
    )
    .expect("perturbed parts stay valid");
    (graph, shortfall)
}

/// Node-index split produced by [`crate::ppr::biased_split`].
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for set in [&self.train, &self.valid, &self.test] {
            for &v in set {
                if v as usize >= n {
                    return Err(Error::Invalid(format!("split references node {v} >= n")));
                }
                if seen[v as usize] {
                    return Err(Error::Invalid(format!("node {v} appears in two splits")));
                }
                seen[v as usize] = true;
            }
        }
        Ok(())
    }
}
