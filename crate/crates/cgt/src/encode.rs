//! Computation-graph sampling and duplicate encoding.
//!
//! Each node's L-hop egonet is sampled top-down and rewritten as a balanced
//! s-ary tree: every tree slot either holds a copy of a sampled neighbor's
//! feature row or an all-zero null row, so all computation graphs of one
//! shape share the constant adjacency from [`crate::tree::tree_adjacency`].

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;

use crate::graph::Graph;
use crate::rng;
use crate::tree::TreeShape;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedComputationGraph {
    pub shape: TreeShape,
    pub d: usize,
    /// T x d feature rows in BFS order; null slots are all-zero rows.
    pub rows: Vec<f32>,
    pub root_label: u32,
    /// Original root node id; absent for generated graphs.
    pub source_node: Option<u32>,
}

impl EncodedComputationGraph {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.rows[t * self.d..(t + 1) * self.d]
    }

    pub fn is_null(&self, t: usize) -> bool {
        self.row(t).iter().all(|&x| x == 0.0)
    }

    /// BFS layer annotation for every row.
    pub fn layers(&self) -> Vec<usize> {
        (0..self.shape.node_count())
            .map(|t| self.shape.layer_of(t))
            .collect()
    }
}

/// Feature rows of one root-to-leaf ancestor path (length L + 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PathSequence {
    /// BFS positions of the path entries, root first.
    pub positions: Vec<usize>,
    pub root_label: u32,
}

/// Splits a tree into its s^L ancestor paths. Every position appears in at
/// least one path; leaves appear in exactly one.
pub fn split_paths(shape: TreeShape, root_label: u32) -> Vec<PathSequence> {
    shape
        .all_paths()
        .into_iter()
        .map(|positions| PathSequence {
            positions,
            root_label,
        })
        .collect()
}

/// Samples node `v`'s computation graph top-down and duplicate-encodes it.
///
/// Each occupied slot draws min(s, deg) distinct neighbors uniformly without
/// replacement — all existing neighbors when the neighborhood is smaller than
/// s — and fills remaining child slots with nulls. Sampling is independent
/// per parent, so shared neighbors are copied. Sampled neighbors land in
/// ascending node-id order within a parent's slot block, nulls last.
/// Deterministic in `(v, seed)`.
pub fn sample_computation_graph(
    g: &Graph,
    v: u32,
    shape: TreeShape,
    seed: u64,
) -> EncodedComputationGraph {
    let t_total = shape.node_count();
    let s = shape.fanout;
    let mut occupant: Vec<Option<u32>> = vec![None; t_total];
    occupant[0] = Some(v);
    let mut stream = rng::stream(seed, rng::STAGE_SAMPLE ^ u64::from(v).wrapping_mul(0x424D));

    for t in 0..t_total {
        let Some(node) = occupant[t] else { continue };
        let slots = shape.children(t);
        if slots.is_empty() {
            continue;
        }
        let neighbors = g.neighbors(node);
        let take = neighbors.len().min(s);
        let mut picked: Vec<u32> = if take == neighbors.len() {
            neighbors.to_vec()
        } else {
            let mut pool = neighbors.to_vec();
            pool.partial_shuffle(&mut stream, take);
            pool.truncate(take);
            pool
        };
        picked.sort_unstable();
        for (slot, child) in slots.clone().zip(picked) {
            occupant[slot] = Some(child);
        }
    }

    let d = g.feature_dim();
    let mut rows = vec![0.0f32; t_total * d];
    for (t, occ) in occupant.iter().enumerate() {
        if let Some(node) = occ {
            rows[t * d..(t + 1) * d].copy_from_slice(g.feature_row(*node));
        }
    }
    EncodedComputationGraph {
        shape,
        d,
        rows,
        root_label: g.label(v),
        source_node: Some(v),
    }
}

/// Samples one computation graph per node, in node order.
pub fn sample_all(g: &Graph, shape: TreeShape, seed: u64) -> Vec<EncodedComputationGraph> {
    (0..g.node_count() as u32)
        .map(|v| sample_computation_graph(g, v, shape, seed))
        .collect()
}

// ---------------------------------------------------------------------------
// cgs.bin: magic "CGCG", u32 version, u32 s, u32 L, u32 d, u64 count, then
// per graph: u32 root_label, i64 source node (-1 = absent), T*d LE f32 rows.
// ---------------------------------------------------------------------------

const CGS_MAGIC: &[u8; 4] = b"CGCG";
const CGS_VERSION: u32 = 1;

pub fn write_cgs<W: Write>(mut w: W, graphs: &[EncodedComputationGraph]) -> Result<()> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::Invalid("cannot write an empty computation-graph set".into()))?;
    let shape = first.shape;
    let d = first.d;
    if graphs.iter().any(|g| g.shape != shape || g.d != d) {
        return Err(Error::Invalid(
            "computation-graph set mixes shapes or feature dims".into(),
        ));
    }
    let io = |e: std::io::Error| Error::Format(format!("cgs write failed: {e}"));
    w.write_all(CGS_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CGS_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(shape.fanout as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(shape.depth as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
    w.write_u64::<LittleEndian>(graphs.len() as u64).map_err(io)?;
    for g in graphs {
        w.write_u32::<LittleEndian>(g.root_label).map_err(io)?;
        let src = g.source_node.map_or(-1i64, |v| v as i64);
        w.write_i64::<LittleEndian>(src).map_err(io)?;
        for &x in &g.rows {
            w.write_f32::<LittleEndian>(x).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_cgs<R: Read>(mut r: R) -> Result<Vec<EncodedComputationGraph>> {
    let bad = |msg: &str| Error::Format(format!("cgs.bin: {msg}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CGS_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != CGS_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let s = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let depth = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let count = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    let shape = TreeShape::new(s, depth)?;
    if d == 0 || d > (1 << 24) {
        return Err(bad("implausible feature dimension"));
    }
    if count > (1 << 32) {
        return Err(bad("implausible graph count"));
    }
    let t_total = shape.node_count();
    t_total
        .checked_mul(d)
        .filter(|&rd| rd <= (1 << 28))
        .ok_or_else(|| bad("row payload too large"))?;
    let mut graphs = Vec::new();
    for _ in 0..count {
        let root_label = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated graph"))?;
        let src = r.read_i64::<LittleEndian>().map_err(|_| bad("truncated graph"))?;
        let source_node = if src < 0 {
            None
        } else if src <= u32::MAX as i64 {
            Some(src as u32)
        } else {
            return Err(bad("source node id out of range"));
        };
        let mut rows = vec![0.0f32; t_total * d];
        for x in &mut rows {
            *x = r.read_f32::<LittleEndian>().map_err(|_| bad("truncated rows"))?;
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite feature value"));
        }
        graphs.push(EncodedComputationGraph {
            shape,
            d,
            rows,
            root_label,
            source_node,
        });
    }
    // Trailing bytes mean a corrupt or mismatched writer.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(graphs),
        Ok(_) => Err(bad("trailing bytes")),
        Err(_) => Ok(graphs),
    }
}

pub fn save_cgs(path: &Path, graphs: &[EncodedComputationGraph]) -> Result<()> {
    let mut buf = Vec::new();
    write_cgs(&mut buf, graphs)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_cgs(path: &Path) -> Result<Vec<EncodedComputationGraph>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_cgs(&bytes[..])
}
