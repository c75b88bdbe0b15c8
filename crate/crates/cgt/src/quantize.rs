//! Feature quantization: k-means with a minimum cluster size (k-anonymity)
//! or with differential privacy, token-sequence mapping, and the whole-graph
//! materialization that realizes every released attribute vector and edge
//! distribution by at least k nodes.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::encode::EncodedComputationGraph;
use crate::graph::Graph;
use crate::privacy::gaussian_sigma;
use crate::rng;
use crate::tree::TreeShape;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum PrivacyMode {
    None,
    KAnonymous { k: u32 },
    Dp { eps: f64, delta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerModel {
    pub m: usize,
    pub d: usize,
    pub k_min: usize,
    /// Sample size used for fitting.
    pub n_fit: usize,
    pub privacy: PrivacyMode,
    /// Lloyd centers, m x d.
    pub centers: Vec<f32>,
    /// Per-cluster empirical feature means, m x d; de-quantization emits these.
    pub means: Vec<f32>,
    /// Cluster cardinalities over the full fitted data.
    pub sizes: Vec<u64>,
}

impl QuantizerModel {
    /// Reserved id for null (all-zero padding) rows.
    pub fn null_token(&self) -> u32 {
        self.m as u32
    }

    pub fn vocab(&self) -> usize {
        self.m + 1
    }

    pub fn mean_row(&self, c: usize) -> &[f32] {
        &self.means[c * self.d..(c + 1) * self.d]
    }

    /// Nearest cluster by Euclidean distance to the cluster means, ties to
    /// the lowest id.
    pub fn nearest(&self, row: &[f32]) -> u32 {
        let mut best = 0u32;
        let mut best_dist = f64::INFINITY;
        for c in 0..self.m {
            let mean = self.mean_row(c);
            let mut dist = 0.0f64;
            for (a, b) in row.iter().zip(mean) {
                let diff = *a as f64 - *b as f64;
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = c as u32;
            }
        }
        best
    }
}

/// Token view of one computation graph: ids in [0, m], m = null.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub root_label: u32,
}

// ---------------------------------------------------------------------------
// k-means fitting.
// ---------------------------------------------------------------------------

struct NoiseCfg {
    sigma_sum: f64,
    sigma_count: f64,
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn to_f64_rows(x: &[f32], d: usize, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter()
        .map(|&i| x[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect())
        .collect()
}

/// k-means++ style seeding over the rows, deterministic per rng stream.
fn init_centers(rows: &[Vec<f64>], m: usize, stream: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(m);
    let first = stream.random_range(0..rows.len());
    centers.push(rows[first].clone());
    let mut dist: Vec<f64> = rows.iter().map(|r| squared_dist(r, &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = dist.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass is on duplicate rows: pick any unused distinct row.
            match rows.iter().position(|r| centers.iter().all(|c| c != r)) {
                Some(i) => i,
                None => stream.random_range(0..rows.len()),
            }
        } else {
            let mut target = stream.random_range(0.0..total);
            let mut pick = rows.len() - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.push(rows[next].clone());
        for (i, r) in rows.iter().enumerate() {
            dist[i] = dist[i].min(squared_dist(r, centers.last().unwrap()));
        }
    }
    centers
}

fn assign_nearest(rows: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut assign = vec![0usize; rows.len()];
    let mut objective = 0.0;
    for (i, r) in rows.iter().enumerate() {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let dist = squared_dist(r, center);
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        assign[i] = best;
        objective += best_dist;
    }
    (assign, objective)
}

/// Moves the cheapest surplus points into undersized clusters until every
/// cluster holds at least `k_min` members.
fn repair_min_size(
    rows: &[Vec<f64>],
    centers: &[Vec<f64>],
    assign: &mut [usize],
    k_min: usize,
) {
    let m = centers.len();
    if k_min <= 1 {
        return;
    }
    let mut sizes = vec![0usize; m];
    for &a in assign.iter() {
        sizes[a] += 1;
    }
    for c in 0..m {
        while sizes[c] < k_min {
            // Cheapest move: surplus point with the smallest extra distance.
            let mut best: Option<(f64, usize)> = None;
            for (i, r) in rows.iter().enumerate() {
                let from = assign[i];
                if from == c || sizes[from] <= k_min {
                    continue;
                }
                let extra = squared_dist(r, &centers[c]) - squared_dist(r, &centers[from]);
                if best.map_or(true, |(cost, _)| extra < cost) {
                    best = Some((extra, i));
                }
            }
            let (_, mover) = best.expect("feasibility checked before repair");
            sizes[assign[mover]] -= 1;
            assign[mover] = c;
            sizes[c] += 1;
        }
    }
}

fn lloyd(
    rows: &[Vec<f64>],
    m: usize,
    k_min: usize,
    iters: usize,
    noise: Option<&NoiseCfg>,
    stream: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let d = rows[0].len();
    let mut centers = init_centers(rows, m, stream);
    let mut prev_assign: Option<Vec<usize>> = None;
    for _ in 0..iters {
        let (mut assign, _objective) = assign_nearest(rows, &centers);
        repair_min_size(rows, &centers, &mut assign, k_min);
        let mut sums = vec![vec![0.0f64; d]; m];
        let mut counts = vec![0.0f64; m];
        for (i, r) in rows.iter().enumerate() {
            counts[assign[i]] += 1.0;
            for (j, &x) in r.iter().enumerate() {
                sums[assign[i]][j] += x;
            }
        }
        if let Some(noise) = noise {
            let sum_noise = Normal::new(0.0, noise.sigma_sum).map_err(|_| ()).ok();
            let count_noise = Normal::new(0.0, noise.sigma_count).ok();
            for c in 0..m {
                if let Some(dist) = &sum_noise {
                    for x in &mut sums[c] {
                        *x += dist.sample(stream);
                    }
                }
                if let Some(dist) = &count_noise {
                    counts[c] += dist.sample(stream);
                }
            }
        }
        for c in 0..m {
            let denom = counts[c].max(1.0);
            for j in 0..d {
                centers[c][j] = sums[c][j] / denom;
            }
        }
        if prev_assign.as_deref() == Some(&assign) && noise.is_none() {
            break;
        }
        prev_assign = Some(assign);
    }
    centers
}

fn count_distinct_rows(x: &[f32], n: usize, d: usize) -> usize {
    let mut rows: Vec<&[f32]> = (0..n).map(|i| &x[i * d..(i + 1) * d]).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rows.dedup();
    rows.len()
}

/// Fits k-means with a minimum cluster size on an `n_fit` subsample, then
/// assigns the full data with bounded reassignment so every cluster keeps at
/// least `k_min` members. `x` is row-major n x d.
pub fn fit_kmeans_min_size(
    x: &[f32],
    d: usize,
    m: usize,
    k_min: usize,
    n_fit: usize,
    iters: usize,
    seed: u64,
) -> Result<QuantizerModel> {
    let n = x.len() / d;
    if m == 0 {
        return Err(Error::Invalid("cluster count m must be >= 1".into()));
    }
    let n_fit = n_fit.clamp(1, n);
    if m * k_min.max(1) > n || m * k_min.max(1) > n_fit {
        return Err(Error::InfeasibleClustering {
            required: m * k_min.max(1),
            available: n_fit.min(n),
        });
    }
    let distinct = count_distinct_rows(x, n, d);
    if distinct < m {
        return Err(Error::DuplicateCenterCollapse { m, distinct });
    }

    let mut stream = rng::stream(seed, rng::STAGE_QUANTIZE);
    let mut index: Vec<usize> = (0..n).collect();
    index.shuffle(&mut stream);
    index.truncate(n_fit);
    index.sort_unstable();
    let fit_rows = to_f64_rows(x, d, &index);
    let centers = lloyd(&fit_rows, m, k_min, iters, None, &mut stream);

    finalize_full_assignment(
        x,
        d,
        centers,
        k_min,
        n_fit,
        match k_min {
            k if k > 1 => PrivacyMode::KAnonymous { k: k as u32 },
            _ => PrivacyMode::None,
        },
    )
}

/// Final full-data assignment with repair; means/sizes computed exactly.
fn finalize_full_assignment(
    x: &[f32],
    d: usize,
    centers: Vec<Vec<f64>>,
    k_min: usize,
    n_fit: usize,
    privacy: PrivacyMode,
) -> Result<QuantizerModel> {
    let n = x.len() / d;
    let m = centers.len();
    let all: Vec<usize> = (0..n).collect();
    let rows = to_f64_rows(x, d, &all);
    let (mut assign, _) = assign_nearest(&rows, &centers);
    repair_min_size(&rows, &centers, &mut assign, k_min);

    let mut sums = vec![vec![0.0f64; d]; m];
    let mut sizes = vec![0u64; m];
    for (i, r) in rows.iter().enumerate() {
        sizes[assign[i]] += 1;
        for (j, &v) in r.iter().enumerate() {
            sums[assign[i]][j] += v;
        }
    }
    let mut means = vec![0.0f32; m * d];
    for c in 0..m {
        let denom = (sizes[c].max(1)) as f64;
        for j in 0..d {
            means[c * d + j] = (sums[c][j] / denom) as f32;
        }
    }
    let centers_f32: Vec<f32> = centers
        .iter()
        .flat_map(|c| c.iter().map(|&v| v as f32))
        .collect();
    Ok(QuantizerModel {
        m,
        d,
        k_min,
        n_fit,
        privacy,
        centers: centers_f32,
        means,
        sizes,
    })
}

/// Differentially private k-means: rows are clipped to max norm `clip_norm`,
/// and each Lloyd iteration releases per-cluster sums (sensitivity B) and
/// counts (sensitivity 1) through the Gaussian mechanism, with the (eps,
/// delta) budget split evenly over the 2 * iters releases by basic
/// composition. With eps = infinity this delegates to the non-private fit
/// with k_min = 1 (same seed, bit-identical).
pub fn fit_dp_kmeans(
    x: &[f32],
    d: usize,
    m: usize,
    eps: f64,
    delta: f64,
    clip_norm: f64,
    iters: usize,
    seed: u64,
) -> Result<QuantizerModel> {
    if eps.is_infinite() {
        let mut model = fit_kmeans_min_size(x, d, m, 1, x.len() / d, iters, seed)?;
        model.privacy = PrivacyMode::Dp { eps, delta };
        return Ok(model);
    }
    if !(eps > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Invalid(format!(
            "dp k-means requires eps > 0 and delta in (0, 1), got ({eps}, {delta})"
        )));
    }
    let n = x.len() / d;
    if m == 0 || m > n {
        return Err(Error::Invalid(format!("cluster count {m} invalid for {n} rows")));
    }
    let distinct = count_distinct_rows(x, n, d);
    if distinct < m {
        return Err(Error::DuplicateCenterCollapse { m, distinct });
    }
    let releases = 2 * iters.max(1);
    let eps_step = eps / releases as f64;
    let delta_step = delta / releases as f64;
    let sigma_sum = gaussian_sigma(eps_step, delta_step, clip_norm)?;
    let sigma_count = gaussian_sigma(eps_step, delta_step, 1.0)?;
    if !sigma_sum.is_finite() || !sigma_count.is_finite() {
        return Err(Error::Numerical(format!(
            "dp noise scale overflows: sigma_sum = {sigma_sum}"
        )));
    }

    // Clip rows to norm <= clip_norm.
    let mut clipped = vec![0.0f32; x.len()];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        for j in 0..d {
            clipped[i * d + j] = (row[j] as f64 * scale) as f32;
        }
    }

    let mut stream = rng::stream(seed, rng::STAGE_QUANTIZE);
    let mut index: Vec<usize> = (0..n).collect();
    index.shuffle(&mut stream);
    index.sort_unstable();
    let rows = to_f64_rows(&clipped, d, &index);
    let noise = NoiseCfg {
        sigma_sum,
        sigma_count,
    };
    let centers = lloyd(&rows, m, 1, iters.max(1), Some(&noise), &mut stream);

    // The released model is the noisy centers; re-deriving exact means would
    // leak, so means = centers and sizes come from one extra noisy count
    // release folded into the same budget split.
    let centers_f32: Vec<f32> = centers
        .iter()
        .flat_map(|c| c.iter().map(|&v| v as f32))
        .collect();
    let (assign, _) = assign_nearest(&rows, &centers);
    let mut sizes = vec![0u64; m];
    for &a in &assign {
        sizes[a] += 1;
    }
    let count_noise = Normal::new(0.0, sigma_count).unwrap();
    for s in &mut sizes {
        let noisy = *s as f64 + count_noise.sample(&mut stream);
        *s = noisy.max(0.0).round() as u64;
    }
    Ok(QuantizerModel {
        m,
        d,
        k_min: 1,
        n_fit: n,
        privacy: PrivacyMode::Dp { eps, delta },
        centers: centers_f32.clone(),
        means: centers_f32,
        sizes,
    })
}

// ---------------------------------------------------------------------------
// Quantize / de-quantize / materialize.
// ---------------------------------------------------------------------------

/// Maps a computation graph to its token sequence: zero rows become the null
/// token, every other row its nearest cluster id.
pub fn quantize(cg: &EncodedComputationGraph, q: &QuantizerModel) -> Result<TokenSequence> {
    if cg.d != q.d {
        return Err(Error::Invalid(format!(
            "feature dim mismatch: graph {} vs quantizer {}",
            cg.d, q.d
        )));
    }
    let t_total = cg.shape.node_count();
    let mut tokens = Vec::with_capacity(t_total);
    for t in 0..t_total {
        if cg.is_null(t) {
            tokens.push(q.null_token());
        } else {
            tokens.push(q.nearest(cg.row(t)));
        }
    }
    Ok(TokenSequence {
        tokens,
        root_label: cg.root_label,
    })
}

/// Reverses [`quantize`]: null tokens become zero rows, id c the cluster
/// mean. The result carries no source node.
pub fn dequantize(
    ts: &TokenSequence,
    q: &QuantizerModel,
    shape: TreeShape,
) -> Result<EncodedComputationGraph> {
    if ts.tokens.len() != shape.node_count() {
        return Err(Error::Invalid(format!(
            "token count {} does not match shape T = {}",
            ts.tokens.len(),
            shape.node_count()
        )));
    }
    let mut rows = vec![0.0f32; shape.node_count() * q.d];
    for (t, &tok) in ts.tokens.iter().enumerate() {
        if tok == q.null_token() {
            continue;
        }
        if tok as usize >= q.m {
            return Err(Error::Invalid(format!("token {tok} out of range for m = {}", q.m)));
        }
        rows[t * q.d..(t + 1) * q.d].copy_from_slice(q.mean_row(tok as usize));
    }
    Ok(EncodedComputationGraph {
        shape,
        d: q.d,
        rows,
        root_label: ts.root_label,
        source_node: None,
    })
}

/// One neighbor draw: the drawing node, the cluster it sampled from its
/// cluster's edge distribution, and the uniform member picked inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NeighborDraw {
    node: u32,
    picked_cluster: u32,
    member: u32,
}

fn sample_neighbor_draws(
    cluster_edge_dist: &[f64],
    m: usize,
    members: &[Vec<u32>],
    node_to_cluster: &[u32],
    s: usize,
    stream: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<NeighborDraw>> {
    let mut draws = Vec::with_capacity(node_to_cluster.len() * s);
    for (v, &c) in node_to_cluster.iter().enumerate() {
        let row = &cluster_edge_dist[c as usize * m..(c as usize + 1) * m];
        for _ in 0..s {
            let mut target = stream.random_range(0.0..1.0f64);
            let mut pick = m - 1;
            for (j, &w) in row.iter().enumerate() {
                if target < w {
                    pick = j;
                    break;
                }
                target -= w;
            }
            if members[pick].is_empty() {
                return Err(Error::Invalid(format!(
                    "sampled empty cluster {pick}; every positive-probability cluster needs members"
                )));
            }
            let member = members[pick][stream.random_range(0..members[pick].len())];
            draws.push(NeighborDraw {
                node: v as u32,
                picked_cluster: pick as u32,
                member,
            });
        }
    }
    Ok(draws)
}

/// Materializes a whole graph from cluster structure: every node takes its
/// cluster's mean feature, then samples s clusters with replacement from its
/// cluster's edge distribution and one uniform member of each sampled
/// cluster as a neighbor. Node labels carry the cluster id (C = m).
pub fn materialize_graph(
    q: &QuantizerModel,
    cluster_edge_dist: &[f64],
    node_to_cluster: &[u32],
    s: usize,
    seed: u64,
) -> Result<Graph> {
    let m = q.m;
    if cluster_edge_dist.len() != m * m {
        return Err(Error::Invalid("edge distribution must be m x m".into()));
    }
    for c in 0..m {
        let row_sum: f64 = cluster_edge_dist[c * m..(c + 1) * m].iter().sum();
        if (row_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "edge distribution row {c} sums to {row_sum}, expected 1"
            )));
        }
    }
    let n = node_to_cluster.len();
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); m];
    for (v, &c) in node_to_cluster.iter().enumerate() {
        if c as usize >= m {
            return Err(Error::Invalid(format!("cluster id {c} out of range")));
        }
        members[c as usize].push(v as u32);
    }

    let mut features = vec![0.0f32; n * q.d];
    for (v, &c) in node_to_cluster.iter().enumerate() {
        features[v * q.d..(v + 1) * q.d].copy_from_slice(q.mean_row(c as usize));
    }
    let labels: Vec<u32> = node_to_cluster.to_vec();

    let mut stream = rng::stream(seed, rng::STAGE_GENERATE);
    let draws = sample_neighbor_draws(cluster_edge_dist, m, &members, node_to_cluster, s, &mut stream)?;
    let edges: Vec<(u32, u32)> = draws.iter().map(|d| (d.node, d.member)).collect();
    let (graph, _) = Graph::from_parts(features, q.d, labels, &edges)?;
    Ok(graph)
}

// ---------------------------------------------------------------------------
// quantizer.bin: magic "CGQZ", u32 version, u32 m, u32 d, u32 k_min,
// u64 n_fit, u8 privacy tag (+ params), then centers, means (LE f32) and
// sizes (LE u64).
// ---------------------------------------------------------------------------

const QZ_MAGIC: &[u8; 4] = b"CGQZ";
const QZ_VERSION: u32 = 1;

pub fn write_quantizer<W: Write>(mut w: W, q: &QuantizerModel) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(format!("quantizer write failed: {e}"));
    w.write_all(QZ_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(QZ_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(q.m as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(q.d as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(q.k_min as u32).map_err(io)?;
    w.write_u64::<LittleEndian>(q.n_fit as u64).map_err(io)?;
    match q.privacy {
        PrivacyMode::None => w.write_u8(0).map_err(io)?,
        PrivacyMode::KAnonymous { k } => {
            w.write_u8(1).map_err(io)?;
            w.write_u32::<LittleEndian>(k).map_err(io)?;
        }
        PrivacyMode::Dp { eps, delta } => {
            w.write_u8(2).map_err(io)?;
            w.write_f64::<LittleEndian>(eps).map_err(io)?;
            w.write_f64::<LittleEndian>(delta).map_err(io)?;
        }
    }
    for &v in q.centers.iter().chain(q.means.iter()) {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    for &v in &q.sizes {
        w.write_u64::<LittleEndian>(v).map_err(io)?;
    }
    Ok(())
}

pub fn read_quantizer<R: Read>(mut r: R) -> Result<QuantizerModel> {
    let bad = |msg: &str| Error::Format(format!("quantizer.bin: {msg}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != QZ_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != QZ_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let m = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let k_min = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let n_fit = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    if m == 0 || d == 0 || m > (1 << 24) || d > (1 << 24) || m * d > (1 << 28) {
        return Err(bad("implausible dimensions"));
    }
    let privacy = match r.read_u8().map_err(|_| bad("truncated header"))? {
        0 => PrivacyMode::None,
        1 => PrivacyMode::KAnonymous {
            k: r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?,
        },
        2 => PrivacyMode::Dp {
            eps: r.read_f64::<LittleEndian>().map_err(|_| bad("truncated header"))?,
            delta: r.read_f64::<LittleEndian>().map_err(|_| bad("truncated header"))?,
        },
        tag => return Err(bad(&format!("unknown privacy tag {tag}"))),
    };
    let mut centers = vec![0.0f32; m * d];
    for v in &mut centers {
        *v = r.read_f32::<LittleEndian>().map_err(|_| bad("truncated centers"))?;
    }
    let mut means = vec![0.0f32; m * d];
    for v in &mut means {
        *v = r.read_f32::<LittleEndian>().map_err(|_| bad("truncated means"))?;
    }
    if centers.iter().chain(means.iter()).any(|v| !v.is_finite()) {
        return Err(bad("non-finite value"));
    }
    let mut sizes = vec![0u64; m];
    for v in &mut sizes {
        *v = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated sizes"))?;
    }
    let mut probe = [0u8; 1];
    if matches!(r.read(&mut probe), Ok(nread) if nread > 0) {
        return Err(bad("trailing bytes"));
    }
    Ok(QuantizerModel {
        m,
        d,
        k_min,
        n_fit,
        privacy,
        centers,
        means,
        sizes,
    })
}

pub fn save_quantizer(path: &Path, q: &QuantizerModel) -> Result<()> {
    let mut buf = Vec::new();
    write_quantizer(&mut buf, q)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_quantizer(path: &Path) -> Result<QuantizerModel> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_quantizer(&bytes[..])
}

// ---------------------------------------------------------------------------
// tokens.tsv: one sequence per line, `label<TAB>t1,t2,...,tT`.
// ---------------------------------------------------------------------------

pub fn write_tokens_tsv<W: Write>(mut w: W, sequences: &[TokenSequence]) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(format!("tokens write failed: {e}"));
    for seq in sequences {
        let ids: Vec<String> = seq.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}\t{}", seq.root_label, ids.join(",")).map_err(io)?;
    }
    Ok(())
}

pub fn parse_tokens_tsv(bytes: &[u8]) -> Result<Vec<TokenSequence>> {
    let bad = |line: usize, msg: String| Error::Parse {
        path: "tokens.tsv".into(),
        line,
        msg,
    };
    let text =
        std::str::from_utf8(bytes).map_err(|_| bad(0, "file is not valid UTF-8".into()))?;
    let mut sequences = Vec::new();
    let mut expected_len = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (label, ids) = line
            .split_once('\t')
            .ok_or_else(|| bad(idx + 1, "expected label<TAB>ids".into()))?;
        let root_label: u32 = label
            .parse()
            .map_err(|_| bad(idx + 1, format!("bad label {label:?}")))?;
        let tokens: Vec<u32> = ids
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|_| bad(idx + 1, format!("bad token {t:?}")))
            })
            .collect::<Result<_>>()?;
        if tokens.is_empty() {
            return Err(bad(idx + 1, "empty token list".into()));
        }
        match expected_len {
            None => expected_len = Some(tokens.len()),
            Some(len) if len != tokens.len() => {
                return Err(bad(idx + 1, "inconsistent sequence length".into()));
            }
            _ => {}
        }
        sequences.push(TokenSequence { tokens, root_label });
    }
    Ok(sequences)
}

pub fn save_tokens(path: &Path, sequences: &[TokenSequence]) -> Result<()> {
    let mut buf = Vec::new();
    write_tokens_tsv(&mut buf, sequences)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tokens(path: &Path) -> Result<Vec<TokenSequence>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tokens_tsv(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TreeShape;

    fn blob_data(seed: u64) -> (Vec<f32>, usize) {
        // Two well-separated 2-D blobs of 40 points each.
        let mut stream = rng::stream(seed, 1);
        let mut x = Vec::new();
        for i in 0..80 {
            let (cx, cy) = if i < 40 { (0.0, 0.0) } else { (10.0, 10.0) };
            x.push(cx + stream.random_range(-0.5..0.5) as f32);
            x.push(cy + stream.random_range(-0.5..0.5) as f32);
        }
        (x, 2)
    }

    #[test]
    fn singleton_clusters_reach_zero_objective() {
        // k_min = 1, m = n with distinct rows: every point its own cluster.
        let x: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let q = fit_kmeans_min_size(&x, 2, 6, 1, 6, 50, 3).unwrap();
        assert_eq!(q.sizes.iter().sum::<u64>(), 6);
        assert!(q.sizes.iter().all(|&s| s == 1));
        // Each mean coincides with a data row.
        for c in 0..q.m {
            let mean = q.mean_row(c);
            let found = (0..6).any(|i| &x[i * 2..i * 2 + 2] == mean);
            assert!(found);
        }
    }

    #[test]
    fn two_blob_constrained_fit_recovers_blob_means() {
        let (x, d) = blob_data(5);
        let q = fit_kmeans_min_size(&x, d, 2, 30, 80, 40, 7).unwrap();
        let mut sizes = q.sizes.clone();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![40, 40]);
        // Closed-form blob means per assignment side.
        for c in 0..2 {
            let mean = q.mean_row(c);
            let low = mean[0] < 5.0;
            let (mut mx, mut my, mut cnt) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..80 {
                let row = &x[i * d..(i + 1) * d];
                if (row[0] < 5.0) == low {
                    mx += row[0] as f64;
                    my += row[1] as f64;
                    cnt += 1.0;
                }
            }
            assert!((mean[0] as f64 - mx / cnt).abs() < 1e-6);
            assert!((mean[1] as f64 - my / cnt).abs() < 1e-6);
        }
    }

    #[test]
    fn min_size_constraint_is_enforced() {
        let mut stream = rng::stream(11, 2);
        let n = 200;
        let x: Vec<f32> = (0..n * 3).map(|_| stream.random_range(-1.0..1.0)).collect();
        for k_min in [5usize, 20, 40] {
            let m = n / k_min / 2;
            let q = fit_kmeans_min_size(&x, 3, m, k_min, n, 20, 13).unwrap();
            assert!(q.sizes.iter().all(|&s| s >= k_min as u64), "k_min={k_min}");
            assert_eq!(q.sizes.iter().sum::<u64>(), n as u64);
        }
    }

    #[test]
    fn infeasible_and_collapse_errors() {
        let x = vec![0.0f32; 20];
        assert!(matches!(
            fit_kmeans_min_size(&x, 2, 6, 2, 10, 5, 1),
            Err(Error::InfeasibleClustering { .. })
        ));
        // 10 identical rows cannot seed 3 distinct centers.
        assert!(matches!(
            fit_kmeans_min_size(&x, 2, 3, 1, 10, 5, 1),
            Err(Error::DuplicateCenterCollapse { .. })
        ));
    }

    #[test]
    fn dp_infinite_eps_matches_vanilla_bitwise() {
        let (x, d) = blob_data(9);
        let plain = fit_kmeans_min_size(&x, d, 4, 1, 80, 15, 21).unwrap();
        let dp = fit_dp_kmeans(&x, d, 4, f64::INFINITY, 0.01, 1.0, 15, 21).unwrap();
        assert_eq!(plain.centers, dp.centers);
        assert_eq!(plain.means, dp.means);
        assert_eq!(plain.sizes, dp.sizes);
        assert_eq!(dp.privacy, PrivacyMode::Dp { eps: f64::INFINITY, delta: 0.01 });
    }

    #[test]
    fn dp_single_cluster_noise_scale() {
        // m = 1, one iteration: center = (sum + N(0, sigma))/max(count + N, 1).
        // Zero-mean data keeps the count-noise term negligible, so the
        // center coordinate std approaches sigma_sum / n.
        let n = 512;
        let d = 1;
        let mut stream = rng::stream(3, 4);
        let x: Vec<f32> = (0..n)
            .map(|i| if i % 2 == 0 { 0.9 } else { -0.9 } + stream.random_range(-0.05..0.05))
            .collect();
        let eps = 2.0;
        let delta = 0.01;
        let iters = 1;
        let sigma = gaussian_sigma(eps / 2.0, delta / 2.0, 1.0).unwrap();
        let mut centers = Vec::new();
        for trial in 0..1000 {
            let q = fit_dp_kmeans(&x, d, 1, eps, delta, 1.0, iters, 1000 + trial).unwrap();
            centers.push(q.centers[0] as f64);
        }
        let mean = centers.iter().sum::<f64>() / centers.len() as f64;
        let var = centers.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>()
            / (centers.len() - 1) as f64;
        let expect = sigma / n as f64;
        let ratio = var.sqrt() / expect;
        assert!((0.9..1.1).contains(&ratio), "std ratio {ratio}");
    }

    #[test]
    fn quantize_matches_linear_scan_oracle() {
        let (x, d) = blob_data(31);
        let q = fit_kmeans_min_size(&x, d, 8, 1, 80, 20, 5).unwrap();
        let shape = TreeShape::new(2, 2).unwrap();
        let mut stream = rng::stream(77, 8);
        let mut rows = vec![0.0f32; shape.node_count() * d];
        for v in rows.iter_mut().skip(d) {
            *v = stream.random_range(-2.0..12.0);
        }
        // Root row nonzero, slot 1 left as an explicit null row.
        rows[0] = 1.0;
        rows[1] = 1.0;
        for v in rows[d..2 * d].iter_mut() {
            *v = 0.0;
        }
        let cg = EncodedComputationGraph {
            shape,
            d,
            rows,
            root_label: 0,
            source_node: None,
        };
        let ts = quantize(&cg, &q).unwrap();
        assert_eq!(ts.tokens[1], q.null_token());
        for t in 0..shape.node_count() {
            if t == 1 {
                continue;
            }
            // Brute-force nearest-neighbor oracle with lowest-id ties.
            let row = cg.row(t);
            let mut best = 0u32;
            let mut best_dist = f64::INFINITY;
            for c in 0..q.m {
                let mean = q.mean_row(c);
                let dist: f64 = row
                    .iter()
                    .zip(mean)
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = c as u32;
                }
            }
            assert_eq!(ts.tokens[t], best, "slot {t}");
        }
    }

    #[test]
    fn row_equal_to_center_maps_exactly() {
        let (x, d) = blob_data(2);
        let q = fit_kmeans_min_size(&x, d, 4, 1, 80, 20, 5).unwrap();
        let shape = TreeShape::new(1, 1).unwrap();
        for c in 0..q.m {
            let mut rows = q.mean_row(c).to_vec();
            rows.extend_from_slice(q.mean_row(c));
            let cg = EncodedComputationGraph {
                shape,
                d,
                rows,
                root_label: 0,
                source_node: None,
            };
            let ts = quantize(&cg, &q).unwrap();
            assert_eq!(ts.tokens[0], c as u32);
        }
    }

    #[test]
    fn quantize_dequantize_idempotent_on_token_space() {
        let (x, d) = blob_data(15);
        let q = fit_kmeans_min_size(&x, d, 5, 10, 80, 25, 3).unwrap();
        let shape = TreeShape::new(2, 2).unwrap();
        let mut stream = rng::stream(4, 4);
        let mut rows = vec![0.0f32; shape.node_count() * d];
        for v in rows.iter_mut() {
            *v = stream.random_range(-1.0..11.0);
        }
        let cg = EncodedComputationGraph {
            shape,
            d,
            rows,
            root_label: 2,
            source_node: None,
        };
        let ts = quantize(&cg, &q).unwrap();
        let decoded = dequantize(&ts, &q, shape).unwrap();
        assert_eq!(decoded.root_label, 2);
        assert_eq!(decoded.source_node, None);
        let ts2 = quantize(&decoded, &q).unwrap();
        assert_eq!(ts.tokens, ts2.tokens);
        // Every emitted non-zero row equals one of the m means, and under a
        // k_min-respecting model each is backed by >= k nodes.
        for t in 0..shape.node_count() {
            if decoded.is_null(t) {
                continue;
            }
            let c = ts.tokens[t] as usize;
            assert_eq!(decoded.row(t), q.mean_row(c));
            assert!(q.sizes[c] >= 10);
        }
    }

    #[test]
    fn dequantize_null_tail() {
        let (x, d) = blob_data(1);
        let q = fit_kmeans_min_size(&x, d, 3, 1, 80, 10, 1).unwrap();
        let shape = TreeShape::new(2, 1).unwrap();
        let ts = TokenSequence {
            tokens: vec![1, q.null_token(), q.null_token()],
            root_label: 4,
        };
        let cg = dequantize(&ts, &q, shape).unwrap();
        assert_eq!(cg.row(0), q.mean_row(1));
        assert!(cg.is_null(1));
        assert!(cg.is_null(2));
        let bad = TokenSequence {
            tokens: vec![9, 0, 0],
            root_label: 0,
        };
        assert!(dequantize(&bad, &q, shape).is_err());
    }

    #[test]
    fn materialize_single_cluster() {
        let (x, d) = blob_data(6);
        let q = fit_kmeans_min_size(&x, d, 1, 1, 80, 5, 2).unwrap();
        let assignment = vec![0u32; 50];
        let g = materialize_graph(&q, &[1.0], &assignment, 3, 9).unwrap();
        assert_eq!(g.node_count(), 50);
        for v in 0..50u32 {
            assert_eq!(g.feature_row(v), q.mean_row(0));
        }
        assert!(g.edge_count() > 0);
    }

    #[test]
    fn materialize_block_structure() {
        let (x, d) = blob_data(8);
        let q = fit_kmeans_min_size(&x, d, 2, 30, 80, 30, 2).unwrap();
        let assignment: Vec<u32> = (0..60).map(|i| (i % 2) as u32).collect();
        let dist = vec![1.0, 0.0, 0.0, 1.0];
        let g = materialize_graph(&q, &dist, &assignment, 2, 3).unwrap();
        // Identity edge distribution keeps communities disconnected.
        for (u, v) in g.edges() {
            assert_eq!(assignment[u as usize], assignment[v as usize]);
        }
    }

    #[test]
    fn materialize_frequencies_match_distribution() {
        let n = 100usize;
        let s = 8usize;
        let m = 4usize;
        let assignment: Vec<u32> = (0..n).map(|i| (i % m) as u32).collect();
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); m];
        for (v, &c) in assignment.iter().enumerate() {
            members[c as usize].push(v as u32);
        }
        let mut stream = rng::stream(5, 6);
        let mut dist = vec![0.0f64; m * m];
        for c in 0..m {
            let mut row: Vec<f64> = (0..m).map(|_| stream.random_range(0.05..1.0)).collect();
            let total: f64 = row.iter().sum();
            for v in &mut row {
                *v /= total;
            }
            dist[c * m..(c + 1) * m].copy_from_slice(&row);
        }
        let mut draw_stream = rng::stream(77, rng::STAGE_GENERATE);
        let draws =
            sample_neighbor_draws(&dist, m, &members, &assignment, s, &mut draw_stream).unwrap();
        assert_eq!(draws.len(), n * s);
        // Empirical sampled-cluster frequencies within 3 sigma of each row.
        let per_cluster = (n / m * s) as f64;
        let mut counts = vec![0.0f64; m * m];
        for draw in &draws {
            let c = assignment[draw.node as usize] as usize;
            counts[c * m + draw.picked_cluster as usize] += 1.0;
            // Members come from the picked cluster.
            assert_eq!(
                assignment[draw.member as usize],
                draw.picked_cluster,
                "member must belong to the sampled cluster"
            );
        }
        for c in 0..m {
            for j in 0..m {
                let p = dist[c * m + j];
                let freq = counts[c * m + j] / per_cluster;
                let sigma = (p * (1.0 - p) / per_cluster).sqrt();
                assert!(
                    (freq - p).abs() <= 3.0 * sigma + 1e-9,
                    "cluster {c} target {j}: freq {freq} vs p {p}"
                );
            }
        }
    }

    #[test]
    fn quantizer_round_trip() {
        let (x, d) = blob_data(20);
        for privacy_seed in 0..2u64 {
            let q = if privacy_seed == 0 {
                fit_kmeans_min_size(&x, d, 4, 10, 80, 10, 3).unwrap()
            } else {
                fit_dp_kmeans(&x, d, 3, 5.0, 0.01, 1.0, 4, 3).unwrap()
            };
            let mut buf = Vec::new();
            write_quantizer(&mut buf, &q).unwrap();
            let back = read_quantizer(&buf[..]).unwrap();
            assert_eq!(q, back);
        }
    }

    #[test]
    fn tokens_round_trip_and_validation() {
        let sequences = vec![
            TokenSequence {
                tokens: vec![0, 3, 2],
                root_label: 1,
            },
            TokenSequence {
                tokens: vec![1, 1, 4],
                root_label: 0,
            },
        ];
        let mut buf = Vec::new();
        write_tokens_tsv(&mut buf, &sequences).unwrap();
        assert_eq!(parse_tokens_tsv(&buf).unwrap(), sequences);
        assert!(parse_tokens_tsv(b"1\t0,1\n2\t0\n").is_err());
        assert!(parse_tokens_tsv(b"x\t0,1\n").is_err());
    }
}
