//! Personalized PageRank by power iteration and the PPR-biased split sampler.

use crate::graph::{Graph, SplitSpec};
use crate::rng;
use crate::{Error, Result};
use rand::seq::SliceRandom;

#[derive(Debug, Clone)]
pub struct PprVector {
    pub alpha: f64,
    /// Length-n nonnegative scores summing to 1.
    pub scores: Vec<f64>,
}

/// Row application of the symmetric degree-normalized adjacency with
/// self-loops: out = A_hat * x with A_hat = D^-1/2 (A + I) D^-1/2.
fn normalized_apply(g: &Graph, inv_sqrt_deg: &[f64], x: &[f64], out: &mut [f64]) {
    let n = g.node_count();
    for v in 0..n {
        // Self-loop term.
        let mut acc = inv_sqrt_deg[v] * inv_sqrt_deg[v] * x[v];
        for &u in g.neighbors(v as u32) {
            acc += inv_sqrt_deg[v] * inv_sqrt_deg[u as usize] * x[u as usize];
        }
        out[v] = acc;
    }
}

/// Personalized PageRank scores with restart mass uniform over `seeds`.
///
/// Iterates `pi <- alpha * r + (1 - alpha) * A_hat * pi` until the iterate
/// residual falls below `1e-8 * alpha` (the geometric tail then bounds the
/// distance to the fixed point by ~1e-8), max 10,000 sweeps. The result is
/// normalized to sum 1.
pub fn ppr(g: &Graph, alpha: f64, seeds: &[u32]) -> Result<PprVector> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Invalid(format!("alpha must be in (0, 1], got {alpha}")));
    }
    if seeds.is_empty() {
        return Err(Error::Invalid("ppr requires at least one seed node".into()));
    }
    let n = g.node_count();
    for &s in seeds {
        if s as usize >= n {
            return Err(Error::Invalid(format!("seed node {s} >= n = {n}")));
        }
    }

    let mut restart = vec![0.0f64; n];
    for &s in seeds {
        restart[s as usize] += 1.0 / seeds.len() as f64;
    }
    if alpha == 1.0 {
        return Ok(PprVector {
            alpha,
            scores: restart,
        });
    }

    // Self-loops make every degree positive, so isolated nodes are fine.
    let inv_sqrt_deg: Vec<f64> = (0..n as u32)
        .map(|v| 1.0 / ((g.degree(v) + 1) as f64).sqrt())
        .collect();

    let tol = 1e-8 * alpha;
    let max_iters = 10_000;
    let mut pi = restart.clone();
    let mut next = vec![0.0f64; n];
    for _ in 0..max_iters {
        normalized_apply(g, &inv_sqrt_deg, &pi, &mut next);
        let mut residual = 0.0f64;
        for v in 0..n {
            let updated = alpha * restart[v] + (1.0 - alpha) * next[v];
            residual += (updated - pi[v]).abs();
            pi[v] = updated;
        }
        if residual <= tol {
            let total: f64 = pi.iter().sum();
            for x in &mut pi {
                *x /= total;
            }
            return Ok(PprVector { alpha, scores: pi });
        }
    }
    let residual = {
        normalized_apply(g, &inv_sqrt_deg, &pi, &mut next);
        (0..n)
            .map(|v| (alpha * restart[v] + (1.0 - alpha) * next[v] - pi[v]).abs())
            .sum()
    };
    Err(Error::NoConvergence {
        residual,
        iterations: max_iters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SplitMode {
    /// Uniform split (the "iid" sentinel).
    Iid,
    /// PPR-biased training set with the given restart coefficient.
    PprBiased { alpha: f64 },
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("iid") {
            Ok(SplitMode::Iid)
        } else {
            let alpha: f64 = s
                .parse()
                .map_err(|_| Error::Invalid(format!("bad split mode {s:?}")))?;
            Ok(SplitMode::PprBiased { alpha })
        }
    }
}

/// Train/valid/test split. In `Iid` mode the split is uniform. In biased mode
/// a few seed nodes per class (default 5) are drawn, remaining nodes are
/// ranked by PPR score from those seeds, and the train set is filled with the
/// top-ranked nodes; valid/test are drawn uniformly from the remainder.
pub fn biased_split(
    g: &Graph,
    mode: SplitMode,
    train_fraction: f64,
    valid_fraction: f64,
    seeds_per_class: usize,
    seed: u64,
) -> Result<SplitSpec> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if !(valid_fraction >= 0.0 && train_fraction + valid_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "train + valid fraction must stay below 1, got {}",
            train_fraction + valid_fraction
        )));
    }
    let n = g.node_count();
    let train_target = ((n as f64) * train_fraction).round() as usize;
    let valid_target = ((n as f64) * valid_fraction).round() as usize;
    let mut rng = rng::stream(seed, rng::STAGE_SPLIT);

    let train: Vec<u32> = match mode {
        SplitMode::Iid => {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.shuffle(&mut rng);
            order.truncate(train_target);
            order
        }
        SplitMode::PprBiased { alpha } => {
            // Seed nodes: `seeds_per_class` uniform picks per class.
            let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); g.num_classes()];
            for v in 0..n as u32 {
                by_class[g.label(v) as usize].push(v);
            }
            let mut seeds = Vec::new();
            for (c, members) in by_class.iter().enumerate() {
                if members.is_empty() {
                    return Err(Error::Invalid(format!("class {c} has no nodes")));
                }
                let mut pool = members.clone();
                pool.shuffle(&mut rng);
                pool.truncate(seeds_per_class.min(members.len()));
                seeds.extend(pool);
            }
            seeds.sort_unstable();
            seeds.dedup();

            let scores = ppr(g, alpha, &seeds)?.scores;
            // Rank non-seed nodes by score; ties broken by a seeded shuffle so
            // alpha = 1 (restart-only mass) degenerates to a uniform fill.
            let mut rest: Vec<u32> = (0..n as u32).filter(|v| !seeds.contains(v)).collect();
            rest.shuffle(&mut rng);
            rest.sort_by(|&a, &b| {
                scores[b as usize]
                    .partial_cmp(&scores[a as usize])
                    .unwrap()
            });
            let mut train = seeds;
            train.extend(rest.into_iter().take(train_target.saturating_sub(train.len())));
            train
        }
    };

    let mut in_train = vec![false; n];
    for &v in &train {
        in_train[v as usize] = true;
    }
    let mut rest: Vec<u32> = (0..n as u32).filter(|&v| !in_train[v as usize]).collect();
    rest.shuffle(&mut rng);
    let valid: Vec<u32> = rest.drain(..valid_target.min(rest.len())).collect();
    let spec = SplitSpec {
        train,
        valid,
        test: rest,
        seed,
    };
    spec.validate(n)?;
    Ok(spec)
}
