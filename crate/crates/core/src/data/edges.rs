//! Worker-to-edge assignment and the aggregation weights it induces.

use super::{Dataset, WorkerShard};
use crate::error::{Error, Result};
use crate::game::PopulationState;

#[derive(Debug, Clone, PartialEq)]
pub enum EdgeMode {
    /// Workers sorted by dominant class and dealt round-robin, so every edge
    /// sees every class.
    Iid,
    /// Workers sorted by dominant class and dealt in contiguous runs.
    NonIid,
    /// Contiguous runs sized by largest-remainder rounding of these shares.
    FromEquilibrium(Vec<f64>),
}

impl EdgeMode {
    pub fn name(&self) -> &'static str {
        match self {
            EdgeMode::Iid => "iid",
            EdgeMode::NonIid => "noniid",
            EdgeMode::FromEquilibrium(_) => "from-equilibrium",
        }
    }
}

/// Edge shares implied by an equilibrium: the mean share of each server over
/// the population rows.
pub fn equilibrium_edge_shares(state: &PopulationState) -> Vec<f64> {
    let z = state.populations() as f64;
    (0..state.servers())
        .map(|n| (0..state.populations()).map(|p| state.share(p, n)).sum::<f64>() / z)
        .collect()
}

/// Integer counts summing to `total` proportional to `shares`: floors first,
/// then one extra unit for the largest fractional parts (ties to the lower
/// index).
pub fn largest_remainder(shares: &[f64], total: usize) -> Result<Vec<usize>> {
    if shares.is_empty() || shares.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Config("edge shares must be finite and non-negative".into()));
    }
    let sum: f64 = shares.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("edge shares sum to {sum}, expected 1")));
    }
    let exact: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    // Remainders closer than this count as ties, so 0.31 * 50 and 0.55 * 50
    // compare as the equal halves they are.
    const EPS: f64 = 1e-9;
    let floors: Vec<f64> = exact.iter().map(|e| (e + EPS).floor()).collect();
    let mut counts: Vec<usize> = floors.iter().map(|&f| f as usize).collect();
    let frac: Vec<f64> = exact.iter().zip(&floors).map(|(e, f)| (e - f).max(0.0)).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        if (frac[a] - frac[b]).abs() <= EPS {
            a.cmp(&b)
        } else {
            frac[b].partial_cmp(&frac[a]).unwrap()
        }
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Worker-to-edge map with the sample counts that weight aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLayout {
    edge_of: Vec<usize>,
    worker_sizes: Vec<usize>,
    edge_workers: Vec<Vec<usize>>,
    edge_sizes: Vec<usize>,
    total: usize,
}

impl ClusterLayout {
    /// `edge_of[j]` is worker `j`'s edge; `worker_sizes[j]` its mixed shard size.
    pub fn new(edge_of: Vec<usize>, worker_sizes: Vec<usize>, edges: usize) -> Result<Self> {
        if edge_of.len() != worker_sizes.len() {
            return Err(Error::Argument("edge map and shard sizes differ in length".into()));
        }
        if edges == 0 {
            return Err(Error::Argument("at least one edge is required".into()));
        }
        let mut edge_workers = vec![Vec::new(); edges];
        let mut edge_sizes = vec![0; edges];
        for (j, (&e, &s)) in edge_of.iter().zip(&worker_sizes).enumerate() {
            if e >= edges {
                return Err(Error::Argument(format!("worker {j} assigned to edge {e} of {edges}")));
            }
            if s == 0 {
                return Err(Error::Config(format!("worker {j} has an empty shard")));
            }
            edge_workers[e].push(j);
            edge_sizes[e] += s;
        }
        let total = edge_sizes.iter().sum();
        if total == 0 {
            return Err(Error::Config("layout holds no samples".into()));
        }
        Ok(ClusterLayout {
            edge_of,
            worker_sizes,
            edge_workers,
            edge_sizes,
            total,
        })
    }

    pub fn from_shards(shards: &[WorkerShard], edges: usize) -> Result<Self> {
        Self::new(
            shards.iter().map(|s| s.edge).collect(),
            shards.iter().map(|s| s.len()).collect(),
            edges,
        )
    }

    pub fn workers(&self) -> usize {
        self.edge_of.len()
    }

    pub fn edges(&self) -> usize {
        self.edge_sizes.len()
    }

    pub fn edge_of(&self, worker: usize) -> usize {
        self.edge_of[worker]
    }

    pub fn worker_size(&self, worker: usize) -> usize {
        self.worker_sizes[worker]
    }

    /// Workers of `edge` in ascending id order.
    pub fn edge_workers(&self, edge: usize) -> &[usize] {
        &self.edge_workers[edge]
    }

    pub fn edge_size(&self, edge: usize) -> usize {
        self.edge_sizes[edge]
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Edges that hold at least one worker.
    pub fn active_edges(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.edges()).filter(|&n| !self.edge_workers[n].is_empty())
    }
}

fn sorted_by_dominant(shards: &[WorkerShard], train: &Dataset) -> Vec<usize> {
    let mut order: Vec<(usize, usize)> = shards.iter().map(|s| (s.dominant_class(train), s.worker)).collect();
    order.sort();
    order.into_iter().map(|(_, w)| w).collect()
}

fn deal_runs(order: &[usize], counts: &[usize], shards: &mut [WorkerShard]) {
    let mut it = order.iter();
    for (n, &c) in counts.iter().enumerate() {
        for &w in it.by_ref().take(c) {
            shards[w].edge = n;
        }
    }
}

/// Sets every shard's edge and returns the resulting layout.
pub fn assign_edges(shards: &mut [WorkerShard], train: &Dataset, edges: usize, mode: &EdgeMode) -> Result<ClusterLayout> {
    let j = shards.len();
    if edges == 0 || edges > j {
        return Err(Error::Config(format!("cannot spread {j} workers over {edges} edges")));
    }
    if shards.iter().enumerate().any(|(i, s)| s.worker != i) {
        return Err(Error::Argument("shards must be indexed by worker id".into()));
    }
    let order = sorted_by_dominant(shards, train);
    match mode {
        EdgeMode::Iid => {
            for (p, &w) in order.iter().enumerate() {
                shards[w].edge = p % edges;
            }
            let classes = train.classes();
            for n in 0..edges {
                let mut seen = vec![false; classes];
                for s in shards.iter().filter(|s| s.edge == n) {
                    for c in s.classes(train) {
                        seen[c] = true;
                    }
                }
                let missing: Vec<usize> = (0..classes).filter(|&c| !seen[c]).collect();
                if !missing.is_empty() {
                    return Err(Error::Config(format!(
                        "iid edge mode infeasible with {j} workers on {edges} edges: edge {n} misses classes {missing:?}"
                    )));
                }
            }
        }
        EdgeMode::NonIid => {
            let counts: Vec<usize> = (0..edges).map(|n| j / edges + usize::from(n < j % edges)).collect();
            deal_runs(&order, &counts, shards);
        }
        EdgeMode::FromEquilibrium(shares) => {
            if shares.len() != edges {
                return Err(Error::Config(format!("{} equilibrium shares for {edges} edges", shares.len())));
            }
            let counts = largest_remainder(shares, j)?;
            deal_runs(&order, &counts, shards);
        }
    }
    ClusterLayout::from_shards(shards, edges)
}

/// Total-variation distance between each edge's local-label histogram and the
/// histogram over all workers. Edges without workers report 0.
pub fn edge_class_tv(shards: &[WorkerShard], train: &Dataset, edges: usize) -> Vec<f64> {
    let classes = train.classes();
    let mut per_edge = vec![vec![0usize; classes]; edges];
    let mut global = vec![0usize; classes];
    for s in shards {
        for (c, n) in s.local_histogram(train).into_iter().enumerate() {
            per_edge[s.edge][c] += n;
            global[c] += n;
        }
    }
    let g_total: usize = global.iter().sum();
    per_edge
        .iter()
        .map(|h| {
            let t: usize = h.iter().sum();
            if t == 0 {
                return 0.0;
            }
            0.5 * h
                .iter()
                .zip(&global)
                .map(|(&a, &b)| (a as f64 / t as f64 - b as f64 / g_total as f64).abs())
                .sum::<f64>()
        })
        .collect()
}
