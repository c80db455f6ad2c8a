//! Worker shards: pool reservation, class-skewed dealing and synthetic mixing.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Label skew of the worker shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skew {
    /// Uniformly shuffled samples dealt round-robin.
    Iid,
    /// Every worker holds exactly this many distinct classes.
    Classes(usize),
}

impl Skew {
    pub fn name(&self) -> String {
        match self {
            Skew::Iid => "iid".into(),
            Skew::Classes(k) => format!("{k}-class"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerShard {
    pub worker: usize,
    pub edge: usize,
    /// Indices into the real training set.
    pub local: Vec<usize>,
    /// Indices into the synthetic pool.
    pub synthetic: Vec<usize>,
}

impl WorkerShard {
    fn new(worker: usize, local: Vec<usize>) -> Self {
        WorkerShard {
            worker,
            edge: 0,
            local,
            synthetic: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.local.len() + self.synthetic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct labels among the local samples, ascending.
    pub fn classes(&self, train: &Dataset) -> Vec<usize> {
        let h = self.local_histogram(train);
        (0..h.len()).filter(|&c| h[c] > 0).collect()
    }

    pub fn local_histogram(&self, train: &Dataset) -> Vec<usize> {
        let mut h = vec![0; train.classes()];
        for &i in &self.local {
            h[train.label(i)] += 1;
        }
        h
    }

    /// Most frequent local label; ties go to the lower label.
    pub fn dominant_class(&self, train: &Dataset) -> usize {
        let h = self.local_histogram(train);
        let mut best = 0;
        for (c, &n) in h.iter().enumerate() {
            if n > h[best] {
                best = c;
            }
        }
        best
    }

    /// Label histogram of the mixed (local + synthetic) shard.
    pub fn mixed_histogram(&self, train: &Dataset, pool: &SyntheticPool) -> Vec<usize> {
        let mut h = self.local_histogram(train);
        for &i in &self.synthetic {
            h[pool.data.label(i)] += 1;
        }
        h
    }
}

/// Per-class quotas summing to `total`, the first `total % classes` classes
/// taking one extra sample.
fn balanced_quotas(total: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| total / classes + usize::from(c < total % classes))
        .collect()
}

fn shuffled_class_indices(train: &Dataset, exclude: &[usize], seed: u64, tag: &str) -> Vec<Vec<usize>> {
    let mut skip = vec![false; train.len()];
    for &i in exclude {
        skip[i] = true;
    }
    let mut by = train.indices_by_class();
    for (c, idx) in by.iter_mut().enumerate() {
        idx.retain(|&i| !skip[i]);
        idx.shuffle(&mut seed::rng(seed::derive_tagged(seed, tag, c as u64)));
    }
    by
}

fn take_quotas(by_class: &[Vec<usize>], quotas: &[usize], what: &str) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(quotas.iter().sum());
    for (c, (idx, &q)) in by_class.iter().zip(quotas).enumerate() {
        if idx.len() < q {
            return Err(Error::Config(format!(
                "{what}: class {c} has {} samples available, {q} required",
                idx.len()
            )));
        }
        out.extend_from_slice(&idx[..q]);
    }
    Ok(out)
}

/// Class-balanced random slice of the training set set aside for the
/// synthetic pool, in class-major order.
pub fn reserve_pool(train: &Dataset, pool_fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(pool_fraction > 0.0 && pool_fraction <= 0.2) {
        return Err(Error::Config(format!("pool_fraction must lie in (0, 0.2], got {pool_fraction}")));
    }
    let size = (pool_fraction * train.len() as f64).round() as usize;
    if size == 0 {
        return Err(Error::Config("synthetic pool would be empty".into()));
    }
    let by = shuffled_class_indices(train, &[], seed, "pool");
    take_quotas(&by, &balanced_quotas(size, train.classes()), "synthetic pool")
}

/// Surrogate synthetic dataset: reserved real samples with Gaussian pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPool {
    pub data: Dataset,
    /// Training-set index each pool sample was derived from.
    pub source_indices: Vec<usize>,
}

impl SyntheticPool {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn build_synthetic_pool(train: &Dataset, reserved: &[usize], noise_sigma: f64, seed: u64) -> Result<SyntheticPool> {
    if reserved.is_empty() {
        return Err(Error::Config("synthetic pool needs at least one reserved sample".into()));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let mut data = train.subset(reserved);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, noise_sigma as f32).expect("finite sigma");
        let mut rng = seed::rng(seed::derive_tagged(seed, "noise", 0));
        for p in data.images_mut() {
            *p = (*p + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(SyntheticPool {
        data,
        source_indices: reserved.to_vec(),
    })
}

/// Class-balanced random training subset disjoint from `reserved`, in
/// class-major order. `None` takes the largest balanced subset available.
pub fn select_balanced(train: &Dataset, reserved: &[usize], size: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    let by = shuffled_class_indices(train, reserved, seed, "subset");
    let quotas = match size {
        Some(n) => balanced_quotas(n, train.classes()),
        None => {
            let m = by.iter().map(Vec::len).min().unwrap_or(0);
            vec![m; train.classes()]
        }
    };
    let out = take_quotas(&by, &quotas, "training subset")?;
    if out.is_empty() {
        return Err(Error::Config("training subset is empty".into()));
    }
    Ok(out)
}

/// Deals `selected` training indices to `workers` shards.
///
/// With `Skew::Classes(k)` every class is cut into `workers * k / C`
/// contiguous blocks; blocks are listed class by class and worker `j` takes
/// blocks `j, j + workers, ..., j + (k - 1) * workers`, which always come from
/// `k` distinct classes.
pub fn partition_workers(train: &Dataset, selected: &[usize], skew: Skew, workers: usize, seed: u64) -> Result<Vec<WorkerShard>> {
    if workers == 0 {
        return Err(Error::Config("workers must be positive".into()));
    }
    if selected.len() < workers {
        return Err(Error::Config(format!(
            "{} training samples cannot fill {workers} workers",
            selected.len()
        )));
    }
    match skew {
        Skew::Iid => {
            let mut order = selected.to_vec();
            order.shuffle(&mut seed::rng(seed::derive_tagged(seed, "iid", 0)));
            Ok((0..workers)
                .map(|j| WorkerShard::new(j, order.iter().skip(j).step_by(workers).copied().collect()))
                .collect())
        }
        Skew::Classes(k) => {
            let c = train.classes();
            if k == 0 || k > c {
                return Err(Error::Config(format!("classes_per_worker must lie in 1..={c}, got {k}")));
            }
            if !(workers * k).is_multiple_of(c) {
                return Err(Error::Config(format!(
                    "workers * classes_per_worker = {} must be a multiple of the class count {c}",
                    workers * k
                )));
            }
            let per_class = workers * k / c;
            let mut by = vec![Vec::new(); c];
            for &i in selected {
                by[train.label(i)].push(i);
            }
            let mut blocks = Vec::with_capacity(workers * k);
            for (cls, idx) in by.iter().enumerate() {
                if idx.len() < per_class {
                    return Err(Error::Config(format!(
                        "class {cls} has {} samples, fewer than its {per_class} blocks",
                        idx.len()
                    )));
                }
                for b in 0..per_class {
                    blocks.push(idx[b * idx.len() / per_class..(b + 1) * idx.len() / per_class].to_vec());
                }
            }
            Ok((0..workers)
                .map(|j| {
                    let local = (0..k).flat_map(|t| blocks[j + t * workers].iter().copied()).collect();
                    WorkerShard::new(j, local)
                })
                .collect())
        }
    }
}

/// Synthetic samples added to a shard of `local` real samples so the mixed
/// shard's synthetic fraction does not exceed `rho`.
pub fn synthetic_count(rho: f64, local: usize) -> usize {
    if rho <= 0.0 {
        return 0;
    }
    (rho * local as f64 / (1.0 - rho) + 1e-9).floor() as usize
}

/// Appends class-balanced, mutually disjoint pool draws to every shard.
///
/// Each worker cycles through the classes starting just after its dominant
/// local class, taking the next unused pool sample of each class.
pub fn mix_synthetic(shards: &mut [WorkerShard], train: &Dataset, pool: &SyntheticPool, rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("synthetic fraction must lie in [0, 1), got {rho}")));
    }
    let needed: usize = shards.iter().map(|s| synthetic_count(rho, s.local.len())).sum();
    if needed > pool.len() {
        return Err(Error::Config(format!(
            "synthetic pool exhausted: workers need {needed} samples at fraction {rho}, pool holds {}",
            pool.len()
        )));
    }
    let queues = pool.data.indices_by_class();
    let classes = queues.len();
    let mut next = vec![0usize; classes];
    for s in shards.iter_mut() {
        s.synthetic.clear();
        let want = synthetic_count(rho, s.local.len());
        let mut cls = (s.dominant_class(train) + 1) % classes;
        let mut misses = 0;
        while s.synthetic.len() < want {
            if next[cls] < queues[cls].len() {
                s.synthetic.push(queues[cls][next[cls]]);
                next[cls] += 1;
                misses = 0;
            } else {
                misses += 1;
                if misses == classes {
                    return Err(Error::Config("synthetic pool exhausted".into()));
                }
            }
            cls = (cls + 1) % classes;
        }
    }
    Ok(())
}
