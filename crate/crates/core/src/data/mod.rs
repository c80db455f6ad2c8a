//! Dataset ingestion, non-IID worker partitions, edge assignment and the
//! synthetic-data surrogate pool.

pub mod edges;
pub mod idx;
pub mod partition;

use std::env;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use edges::{assign_edges, edge_class_tv, equilibrium_edge_shares, largest_remainder, ClusterLayout, EdgeMode};
pub use partition::{
    build_synthetic_pool, mix_synthetic, partition_workers, reserve_pool, select_balanced, synthetic_count, Skew,
    SyntheticPool, WorkerShard,
};

/// Environment variable naming the directory that holds the MNIST IDX files.
pub const DATA_ENV: &str = "SYNTHHFL_DATA";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

pub const MNIST_CLASSES: usize = 10;
pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Labelled samples stored sample-major, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u8>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || images.len() != labels.len() * dim {
            return Err(Error::Validation(format!(
                "{} pixel values do not form {} samples of dimension {dim}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Validation(format!("label {l} outside 0..{classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Sample indices grouped by class, ascending within each class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l as usize].push(i);
        }
        by
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            classes: self.classes,
        }
    }

    pub(crate) fn images_mut(&mut self) -> &mut [f32] {
        &mut self.images
    }
}

/// Dataset root: explicit override, else `$SYNTHHFL_DATA`, else `data/mnist`.
pub fn dataset_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match env::var_os(DATA_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_DATA_DIR),
    }
}

/// MNIST `(train, test)` from the four IDX files under `root`.
pub fn load_mnist(root: &Path) -> Result<(Dataset, Dataset)> {
    let train = idx::load_idx(&root.join(MNIST_TRAIN_IMAGES), &root.join(MNIST_TRAIN_LABELS), MNIST_CLASSES)?;
    let test = idx::load_idx(&root.join(MNIST_TEST_IMAGES), &root.join(MNIST_TEST_LABELS), MNIST_CLASSES)?;
    Ok((train, test))
}

/// How the training set is split across workers and edges.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub skew: Skew,
    pub workers: usize,
    pub edges: usize,
    pub edge_mode: EdgeMode,
    /// Target synthetic fraction of every worker's mixed shard.
    pub synthetic_fraction: f64,
    /// Fraction of the training set reserved for the synthetic pool.
    pub pool_fraction: f64,
    pub noise_sigma: f64,
    /// Class-balanced number of real samples dealt to workers; `None` uses the
    /// largest class-balanced subset of the non-reserved samples.
    pub train_subset: Option<usize>,
    pub rng_seed: u64,
}

pub const DEFAULT_WORKERS: usize = 50;
pub const DEFAULT_EDGES: usize = 3;
pub const DEFAULT_POOL_FRACTION: f64 = 0.1;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
pub const MAX_SYNTHETIC_FRACTION: f64 = 0.25;

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            skew: Skew::Classes(1),
            workers: DEFAULT_WORKERS,
            edges: DEFAULT_EDGES,
            edge_mode: EdgeMode::NonIid,
            synthetic_fraction: 0.0,
            pool_fraction: DEFAULT_POOL_FRACTION,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            train_subset: None,
            rng_seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if self.edges == 0 || self.edges > self.workers {
            return Err(Error::Config(format!(
                "edges must lie in 1..={} (one worker per edge at least), got {}",
                self.workers, self.edges
            )));
        }
        if !(0.0..=MAX_SYNTHETIC_FRACTION).contains(&self.synthetic_fraction) {
            return Err(Error::Config(format!(
                "synthetic_fraction must lie in [0, {MAX_SYNTHETIC_FRACTION}], got {}",
                self.synthetic_fraction
            )));
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 0.2) {
            return Err(Error::Config(format!(
                "pool_fraction must lie in (0, 0.2], got {}",
                self.pool_fraction
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if let Skew::Classes(0) = self.skew {
            return Err(Error::Config("classes_per_worker must be positive".into()));
        }
        Ok(())
    }
}

/// Training data split into worker shards, plus the held-out test set.
#[derive(Debug, Clone)]
pub struct PartitionedDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub pool: SyntheticPool,
    pub shards: Vec<WorkerShard>,
    pub layout: ClusterLayout,
}

impl PartitionedDataset {
    /// Reserves the synthetic pool, deals the remaining samples to workers,
    /// mixes in synthetic samples and assigns workers to edges.
    pub fn build(train: Dataset, test: Dataset, spec: &PartitionSpec) -> Result<Self> {
        spec.validate()?;
        if test.is_empty() {
            return Err(Error::Config("test set is empty".into()));
        }
        if test.dim() != train.dim() || test.classes() != train.classes() {
            return Err(Error::Config("train and test sets have different shapes".into()));
        }
        let reserved = reserve_pool(&train, spec.pool_fraction, spec.rng_seed)?;
        let pool = build_synthetic_pool(&train, &reserved, spec.noise_sigma, spec.rng_seed)?;
        let selected = select_balanced(&train, &reserved, spec.train_subset, spec.rng_seed)?;
        let mut shards = partition_workers(&train, &selected, spec.skew, spec.workers, spec.rng_seed)?;
        mix_synthetic(&mut shards, &train, &pool, spec.synthetic_fraction)?;
        let layout = assign_edges(&mut shards, &train, spec.edges, &spec.edge_mode)?;
        Ok(PartitionedDataset {
            train,
            test,
            pool,
            shards,
            layout,
        })
    }

    /// Local samples first, then synthetic ones.
    pub fn worker_len(&self, worker: usize) -> usize {
        let s = &self.shards[worker];
        s.local.len() + s.synthetic.len()
    }

    pub fn worker_sample(&self, worker: usize, i: usize) -> (&[f32], usize) {
        let s = &self.shards[worker];
        if i < s.local.len() {
            let k = s.local[i];
            (self.train.image(k), self.train.label(k))
        } else {
            let k = s.synthetic[i - s.local.len()];
            (self.pool.data.image(k), self.pool.data.label(k))
        }
    }

    /// Rows of the partition manifest: worker, edge, local size, synthetic size, classes.
    pub fn manifest_rows(&self) -> Vec<[String; 5]> {
        self.shards
            .iter()
            .map(|s| {
                let classes: Vec<String> = s.classes(&self.train).iter().map(|c| c.to_string()).collect();
                [
                    s.worker.to_string(),
                    s.edge.to_string(),
                    s.local.len().to_string(),
                    s.synthetic.len().to_string(),
                    classes.join(";"),
                ]
            })
            .collect()
    }
}

pub const MANIFEST_HEADER: [&str; 5] = ["worker_id", "edge_id", "local_size", "synthetic_size", "classes"];


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_rejects_inconsistent_shapes() {
        assert!(Dataset::new(vec![0.0; 5], vec![0, 1], 3, 2).is_err());
        assert!(Dataset::new(vec![0.0; 6], vec![0, 2], 3, 2).is_err());
        let d = Dataset::new(vec![0.0; 6], vec![0, 1], 3, 2).unwrap();
        assert_eq!(d.class_histogram(), vec![1, 1]);
    }

    #[test]
    fn explicit_root_wins() {
        assert_eq!(dataset_root(Some(Path::new("/x"))), PathBuf::from("/x"));
    }

    #[test]
    fn build_covers_selected_samples_once() {
        let train = testing::toy(60, 10, 4);
        let test = testing::toy(5, 10, 4);
        let spec = PartitionSpec {
            workers: 10,
            edges: 2,
            synthetic_fraction: 0.05,
            train_subset: Some(500),
            rng_seed: 9,
            ..PartitionSpec::default()
        };
        let p = PartitionedDataset::build(train, test, &spec).unwrap();
        let mut seen = vec![0usize; p.train.len()];
        for s in &p.shards {
            for &i in &s.local {
                seen[i] += 1;
            }
        }
        assert_eq!(seen.iter().sum::<usize>(), 500);
        assert!(seen.iter().all(|&c| c <= 1));
        for i in &p.pool.source_indices {
            assert_eq!(seen[*i], 0);
        }
        assert_eq!(p.layout.total(), p.shards.iter().map(|s| s.local.len() + s.synthetic.len()).sum::<usize>());
        let rows = p.manifest_rows();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[3][4], "3");
        let (x, y) = p.worker_sample(3, p.worker_len(3) - 1);
        assert_eq!(x.len(), 4);
        assert_ne!(y, 3);
    }

    #[test]
    fn spec_validation() {
        let bad = PartitionSpec {
            synthetic_fraction: 0.3,
            ..PartitionSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = PartitionSpec {
            pool_fraction: 0.0,
            ..PartitionSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = PartitionSpec {
            edges: 60,
            ..PartitionSpec::default()
        };
        assert!(bad.validate().is_err());
        assert!(PartitionSpec::default().validate().is_ok());
    }
}
