//! Three-tier hierarchical federated training.
//!
//! Every iteration `k` each worker takes one mini-batch SGD step with
//! `eta_k = eta0 * decay^k`. When `k` is a multiple of `kappa1` (but not of
//! `kappa1 * kappa2`) each edge replaces its workers' parameters with their
//! shard-size weighted average. When `k` is a multiple of `kappa1 * kappa2` the
//! cloud averages all edges (weighted by edge totals) and broadcasts the result.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ClusterLayout, Dataset, PartitionedDataset};
use crate::error::{Error, Result};
use crate::model::{self, Activation, Architecture, ModelParams};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct HflConfig {
    /// Local updates per intermediate aggregation.
    pub kappa1: usize,
    /// Intermediate aggregations per cloud aggregation.
    pub kappa2: usize,
    /// Total iterations `K`; a whole number of cloud intervals.
    pub iterations: usize,
    pub eta0: f64,
    pub decay: f64,
    pub batch_size: usize,
    /// Evaluate the global model at cloud aggregations whose iteration is a
    /// multiple of this (0 = every cloud aggregation). The last iteration is
    /// always evaluated.
    pub eval_every: usize,
    /// Also evaluate edge models at intermediate aggregations.
    pub eval_intermediate: bool,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub rng_seed: u64,
}

impl Default for HflConfig {
    fn default() -> Self {
        HflConfig {
            kappa1: 5,
            kappa2: 2,
            iterations: 1000,
            eta0: 0.01,
            decay: 0.995,
            batch_size: 20,
            eval_every: 0,
            eval_intermediate: false,
            hidden_dim: 32,
            activation: Activation::Tanh,
            rng_seed: 0,
        }
    }
}

impl HflConfig {
    pub fn cloud_interval(&self) -> usize {
        self.kappa1 * self.kappa2
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa1 == 0 || self.kappa2 == 0 {
            return Err(Error::Config("kappa1 and kappa2 must be positive".into()));
        }
        if self.iterations == 0 || !self.iterations.is_multiple_of(self.cloud_interval()) {
            return Err(Error::Config(format!(
                "iterations ({}) must be a positive multiple of kappa1 * kappa2 ({})",
                self.iterations,
                self.cloud_interval()
            )));
        }
        if !(self.eta0.is_finite() && self.eta0 > 0.0) {
            return Err(Error::Config(format!("eta0 must be > 0, got {}", self.eta0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, data: &Dataset) -> Result<Architecture> {
        Architecture::new(data.dim(), self.hidden_dim, data.classes(), self.activation)
    }
}

/// Step size at global iteration `k` (1-based).
pub fn learning_rate(cfg: &HflConfig, k: usize) -> f64 {
    cfg.eta0 * cfg.decay.powi(k as i32)
}

/// One SGD step on a mini-batch; returns the batch loss before the step.
pub fn local_step(params: &mut ModelParams, inputs: &[&[f32]], labels: &[usize], eta: f64) -> Result<f64> {
    let (loss, grad) = model::loss_and_grad(params, inputs, labels)?;
    model::sgd_update(params, &grad, eta);
    Ok(loss)
}

/// `sum_i weights[i] * params[i]`, accumulated in slice order.
pub fn weighted_average(params: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if params.is_empty() || params.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} parameter vectors with {} weights",
            params.len(),
            weights.len()
        )));
    }
    let arch = params[0].arch;
    if params.iter().any(|p| p.arch != arch || p.theta.len() != params[0].theta.len()) {
        return Err(Error::Argument("parameter vectors disagree in architecture".into()));
    }
    let mut out = ModelParams::zeros(arch);
    for (p, &w) in params.iter().zip(weights) {
        out.theta.iter_mut().zip(&p.theta).for_each(|(o, t)| *o += w * t);
    }
    Ok(out)
}

/// Shard-size weighted average of the workers of `edge`, given in the
/// layout's (ascending id) order.
pub fn intermediate_aggregate(edge: usize, worker_params: &[&ModelParams], layout: &ClusterLayout) -> Result<ModelParams> {
    if edge >= layout.edges() {
        return Err(Error::Argument(format!("edge {edge} of {}", layout.edges())));
    }
    let members = layout.edge_workers(edge);
    if members.len() != worker_params.len() {
        return Err(Error::Argument(format!(
            "edge {edge} has {} workers, got {} parameter vectors",
            members.len(),
            worker_params.len()
        )));
    }
    let total = layout.edge_size(edge) as f64;
    let weights: Vec<f64> = members.iter().map(|&j| layout.worker_size(j) as f64 / total).collect();
    weighted_average(worker_params, &weights)
}

/// Edge-total weighted average over all edges; edges without workers carry
/// zero weight.
pub fn global_aggregate(edge_params: &[&ModelParams], layout: &ClusterLayout) -> Result<ModelParams> {
    if edge_params.len() != layout.edges() {
        return Err(Error::Argument(format!(
            "{} edge parameter vectors for {} edges",
            edge_params.len(),
            layout.edges()
        )));
    }
    let total = layout.total() as f64;
    let active: Vec<usize> = layout.active_edges().collect();
    let params: Vec<&ModelParams> = active.iter().map(|&n| edge_params[n]).collect();
    let weights: Vec<f64> = active.iter().map(|&n| layout.edge_size(n) as f64 / total).collect();
    weighted_average(&params, &weights)
}

/// Worker-weighted average over all workers in one pass, `|D_j| / |D|`.
pub fn flat_aggregate(worker_params: &[&ModelParams], layout: &ClusterLayout) -> Result<ModelParams> {
    if worker_params.len() != layout.workers() {
        return Err(Error::Argument("one parameter vector per worker is required".into()));
    }
    let total = layout.total() as f64;
    let weights: Vec<f64> = (0..layout.workers()).map(|j| layout.worker_size(j) as f64 / total).collect();
    weighted_average(worker_params, &weights)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Top-1 accuracy (ties to the lowest class) and mean cross-entropy.
pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    if test.dim() != params.arch.input_dim || test.classes() != params.arch.classes {
        return Err(Error::Argument("evaluation set does not match the architecture".into()));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let partial: Vec<(usize, f64)> = idx
        .par_chunks(512)
        .map(|chunk| {
            let mut correct = 0;
            let mut loss = 0.0;
            for &i in chunk {
                let (pred, l) = model::predict_one(params, test.image(i), test.label(i));
                correct += usize::from(pred == test.label(i));
                loss += l;
            }
            (correct, loss)
        })
        .collect();
    let (correct, loss) = partial.iter().fold((0, 0.0), |(c, l), (pc, pl)| (c + pc, l + pl));
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        loss: loss / test.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Global,
    Edge(usize),
}

impl Scope {
    pub fn label(&self) -> String {
        match self {
            Scope::Global => "global".into(),
            Scope::Edge(n) => format!("edge{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub scope: Scope,
    pub accuracy: f64,
    pub loss: f64,
    /// Shard-size weighted mean of the workers' mini-batch losses at this iteration.
    pub train_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    /// Seconds spent on each cloud interval, `(last iteration, seconds)`.
    /// Kept apart from the rows so traces compare bit-exactly across reruns.
    pub wall_clock: Vec<(usize, f64)>,
}

impl TrainTrace {
    pub fn global_rows(&self) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(|r| r.scope == Scope::Global)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.global_rows().last().map(|r| r.accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct HflRun {
    pub trace: TrainTrace,
    pub params: ModelParams,
}

/// Per-worker epoch sampler: a shuffled pass over the shard, reshuffled at
/// every epoch boundary from the worker's own stream.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Sampler { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize, out: &mut Vec<usize>) {
        out.clear();
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
    }
}

struct Worker {
    id: usize,
    params: ModelParams,
    sampler: Sampler,
    batch: Vec<usize>,
}

/// Runs `cfg.iterations` iterations of hierarchical training on `data`.
pub fn run_hfl(cfg: &HflConfig, data: &PartitionedDataset) -> Result<HflRun> {
    cfg.validate()?;
    let layout = &data.layout;
    if layout.workers() != data.shards.len() {
        return Err(Error::Config("layout and shards disagree on the worker count".into()));
    }
    let arch = cfg.architecture(&data.train)?;
    let init = ModelParams::init(arch, seed::derive_tagged(cfg.rng_seed, "init", 0));
    let mut workers: Vec<Worker> = (0..layout.workers())
        .map(|j| {
            let len = data.worker_len(j);
            if len == 0 {
                return Err(Error::Config(format!("worker {j} has an empty shard")));
            }
            Ok(Worker {
                id: j,
                params: init.clone(),
                sampler: Sampler::new(len, seed::derive_tagged(cfg.rng_seed, "worker", j as u64)),
                batch: Vec::with_capacity(cfg.batch_size),
            })
        })
        .collect::<Result<_>>()?;

    let total = layout.total() as f64;
    let cloud = cfg.cloud_interval();
    let mut trace = TrainTrace::default();
    let mut global = init;
    let mut interval_start = Instant::now();

    for k in 1..=cfg.iterations {
        let eta = learning_rate(cfg, k);
        let losses: Vec<Result<f64>> = workers
            .par_iter_mut()
            .map(|w| {
                w.sampler.next_batch(cfg.batch_size, &mut w.batch);
                let mut inputs = Vec::with_capacity(w.batch.len());
                let mut labels = Vec::with_capacity(w.batch.len());
                for &i in &w.batch {
                    let (x, y) = data.worker_sample(w.id, i);
                    inputs.push(x);
                    labels.push(y);
                }
                local_step(&mut w.params, &inputs, &labels, eta)
            })
            .collect();
        let mut train_loss = 0.0;
        for (j, l) in losses.into_iter().enumerate() {
            train_loss += l? * layout.worker_size(j) as f64 / total;
        }
        if !train_loss.is_finite() || workers.iter().any(|w| !w.params.is_finite()) {
            return Err(Error::Diverged { iteration: k });
        }

        if k % cfg.kappa1 != 0 {
            continue;
        }
        let mut edge_models = Vec::with_capacity(layout.edges());
        for n in 0..layout.edges() {
            let members: Vec<&ModelParams> = layout.edge_workers(n).iter().map(|&j| &workers[j].params).collect();
            edge_models.push(if members.is_empty() {
                None
            } else {
                Some(intermediate_aggregate(n, &members, layout)?)
            });
        }

        if k % cloud == 0 {
            let refs: Vec<&ModelParams> = edge_models.iter().map(|m| m.as_ref().unwrap_or(&global)).collect();
            global = global_aggregate(&refs, layout)?;
            for w in &mut workers {
                w.params.theta.copy_from_slice(&global.theta);
            }
            if cfg.eval_every == 0 || k % cfg.eval_every == 0 || k == cfg.iterations {
                let ev = evaluate(&global, &data.test)?;
                trace.rows.push(TraceRow {
                    iteration: k,
                    scope: Scope::Global,
                    accuracy: ev.accuracy,
                    loss: ev.loss,
                    train_loss,
                });
            }
            trace.wall_clock.push((k, interval_start.elapsed().as_secs_f64()));
            interval_start = Instant::now();
        } else {
            for (n, m) in edge_models.iter().enumerate() {
                let Some(m) = m else { continue };
                for &j in layout.edge_workers(n) {
                    workers[j].params.theta.copy_from_slice(&m.theta);
                }
                if cfg.eval_intermediate {
                    let ev = evaluate(m, &data.test)?;
                    trace.rows.push(TraceRow {
                        iteration: k,
                        scope: Scope::Edge(n),
                        accuracy: ev.accuracy,
                        loss: ev.loss,
                        train_loss,
                    });
                }
            }
        }
    }
    Ok(HflRun { trace, params: global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testing::toy;
    use crate::data::{EdgeMode, PartitionSpec, Skew};
    use rand::Rng;

    fn random_params(arch: Architecture, seed: u64) -> ModelParams {
        let mut rng = seed::rng(seed);
        let theta = (0..arch.param_count()).map(|_| rng.random_range(-3.0..3.0)).collect();
        ModelParams::from_vec(arch, theta).unwrap()
    }

    fn small_arch() -> Architecture {
        Architecture::new(4, 3, 2, Activation::Tanh).unwrap()
    }

    #[test]
    fn step_size_schedule() {
        let cfg = HflConfig::default();
        assert_eq!(learning_rate(&cfg, 100), 0.01 * 0.995f64.powi(100));
        assert!((learning_rate(&cfg, 100) - 0.01 * (100.0 * 0.995f64.ln()).exp()).abs() < 1e-15);
        for k in 1..500 {
            assert!(learning_rate(&cfg, k + 1) < learning_rate(&cfg, k));
        }
        let flat = HflConfig {
            decay: 1.0,
            ..HflConfig::default()
        };
        assert_eq!(learning_rate(&flat, 77), 0.01);
    }

    #[test]
    fn config_validation() {
        let bad = HflConfig {
            iterations: 301,
            ..HflConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = HflConfig {
            decay: 1.5,
            ..HflConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = HflConfig {
            eta0: 0.0,
            ..HflConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(HflConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let arch = Architecture::new(2, 0, 2, Activation::Tanh).unwrap();
        let mut p = ModelParams::from_vec(arch, vec![400.0, -400.0, -400.0, 400.0, 0.0, 0.0]).unwrap();
        let before = p.clone();
        let xs: Vec<&[f32]> = vec![&[1.0, 0.0], &[0.0, 1.0]];
        local_step(&mut p, &xs, &[0, 1], 0.01).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn full_batch_step_descends_on_convex_instance() {
        let arch = Architecture::new(3, 0, 3, Activation::Tanh).unwrap();
        let mut rng = seed::rng(11);
        let xs: Vec<Vec<f32>> = (0..40).map(|_| (0..3).map(|_| rng.random::<f32>()).collect()).collect();
        let ys: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let inputs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let mut p = ModelParams::init(arch, 2);
        for _ in 0..20 {
            let before = model::loss(&p, &inputs, &ys).unwrap();
            local_step(&mut p, &inputs, &ys, 0.05).unwrap();
            let after = model::loss(&p, &inputs, &ys).unwrap();
            assert!(after <= before);
        }
    }

    #[test]
    fn aggregation_oracles() {
        let arch = small_arch();
        let layout = ClusterLayout::new(vec![0, 0, 0], vec![100, 200, 700], 1).unwrap();
        let ps: Vec<ModelParams> = (0..3).map(|s| random_params(arch, s)).collect();
        let refs: Vec<&ModelParams> = ps.iter().collect();
        let agg = intermediate_aggregate(0, &refs, &layout).unwrap();
        for i in 0..arch.param_count() {
            let oracle = 0.1 * ps[0].theta[i] + 0.2 * ps[1].theta[i] + 0.7 * ps[2].theta[i];
            assert!((agg.theta[i] - oracle).abs() < 1e-12);
        }

        let equal = ClusterLayout::new(vec![0, 0], vec![50, 50], 1).unwrap();
        let mean = intermediate_aggregate(0, &refs[..2], &equal).unwrap();
        for i in 0..arch.param_count() {
            assert!((mean.theta[i] - (ps[0].theta[i] + ps[1].theta[i]) / 2.0).abs() < 1e-12);
        }

        let single = ClusterLayout::new(vec![0], vec![9], 1).unwrap();
        assert_eq!(intermediate_aggregate(0, &refs[..1], &single).unwrap(), ps[0]);
        assert_eq!(global_aggregate(&refs[..1], &single).unwrap(), ps[0]);

        assert!(matches!(intermediate_aggregate(0, &refs[..2], &layout), Err(Error::Argument(_))));
        assert!(matches!(global_aggregate(&refs, &single), Err(Error::Argument(_))));
    }

    #[test]
    fn two_level_equals_flat() {
        let arch = small_arch();
        for trial in 0..20u64 {
            let mut rng = seed::rng(trial);
            let edges = rng.random_range(1..5);
            let workers = rng.random_range(edges..12);
            let mut edge_of: Vec<usize> = (0..workers).map(|j| j % edges).collect();
            edge_of.shuffle(&mut rng);
            let sizes: Vec<usize> = (0..workers).map(|_| rng.random_range(1..1000)).collect();
            let layout = ClusterLayout::new(edge_of, sizes, edges).unwrap();
            let ps: Vec<ModelParams> = (0..workers).map(|j| random_params(arch, trial * 100 + j as u64)).collect();
            let edge_models: Vec<ModelParams> = (0..edges)
                .map(|n| {
                    let m: Vec<&ModelParams> = layout.edge_workers(n).iter().map(|&j| &ps[j]).collect();
                    intermediate_aggregate(n, &m, &layout).unwrap()
                })
                .collect();
            let two = global_aggregate(&edge_models.iter().collect::<Vec<_>>(), &layout).unwrap();
            let flat = flat_aggregate(&ps.iter().collect::<Vec<_>>(), &layout).unwrap();
            for (a, b) in two.theta.iter().zip(&flat.theta) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn uniform_model_evaluation() {
        let test = toy(7, 10, 4);
        let arch = Architecture::new(4, 5, 10, Activation::Tanh).unwrap();
        let ev = evaluate(&ModelParams::zeros(arch), &test).unwrap();
        assert!((ev.loss - 10f64.ln()).abs() < 1e-12);
        let class0 = test.class_histogram()[0] as f64 / test.len() as f64;
        assert_eq!(ev.accuracy, class0);
    }

    #[test]
    fn accuracy_matches_per_sample_recount() {
        let test = toy(10, 10, 4);
        let arch = Architecture::new(4, 6, 10, Activation::Sigmoid).unwrap();
        let p = random_params(arch, 4);
        let ev = evaluate(&p, &test).unwrap();
        let views: Vec<&[f32]> = (0..test.len()).map(|i| test.image(i)).collect();
        let probs = model::forward(&p, &views).unwrap();
        let mut correct = 0;
        for (i, row) in probs.iter().enumerate() {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == test.label(i));
        }
        assert_eq!(ev.accuracy, correct as f64 / 100.0);
        let labels: Vec<usize> = (0..test.len()).map(|i| test.label(i)).collect();
        assert!((ev.loss - model::loss(&p, &views, &labels).unwrap()).abs() < 1e-12);
    }

    fn toy_partition(skew: Skew) -> PartitionedDataset {
        let spec = PartitionSpec {
            skew,
            workers: 10,
            edges: 2,
            edge_mode: EdgeMode::NonIid,
            train_subset: Some(400),
            rng_seed: 1,
            ..PartitionSpec::default()
        };
        PartitionedDataset::build(toy(50, 10, 6), toy(10, 10, 6), &spec).unwrap()
    }

    #[test]
    fn runs_are_deterministic_and_evaluated_at_cloud_rounds() {
        let data = toy_partition(Skew::Classes(1));
        let cfg = HflConfig {
            iterations: 40,
            hidden_dim: 4,
            eval_intermediate: true,
            ..HflConfig::default()
        };
        let a = run_hfl(&cfg, &data).unwrap();
        let b = run_hfl(&cfg, &data).unwrap();
        assert_eq!(a.trace.rows, b.trace.rows);
        assert_eq!(a.params, b.params);
        let globals: Vec<usize> = a.trace.global_rows().map(|r| r.iteration).collect();
        assert_eq!(globals, vec![10, 20, 30, 40]);
        let edges = a.trace.rows.iter().filter(|r| matches!(r.scope, Scope::Edge(_))).count();
        assert_eq!(edges, 4 * 2);
        assert!(a.trace.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    }

    #[test]
    fn unit_kappas_give_per_iteration_federated_averaging() {
        let data = toy_partition(Skew::Iid);
        let cfg = HflConfig {
            kappa1: 1,
            kappa2: 1,
            iterations: 5,
            hidden_dim: 0,
            ..HflConfig::default()
        };
        let run = run_hfl(&cfg, &data).unwrap();
        assert_eq!(run.trace.global_rows().count(), 5);

        // Replay by hand: every step is a flat worker-weighted average.
        let arch = cfg.architecture(&data.train).unwrap();
        let mut global = ModelParams::init(arch, seed::derive_tagged(cfg.rng_seed, "init", 0));
        let mut samplers: Vec<Sampler> = (0..10)
            .map(|j| Sampler::new(data.worker_len(j), seed::derive_tagged(cfg.rng_seed, "worker", j as u64)))
            .collect();
        let mut batch = Vec::new();
        for k in 1..=5 {
            let mut locals = Vec::new();
            for (j, s) in samplers.iter_mut().enumerate() {
                s.next_batch(cfg.batch_size, &mut batch);
                let (xs, ys): (Vec<&[f32]>, Vec<usize>) = batch.iter().map(|&i| data.worker_sample(j, i)).unzip();
                let mut p = global.clone();
                local_step(&mut p, &xs, &ys, learning_rate(&cfg, k)).unwrap();
                locals.push(p);
            }
            global = flat_aggregate(&locals.iter().collect::<Vec<_>>(), &data.layout).unwrap();
        }
        for (a, b) in run.params.theta.iter().zip(&global.theta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let data = toy_partition(Skew::Iid);
        let cfg = HflConfig {
            eta0: 1e308,
            decay: 1.0,
            iterations: 10,
            hidden_dim: 0,
            ..HflConfig::default()
        };
        match run_hfl(&cfg, &data) {
            Err(Error::Diverged { iteration }) => assert!((1..=10).contains(&iteration)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
