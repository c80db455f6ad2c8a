//! Executes an [`ExperimentConfig`] and writes its CSV artifacts plus a
//! `manifest.csv` (written last).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::analysis;
use crate::data::{self, Dataset, EdgeMode, PartitionSpec, PartitionedDataset, MANIFEST_HEADER};
use crate::error::{Error, Result};
use crate::game::{self, EquilibriumRun, GameConfig, InitMode, PopulationState};
use crate::harness::config::{ExperimentConfig, GameInit, Mode, SweepSpec};
use crate::harness::csv::{emit_csv, Cell};
use crate::hfl::{self, HflConfig, HflRun};
use crate::seed;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces `master_seed`.
    pub seed: Option<u64>,
    /// Replaces `output_dir`.
    pub out: Option<PathBuf>,
    /// Concurrent sweep runs (0 or 1 = sequential).
    pub jobs: usize,
    /// MNIST directory; falls back to `[data] root`, then the environment.
    pub data_root: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    /// Artifact files relative to `output_dir`, manifest excluded.
    pub files: Vec<String>,
    /// Non-convergence or divergence found while running; artifacts are
    /// still written.
    pub failure: Option<Error>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        self.failure.as_ref().map_or(0, Error::exit_code)
    }
}

/// Key/value rows gathered for the manifest.
#[derive(Debug, Default)]
struct Summary(Vec<(String, String)>);

impl Summary {
    fn add(&mut self, key: impl Into<String>, value: impl ToString) {
        let clean = value.to_string().replace([',', '\n'], ";");
        self.0.push((key.into(), clean));
    }

    fn add_f64(&mut self, key: impl Into<String>, v: f64) {
        self.add(key, crate::harness::csv::format_float(v));
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    files: Vec<String>,
    summary: Summary,
    failure: Option<Error>,
}

impl Ctx<'_> {
    fn write(&mut self, name: &str, header: &[&str], rows: &[Vec<Cell>]) -> Result<()> {
        emit_csv(&self.dir.join(name), header, rows)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn fail(&mut self, e: Error) {
        if self.failure.is_none() {
            self.failure = Some(e);
        }
    }
}

/// Seeds of repetition `rep`: `(partition seed, training seed)`.
pub fn repetition_seeds(cfg: &ExperimentConfig, rep: usize) -> (u64, u64) {
    let data = cfg.data.seed.unwrap_or(cfg.master_seed);
    let train = cfg.hfl_seed.unwrap_or(seed::derive_tagged(cfg.master_seed, "hfl", 0));
    (seed::derive_seed(data, rep as u64), seed::derive_seed(train, rep as u64))
}

fn game_init(cfg: &ExperimentConfig) -> Result<PopulationState> {
    let g = &cfg.game;
    let mode = match &g.init {
        GameInit::Uniform => InitMode::Uniform,
        GameInit::Random => InitMode::Random(g.init_seed.unwrap_or(seed::derive_tagged(cfg.master_seed, "game", 0))),
        GameInit::Explicit(m) => InitMode::Explicit(m.clone()),
    };
    game::init_state(&g.config, &mode)
}

fn status_rows(prefix: &str, run: &EquilibriumRun, s: &mut Summary) {
    s.add(format!("{prefix}converged"), run.status.is_converged());
    s.add(format!("{prefix}steps"), run.status.steps());
    s.add_f64(format!("{prefix}residual"), run.residual);
    s.add_f64(format!("{prefix}utility_gap"), run.utility_gap);
}

fn share_header(cfg: &GameConfig, prefix: &str) -> Vec<String> {
    let mut h = Vec::new();
    for z in 1..=cfg.num_populations() {
        for n in 1..=cfg.num_servers() {
            h.push(format!("{prefix}x{n}_z{z}"));
        }
    }
    h
}

fn share_cells(state: &PopulationState) -> impl Iterator<Item = Cell> + '_ {
    state.matrix().as_slice().iter().map(|&v| Cell::Float(v))
}

fn trajectory_rows(cfg: &GameConfig, run: &EquilibriumRun) -> (Vec<String>, Vec<Vec<Cell>>) {
    let mut header = vec!["t".to_string()];
    header.extend(share_header(cfg, ""));
    header.push("residual".into());
    let t = &run.trajectory;
    let rows = (0..t.len())
        .map(|i| {
            let mut row = vec![Cell::Float(t.times[i])];
            row.extend(share_cells(&t.states[i]));
            row.push(Cell::Float(t.residuals[i]));
            row
        })
        .collect();
    (header, rows)
}

fn run_game(ctx: &mut Ctx<'_>) -> Result<()> {
    let g = &ctx.cfg.game;
    let gc = &g.config;
    let init = game_init(ctx.cfg)?;
    let run = game::run_to_equilibrium(gc, &init)?;
    let (header, rows) = trajectory_rows(gc, &run);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.write("trajectory.csv", &header, &rows)?;

    let utilities = game::utility_matrix(gc, &run.state);
    let eq_rows: Vec<Vec<Cell>> = (0..gc.num_populations())
        .flat_map(|z| (0..gc.num_servers()).map(move |n| (z, n)))
        .map(|(z, n)| {
            vec![
                Cell::from(z + 1),
                Cell::from(n + 1),
                Cell::Float(run.state.share(z, n)),
                Cell::Float(utilities.get(z, n)),
            ]
        })
        .collect();
    ctx.write("equilibrium.csv", &["population", "server", "share", "utility"], &eq_rows)?;

    let s = &mut ctx.summary;
    status_rows("", &run, s);
    if run.trajectory.len() >= 2 {
        let ly = analysis::lyapunov_check(&run.trajectory, &run.state)?;
        s.add("lyapunov_monotone", ly.monotone);
        s.add_f64("lyapunov_max_increase", ly.max_increase);
    }
    s.add("equilibrium_kind", format!("{:?}", analysis::classify(&run.state, gc.share_floor)));
    let bound = analysis::certify_boundedness(
        gc,
        g.boundedness_samples.max(1),
        seed::derive_tagged(ctx.cfg.master_seed, "bound", 0),
    )?;
    s.add_f64("boundedness_max_partial", bound.max_abs_partial);
    for (n, d) in analysis::aggregated_data(gc, &run.state).iter().enumerate() {
        s.add_f64(format!("aggregated_data_{}", n + 1), *d);
    }

    if let Some((z, expected, tol)) = &g.reference {
        let observed = run.state.row(*z);
        let diff = observed
            .iter()
            .zip(expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let within = diff <= *tol;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
        s.add("reference_population", z + 1);
        s.add("reference_expected", fmt(expected));
        s.add("reference_observed", fmt(observed));
        s.add_f64("reference_max_abs_diff", diff);
        s.add("reference_within_tolerance", within);
        if !within {
            let pair = run.residual < 1e-8 && run.utility_gap < gc.utility_tolerance();
            s.add(
                "reference_discrepancy",
                format!(
                    "population {} settles at [{}] instead of [{}] (max deviation {diff:.3} > {tol}); \
                     unit population masses are assumed; equilibrium property pair (residual < 1e-8 and \
                     support utility gap < tolerance) holds: {pair}",
                    z + 1,
                    fmt(observed),
                    fmt(expected)
                ),
            );
        }
    }
    if !run.status.is_converged() {
        let residual = run.residual;
        ctx.fail(Error::NoConvergence {
            steps: run.status.steps(),
            residual,
        });
    }
    Ok(())
}

fn run_phase(ctx: &mut Ctx<'_>) -> Result<()> {
    let g = &ctx.cfg.game;
    let gc = &g.config;
    let mut inits = g
        .phase_states
        .iter()
        .map(|m| game::init_state(gc, &InitMode::Explicit(m.clone())))
        .collect::<Result<Vec<_>>>()?;
    let seed = g.init_seed.unwrap_or(seed::derive_tagged(ctx.cfg.master_seed, "phase", 0));
    inits.extend(analysis::portrait_inits(gc, g.phase_inits, seed)?);
    let portrait = analysis::phase_portrait_from(gc, inits)?;

    let z = gc.num_populations();
    let n_cols = if gc.num_servers() == 2 { 1 } else { gc.num_servers() };
    let mut header = vec!["t".to_string()];
    for n in 1..=n_cols {
        for p in 1..=z {
            header.push(format!("x{n}_z{p}"));
        }
    }
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    for (i, run) in portrait.runs.iter().enumerate() {
        let t = &run.trajectory;
        let rows: Vec<Vec<Cell>> = (0..t.len())
            .map(|k| {
                let mut row = vec![Cell::Float(t.times[k])];
                for n in 0..n_cols {
                    for p in 0..z {
                        row.push(Cell::Float(t.states[k].share(p, n)));
                    }
                }
                row
            })
            .collect();
        ctx.write(&format!("phase_{i:02}.csv"), &header_ref, &rows)?;
    }

    let mut header = vec!["init".to_string(), "converged".into(), "steps".into(), "residual".into()];
    header.extend(share_header(gc, "start_"));
    header.extend(share_header(gc, "end_"));
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<Cell>> = portrait
        .runs
        .iter()
        .zip(&portrait.inits)
        .enumerate()
        .map(|(i, (run, init))| {
            let mut row = vec![
                Cell::from(i),
                Cell::from(run.status.is_converged()),
                Cell::from(run.status.steps()),
                Cell::Float(run.residual),
            ];
            row.extend(share_cells(init));
            row.extend(share_cells(&run.state));
            row
        })
        .collect();
    ctx.write("phase_summary.csv", &header_ref, &rows)?;

    let s = &mut ctx.summary;
    s.add("phase_runs", portrait.runs.len());
    s.add_f64("max_endpoint_spread", portrait.max_endpoint_spread);
    s.add("portrait_verdict", format!("{:?}", portrait.verdict()));
    if let Some(run) = portrait.runs.iter().find(|r| !r.status.is_converged()) {
        let residual = run.residual;
        ctx.fail(Error::NoConvergence {
            steps: run.status.steps(),
            residual,
        });
    }
    Ok(())
}

/// Equilibrium edge shares from the game section, for
/// `edge_mode = "from-equilibrium"` without explicit shares.
fn shares_from_game(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let run = game::run_to_equilibrium(&cfg.game.config, &game_init(cfg)?)?.into_result()?;
    Ok(data::equilibrium_edge_shares(&run.state))
}

fn load_data(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(Dataset, Dataset)> {
    let root = opts
        .data_root
        .clone()
        .or_else(|| cfg.data.root.clone())
        .unwrap_or_else(|| data::dataset_root(None));
    data::load_mnist(&root)
}

struct HflOutcome {
    run: Option<HflRun>,
    manifest: Vec<[String; 5]>,
    error: Option<Error>,
    seconds: f64,
}

/// Partitions and trains one repetition. Divergence is reported in the
/// outcome, other errors abort.
fn hfl_repetition(
    cfg: &ExperimentConfig,
    spec: &PartitionSpec,
    hcfg: &HflConfig,
    data: &(Dataset, Dataset),
    rep: usize,
) -> Result<HflOutcome> {
    let start = Instant::now();
    let (data_seed, train_seed) = repetition_seeds(cfg, rep);
    let spec = PartitionSpec {
        rng_seed: data_seed,
        ..spec.clone()
    };
    let parts = PartitionedDataset::build(data.0.clone(), data.1.clone(), &spec)?;
    let hcfg = HflConfig {
        rng_seed: train_seed,
        ..hcfg.clone()
    };
    let manifest = parts.manifest_rows();
    let (run, error) = match hfl::run_hfl(&hcfg, &parts) {
        Ok(run) => (Some(run), None),
        Err(e @ Error::Diverged { .. }) => (None, Some(e)),
        Err(e) => return Err(e),
    };
    Ok(HflOutcome {
        run,
        manifest,
        error,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn trace_rows(run: &HflRun) -> Vec<Vec<Cell>> {
    run.trace
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::from(r.iteration),
                Cell::from(r.scope.label()),
                Cell::Float(r.accuracy),
                Cell::Float(r.loss),
                Cell::Float(r.train_loss),
            ]
        })
        .collect()
}

const TRACE_HEADER: [&str; 5] = ["iteration", "scope", "accuracy", "loss", "train_loss"];

fn manifest_cells(rows: &[[String; 5]]) -> Vec<Vec<Cell>> {
    rows.iter()
        .map(|r| r.iter().map(|c| Cell::Text(c.clone())).collect())
        .collect()
}

fn resolved_spec(cfg: &ExperimentConfig) -> Result<PartitionSpec> {
    let mut spec = cfg.data.spec.clone();
    if cfg.data.shares_from_game {
        spec.edge_mode = EdgeMode::FromEquilibrium(shares_from_game(cfg)?);
    }
    Ok(spec)
}

fn run_hfl_mode(ctx: &mut Ctx<'_>, opts: &RunOptions) -> Result<()> {
    let cfg = ctx.cfg;
    let spec = resolved_spec(cfg)?;
    let data = load_data(cfg, opts)?;
    let mut summary_rows = Vec::new();
    let mut total = 0.0;
    for rep in 0..cfg.repetitions {
        let out = hfl_repetition(cfg, &spec, &cfg.hfl, &data, rep)?;
        let (data_seed, train_seed) = repetition_seeds(cfg, rep);
        ctx.write(&format!("partition_rep{rep}.csv"), &MANIFEST_HEADER, &manifest_cells(&out.manifest))?;
        let (acc, loss) = match &out.run {
            Some(run) => {
                ctx.write(&format!("trace_rep{rep}.csv"), &TRACE_HEADER, &trace_rows(run))?;
                let last = run.trace.global_rows().last();
                (last.map_or(f64::NAN, |r| r.accuracy), last.map_or(f64::NAN, |r| r.loss))
            }
            None => (f64::NAN, f64::NAN),
        };
        summary_rows.push(vec![
            Cell::from(rep),
            Cell::from(data_seed),
            Cell::from(train_seed),
            Cell::from(if out.error.is_some() { "diverged" } else { "ok" }),
            Cell::Float(acc),
            Cell::Float(loss),
        ]);
        total += acc;
        ctx.summary.add_f64(format!("wall_clock_rep{rep}"), out.seconds);
        if let Some(e) = out.error {
            ctx.fail(e);
        }
    }
    ctx.write(
        "hfl_summary.csv",
        &["repetition", "data_seed", "train_seed", "status", "final_accuracy", "final_loss"],
        &summary_rows,
    )?;
    ctx.summary
        .add_f64("mean_final_accuracy", total / cfg.repetitions as f64);
    Ok(())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} sweep workers: {e}")))
}

fn run_game_sweep(ctx: &mut Ctx<'_>, sw: &SweepSpec, opts: &RunOptions) -> Result<()> {
    let cfg = ctx.cfg;
    let configs = sw
        .values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.apply_sweep(sw, v)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let runs = pool(opts.jobs)?.install(|| {
        configs
            .par_iter()
            .map(|c| game::run_to_equilibrium(&c.game.config, &game_init(c)?))
            .collect::<Result<Vec<_>>>()
    })?;

    let gc = &cfg.game.config;
    let mut header = vec![
        "index".to_string(),
        "value".into(),
        "converged".into(),
        "steps".into(),
        "residual".into(),
        "utility_gap".into(),
        "lyapunov_monotone".into(),
    ];
    header.extend((1..=gc.num_servers()).map(|n| format!("aggregated_data_{n}")));
    header.extend(share_header(gc, ""));
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for (i, ((run, c), &v)) in runs.iter().zip(&configs).zip(&sw.values).enumerate() {
        let monotone = if run.trajectory.len() >= 2 {
            analysis::lyapunov_check(&run.trajectory, &run.state)?.monotone
        } else {
            true
        };
        let mut row = vec![
            Cell::from(i),
            Cell::Float(v),
            Cell::from(run.status.is_converged()),
            Cell::from(run.status.steps()),
            Cell::Float(run.residual),
            Cell::Float(run.utility_gap),
            Cell::from(monotone),
        ];
        row.extend(analysis::aggregated_data(&c.game.config, &run.state).into_iter().map(Cell::Float));
        row.extend(share_cells(&run.state));
        rows.push(row);
        if !run.status.is_converged() {
            ctx.fail(Error::NoConvergence {
                steps: run.status.steps(),
                residual: run.residual,
            });
        }
    }
    ctx.write("sweep.csv", &header_ref, &rows)?;
    Ok(())
}

fn run_hfl_sweep(ctx: &mut Ctx<'_>, sw: &SweepSpec, opts: &RunOptions) -> Result<()> {
    let cfg = ctx.cfg;
    let mut jobs = Vec::new();
    for (i, &v) in sw.values.iter().enumerate() {
        let mut c = cfg.clone();
        c.apply_sweep(sw, v)?;
        let spec = resolved_spec(&c)?;
        for rep in 0..cfg.repetitions {
            jobs.push((i, v, rep, c.clone(), spec.clone()));
        }
    }
    let data = load_data(cfg, opts)?;
    let outcomes = pool(opts.jobs)?.install(|| {
        jobs.par_iter()
            .map(|(_, _, rep, c, spec)| hfl_repetition(c, spec, &c.hfl, &data, *rep))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut rows = Vec::new();
    let mut means = vec![(0.0, 0usize); sw.values.len()];
    for ((i, v, rep, c, _), out) in jobs.iter().zip(outcomes) {
        let stem = format!("run{i:02}_rep{rep}");
        ctx.write(&format!("{stem}_partition.csv"), &MANIFEST_HEADER, &manifest_cells(&out.manifest))?;
        let (acc, loss) = match &out.run {
            Some(run) => {
                ctx.write(&format!("{stem}_trace.csv"), &TRACE_HEADER, &trace_rows(run))?;
                let last = run.trace.global_rows().last();
                (last.map_or(f64::NAN, |r| r.accuracy), last.map_or(f64::NAN, |r| r.loss))
            }
            None => (f64::NAN, f64::NAN),
        };
        means[*i].0 += acc;
        means[*i].1 += 1;
        let (data_seed, train_seed) = repetition_seeds(c, *rep);
        rows.push(vec![
            Cell::from(*i),
            Cell::Float(*v),
            Cell::from(c.hfl.kappa1),
            Cell::from(c.hfl.kappa2),
            Cell::from(*rep),
            Cell::from(data_seed),
            Cell::from(train_seed),
            Cell::from(if out.error.is_some() { "diverged" } else { "ok" }),
            Cell::Float(acc),
            Cell::Float(loss),
        ]);
        ctx.summary.add_f64(format!("wall_clock_{stem}"), out.seconds);
        if let Some(e) = out.error {
            ctx.fail(e);
        }
    }
    ctx.write(
        "sweep.csv",
        &[
            "index",
            "value",
            "kappa1",
            "kappa2",
            "repetition",
            "data_seed",
            "train_seed",
            "status",
            "final_accuracy",
            "final_loss",
        ],
        &rows,
    )?;
    let mean_rows: Vec<Vec<Cell>> = means
        .iter()
        .zip(&sw.values)
        .enumerate()
        .map(|(i, (&(sum, n), &v))| vec![Cell::from(i), Cell::Float(v), Cell::Float(sum / n as f64)])
        .collect();
    ctx.write("sweep_mean.csv", &["index", "value", "mean_final_accuracy"], &mean_rows)?;
    Ok(())
}

/// Runs `cfg` and writes every artifact under the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let start = Instant::now();
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.master_seed = s;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut ctx = Ctx {
        cfg: &cfg,
        dir: &dir,
        files: Vec::new(),
        summary: Summary::default(),
        failure: None,
    };
    match cfg.mode {
        Mode::Game => run_game(&mut ctx)?,
        Mode::Phase => run_phase(&mut ctx)?,
        Mode::Hfl => run_hfl_mode(&mut ctx, opts)?,
        Mode::Sweep => {
            let sw = cfg.sweep.clone().expect("sweep mode has a sweep section");
            if ExperimentConfig::is_game_parameter(&sw.parameter) {
                run_game_sweep(&mut ctx, &sw, opts)?
            } else {
                run_hfl_sweep(&mut ctx, &sw, opts)?
            }
        }
    }

    let Ctx {
        files,
        summary,
        failure,
        ..
    } = ctx;
    let mut rows: Vec<Vec<Cell>> = vec![
        vec!["config_hash".into(), cfg.hash.clone().into()],
        vec!["master_seed".into(), cfg.master_seed.into()],
        vec!["code_version".into(), CODE_VERSION.into()],
        vec!["mode".into(), cfg.mode.name().into()],
    ];
    let clean = |s: &str| s.replace([',', '\n'], ";");
    if let Some(f) = &cfg.figure {
        rows.push(vec!["figure".into(), clean(f).into()]);
    }
    if let Some(n) = &cfg.notes {
        rows.push(vec!["notes".into(), clean(n).into()]);
    }
    rows.push(vec![
        "status".into(),
        failure
            .as_ref()
            .map_or("ok".to_string(), |e| clean(&e.to_string()))
            .into(),
    ]);
    for f in &files {
        rows.push(vec!["file".into(), f.as_str().into()]);
    }
    for (k, v) in summary.0 {
        rows.push(vec![k.into(), v.into()]);
    }
    rows.push(vec!["wall_clock_seconds".into(), Cell::Float(start.elapsed().as_secs_f64())]);
    emit_csv(&dir.join(MANIFEST_FILE), &["key", "value"], &rows)?;

    Ok(RunReport {
        output_dir: dir,
        files,
        failure,
    })
}
