//! Evolutionary edge-association game.
//!
//! `Z` populations of FL workers choose among `N` edge servers. The state is a
//! `Z x N` matrix of population shares whose rows live on probability
//! simplices. A worker of population `z` at server `n` earns
//!
//! ```text
//! u[z][n] = gamma[n] * d[z] * x[z][n] / sum_z' d[z'] * x[z'][n]
//!           - alpha * (s[n] + c[z]) - beta * m[z]
//! ```
//!
//! and shares follow the replicator flow `dx[z][n] = delta * x[z][n] * (u[z][n] - ubar[z])`,
//! integrated with explicit Euler and projected back onto the simplex.

use rand::Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::seed;

/// One homogeneous population of FL workers.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    /// Data quantity per worker (samples).
    pub data_quantity: f64,
    /// Computation resource spent on the local dataset.
    pub compute: f64,
    /// Communication resource.
    pub comm: f64,
}

impl PopulationSpec {
    pub fn new(data_quantity: f64, compute: f64, comm: f64) -> Self {
        PopulationSpec {
            data_quantity,
            compute,
            comm,
        }
    }
}

/// One edge server offering a reward pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeServerSpec {
    pub reward_pool: f64,
    /// Extra computation needed to train on this server's synthetic dataset.
    pub synthetic_compute: f64,
}

impl EdgeServerSpec {
    pub fn new(reward_pool: f64, synthetic_compute: f64) -> Self {
        EdgeServerSpec {
            reward_pool,
            synthetic_compute,
        }
    }
}

/// Exogenous parameters and integrator settings of one game instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GameConfig {
    /// Unit computation cost.
    pub alpha: f64,
    /// Unit communication cost.
    pub beta: f64,
    /// Strategy-adaptation rate.
    pub delta: f64,
    /// Euler step.
    pub dt: f64,
    pub max_steps: usize,
    /// Residual (max |dx/dt|) below which a run counts as converged.
    pub eq_tol: f64,
    /// Shares above this count as a supported strategy.
    pub share_floor: f64,
    /// Allowed utility spread among supported strategies; `None` means
    /// `1e-3 * max reward pool`.
    pub utility_eq_tol: Option<f64>,
    pub populations: Vec<PopulationSpec>,
    pub servers: Vec<EdgeServerSpec>,
    pub rng_seed: u64,
    /// Keep every `record_every`-th step in the trajectory (the initial and
    /// final states are always kept).
    pub record_every: usize,
}

pub const DEFAULT_ALPHA: f64 = 0.001;
pub const DEFAULT_BETA: f64 = 0.001;
pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_MAX_STEPS: usize = 1_000_000;
pub const DEFAULT_EQ_TOL: f64 = 1e-8;
pub const DEFAULT_SHARE_FLOOR: f64 = 1e-4;

impl GameConfig {
    /// Instance with the default costs and integrator settings.
    pub fn new(populations: Vec<PopulationSpec>, servers: Vec<EdgeServerSpec>) -> Self {
        GameConfig {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            delta: DEFAULT_DELTA,
            dt: DEFAULT_DT,
            max_steps: DEFAULT_MAX_STEPS,
            eq_tol: DEFAULT_EQ_TOL,
            share_floor: DEFAULT_SHARE_FLOOR,
            utility_eq_tol: None,
            populations,
            servers,
            rng_seed: 0,
            record_every: 1,
        }
    }

    pub fn num_populations(&self) -> usize {
        self.populations.len()
    }

    pub fn num_servers(&self) -> usize {
        self.servers.len()
    }

    pub fn utility_tolerance(&self) -> f64 {
        self.utility_eq_tol.unwrap_or_else(|| {
            1e-3 * self
                .servers
                .iter()
                .map(|s| s.reward_pool)
                .fold(0.0, f64::max)
        })
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, what: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Validation(what.to_string()))
            }
        }
        check(self.alpha.is_finite() && self.alpha >= 0.0, "alpha must be >= 0")?;
        check(self.beta.is_finite() && self.beta >= 0.0, "beta must be >= 0")?;
        check(self.delta.is_finite() && self.delta > 0.0, "delta must be > 0")?;
        check(self.dt.is_finite() && self.dt > 0.0, "dt must be > 0")?;
        check(self.eq_tol.is_finite() && self.eq_tol > 0.0, "eq_tol must be > 0")?;
        check(self.max_steps >= 1, "max_steps must be >= 1")?;
        check(self.record_every >= 1, "record_every must be >= 1")?;
        check(
            (0.0..1.0).contains(&self.share_floor),
            "share_floor must lie in [0, 1)",
        )?;
        if let Some(tol) = self.utility_eq_tol {
            check(tol.is_finite() && tol > 0.0, "utility_eq_tol must be > 0")?;
        }
        check(!self.populations.is_empty(), "at least one population is required")?;
        check(self.servers.len() >= 2, "at least two edge servers are required")?;
        for (z, p) in self.populations.iter().enumerate() {
            check(
                p.data_quantity.is_finite() && p.data_quantity > 0.0,
                &format!("population {z}: d_z must be > 0"),
            )?;
            check(
                p.compute.is_finite() && p.compute >= 0.0,
                &format!("population {z}: c_z must be >= 0"),
            )?;
            check(
                p.comm.is_finite() && p.comm >= 0.0,
                &format!("population {z}: m_z must be >= 0"),
            )?;
        }
        for (n, s) in self.servers.iter().enumerate() {
            check(
                s.reward_pool.is_finite() && s.reward_pool > 0.0,
                &format!("server {n}: gamma_n must be > 0"),
            )?;
            check(
                s.synthetic_compute.is_finite() && s.synthetic_compute >= 0.0,
                &format!("server {n}: s_n must be >= 0"),
            )?;
        }
        Ok(())
    }
}

/// Dense row-major matrix; rows index populations, columns index servers.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Argument("ragged matrix rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

const ROW_SUM_TOL: f64 = 1e-9;

/// Population shares `x[z][n]`: every entry in `[0, 1]`, every row sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationState(Matrix);

impl PopulationState {
    pub fn new(shares: Matrix) -> Result<Self> {
        for r in 0..shares.rows() {
            let row = shares.row(r);
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Validation(format!(
                    "population {r}: share {v} outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Validation(format!(
                    "population {r}: shares sum to {sum}, expected 1"
                )));
            }
        }
        Ok(PopulationState(shares))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Skips the simplex checks; finite-difference probes step off the simplex.
    pub(crate) fn from_matrix_unchecked(shares: Matrix) -> Self {
        PopulationState(shares)
    }

    pub fn uniform(populations: usize, servers: usize) -> Self {
        let mut m = Matrix::zeros(populations, servers);
        m.data.fill(1.0 / servers as f64);
        PopulationState(m)
    }

    pub fn populations(&self) -> usize {
        self.0.rows()
    }

    pub fn servers(&self) -> usize {
        self.0.cols()
    }

    pub fn share(&self, z: usize, n: usize) -> f64 {
        self.0.get(z, n)
    }

    pub fn row(&self, z: usize) -> &[f64] {
        self.0.row(z)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Infinity-norm distance between two states of the same shape.
    pub fn distance(&self, other: &PopulationState) -> f64 {
        self.0
            .as_slice()
            .iter()
            .zip(other.0.as_slice())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn check_shape(&self, cfg: &GameConfig) -> Result<()> {
        if self.populations() != cfg.num_populations() || self.servers() != cfg.num_servers() {
            return Err(Error::Argument(format!(
                "state is {}x{} but the game has {} populations and {} servers",
                self.populations(),
                self.servers(),
                cfg.num_populations(),
                cfg.num_servers()
            )));
        }
        Ok(())
    }
}

/// Data pooled at each server: `S[n] = sum_z d[z] * x[z][n]`.
pub fn pooled_data(cfg: &GameConfig, state: &PopulationState) -> Vec<f64> {
    (0..state.servers())
        .map(|n| {
            cfg.populations
                .iter()
                .enumerate()
                .map(|(z, p)| p.data_quantity * state.share(z, n))
                .sum()
        })
        .collect()
}

fn utility_with(cfg: &GameConfig, state: &PopulationState, pooled: &[f64], z: usize, n: usize) -> f64 {
    let pop = &cfg.populations[z];
    let server = &cfg.servers[n];
    // An empty server pays nothing.
    let reward_share = if pooled[n] > 0.0 {
        pop.data_quantity * state.share(z, n) / pooled[n]
    } else {
        0.0
    };
    server.reward_pool * reward_share
        - cfg.alpha * (server.synthetic_compute + pop.compute)
        - cfg.beta * pop.comm
}

fn check_indices(cfg: &GameConfig, z: usize, n: usize) -> Result<()> {
    if z >= cfg.num_populations() {
        return Err(Error::Argument(format!("population index {z} out of range")));
    }
    if n >= cfg.num_servers() {
        return Err(Error::Argument(format!("server index {n} out of range")));
    }
    Ok(())
}

/// Net utility of a population-`z` worker at server `n`.
pub fn utility(cfg: &GameConfig, state: &PopulationState, z: usize, n: usize) -> Result<f64> {
    check_indices(cfg, z, n)?;
    state.check_shape(cfg)?;
    let pooled = pooled_data(cfg, state);
    Ok(utility_with(cfg, state, &pooled, z, n))
}

/// All utilities at once.
pub fn utility_matrix(cfg: &GameConfig, state: &PopulationState) -> Matrix {
    let pooled = pooled_data(cfg, state);
    let mut u = Matrix::zeros(state.populations(), state.servers());
    for z in 0..state.populations() {
        for n in 0..state.servers() {
            u.set(z, n, utility_with(cfg, state, &pooled, z, n));
        }
    }
    u
}

fn row_average(utilities: &[f64], shares: &[f64]) -> f64 {
    utilities.iter().zip(shares).map(|(u, x)| u * x).sum()
}

/// Share-weighted mean utility of population `z`.
pub fn average_utility(cfg: &GameConfig, state: &PopulationState, z: usize) -> Result<f64> {
    check_indices(cfg, z, 0)?;
    state.check_shape(cfg)?;
    let u = utility_matrix(cfg, state);
    Ok(row_average(u.row(z), state.row(z)))
}

fn rhs_from(cfg: &GameConfig, state: &PopulationState, u: &Matrix) -> (Matrix, Vec<f64>) {
    let mut rhs = Matrix::zeros(state.populations(), state.servers());
    let mut averages = Vec::with_capacity(state.populations());
    for z in 0..state.populations() {
        let avg = row_average(u.row(z), state.row(z));
        averages.push(avg);
        for n in 0..state.servers() {
            rhs.set(z, n, cfg.delta * state.share(z, n) * (u.get(z, n) - avg));
        }
    }
    (rhs, averages)
}

/// Replicator vector field `delta * x * (u - ubar)`.
pub fn replicator_rhs(cfg: &GameConfig, state: &PopulationState) -> Matrix {
    let u = utility_matrix(cfg, state);
    rhs_from(cfg, state, &u).0
}

fn euler_project(cfg: &GameConfig, state: &PopulationState, rhs: &Matrix) -> PopulationState {
    let mut next = state.0.clone();
    for z in 0..next.rows() {
        let row = next.row_mut(z);
        for (n, v) in row.iter_mut().enumerate() {
            *v = (*v + cfg.dt * rhs.get(z, n)).clamp(0.0, 1.0);
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    PopulationState(next)
}

/// One explicit-Euler step followed by clamp-and-renormalise.
pub fn step(cfg: &GameConfig, state: &PopulationState) -> PopulationState {
    let rhs = replicator_rhs(cfg, state);
    euler_project(cfg, state, &rhs)
}

/// Largest utility spread among supported strategies, over all populations.
pub fn support_utility_gap(cfg: &GameConfig, state: &PopulationState, utilities: &Matrix) -> f64 {
    (0..state.populations())
        .map(|z| {
            let supported = (0..state.servers())
                .filter(|&n| state.share(z, n) > cfg.share_floor)
                .map(|n| utilities.get(z, n));
            let (lo, hi) = supported.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| {
                (lo.min(u), hi.max(u))
            });
            if hi >= lo {
                hi - lo
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Time series recorded by [`run_to_equilibrium`]; entry `i` describes the
/// state at time `times[i]` (steps times `dt`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PopulationState>,
    pub utilities: Vec<Matrix>,
    pub avg_utilities: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunStatus {
    Converged { steps: usize },
    NoConvergence { steps: usize, residual: f64 },
}

impl RunStatus {
    pub fn is_converged(&self) -> bool {
        matches!(self, RunStatus::Converged { .. })
    }

    pub fn steps(&self) -> usize {
        match *self {
            RunStatus::Converged { steps } | RunStatus::NoConvergence { steps, .. } => steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumRun {
    pub trajectory: Trajectory,
    pub state: PopulationState,
    pub status: RunStatus,
    /// Final residual `max |dx/dt|`.
    pub residual: f64,
    /// Final within-support utility spread.
    pub utility_gap: f64,
}

impl EquilibriumRun {
    /// Turns a non-converged run into [`Error::NoConvergence`].
    pub fn into_result(self) -> Result<EquilibriumRun> {
        match self.status {
            RunStatus::Converged { .. } => Ok(self),
            RunStatus::NoConvergence { steps, residual } => {
                Err(Error::NoConvergence { steps, residual })
            }
        }
    }
}

/// Integrates the replicator dynamics until the residual drops below
/// `eq_tol` with all supported strategies at equal utility, or until
/// `max_steps` Euler steps have been taken.
pub fn run_to_equilibrium(cfg: &GameConfig, init: &PopulationState) -> Result<EquilibriumRun> {
    cfg.validate()?;
    init.check_shape(cfg)?;
    let gap_tol = cfg.utility_tolerance();
    let mut traj = Trajectory::default();
    let mut state = init.clone();
    let mut steps = 0usize;
    loop {
        let u = utility_matrix(cfg, &state);
        let (rhs, averages) = rhs_from(cfg, &state, &u);
        let residual = rhs.max_abs();
        let gap = support_utility_gap(cfg, &state, &u);
        let status = if residual < cfg.eq_tol && gap <= gap_tol {
            Some(RunStatus::Converged { steps })
        } else if steps >= cfg.max_steps {
            Some(RunStatus::NoConvergence { steps, residual })
        } else {
            None
        };
        if status.is_some() || steps.is_multiple_of(cfg.record_every) {
            traj.times.push(steps as f64 * cfg.dt);
            traj.states.push(state.clone());
            traj.utilities.push(u);
            traj.avg_utilities.push(averages);
            traj.residuals.push(residual);
        }
        if let Some(status) = status {
            return Ok(EquilibriumRun {
                trajectory: traj,
                state,
                status,
                residual,
                utility_gap: gap,
            });
        }
        state = euler_project(cfg, &state, &rhs);
        steps += 1;
    }
}

/// How to build the initial population state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    Uniform,
    /// Each row drawn from the flat Dirichlet distribution.
    Random(u64),
    Explicit(Matrix),
}

pub fn init_state(cfg: &GameConfig, mode: &InitMode) -> Result<PopulationState> {
    let (z, n) = (cfg.num_populations(), cfg.num_servers());
    match mode {
        InitMode::Uniform => Ok(PopulationState::uniform(z, n)),
        InitMode::Random(seed) => {
            let mut rng = seed::rng(*seed);
            let mut m = Matrix::zeros(z, n);
            for r in 0..z {
                let row = m.row_mut(r);
                for v in row.iter_mut() {
                    *v = rng.sample::<f64, _>(Exp1);
                }
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
            }
            PopulationState::new(m)
        }
        InitMode::Explicit(m) => {
            let state = PopulationState::new(m.clone())?;
            state.check_shape(cfg)?;
            Ok(state)
        }
    }
}

/// Scenarios used throughout the simulations.
pub mod scenarios {
    use super::*;

    /// Two populations (d = 2000 / 4000) choosing between two servers with
    /// synthetic-data requirements 2 and 4. Everything else sits at the lower
    /// end of the default parameter ranges (gamma = 100, c = m = 10).
    pub fn two_population() -> GameConfig {
        GameConfig::new(
            vec![
                PopulationSpec::new(2000.0, 10.0, 10.0),
                PopulationSpec::new(4000.0, 10.0, 10.0),
            ],
            vec![EdgeServerSpec::new(100.0, 2.0), EdgeServerSpec::new(100.0, 4.0)],
        )
    }

    /// Three populations with increasing resource costs (c = m = 10/30/50,
    /// d = 3000) and three servers with increasing rewards (100/300/500) and
    /// requirements (2/4/6).
    pub fn three_population() -> GameConfig {
        GameConfig::new(
            vec![
                PopulationSpec::new(3000.0, 10.0, 10.0),
                PopulationSpec::new(3000.0, 30.0, 30.0),
                PopulationSpec::new(3000.0, 50.0, 50.0),
            ],
            vec![
                EdgeServerSpec::new(100.0, 2.0),
                EdgeServerSpec::new(300.0, 4.0),
                EdgeServerSpec::new(500.0, 6.0),
            ],
        )
    }

    /// State of a two-server game from the shares on server 1.
    pub fn two_server_state(x1: &[f64]) -> PopulationState {
        let rows: Vec<Vec<f64>> = x1.iter().map(|&x| vec![x, 1.0 - x]).collect();
        PopulationState::from_rows(&rows).expect("shares in [0, 1]")
    }
}
