//! Numerical certificates for a game instance: bounded partial derivatives,
//! multi-start uniqueness, equilibrium classification and a quadratic
//! Lyapunov function along recorded trajectories.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::game::{
    self, init_state, pooled_data, utility_matrix, EquilibriumRun, GameConfig, InitMode,
    PopulationState, Trajectory,
};
use crate::seed;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Relative agreement required between closed forms and finite differences.
pub const FD_REL_TOL: f64 = 1e-4;
pub const DEFAULT_UNIQUENESS_TOL: f64 = 1e-3;
pub const LYAPUNOV_SLACK: f64 = 1e-9;

/// `d u[z][n] / d x[z][v]`, shares treated as independent coordinates.
///
/// The reward share of server `n` only involves column `n`, so the partial is
/// zero for `v != n`. For `v == n` it is
/// `gamma[n] * (d[z] / S[n] - x[z][n] * d[z]^2 / S[n]^2)`, which is never
/// negative: a population's reward fraction grows with its own share.
pub fn utility_partial(
    cfg: &GameConfig,
    state: &PopulationState,
    z: usize,
    n: usize,
    v: usize,
) -> Result<f64> {
    if z >= cfg.num_populations() || n >= cfg.num_servers() || v >= cfg.num_servers() {
        return Err(Error::Argument(format!("index ({z}, {n}, {v}) out of range")));
    }
    if state.populations() != cfg.num_populations() || state.servers() != cfg.num_servers() {
        return Err(Error::Argument("state shape does not match the game".into()));
    }
    if state.row(z).iter().any(|&x| x <= 0.0) {
        return Err(Error::Domain(format!("row {z} is not strictly interior")));
    }
    let pooled = pooled_data(cfg, state)[n];
    if pooled <= 0.0 {
        return Err(Error::Domain(format!("no data pooled at server {n}")));
    }
    if v != n {
        return Ok(0.0);
    }
    let d = cfg.populations[z].data_quantity;
    let x = state.share(z, n);
    Ok(cfg.servers[n].reward_pool * (d / pooled - x * d * d / (pooled * pooled)))
}

/// Closed form of `d f[z][n] / d x[z][v]` for the replicator field
/// `f = delta * x * (u - ubar)`.
pub fn rhs_partial(
    cfg: &GameConfig,
    state: &PopulationState,
    z: usize,
    n: usize,
    v: usize,
) -> Result<f64> {
    let u = utility_matrix(cfg, state);
    let avg: f64 = (0..state.servers()).map(|m| u.get(z, m) * state.share(z, m)).sum();
    let du_n = utility_partial(cfg, state, z, n, v)?;
    // d ubar / d x_v = x_v * du_v/dx_v + u_v, the other utilities do not move.
    let du_v = utility_partial(cfg, state, z, v, v)?;
    let davg = state.share(z, v) * du_v + u.get(z, v);
    let kron = if n == v { 1.0 } else { 0.0 };
    Ok(cfg.delta * (kron * (u.get(z, n) - avg) + state.share(z, n) * (du_n - davg)))
}

fn perturbed(state: &PopulationState, z: usize, v: usize, h: f64) -> PopulationState {
    let mut m = state.matrix().clone();
    m.set(z, v, m.get(z, v) + h);
    PopulationState::from_matrix_unchecked(m)
}

/// Central difference of `utility(z, n)` with respect to `x[z][v]`.
pub fn utility_partial_fd(
    cfg: &GameConfig,
    state: &PopulationState,
    z: usize,
    n: usize,
    v: usize,
) -> f64 {
    let plus = game::utility_matrix(cfg, &perturbed(state, z, v, FD_STEP)).get(z, n);
    let minus = game::utility_matrix(cfg, &perturbed(state, z, v, -FD_STEP)).get(z, n);
    (plus - minus) / (2.0 * FD_STEP)
}

/// Central difference of the replicator field entry `(z, n)` with respect to `x[z][v]`.
pub fn rhs_partial_fd(cfg: &GameConfig, state: &PopulationState, z: usize, n: usize, v: usize) -> f64 {
    let plus = game::replicator_rhs(cfg, &perturbed(state, z, v, FD_STEP)).get(z, n);
    let minus = game::replicator_rhs(cfg, &perturbed(state, z, v, -FD_STEP)).get(z, n);
    (plus - minus) / (2.0 * FD_STEP)
}

/// Draws a state whose entries are all at least `0.01 / N`.
pub fn random_interior_state(cfg: &GameConfig, seed: u64) -> Result<PopulationState> {
    let raw = init_state(cfg, &InitMode::Random(seed))?;
    let n = cfg.num_servers() as f64;
    let rows: Vec<Vec<f64>> = (0..raw.populations())
        .map(|z| raw.row(z).iter().map(|x| 0.99 * x + 0.01 / n).collect())
        .collect();
    PopulationState::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundednessReport {
    /// Largest observed `|d f[z][n] / d x[z][v]|`: an empirical Lipschitz constant.
    pub max_abs_partial: f64,
    /// `(z, n, v)` where the maximum was seen.
    pub argmax: (usize, usize, usize),
    pub samples: usize,
}

impl BoundednessReport {
    pub fn is_finite(&self) -> bool {
        self.max_abs_partial.is_finite()
    }
}

/// Samples interior states and records the largest finite-difference partial
/// of the replicator field within each population.
pub fn certify_boundedness(cfg: &GameConfig, n_samples: usize, seed: u64) -> Result<BoundednessReport> {
    if n_samples == 0 {
        return Err(Error::Argument("n_samples must be >= 1".into()));
    }
    cfg.validate()?;
    let mut report = BoundednessReport {
        max_abs_partial: 0.0,
        argmax: (0, 0, 0),
        samples: n_samples,
    };
    for i in 0..n_samples {
        let state = random_interior_state(cfg, seed::derive_seed(seed, i as u64))?;
        for z in 0..cfg.num_populations() {
            for n in 0..cfg.num_servers() {
                for v in 0..cfg.num_servers() {
                    let p = rhs_partial_fd(cfg, &state, z, n, v).abs();
                    if !p.is_finite() || p > report.max_abs_partial {
                        report.max_abs_partial = p;
                        report.argmax = (z, n, v);
                    }
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortraitVerdict {
    /// Every run converged and all endpoints agree within the tolerance.
    Unique,
    /// Every run converged but endpoints differ.
    NotUnique,
    /// At least one run hit `max_steps`.
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct PhasePortrait {
    pub inits: Vec<PopulationState>,
    pub runs: Vec<EquilibriumRun>,
    /// Largest pairwise infinity-norm distance between endpoints.
    pub max_endpoint_spread: f64,
    pub uniqueness_tol: f64,
}

impl PhasePortrait {
    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.runs.iter().map(|r| &r.trajectory)
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &PopulationState> {
        self.runs.iter().map(|r| &r.state)
    }

    pub fn verdict(&self) -> PortraitVerdict {
        if self.runs.iter().any(|r| !r.status.is_converged()) {
            PortraitVerdict::Inconclusive
        } else if self.max_endpoint_spread < self.uniqueness_tol {
            PortraitVerdict::Unique
        } else {
            PortraitVerdict::NotUnique
        }
    }
}

/// `n_inits` seeded, strictly interior initial states.
pub fn portrait_inits(cfg: &GameConfig, n_inits: usize, seed: u64) -> Result<Vec<PopulationState>> {
    (0..n_inits)
        .map(|i| random_interior_state(cfg, seed::derive_seed(seed, i as u64)))
        .collect()
}

pub fn phase_portrait(cfg: &GameConfig, n_inits: usize, seed: u64) -> Result<PhasePortrait> {
    phase_portrait_from(cfg, portrait_inits(cfg, n_inits, seed)?)
}

/// Runs the dynamics from every given initial state (concurrently) and
/// measures how far apart the endpoints land.
pub fn phase_portrait_from(cfg: &GameConfig, inits: Vec<PopulationState>) -> Result<PhasePortrait> {
    if inits.len() < 2 {
        return Err(Error::Argument("a phase portrait needs at least two initial states".into()));
    }
    if let Some(i) = inits
        .iter()
        .position(|s| s.matrix().as_slice().iter().any(|&x| x <= 0.0 || x >= 1.0))
    {
        return Err(Error::Argument(format!("initial state {i} is not strictly interior")));
    }
    let runs = inits
        .par_iter()
        .map(|init| game::run_to_equilibrium(cfg, init))
        .collect::<Result<Vec<_>>>()?;
    let mut spread: f64 = 0.0;
    for (i, a) in runs.iter().enumerate() {
        for b in &runs[i + 1..] {
            spread = spread.max(a.state.distance(&b.state));
        }
    }
    Ok(PhasePortrait {
        inits,
        runs,
        max_endpoint_spread: spread,
        uniqueness_tol: DEFAULT_UNIQUENESS_TOL,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovReport {
    /// Summed `G = sum (x* - x)^2` at every recorded step.
    pub values: Vec<f64>,
    pub monotone: bool,
    /// Largest step-to-step increase of the summed `G` (0 when monotone).
    pub max_increase: f64,
    /// Per-entry monotonicity, row-major `(z, n)`; diagnostics only.
    pub entry_monotone: Vec<bool>,
}

/// Evaluates the quadratic Lyapunov candidate centred on `eq` along `traj`.
pub fn lyapunov_check(traj: &Trajectory, eq: &PopulationState) -> Result<LyapunovReport> {
    if traj.states.len() < 2 {
        return Err(Error::Argument("trajectory needs at least two states".into()));
    }
    let target = eq.matrix().as_slice();
    let width = target.len();
    let mut values = Vec::with_capacity(traj.states.len());
    let mut entry_monotone = vec![true; width];
    let mut prev_entries: Option<Vec<f64>> = None;
    for state in &traj.states {
        if state.matrix().as_slice().len() != width {
            return Err(Error::Argument("trajectory and equilibrium shapes differ".into()));
        }
        let entries: Vec<f64> = state
            .matrix()
            .as_slice()
            .iter()
            .zip(target)
            .map(|(x, xs)| (xs - x) * (xs - x))
            .collect();
        if let Some(prev) = &prev_entries {
            for (k, (now, before)) in entries.iter().zip(prev).enumerate() {
                if *now > before + LYAPUNOV_SLACK {
                    entry_monotone[k] = false;
                }
            }
        }
        values.push(entries.iter().sum());
        prev_entries = Some(entries);
    }
    let max_increase = values
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max);
    Ok(LyapunovReport {
        monotone: max_increase <= LYAPUNOV_SLACK,
        values,
        max_increase,
        entry_monotone,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquilibriumKind {
    /// Every population sits on a single server.
    Boundary,
    /// Every share strictly between the floor and one minus the floor.
    Interior,
    MixedRows,
}

pub fn classify(eq: &PopulationState, share_floor: f64) -> EquilibriumKind {
    let rows = 0..eq.populations();
    if rows.clone().all(|z| eq.row(z).iter().any(|&x| x >= 1.0 - share_floor)) {
        EquilibriumKind::Boundary
    } else if eq
        .matrix()
        .as_slice()
        .iter()
        .all(|&x| x > share_floor && x < 1.0 - share_floor)
    {
        EquilibriumKind::Interior
    } else {
        EquilibriumKind::MixedRows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumReport {
    pub state: PopulationState,
    pub kind: EquilibriumKind,
    pub residual: f64,
    pub lyapunov_monotone: bool,
    pub utility_gap: f64,
}

/// Summarises a finished run.
pub fn equilibrium_report(cfg: &GameConfig, run: &EquilibriumRun) -> Result<EquilibriumReport> {
    let lyapunov_monotone = if run.trajectory.states.len() >= 2 {
        lyapunov_check(&run.trajectory, &run.state)?.monotone
    } else {
        // Started at the fixed point: G is identically zero.
        true
    };
    Ok(EquilibriumReport {
        state: run.state.clone(),
        kind: classify(&run.state, cfg.share_floor),
        residual: run.residual,
        lyapunov_monotone,
        utility_gap: run.utility_gap,
    })
}

/// Aggregate data `sum_z d[z] * x[z][n]` for every server.
pub fn aggregated_data(cfg: &GameConfig, state: &PopulationState) -> Vec<f64> {
    pooled_data(cfg, state)
}
