//! Experiment configuration in TOML.
//!
//! ```toml
//! mode = "game"          # game | phase | hfl | sweep
//! output_dir = "out"
//! master_seed = 7
//!
//! [game]
//! delta = 0.01
//! populations = [{ d_z = 2000, c_z = 10, m_z = 10 }, { d_z = 4000, c_z = 10, m_z = 10 }]
//! servers = [{ gamma_n = 100, s_n = 2 }, { gamma_n = 100, s_n = 4 }]
//!
//! [hfl]
//! kappa1 = 5
//! kappa2 = 2
//! K = 300
//!
//! [data]
//! classes_per_worker = 1
//! J = 10
//!
//! [sweep]
//! parameter = "gamma_1"
//! start = 100
//! stop = 900
//! step = 100
//! ```
//!
//! Absent keys take the defaults below; unknown keys are errors that name the
//! key and its line.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::data::{self, EdgeMode, PartitionSpec, Skew};
use crate::error::{Error, Result};
use crate::game::{self, EdgeServerSpec, GameConfig, Matrix, PopulationSpec};
use crate::hfl::HflConfig;
use crate::model::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One equilibrium run.
    Game,
    /// Multi-start phase portrait.
    Phase,
    /// Hierarchical training, repeated over seeds.
    Hfl,
    /// One run per value of a swept parameter.
    Sweep,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Game => "game",
            Mode::Phase => "phase",
            Mode::Hfl => "hfl",
            Mode::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GameInit {
    Uniform,
    Random,
    Explicit(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSection {
    pub config: GameConfig,
    pub init: GameInit,
    pub init_seed: Option<u64>,
    /// Extra random interior starts in phase mode.
    pub phase_inits: usize,
    /// Explicit starts in phase mode.
    pub phase_states: Vec<Matrix>,
    pub boundedness_samples: usize,
    /// `(population, expected row, tolerance)` compared against the equilibrium
    /// and reported in the manifest.
    pub reference: Option<(usize, Vec<f64>, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub spec: PartitionSpec,
    pub seed: Option<u64>,
    pub root: Option<PathBuf>,
    /// `edge_mode = "from-equilibrium"` without explicit shares: run the game
    /// section and use its equilibrium.
    pub shares_from_game: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parameter: String,
    pub values: Vec<f64>,
    /// With `parameter = "kappa1"`, sets `kappa2 = fixed_product / kappa1`.
    pub fixed_product: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    /// Figure or study this configuration reproduces; copied to the manifest.
    pub figure: Option<String>,
    pub notes: Option<String>,
    pub game: GameSection,
    pub hfl: HflConfig,
    pub hfl_seed: Option<u64>,
    pub repetitions: usize,
    pub data: DataSection,
    pub sweep: Option<SweepSpec>,
    /// SHA-256 of the canonical form of the parsed table.
    pub hash: String,
}

const TOP_KEYS: &[&str] = &["mode", "output_dir", "master_seed", "figure", "notes", "game", "hfl", "data", "sweep"];
const GAME_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "delta",
    "dt",
    "max_steps",
    "eq_tol",
    "share_floor",
    "utility_eq_tol",
    "record_every",
    "rng_seed",
    "populations",
    "servers",
    "init",
    "init_shares",
    "phase_inits",
    "phase_states",
    "boundedness_samples",
    "reference_population",
    "reference_shares",
    "reference_tolerance",
];
const POPULATION_KEYS: &[&str] = &["d_z", "c_z", "m_z"];
const SERVER_KEYS: &[&str] = &["gamma_n", "s_n"];
const HFL_KEYS: &[&str] = &[
    "kappa1",
    "kappa2",
    "K",
    "eta0",
    "decay",
    "batch_size",
    "eval_every",
    "eval_intermediate",
    "rng_seed",
    "hidden_dim",
    "activation",
    "repetitions",
];
const DATA_KEYS: &[&str] = &[
    "classes_per_worker",
    "J",
    "N",
    "edge_mode",
    "equilibrium_shares",
    "synthetic_fraction",
    "pool_fraction",
    "noise_sigma",
    "train_subset",
    "rng_seed",
    "root",
];
const SWEEP_KEYS: &[&str] = &["parameter", "values", "start", "stop", "step", "fixed_product"];

const GAME_SWEEP: &[&str] = &["alpha", "beta", "delta", "dt"];
const GAME_INDEXED_SWEEP: &[&str] = &["gamma", "s", "d", "c", "m"];
const HFL_SWEEP: &[&str] = &["kappa1", "kappa2", "K", "eta0", "decay", "batch_size", "hidden_dim"];
const DATA_SWEEP: &[&str] = &[
    "classes_per_worker",
    "J",
    "N",
    "synthetic_fraction",
    "pool_fraction",
    "noise_sigma",
    "train_subset",
];

/// Key path (`game.alpha`, `game.populations[1].d_z`) to 1-based line.
#[derive(Debug, Default)]
struct Lines(HashMap<String, usize>);

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn index_lines(text: &str, lines: &mut Lines) {
    use toml::de::{DeTable, DeValue};
    fn walk(table: &DeTable<'_>, prefix: &str, text: &str, lines: &mut Lines) {
        for (k, v) in table.iter() {
            let path = if prefix.is_empty() {
                k.get_ref().to_string()
            } else {
                format!("{prefix}.{}", k.get_ref())
            };
            lines.0.insert(path.clone(), line_of(text, k.span().start));
            visit(v.get_ref(), &path, text, lines);
        }
    }
    fn visit(v: &DeValue<'_>, path: &str, text: &str, lines: &mut Lines) {
        match v {
            DeValue::Table(t) => walk(t, path, text, lines),
            DeValue::Array(a) => {
                for (i, item) in a.iter().enumerate() {
                    let p = format!("{path}[{i}]");
                    lines.0.insert(p.clone(), line_of(text, item.span().start));
                    visit(item.get_ref(), &p, text, lines);
                }
            }
            _ => {}
        }
    }
    if let Ok(doc) = DeTable::parse(text) {
        walk(doc.get_ref(), "", text, lines);
    }
}

fn syntax_error(text: &str, err: toml::de::Error) -> Error {
    let line = err.span().map(|s| line_of(text, s.start)).unwrap_or(0);
    let key = text
        .lines()
        .nth(line.saturating_sub(1))
        .and_then(|l| l.split_once('='))
        .map(|(k, _)| k.trim().to_string())
        .unwrap_or_default();
    Error::ConfigKey {
        line,
        key,
        message: err.message().trim().to_string(),
    }
}

fn parse_table(text: &str, lines: &mut Lines) -> Result<Table> {
    let table: Table = text.parse().map_err(|e| syntax_error(text, e))?;
    index_lines(text, lines);
    Ok(table)
}

/// Typed access to one table with key-path based error messages.
struct Section<'a> {
    path: String,
    table: Option<&'a Table>,
    lines: &'a Lines,
}

impl<'a> Section<'a> {
    fn new(path: &str, table: Option<&'a Table>, lines: &'a Lines, allowed: &[&str]) -> Result<Self> {
        let s = Section {
            path: path.to_string(),
            table,
            lines,
        };
        if let Some(t) = table {
            for key in t.keys() {
                if !allowed.contains(&key.as_str()) {
                    return Err(s.err(key, format!("unknown key; expected one of: {}", allowed.join(", "))));
                }
            }
        }
        Ok(s)
    }

    fn full(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn err(&self, key: &str, message: impl Into<String>) -> Error {
        let full = self.full(key);
        Error::ConfigKey {
            line: self.lines.0.get(&full).copied().unwrap_or(0),
            key: full,
            message: message.into(),
        }
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn number(&self, key: &str, v: &Value) -> Result<f64> {
        match v {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            other => Err(self.err(key, format!("expected a number, found {}", other.type_str()))),
        }
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key).map(|v| self.number(key, v)).transpose()
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    fn opt_u64(&self, key: &str) -> Result<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(Value::Integer(_)) => Err(self.err(key, "expected a non-negative integer")),
            Some(other) => Err(self.err(key, format!("expected an integer, found {}", other.type_str()))),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.opt_u64(key)?.map(|v| v as usize).unwrap_or(default))
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(other) => Err(self.err(key, format!("expected a boolean, found {}", other.type_str()))),
        }
    }

    fn opt_str(&self, key: &str) -> Result<Option<&'a str>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(self.err(key, format!("expected a string, found {}", other.type_str()))),
        }
    }

    fn array(&self, key: &str) -> Result<Option<&'a Vec<Value>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => Ok(Some(a)),
            Some(other) => Err(self.err(key, format!("expected an array, found {}", other.type_str()))),
        }
    }

    fn numbers(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.array(key)?
            .map(|a| a.iter().map(|v| self.number(key, v)).collect())
            .transpose()
    }

    fn matrix(&self, key: &str, v: &Value) -> Result<Matrix> {
        let Value::Array(rows) = v else {
            return Err(self.err(key, "expected an array of rows"));
        };
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| match r {
                Value::Array(cells) => cells.iter().map(|c| self.number(key, c)).collect(),
                _ => Err(self.err(key, "expected an array of rows")),
            })
            .collect::<Result<_>>()?;
        Matrix::from_rows(&rows).map_err(|e| self.err(key, e.to_string()))
    }

    fn sub(&self, key: &str, index: usize, v: &'a Value, allowed: &[&str]) -> Result<Section<'a>> {
        let path = format!("{}[{index}]", self.full(key));
        match v {
            Value::Table(t) => Section::new(&path, Some(t), self.lines, allowed),
            _ => Err(self.err(key, "expected inline tables")),
        }
    }

    fn required(&self, key: &str) -> Result<f64> {
        self.opt_f64(key)?.ok_or_else(|| self.err(key, "missing required key"))
    }
}

fn section<'a>(root: &'a Table, name: &str, lines: &'a Lines, allowed: &[&str]) -> Result<Section<'a>> {
    let top = Section::new("", Some(root), lines, TOP_KEYS)?;
    let table = match root.get(name) {
        None => None,
        Some(Value::Table(t)) => Some(t),
        Some(other) => return Err(top.err(name, format!("expected a table, found {}", other.type_str()))),
    };
    Section::new(name, table, lines, allowed)
}

fn parse_game(s: &Section<'_>) -> Result<GameSection> {
    let mut cfg = game::scenarios::three_population();
    cfg.alpha = s.f64("alpha", cfg.alpha)?;
    cfg.beta = s.f64("beta", cfg.beta)?;
    cfg.delta = s.f64("delta", cfg.delta)?;
    cfg.dt = s.f64("dt", cfg.dt)?;
    cfg.max_steps = s.usize("max_steps", cfg.max_steps)?;
    cfg.eq_tol = s.f64("eq_tol", cfg.eq_tol)?;
    cfg.share_floor = s.f64("share_floor", cfg.share_floor)?;
    cfg.utility_eq_tol = s.opt_f64("utility_eq_tol")?;
    cfg.record_every = s.usize("record_every", cfg.record_every)?;
    let init_seed = s.opt_u64("rng_seed")?;
    if let Some(pops) = s.array("populations")? {
        cfg.populations = pops
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let p = s.sub("populations", i, v, POPULATION_KEYS)?;
                Ok(PopulationSpec::new(p.required("d_z")?, p.required("c_z")?, p.required("m_z")?))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(servers) = s.array("servers")? {
        cfg.servers = servers
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let p = s.sub("servers", i, v, SERVER_KEYS)?;
                Ok(EdgeServerSpec::new(p.required("gamma_n")?, p.required("s_n")?))
            })
            .collect::<Result<_>>()?;
    }
    cfg.validate().map_err(|e| s.err("populations", e.to_string()))?;

    let explicit = s.get("init_shares").map(|v| s.matrix("init_shares", v)).transpose()?;
    let init = match (s.opt_str("init")?, explicit) {
        (None | Some("explicit"), Some(m)) => GameInit::Explicit(m),
        (Some("explicit"), None) => return Err(s.err("init", "init = \"explicit\" needs init_shares")),
        (None | Some("uniform"), None) => GameInit::Uniform,
        (Some("random"), None) => GameInit::Random,
        (Some(other), None) => {
            return Err(s.err("init", format!("unknown init {other:?}; expected uniform, random or explicit")))
        }
        (Some(_), Some(_)) => return Err(s.err("init_shares", "init_shares requires init = \"explicit\"")),
    };
    if let GameInit::Explicit(m) = &init {
        game::init_state(&cfg, &game::InitMode::Explicit(m.clone())).map_err(|e| s.err("init_shares", e.to_string()))?;
    }
    let phase_states = match s.array("phase_states")? {
        None => Vec::new(),
        Some(a) => a
            .iter()
            .map(|v| {
                let m = s.matrix("phase_states", v)?;
                game::init_state(&cfg, &game::InitMode::Explicit(m.clone()))
                    .map_err(|e| s.err("phase_states", e.to_string()))?;
                Ok(m)
            })
            .collect::<Result<_>>()?,
    };
    let reference = match s.numbers("reference_shares")? {
        None => None,
        Some(row) => {
            let z = s.usize("reference_population", 1)?;
            if z == 0 || z > cfg.num_populations() || row.len() != cfg.num_servers() {
                return Err(s.err("reference_shares", "reference row does not fit the game"));
            }
            Some((z - 1, row, s.f64("reference_tolerance", 0.10)?))
        }
    };
    Ok(GameSection {
        config: cfg,
        init,
        init_seed,
        phase_inits: s.usize("phase_inits", 10)?,
        phase_states,
        boundedness_samples: s.usize("boundedness_samples", 100)?,
        reference,
    })
}

fn parse_hfl(s: &Section<'_>) -> Result<(HflConfig, Option<u64>, usize)> {
    let d = HflConfig::default();
    let activation = match s.opt_str("activation")? {
        None => d.activation,
        Some(a) => Activation::parse(a).ok_or_else(|| s.err("activation", format!("unknown activation {a:?}")))?,
    };
    let cfg = HflConfig {
        kappa1: s.usize("kappa1", d.kappa1)?,
        kappa2: s.usize("kappa2", d.kappa2)?,
        iterations: s.usize("K", d.iterations)?,
        eta0: s.f64("eta0", d.eta0)?,
        decay: s.f64("decay", d.decay)?,
        batch_size: s.usize("batch_size", d.batch_size)?,
        eval_every: s.usize("eval_every", d.eval_every)?,
        eval_intermediate: s.bool("eval_intermediate", d.eval_intermediate)?,
        hidden_dim: s.usize("hidden_dim", d.hidden_dim)?,
        activation,
        rng_seed: 0,
    };
    cfg.validate().map_err(|e| s.err("K", e.to_string()))?;
    let reps = s.usize("repetitions", 1)?;
    if reps == 0 {
        return Err(s.err("repetitions", "must be positive"));
    }
    Ok((cfg, s.opt_u64("rng_seed")?, reps))
}

fn parse_data(s: &Section<'_>) -> Result<DataSection> {
    let d = PartitionSpec::default();
    let skew = match s.opt_u64("classes_per_worker")? {
        None => d.skew,
        Some(0) => Skew::Iid,
        Some(k) => Skew::Classes(k as usize),
    };
    let shares = s.numbers("equilibrium_shares")?;
    let mut shares_from_game = false;
    let edge_mode = match s.opt_str("edge_mode")? {
        None | Some("noniid") => EdgeMode::NonIid,
        Some("iid") => EdgeMode::Iid,
        Some("from-equilibrium") => match shares {
            Some(v) => EdgeMode::FromEquilibrium(v),
            None => {
                shares_from_game = true;
                EdgeMode::FromEquilibrium(Vec::new())
            }
        },
        Some(other) => {
            return Err(s.err(
                "edge_mode",
                format!("unknown edge mode {other:?}; expected iid, noniid or from-equilibrium"),
            ))
        }
    };
    let spec = PartitionSpec {
        skew,
        workers: s.usize("J", d.workers)?,
        edges: s.usize("N", d.edges)?,
        edge_mode,
        synthetic_fraction: s.f64("synthetic_fraction", d.synthetic_fraction)?,
        pool_fraction: s.f64("pool_fraction", d.pool_fraction)?,
        noise_sigma: s.f64("noise_sigma", d.noise_sigma)?,
        train_subset: s.opt_u64("train_subset")?.map(|v| v as usize),
        rng_seed: 0,
    };
    spec.validate().map_err(|e| s.err("J", e.to_string()))?;
    if let EdgeMode::FromEquilibrium(v) = &spec.edge_mode {
        if !v.is_empty() {
            data::largest_remainder(v, spec.workers).map_err(|e| s.err("equilibrium_shares", e.to_string()))?;
            if v.len() != spec.edges {
                return Err(s.err("equilibrium_shares", format!("{} shares for N = {}", v.len(), spec.edges)));
            }
        }
    }
    Ok(DataSection {
        spec,
        seed: s.opt_u64("rng_seed")?,
        root: s.opt_str("root")?.map(PathBuf::from),
        shares_from_game,
    })
}

fn parse_sweep(s: &Section<'_>) -> Result<Option<SweepSpec>> {
    if s.table.is_none() {
        return Ok(None);
    }
    let parameter = s
        .opt_str("parameter")?
        .ok_or_else(|| s.err("parameter", "missing required key"))?
        .to_string();
    let values = match s.numbers("values")? {
        Some(v) => v,
        None => {
            let start = s.required("start")?;
            let stop = s.required("stop")?;
            let step = s.required("step")?;
            if step.is_nan() || step <= 0.0 || stop < start {
                return Err(s.err("step", "need step > 0 and stop >= start"));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            (0..count).map(|i| start + i as f64 * step).collect()
        }
    };
    if values.is_empty() {
        return Err(s.err("values", "sweep needs at least one value"));
    }
    let fixed_product = s.opt_u64("fixed_product")?.map(|v| v as usize);
    if fixed_product.is_some() && parameter != "kappa1" {
        return Err(s.err("fixed_product", "fixed_product only applies to parameter = \"kappa1\""));
    }
    Ok(Some(SweepSpec {
        parameter,
        values,
        fixed_product,
    }))
}

/// Canonical text of a table: keys sorted, fixed value formatting.
fn canonical(table: &Table) -> String {
    fn value(v: &Value, out: &mut String) {
        match v {
            Value::Table(t) => {
                let sorted: BTreeMap<&String, &Value> = t.iter().collect();
                out.push('{');
                for (k, v) in sorted {
                    out.push_str(&format!("{k:?}="));
                    value(v, out);
                    out.push(';');
                }
                out.push('}');
            }
            Value::Array(a) => {
                out.push('[');
                for v in a {
                    value(v, out);
                    out.push(';');
                }
                out.push(']');
            }
            Value::Float(f) => out.push_str(&format!("f{:e}", f)),
            Value::Integer(i) => out.push_str(&format!("i{i}")),
            Value::String(s) => out.push_str(&format!("{s:?}")),
            Value::Boolean(b) => out.push_str(&b.to_string()),
            Value::Datetime(d) => out.push_str(&d.to_string()),
        }
    }
    let mut out = String::new();
    value(&Value::Table(table.clone()), &mut out);
    out
}

pub fn config_hash(table: &Table) -> String {
    let digest = Sha256::digest(canonical(table).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Merges `overlay` into `base`: sections merge key by key, everything else
/// is replaced.
fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => {
                for (kk, vv) in o {
                    b.insert(kk, vv);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_layers(&[text])
}

/// Parses documents in order, each merged over the previous ones; presets
/// come first and the user's config last.
pub fn parse_layers(layers: &[&str]) -> Result<ExperimentConfig> {
    let mut lines = Lines::default();
    let mut root = Table::new();
    for text in layers {
        let mut own = Lines::default();
        let table = parse_table(text, &mut own)?;
        lines.0.extend(own.0);
        merge(&mut root, table);
    }
    build(&root, &lines)
}

fn build(root: &Table, lines: &Lines) -> Result<ExperimentConfig> {
    let top = Section::new("", Some(root), lines, TOP_KEYS)?;
    let game = parse_game(&section(root, "game", lines, GAME_KEYS)?)?;
    let (hfl, hfl_seed, repetitions) = parse_hfl(&section(root, "hfl", lines, HFL_KEYS)?)?;
    let data = parse_data(&section(root, "data", lines, DATA_KEYS)?)?;
    let sweep_section = section(root, "sweep", lines, SWEEP_KEYS)?;
    let sweep = parse_sweep(&sweep_section)?;

    let mode = match top.opt_str("mode")? {
        None if sweep.is_some() => Mode::Sweep,
        None | Some("game") => Mode::Game,
        Some("phase") => Mode::Phase,
        Some("hfl") => Mode::Hfl,
        Some("sweep") => Mode::Sweep,
        Some(other) => {
            return Err(top.err("mode", format!("unknown mode {other:?}; expected game, phase, hfl or sweep")))
        }
    };
    if mode == Mode::Sweep && sweep.is_none() {
        return Err(top.err("mode", "sweep mode needs a [sweep] section"));
    }
    if data.shares_from_game && data.spec.edges != game.config.num_servers() {
        return Err(Error::ConfigKey {
            line: lines.0.get("data.N").copied().unwrap_or(0),
            key: "data.N".into(),
            message: format!(
                "from-equilibrium edges need N = {} (the game's server count)",
                game.config.num_servers()
            ),
        });
    }

    let cfg = ExperimentConfig {
        mode,
        output_dir: PathBuf::from(top.opt_str("output_dir")?.unwrap_or("out")),
        master_seed: top.opt_u64("master_seed")?.unwrap_or(0),
        figure: top.opt_str("figure")?.map(str::to_string),
        notes: top.opt_str("notes")?.map(str::to_string),
        game,
        hfl,
        hfl_seed,
        repetitions,
        data,
        sweep,
        hash: config_hash(root),
    };
    if let Some(sw) = &cfg.sweep {
        for &v in &sw.values {
            let mut probe = cfg.clone();
            probe
                .apply_sweep(sw, v)
                .map_err(|e| sweep_section.err("values", e.to_string()))?;
        }
    }
    Ok(cfg)
}

fn as_count(name: &str, v: f64) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
        return Err(Error::Config(format!("{name} needs a non-negative integer, got {v}")));
    }
    Ok(v as usize)
}

/// Splits `gamma_2` into `("gamma", 1)`.
fn indexed(name: &str) -> Option<(&str, usize)> {
    let (base, idx) = name.rsplit_once('_')?;
    let i: usize = idx.parse().ok()?;
    (GAME_INDEXED_SWEEP.contains(&base) && i >= 1).then_some((base, i - 1))
}

impl ExperimentConfig {
    /// Whether a sweep parameter belongs to the game (as opposed to training).
    pub fn is_game_parameter(name: &str) -> bool {
        GAME_SWEEP.contains(&name) || indexed(name).is_some()
    }

    pub fn is_known_parameter(name: &str) -> bool {
        Self::is_game_parameter(name) || HFL_SWEEP.contains(&name) || DATA_SWEEP.contains(&name)
    }

    /// Sets the swept parameter to `v` and revalidates.
    pub fn apply_sweep(&mut self, sw: &SweepSpec, v: f64) -> Result<()> {
        let name = sw.parameter.as_str();
        let g = &mut self.game.config;
        let h = &mut self.hfl;
        let d = &mut self.data.spec;
        match name {
            "alpha" => g.alpha = v,
            "beta" => g.beta = v,
            "delta" => g.delta = v,
            "dt" => g.dt = v,
            "kappa1" => {
                h.kappa1 = as_count(name, v)?;
                if let Some(p) = sw.fixed_product {
                    if h.kappa1 == 0 || p % h.kappa1 != 0 {
                        return Err(Error::Config(format!("kappa1 = {v} does not divide {p}")));
                    }
                    h.kappa2 = p / h.kappa1;
                }
            }
            "kappa2" => h.kappa2 = as_count(name, v)?,
            "K" => h.iterations = as_count(name, v)?,
            "eta0" => h.eta0 = v,
            "decay" => h.decay = v,
            "batch_size" => h.batch_size = as_count(name, v)?,
            "hidden_dim" => h.hidden_dim = as_count(name, v)?,
            "classes_per_worker" => {
                d.skew = match as_count(name, v)? {
                    0 => Skew::Iid,
                    k => Skew::Classes(k),
                }
            }
            "J" => d.workers = as_count(name, v)?,
            "N" => d.edges = as_count(name, v)?,
            "synthetic_fraction" => d.synthetic_fraction = v,
            "pool_fraction" => d.pool_fraction = v,
            "noise_sigma" => d.noise_sigma = v,
            "train_subset" => d.train_subset = Some(as_count(name, v)?),
            _ => {
                let Some((base, i)) = indexed(name) else {
                    return Err(Error::Config(format!("unknown sweep parameter {name:?}")));
                };
                let n_servers = g.num_servers();
                let n_pops = g.num_populations();
                let out_of_range = || Error::Config(format!("{name} is out of range"));
                match base {
                    "gamma" | "s" if i >= n_servers => return Err(out_of_range()),
                    "gamma" => g.servers[i].reward_pool = v,
                    "s" => g.servers[i].synthetic_compute = v,
                    _ if i >= n_pops => return Err(out_of_range()),
                    "d" => g.populations[i].data_quantity = v,
                    "c" => g.populations[i].compute = v,
                    _ => g.populations[i].comm = v,
                }
            }
        }
        if Self::is_game_parameter(name) {
            self.game.config.validate()
        } else {
            self.hfl.validate()?;
            self.data.spec.validate()
        }
    }
}
