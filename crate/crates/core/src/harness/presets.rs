//! Built-in experiment presets. Each is a TOML document used as the base
//! layer under an optional user config.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    pub toml: &'static str,
}

const HFL_DESK: &str = r#"
[hfl]
kappa1 = 5
kappa2 = 2
K = 300
eta0 = 0.01
decay = 0.995
batch_size = 20
hidden_dim = 32
activation = "tanh"
repetitions = 3

[data]
J = 10
N = 3
edge_mode = "noniid"
train_subset = 6000
"#;

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "fig2-phaseplane",
        summary: "two-population phase plane from ten interior starts",
        toml: r#"
mode = "phase"
output_dir = "out/fig2-phaseplane"
figure = "fig2-phaseplane: two-population phase plane"

[game]
populations = [{ d_z = 2000, c_z = 10, m_z = 10 }, { d_z = 4000, c_z = 10, m_z = 10 }]
servers = [{ gamma_n = 100, s_n = 2 }, { gamma_n = 100, s_n = 4 }]
phase_states = [[[0.1, 0.9], [0.1, 0.9]], [[0.6, 0.4], [0.9, 0.1]]]
phase_inits = 8
"#,
    },
    Preset {
        name: "fig3-populations",
        summary: "three populations on three servers, evolution to equilibrium",
        toml: r#"
mode = "game"
output_dir = "out/fig3-populations"
figure = "fig3-populations: three-population share evolution"

[game]
init = "uniform"
reference_population = 3
reference_shares = [0.31, 0.14, 0.55]
reference_tolerance = 0.10
"#,
    },
    Preset {
        name: "fig4-learningrate",
        summary: "equilibrium and convergence speed for three adaptation rates",
        toml: r#"
mode = "sweep"
output_dir = "out/fig4-learningrate"
figure = "fig4-learningrate: adaptation-rate sweep"

[sweep]
parameter = "delta"
values = [0.001, 0.01, 0.1]
"#,
    },
    Preset {
        name: "fig5-rewardpool",
        summary: "aggregated data per server as server 1's reward pool grows",
        toml: r#"
mode = "sweep"
output_dir = "out/fig5-rewardpool"
figure = "fig5-rewardpool: reward-pool sweep"

[sweep]
parameter = "gamma_1"
start = 100
stop = 900
step = 100
"#,
    },
    Preset {
        name: "fig6-computationcost",
        summary: "aggregated data per server as population 1's computation cost grows",
        toml: r#"
mode = "sweep"
output_dir = "out/fig6-computationcost"
figure = "fig6-computationcost: computation-cost sweep"

[sweep]
parameter = "c_1"
start = 10
stop = 50
step = 5
"#,
    },
    Preset {
        name: "fig7-noniid-accuracy",
        summary: "accuracy under iid, 2-class and 1-class worker shards",
        toml: r#"
mode = "sweep"
output_dir = "out/fig7-noniid-accuracy"
figure = "fig7-noniid-accuracy: non-iid degradation"

[sweep]
parameter = "classes_per_worker"
values = [0, 2, 1]
"#,
    },
    Preset {
        name: "fig8-synthetic-sweep",
        summary: "accuracy of 1-class shards topped up with 0 to 25% synthetic samples",
        toml: r#"
mode = "sweep"
output_dir = "out/fig8-synthetic-sweep"
figure = "fig8-synthetic-sweep: synthetic-fraction sweep"

[data]
classes_per_worker = 1

[sweep]
parameter = "synthetic_fraction"
values = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25]
"#,
    },
    Preset {
        name: "fig9-kappa-fixed-product",
        summary: "kappa1 over the divisors of 60 with kappa1 * kappa2 = 60",
        toml: r#"
mode = "sweep"
output_dir = "out/fig9-kappa-fixed-product"
figure = "fig9-kappa-fixed-product: local-update sweep at a fixed cloud interval"

[data]
classes_per_worker = 1
synthetic_fraction = 0.05

[sweep]
parameter = "kappa1"
values = [1, 2, 3, 4, 5, 6, 10, 12, 15, 20, 30, 60]
fixed_product = 60
"#,
    },
    Preset {
        name: "fig10-kappa2-sweep",
        summary: "kappa2 over the divisors of 30 with kappa1 = 10",
        toml: r#"
mode = "sweep"
output_dir = "out/fig10-kappa2-sweep"
figure = "fig10-kappa2-sweep: edge-aggregation sweep"

[hfl]
kappa1 = 10

[data]
classes_per_worker = 1
synthetic_fraction = 0.05

[sweep]
parameter = "kappa2"
values = [1, 2, 3, 5, 6, 10, 15, 30]
"#,
    },
];

const HFL_PRESETS: &[&str] = &[
    "fig7-noniid-accuracy",
    "fig8-synthetic-sweep",
    "fig9-kappa-fixed-product",
    "fig10-kappa2-sweep",
];

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

pub fn find(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        Error::Config(format!("unknown preset {name:?}; available presets: {}", names().join(", ")))
    })
}

/// TOML layers of a preset, shared training settings first.
pub fn preset_layers(name: &str) -> Result<Vec<&'static str>> {
    let p = find(name)?;
    if HFL_PRESETS.contains(&p.name) {
        Ok(vec![HFL_DESK, p.toml])
    } else {
        Ok(vec![p.toml])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{parse_layers, ExperimentConfig, Mode};

    fn load(name: &str) -> ExperimentConfig {
        parse_layers(&preset_layers(name).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    #[test]
    fn every_preset_parses() {
        for name in names() {
            let cfg = load(name);
            assert!(cfg.figure.as_deref().unwrap().starts_with(name));
        }
    }

    #[test]
    fn unknown_preset_lists_alternatives() {
        let err = find("fig11").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("fig9-kappa-fixed-product"));
    }

    #[test]
    fn sweep_presets_have_the_documented_axes() {
        let cfg = load("fig9-kappa-fixed-product");
        let sw = cfg.sweep.unwrap();
        let divisors: Vec<f64> = (1..=60).filter(|d| 60 % d == 0).map(|d| d as f64).collect();
        assert_eq!(sw.values, divisors);
        assert_eq!(cfg.hfl.iterations, 300);
        let cfg = load("fig8-synthetic-sweep");
        assert_eq!(cfg.sweep.unwrap().values, vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25]);
        let cfg = load("fig10-kappa2-sweep");
        assert_eq!(cfg.hfl.kappa1, 10);
        assert_eq!(cfg.repetitions, 3);
        let cfg = load("fig2-phaseplane");
        assert_eq!(cfg.mode, Mode::Phase);
        assert_eq!(cfg.game.phase_states.len() + cfg.game.phase_inits, 10);
    }
}
