//! Property tests over randomly generated inputs.

use proptest::prelude::*;

use synthhfl::data::{self, idx, Dataset, EdgeMode, PartitionSpec, PartitionedDataset, Skew};
use synthhfl::game::{self, EdgeServerSpec, GameConfig, PopulationSpec, PopulationState};
use synthhfl::harness::config::{config_hash, parse_config};
use synthhfl::harness::csv::format_float;
use synthhfl::hfl;
use synthhfl::model::{self, Activation, Architecture, ModelParams};

fn game_strategy() -> impl Strategy<Value = (GameConfig, PopulationState)> {
    (1usize..4, 2usize..5).prop_flat_map(|(zs, ns)| {
        (
            prop::collection::vec((1000.0..5000.0f64, 10.0..50.0f64, 10.0..50.0f64), zs),
            prop::collection::vec((100.0..900.0f64, 1.0..8.0f64), ns),
            prop::collection::vec(prop::collection::vec(0.01..1.0f64, ns), zs),
            prop::sample::select(vec![0.001, 0.01, 0.1]),
        )
            .prop_map(|(pops, servers, raw, delta)| {
                let mut cfg = GameConfig::new(
                    pops.into_iter().map(|(d, c, m)| PopulationSpec::new(d, c, m)).collect(),
                    servers.into_iter().map(|(g, s)| EdgeServerSpec::new(g, s)).collect(),
                );
                cfg.delta = delta;
                let rows: Vec<Vec<f64>> = raw
                    .iter()
                    .map(|r| {
                        let s: f64 = r.iter().sum();
                        r.iter().map(|x| x / s).collect()
                    })
                    .collect();
                (cfg, PopulationState::from_rows(&rows).unwrap())
            })
    })
}

/// Tiny labelled dataset with `per_class` samples of each class.
fn toy(per_class: usize, classes: usize) -> Dataset {
    let n = per_class * classes;
    let dim = 3;
    let images = (0..n * dim).map(|i| ((i * 37) % 255) as f32 / 255.0).collect();
    let labels = (0..n).map(|i| (i % classes) as u8).collect();
    Dataset::new(images, labels, dim, classes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stepping_stays_on_the_simplex((cfg, state) in game_strategy()) {
        let mut s = state;
        for _ in 0..50 {
            s = game::step(&cfg, &s);
            for z in 0..s.populations() {
                let row = s.row(z);
                prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn replicator_field_sums_to_zero_per_population((cfg, state) in game_strategy()) {
        let f = game::replicator_rhs(&cfg, &state);
        for z in 0..state.populations() {
            let s: f64 = (0..state.servers()).map(|n| f.get(z, n)).sum();
            prop_assert!(s.abs() < 1e-9 * (1.0 + f.max_abs()));
        }
    }

    #[test]
    fn average_utility_is_share_weighted((cfg, state) in game_strategy()) {
        for z in 0..state.populations() {
            let expect: f64 = (0..state.servers())
                .map(|n| state.share(z, n) * game::utility(&cfg, &state, z, n).unwrap())
                .sum();
            let got = game::average_utility(&cfg, &state, z).unwrap();
            prop_assert!((got - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn largest_remainder_sums_to_total(raw in prop::collection::vec(0.0..1.0f64, 1..8), total in 0usize..200) {
        let s: f64 = raw.iter().sum::<f64>();
        prop_assume!(s > 1e-3);
        let shares: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let counts = data::largest_remainder(&shares, total).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, sh) in counts.iter().zip(&shares) {
            prop_assert!((*c as f64 - sh * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn floats_print_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(format_float(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn idx_round_trip(count in 0usize..20, rows in 1usize..6, cols in 1usize..6, fill in any::<u64>()) {
        let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (fill.rotate_left(i as u32 % 64) as u8) ^ i as u8).collect();
        let images = idx::IdxImages { count, rows, cols, pixels };
        let bytes = idx::encode_images(&images);
        let back = idx::parse_images(&bytes, "prop").unwrap();
        prop_assert_eq!(idx::encode_images(&back), bytes);
        prop_assert_eq!(back, images);
    }

    #[test]
    fn weighted_average_stays_within_bounds(
        thetas in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 17), 1..6),
        raw in prop::collection::vec(0.01..1.0f64, 6),
    ) {
        let arch = Architecture::new(3, 2, 3, Activation::Tanh).unwrap();
        prop_assert_eq!(arch.param_count(), 17);
        let ps: Vec<ModelParams> = thetas.iter().map(|t| ModelParams::from_vec(arch, t.clone()).unwrap()).collect();
        let w: Vec<f64> = raw[..ps.len()].to_vec();
        let sum: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|x| x / sum).collect();
        let avg = hfl::weighted_average(&ps.iter().collect::<Vec<_>>(), &w).unwrap();
        for i in 0..17 {
            let lo = thetas.iter().map(|t| t[i]).fold(f64::INFINITY, f64::min);
            let hi = thetas.iter().map(|t| t[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(avg.theta[i] >= lo - 1e-12 && avg.theta[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(theta in prop::collection::vec(-20.0..20.0f64, 17), x in prop::collection::vec(0.0..1.0f32, 3)) {
        let arch = Architecture::new(3, 2, 3, Activation::Tanh).unwrap();
        let p = ModelParams::from_vec(arch, theta).unwrap();
        let probs = model::forward(&p, &[&x]).unwrap();
        prop_assert!((probs[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(probs[0].iter().all(|&q| q >= 0.0));
    }

    #[test]
    fn partition_is_a_disjoint_cover(
        per_class in 20usize..40,
        workers in prop::sample::select(vec![10usize, 20]),
        k in prop::sample::select(vec![0usize, 1, 2]),
        rho in prop::sample::select(vec![0.0, 0.05, 0.1]),
        seed in any::<u64>(),
    ) {
        let train = toy(per_class * 2, 10);
        let test = toy(2, 10);
        let spec = PartitionSpec {
            skew: if k == 0 { Skew::Iid } else { Skew::Classes(k) },
            workers,
            edges: 3,
            edge_mode: EdgeMode::NonIid,
            synthetic_fraction: rho,
            pool_fraction: 0.2,
            rng_seed: seed,
            ..PartitionSpec::default()
        };
        let parts = PartitionedDataset::build(train.clone(), test, &spec).unwrap();
        let mut seen = vec![false; train.len()];
        for &i in &parts.pool.source_indices {
            seen[i] = true;
        }
        let mut syn_seen = vec![false; parts.pool.len()];
        for s in &parts.shards {
            if k > 0 {
                prop_assert_eq!(s.classes(&train).len(), k);
            }
            for &i in &s.local {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
            for &j in &s.synthetic {
                prop_assert!(!syn_seen[j]);
                syn_seen[j] = true;
            }
            let expect = data::synthetic_count(rho, s.local.len());
            prop_assert_eq!(s.synthetic.len(), expect);
        }
        let layout = &parts.layout;
        prop_assert_eq!(layout.total(), parts.shards.iter().map(|s| s.len()).sum::<usize>());
    }

    #[test]
    fn config_hash_ignores_key_order(alpha in 0.0001..0.01f64, beta in 0.0001..0.01f64, k1 in 1usize..10) {
        let a = format!("[game]\nalpha = {alpha:?}\nbeta = {beta:?}\n[hfl]\nkappa1 = {k1}\nkappa2 = 1\nK = {}\n", k1 * 10);
        let b = format!("[hfl]\nK = {}\nkappa2 = 1\nkappa1 = {k1}\n\n[game]\n  beta = {beta:?}\n  alpha = {alpha:?}\n", k1 * 10);
        let (ca, cb) = (parse_config(&a).unwrap(), parse_config(&b).unwrap());
        prop_assert_eq!(&ca.hash, &cb.hash);
        let t: toml::Table = a.parse().unwrap();
        prop_assert_eq!(config_hash(&t), ca.hash);
    }
}
