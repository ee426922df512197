use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relufair::autodiff::gated_activation;
use relufair::data::{make_toy_boundary, split, SplitSpec, Stratify};
use relufair::model::*;
use relufair::trainer::{train_base, Optimizer, TrainConfig};
use relufair::Error;

/// Forward pass written out with plain loops over the public layers and
/// gates, independent of the library's batched matmul.
fn oracle_forward(net: &GatedNetwork, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (li, layer) in net.layers().iter().enumerate() {
        let mut out = layer.bias.clone();
        for (i, hi) in h.iter().enumerate() {
            for (o, v) in out.iter_mut().enumerate() {
                *v += hi * layer.weight[i * layer.outputs + o];
            }
        }
        if let Some(g) = net.gates().get(li) {
            for (v, &c) in out.iter_mut().zip(g) {
                *v = if c == 1.0 { v.max(0.0) } else if c == 0.0 { *v } else { c * v.max(0.0) + (1.0 - c) * *v };
            }
        }
        h = out;
    }
    match net.shape().head {
        Head::Softmax => h,
        Head::Sigmoid => vec![0.0, h[0]],
    }
}

fn random_net(widths: Vec<usize>, seed: u64) -> GatedNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = GatedNetwork::new(NetworkShape::new(3, widths, 2).unwrap(), seed).unwrap();
    let p = net.parameters();
    let v = (0..p.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    net.set_parameters(&p.with_values(v).unwrap()).unwrap();
    net
}

fn all_linear(net: &GatedNetwork) -> GatedNetwork {
    let gates = net.shape().hidden_widths.iter().map(|&w| vec![0.0; w]).collect();
    GatedNetwork::from_parts(net.shape().clone(), net.layers().to_vec(), gates, GateMode::Frozen).unwrap()
}

proptest! {
    #[test]
    fn gate_endpoints_are_exact(z in -1e6f64..1e6) {
        prop_assert_eq!(gated_activation(z, 1.0), z.max(0.0));
        prop_assert_eq!(gated_activation(z, 0.0), z);
    }

    #[test]
    fn forward_matches_loop_oracle(
        widths in prop::collection::vec(1usize..6, 1..4),
        seed in 0u64..1000,
        x in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let net = random_net(widths, seed);
        let got = net.forward(&x).unwrap();
        let want = oracle_forward(&net, &x);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn dr_relu_count_is_the_kept_width(
        widths in prop::collection::vec(1usize..9, 2..5),
        pick in prop::collection::vec(any::<bool>(), 4),
    ) {
        let net = random_net(widths.clone(), 1);
        let mut layers: BTreeSet<usize> = (0..widths.len()).filter(|&l| pick[l]).collect();
        if layers.len() == widths.len() {
            layers.remove(&0);
        }
        let kept: usize = widths.iter().enumerate().filter(|(l, _)| !layers.contains(l)).map(|(_, w)| w).sum();
        let lin = linearize_dr(&net, &layers).unwrap();
        prop_assert_eq!(lin.relu_count().unwrap(), kept);
        prop_assert_eq!(lin.parameters(), net.parameters());
    }

    #[test]
    fn linear_stack_is_affine(
        widths in prop::collection::vec(1usize..6, 1..4),
        seed in 0u64..1000,
        x1 in prop::collection::vec(-2.0f64..2.0, 3),
        x2 in prop::collection::vec(-2.0f64..2.0, 3),
        t in -1.0f64..2.0,
    ) {
        let net = all_linear(&random_net(widths, seed));
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let lhs = net.forward(&mix).unwrap();
        let f1 = net.forward(&x1).unwrap();
        let f2 = net.forward(&x2).unwrap();
        for c in 0..lhs.len() {
            let rhs = t * f1[c] + (1.0 - t) * f2[c];
            prop_assert!((lhs[c] - rhs).abs() < 1e-9, "{} vs {rhs}", lhs[c]);
        }
    }

    #[test]
    fn full_budget_without_training_is_identity(seed in 0u64..1000) {
        let data = make_toy_boundary(100, 0.2, 0.0, seed).unwrap();
        let net = GatedNetwork::new(NetworkShape::new(2, vec![4, 3], 2).unwrap(), seed).unwrap();
        let cfg = SnlConfig { gate_l1_weight: 1e-3, train: TrainConfig { epochs: 0, ..TrainConfig::default() } };
        let out = linearize_snl(&net, ReluBudget::new(1.0, net.total_units()).unwrap(), &cfg, &data).unwrap();
        prop_assert_eq!(out, net);
    }
}

#[test]
fn fractional_gate_mixes_linear_and_rectified() {
    let shape = NetworkShape::new(1, vec![1], 2).unwrap();
    let layers = vec![
        Layer { inputs: 1, outputs: 1, weight: vec![1.0], bias: vec![0.0] },
        Layer { inputs: 1, outputs: 2, weight: vec![1.0, 0.0], bias: vec![0.0, 0.0] },
    ];
    let half = GatedNetwork::from_parts(shape.clone(), layers.clone(), vec![vec![0.5]], GateMode::Learnable).unwrap();
    assert_eq!(half.forward(&[-2.0]).unwrap()[0], -1.0);
    let linear = GatedNetwork::from_parts(shape, layers, vec![vec![0.0]], GateMode::Frozen).unwrap();
    assert_eq!(linear.forward(&[-2.0]).unwrap()[0], -2.0);
    assert!(matches!(half.relu_count(), Err(Error::GateMode(_))));
}

#[test]
fn frozen_gates_must_be_binary() {
    let net = random_net(vec![2], 0);
    let err = GatedNetwork::from_parts(net.shape().clone(), net.layers().to_vec(), vec![vec![0.5, 1.0]], GateMode::Frozen).unwrap_err();
    assert!(matches!(err, Error::GateMode(_)), "{err}");
}

#[test]
fn dr_examples() {
    let net = random_net(vec![8, 8], 2);
    assert_eq!(linearize_dr(&net, &BTreeSet::new()).unwrap(), net);
    assert_eq!(linearize_dr(&net, &BTreeSet::from([1])).unwrap().relu_count().unwrap(), 8);
    assert!(linearize_dr(&net, &BTreeSet::from([0, 1])).is_err());
    assert!(linearize_dr(&net, &BTreeSet::from([2])).is_err());
}

#[test]
fn parameter_distance_examples() {
    let a = random_net(vec![3, 2], 4);
    assert_eq!(parameter_distance(&a, &a).unwrap(), 0.0);
    let mut shifted = a.parameters().into_values();
    shifted[5] += 3.0;
    let b = a.with_parameters(&a.parameters().with_values(shifted).unwrap()).unwrap();
    assert!((parameter_distance(&a, &b).unwrap() - 3.0).abs() < 1e-12);
    // gates are not parameters
    let lin = linearize_dr(&a, &BTreeSet::from([0])).unwrap();
    assert_eq!(parameter_distance(&a, &lin).unwrap(), 0.0);
    assert!(matches!(parameter_distance(&a, &random_net(vec![3, 3], 4)), Err(Error::Shape(_))));
}

#[test]
fn snl_hits_the_budget_exactly() {
    let data = make_toy_boundary(300, 0.2, 0.03, 1).unwrap();
    let net = GatedNetwork::new(NetworkShape::new(2, vec![32, 32], 2).unwrap(), 1).unwrap();
    let cfg = SnlConfig { gate_l1_weight: 1e-3, train: TrainConfig { epochs: 2, ..TrainConfig::default() } };
    for (fraction, expected) in [(0.5, 32), (0.25, 16)] {
        let out = linearize_snl(&net, ReluBudget::new(fraction, 64).unwrap(), &cfg, &data).unwrap();
        assert_eq!(out.gate_mode(), GateMode::Frozen);
        assert_eq!(out.relu_count().unwrap(), expected);
        assert!(out.gates().iter().flatten().all(|&c| c == 0.0 || c == 1.0));
    }
}

#[test]
fn snl_is_deterministic_and_rejects_bad_input() {
    let data = make_toy_boundary(200, 0.2, 0.03, 2).unwrap();
    let net = GatedNetwork::new(NetworkShape::new(2, vec![4, 4], 2).unwrap(), 2).unwrap();
    let cfg = SnlConfig { gate_l1_weight: 1e-3, train: TrainConfig { epochs: 2, ..TrainConfig::default() } };
    let budget = ReluBudget::new(0.5, 8).unwrap();
    assert_eq!(linearize_snl(&net, budget, &cfg, &data).unwrap(), linearize_snl(&net, budget, &cfg, &data).unwrap());
    let half = linearize_dr(&net, &BTreeSet::from([0])).unwrap();
    assert!(matches!(linearize_snl(&half, budget, &cfg, &data), Err(Error::GateMode(_))));
    assert!(linearize_snl(&net, ReluBudget::new(0.5, 10).unwrap(), &cfg, &data).is_err());
    assert!(ReluBudget::new(0.0, 8).is_err());
    assert!(ReluBudget::new(0.01, 8).is_err());
}

#[test]
fn checkpoint_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let net = linearize_dr(&random_net(vec![3, 2], 7), &BTreeSet::from([1])).unwrap();
    let ckpt = Checkpoint::new(&net, CheckpointMetadata { seed: 7, created_by: "test".into(), budget: Some(0.6) });
    let path = dir.path().join("net.ckpt.json");
    let hash = ckpt.save(&path).unwrap();
    assert_eq!(hash, sha256_hex(&std::fs::read(&path).unwrap()));
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.network().unwrap(), net);
    assert_eq!(back.sha256(), hash);
    // no temporary files left behind by the atomic write
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    std::fs::write(&path, b"{\"shape\":").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
}

/// Toy base networks for the learned-mask trend checks.
fn toy_bases(seeds: std::ops::Range<u64>) -> Vec<(GatedNetwork, relufair::data::GroupedDataset)> {
    seeds
        .map(|seed| {
            let ds = make_toy_boundary(4000, 0.07, 0.03, seed).unwrap();
            let (train, _) = split(&ds, &SplitSpec { train_fraction: 0.8, seed, stratify_by: Stratify::Group }).unwrap();
            let init = GatedNetwork::new(NetworkShape::binary_sigmoid(2, vec![6, 6]).unwrap(), seed).unwrap();
            let cfg = TrainConfig {
                epochs: 100,
                learning_rate: 0.01,
                optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
                seed,
                ..TrainConfig::default()
            };
            (train_base(&init, &train, &cfg).unwrap().0, train)
        })
        .collect()
}

fn snl_cfg(seed: u64) -> SnlConfig {
    SnlConfig {
        gate_l1_weight: 1e-3,
        train: TrainConfig {
            epochs: 20,
            learning_rate: 0.01,
            optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            seed,
            ..TrainConfig::default()
        },
    }
}

#[test]
fn snl_trends_on_the_toy_task() {
    let bases = toy_bases(0..10);
    let budgets = [0.8, 0.4, 0.1];
    let mut first_layer_share = 0.0;
    let mut random_share = 0.0;
    let mut distances = [0.0; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (seed, (base, train)) in bases.iter().enumerate() {
        let total = base.total_units();
        let half = linearize_snl(base, ReluBudget::new(0.5, total).unwrap(), &snl_cfg(seed as u64), train).unwrap();
        first_layer_share += half.gates()[0].iter().sum::<f64>() / half.relu_count().unwrap() as f64;
        // baseline: a uniformly random mask with the same count
        let mut units: Vec<usize> = (0..total).collect();
        units.shuffle(&mut rng);
        let width0 = base.shape().hidden_widths[0];
        random_share += units[..total / 2].iter().filter(|&&u| u < width0).count() as f64 / (total / 2) as f64;
        for (k, &b) in budgets.iter().enumerate() {
            let lin = linearize_snl(base, ReluBudget::new(b, total).unwrap(), &snl_cfg(seed as u64), train).unwrap();
            distances[k] += parameter_distance(base, &lin).unwrap() / bases.len() as f64;
        }
    }
    let n = bases.len() as f64;
    let (snl, random) = (first_layer_share / n, random_share / n);
    assert!(snl > random, "first-layer share {snl} vs random {random}");
    assert!(distances.windows(2).all(|w| w[1] >= w[0]), "{distances:?}");
}
