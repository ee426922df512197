use proptest::prelude::*;
use relufair::autodiff::{Tape, Tensor};
use relufair::data::{make_gaussian_mixture, GroupedDataset};
use relufair::model::{GatedNetwork, NetworkShape};
use relufair::trainer::*;
use relufair::Error;

fn blobs(seed: u64) -> GroupedDataset {
    make_gaussian_mixture(2, 2, &[60, 20], 0.05, seed).unwrap()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 0.05,
        seed,
        ..TrainConfig::default()
    }
}

fn half_linear(seed: u64) -> GatedNetwork {
    GatedNetwork::new(NetworkShape::new(2, vec![6, 6], 2).unwrap(), seed)
        .unwrap()
        .with_layerwise_fraction(0.5)
        .unwrap()
}

fn teacher(seed: u64) -> GatedNetwork {
    GatedNetwork::new(NetworkShape::new(2, vec![6, 6], 2).unwrap(), seed).unwrap()
}

#[test]
fn cross_entropy_examples() {
    assert!((cross_entropy(&[0.0; 10], 3) - 10f64.ln()).abs() < 1e-12);
    assert!((cross_entropy(&[0.0, 3f64.ln()], 0) - 4f64.ln()).abs() < 1e-12);
    let l: Vec<f64> = [1.0, 4.0, 9.0].iter().map(|&z| cross_entropy(&[z, 0.0, 0.0], 0)).collect();
    assert!(l[0] > l[1] && l[1] > l[2] && l[2] > 0.0);
}

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

#[test]
fn kd_loss_examples() {
    let kd1 = KdConfig {
        temperature: 1.0,
        distill_weight: 1.0,
    };
    assert_eq!(kd_loss(&[0.3, -1.0], &[0.3, -1.0], 1, &kd1), 0.0);
    let kd0 = KdConfig {
        temperature: 4.0,
        distill_weight: 0.0,
    };
    let s = [0.2, 1.3, -0.4];
    assert_eq!(kd_loss(&s, &[5.0, 0.0, 1.0], 2, &kd0), cross_entropy(&s, 2));
    let got = kd_loss(&[2f64.ln(), 0.0], &[0.0, 0.0], 0, &kd1);
    let oracle = kl_oracle(&[0.5, 0.5], &[2.0 / 3.0, 1.0 / 3.0]);
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 0.058892).abs() < 1e-6);
}

proptest! {
    #[test]
    fn tape_kd_matches_plain(
        s in prop::collection::vec(-4.0f64..4.0, 6),
        t in prop::collection::vec(-4.0f64..4.0, 6),
        temp in 0.5f64..6.0,
        w in 0.0f64..=1.0,
    ) {
        let kd = KdConfig { temperature: temp, distill_weight: w };
        let labels = [1usize, 2];
        let tape = Tape::new();
        let sv = tape.param(Tensor::matrix(2, 3, s.clone()).unwrap());
        let rows = kd_rows(sv, &t, &labels, &kd);
        for i in 0..2 {
            let plain = kd_loss(&s[i * 3..i * 3 + 3], &t[i * 3..i * 3 + 3], labels[i], &kd);
            prop_assert!((rows.value().data()[i] - plain).abs() < 1e-10);
        }
        let ce = cross_entropy_rows(sv, &labels);
        for i in 0..2 {
            prop_assert!((ce.value().data()[i] - cross_entropy(&s[i * 3..i * 3 + 3], labels[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn multipliers_never_decrease(mu in 0.01f64..2.0, seed in 0u64..50) {
        let data = blobs(seed);
        let (_, out) = finetune_fair(&half_linear(seed), &teacher(seed), &data, &quick(3, seed), &KdConfig::default(), mu).unwrap();
        let mut prev = vec![0.0; 2];
        for lam in &out.multipliers {
            for (a, b) in lam.iter().zip(&prev) {
                prop_assert!(a >= b);
            }
            prev = lam.clone();
        }
    }
}

#[test]
fn zero_epochs_is_identity() {
    let data = blobs(0);
    let net = half_linear(1);
    let (out, h) = train_base(&net, &data, &quick(0, 0)).unwrap();
    assert_eq!(out, net);
    assert!(h.is_empty());
    let (out, _) = finetune_kd(&net, &teacher(1), &data, &quick(0, 0), &KdConfig::default()).unwrap();
    assert_eq!(out, net);
}

#[test]
fn separable_blobs_are_learned() {
    let data = make_gaussian_mixture(2, 2, &[100, 100], 0.05, 3).unwrap();
    let (net, h) = train_base(&teacher(3), &data, &quick(30, 3)).unwrap();
    assert!(evaluate(&net, &data).unwrap().accuracy >= 0.99);
    assert_eq!(h.rows.len(), 30 * 3);
}

#[test]
fn every_optimizer_reduces_loss() {
    let data = blobs(4);
    let before = evaluate(&teacher(4), &data).unwrap().loss;
    for optimizer in [
        Optimizer::Sgd,
        Optimizer::SgdMomentum { beta: 0.9 },
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
    ] {
        let cfg = TrainConfig {
            optimizer,
            learning_rate: 0.02,
            ..quick(10, 4)
        };
        let (net, _) = train_base(&teacher(4), &data, &cfg).unwrap();
        assert!(evaluate(&net, &data).unwrap().loss < before, "{optimizer:?}");
    }
}

#[test]
fn training_is_reproducible() {
    let data = blobs(5);
    let a = train_base(&half_linear(5), &data, &quick(4, 9)).unwrap();
    let b = train_base(&half_linear(5), &data, &quick(4, 9)).unwrap();
    assert_eq!(a, b);
    let c = train_base(&half_linear(5), &data, &quick(4, 10)).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn non_finite_loss_names_the_batch() {
    let data = blobs(6);
    let mut net = half_linear(6);
    let mut p = net.parameters();
    p.values_mut()[0] = f64::INFINITY;
    net.set_parameters(&p).unwrap();
    match train_base(&net, &data, &quick(1, 0)) {
        Err(Error::NonFiniteLoss { epoch: 0, batch: 0 }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn learnable_gates_are_rejected() {
    let mut net = half_linear(0);
    net.unfreeze_gates();
    assert!(matches!(train_base(&net, &blobs(0), &quick(1, 0)), Err(Error::GateMode(_))));
}

#[test]
fn finetune_keeps_teacher_and_gates() {
    let data = blobs(7);
    let t = teacher(7);
    let t_before = t.parameters();
    let s = half_linear(8);
    let (out, _) = finetune_kd(&s, &t, &data, &quick(3, 1), &KdConfig::default()).unwrap();
    assert_eq!(t.parameters(), t_before);
    assert_eq!(out.gates(), s.gates());
    assert_ne!(out.parameters(), s.parameters());
    let (out, _) = finetune_fair(&s, &t, &data, &quick(3, 1), &KdConfig::default(), 0.5).unwrap();
    assert_eq!(t.parameters(), t_before);
    assert_eq!(out.gates(), s.gates());
}

#[test]
fn finetune_requires_an_all_relu_teacher_of_the_same_shape() {
    let data = blobs(0);
    let s = half_linear(0);
    assert!(finetune_kd(&s, &s, &data, &quick(1, 0), &KdConfig::default()).is_err());
    let other = GatedNetwork::new(NetworkShape::new(2, vec![5, 6], 2).unwrap(), 0).unwrap();
    assert!(matches!(
        finetune_kd(&s, &other, &data, &quick(1, 0), &KdConfig::default()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn student_equal_to_teacher_starts_at_the_ce_share() {
    let data = blobs(9);
    let t = teacher(9);
    let kd = KdConfig::default();
    let logits = t.forward_batch(data.features(), data.len()).unwrap();
    let with_kd = evaluate_kd(&t, &logits, &data, &kd).unwrap();
    let plain = evaluate(&t, &data).unwrap();
    assert!((with_kd.loss - (1.0 - kd.distill_weight) * plain.loss).abs() < 1e-12);
}

#[test]
fn vanishing_multiplier_step_matches_distillation() {
    let data = blobs(10);
    let t = teacher(10);
    let s = half_linear(11);
    let cfg = quick(4, 2);
    let kd = KdConfig::default();
    let (a, _) = finetune_kd(&s, &t, &data, &cfg, &kd).unwrap();
    let (b, out) = finetune_fair(&s, &t, &data, &cfg, &kd, 1e-300).unwrap();
    let d = a.parameters().distance(&b.parameters()).unwrap();
    assert!(d < 1e-12, "distance {d}");
    assert!(out.multipliers.iter().flatten().all(|&l| l < 1e-290));
}

#[test]
fn identical_groups_keep_multipliers_at_zero() {
    // every row appears once in each group, interleaved
    let base = blobs(12);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for i in 0..base.len() {
        for g in 0..2 {
            features.extend_from_slice(base.row(i));
            labels.push(base.labels()[i]);
            groups.push(g);
        }
    }
    let data = GroupedDataset::new(features, 2, labels, groups, vec!["a".into(), "b".into()], 2).unwrap();
    let (_, out) = finetune_fair(&half_linear(12), &teacher(12), &data, &quick(3, 0), &KdConfig::default(), 1.0).unwrap();
    assert_eq!(out.multipliers.len(), 3);
    assert!(out.multipliers.iter().flatten().all(|&l| l == 0.0));
}

#[test]
fn fair_rejects_bad_inputs() {
    let data = blobs(13);
    let kd = KdConfig::default();
    assert!(finetune_fair(&half_linear(0), &teacher(0), &data, &quick(1, 0), &kd, 0.0).is_err());
    let missing = GroupedDataset::new(
        data.features().to_vec(),
        2,
        data.labels().to_vec(),
        vec![0; data.len()],
        vec!["a".into(), "b".into()],
        2,
    )
    .unwrap();
    assert!(matches!(
        finetune_fair(&half_linear(0), &teacher(0), &missing, &quick(1, 0), &kd, 1.0),
        Err(Error::EmptyGroup(1))
    ));
}

#[test]
fn multiplier_csv_has_one_row_per_epoch_and_group() {
    let data = blobs(14);
    let (_, out) = finetune_fair(&half_linear(0), &teacher(0), &data, &quick(5, 0), &KdConfig::default(), 0.3).unwrap();
    let csv = out.multipliers_csv();
    assert_eq!(csv.lines().count(), 1 + 5 * 2);
    let hist = out.history.to_csv();
    assert_eq!(hist.lines().next().unwrap(), "epoch,split,group,loss,accuracy,lambda_class_0,lambda_class_1");
    assert_eq!(hist.lines().count(), 1 + 5 * 3);
}

#[test]
fn lagrangian_update_rule() {
    let mut st = LagrangianState::new(3, 0.5).unwrap();
    st.update(1.0, &[0.5, 1.0, 3.0]);
    assert_eq!(st.multipliers, vec![0.25, 0.0, 1.0]);
    assert_eq!(st.epoch, 1);
    assert!(LagrangianState::new(2, -1.0).is_err());
}

#[test]
fn converge_reaches_a_stationary_point() {
    let data = blobs(15);
    let (warm, _) = train_base(&teacher(15), &data, &quick(5, 0)).unwrap();
    let (net, report) = converge(&warm, &data, 1e-6, 2000).unwrap();
    assert!(report.converged, "{report:?}");
    assert!(report.grad_norm < 1e-6);
    assert_eq!(net.gates(), warm.gates());
}

#[test]
fn stratified_batches_mix_groups() {
    let data = make_gaussian_mixture(2, 2, &[900, 100], 0.5, 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 128,
        ..TrainConfig::default()
    };
    let (_, h) = train_base(&teacher(0), &data, &TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
    assert_eq!(h.rows.len(), 3);
    // inspect the batch composition through the public history of a tiny run
    let batches = relufair::trainer::batch_plan(&data, &cfg, 0);
    assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 1000);
    for b in &batches {
        let minority = b.iter().filter(|&&i| data.groups()[i] == 1).count();
        assert!(minority >= 1, "batch without minority members");
    }
}
