use std::collections::BTreeMap;

use proptest::prelude::*;
use relufair::data::*;
use relufair::Error;

/// Rows as sortable keys: exact feature bits plus label and group.
fn row_keys(ds: &GroupedDataset) -> Vec<(Vec<u64>, usize, usize)> {
    let mut keys: Vec<_> = (0..ds.len())
        .map(|i| (ds.row(i).iter().map(|v| v.to_bits()).collect(), ds.labels()[i], ds.groups()[i]))
        .collect();
    keys.sort();
    keys
}

fn stratify() -> impl Strategy<Value = Stratify> {
    prop_oneof![Just(Stratify::Group), Just(Stratify::Label), Just(Stratify::Both)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generators_are_pure(seed in 0u64..10_000, n in 100usize..400, noise in 0.0f64..0.1) {
        prop_assert_eq!(make_toy_boundary(n, 0.1, noise, seed).unwrap(), make_toy_boundary(n, 0.1, noise, seed).unwrap());
        let sizes = [12, 20, 15];
        prop_assert_eq!(make_gaussian_mixture(3, 4, &sizes, 0.3, seed).unwrap(), make_gaussian_mixture(3, 4, &sizes, 0.3, seed).unwrap());
    }

    #[test]
    fn split_partitions_the_rows(seed in 0u64..10_000, fraction in 0.1f64..0.9, by in stratify()) {
        let ds = make_toy_boundary(300, 0.1, 0.03, seed).unwrap();
        let spec = SplitSpec { train_fraction: fraction, seed, stratify_by: by };
        let (train, eval) = split(&ds, &spec).unwrap();
        prop_assert_eq!(train.len() + eval.len(), ds.len());
        let mut union = row_keys(&train);
        union.extend(row_keys(&eval));
        union.sort();
        prop_assert_eq!(union, row_keys(&ds));
        prop_assert!(train.group_sizes().iter().all(|&s| s > 0));
        prop_assert_eq!(split(&ds, &spec).unwrap(), (train, eval));
    }

    #[test]
    fn imbalance_only_changes_membership(seed in 0u64..10_000, k0 in 0.2f64..1.0, k1 in 0.2f64..1.0) {
        let ds = make_gaussian_mixture(2, 3, &[40, 60], 0.5, seed).unwrap();
        let out = imbalance(&ds, &[k0, k1], seed).unwrap();
        let source: BTreeMap<_, usize> = row_keys(&ds).into_iter().fold(BTreeMap::new(), |mut m, k| {
            *m.entry(k).or_default() += 1;
            m
        });
        for key in row_keys(&out) {
            prop_assert!(source.contains_key(&key));
        }
        let expected: Vec<usize> = [(k0, 40.0), (k1, 60.0)].iter().map(|(k, n)| (k * n + 1e-9f64).floor() as usize).collect();
        prop_assert_eq!(out.class_sizes(), expected);
    }
}

#[test]
fn toy_examples() {
    let ds = make_toy_boundary(1000, 0.1, 0.03, 0).unwrap();
    assert_eq!(ds.group_sizes(), vec![900, 100]);
    assert_eq!(ds.labels(), ds.groups());
    assert!(make_toy_boundary(99, 0.1, 0.0, 0).is_err());
    assert!(make_toy_boundary(1000, 0.5, 0.0, 0).is_err());
}

#[test]
fn noiseless_toy_is_separated_by_a_fine_piecewise_linear_curve() {
    let ds = make_toy_boundary(4000, 0.07, 0.0, 5).unwrap();
    // interpolate the boundary on 20 000 segments of [−1, 1]
    let segments = 20_000;
    let h = 2.0 / segments as f64;
    let curve = |x: f64| TOY_CURVE_A * x * x + TOY_CURVE_B;
    let pwl = |x: f64| {
        let k = (((x + 1.0) / h).floor() as usize).min(segments - 1);
        let x0 = -1.0 + k as f64 * h;
        let t = (x - x0) / h;
        (1.0 - t) * curve(x0) + t * curve(x0 + h)
    };
    let correct = (0..ds.len())
        .filter(|&i| {
            let r = ds.row(i);
            let above = r[1] > pwl(r[0]);
            above == (ds.labels()[i] == 1)
        })
        .count();
    assert_eq!(correct, ds.len());
}

#[test]
fn presets() {
    // quotas 507, 181.5, 3878, 433.5: the one leftover sample goes to the
    // lower index of the tied remainders
    assert_eq!(GroupWeightPreset::utk_age().allocate(5000), vec![507, 182, 3878, 433]);
    assert_eq!(GroupWeightPreset::by_name("utk-race").unwrap().weights, vec![0.4251, 0.1909, 0.1449, 0.1677, 0.0714]);
    assert_eq!(GroupWeightPreset::utk_race().allocate(1234).iter().sum::<usize>(), 1234);
    assert!(GroupWeightPreset::new("bad", vec![0.5, 0.4]).is_err());
    assert!(GroupWeightPreset::by_name("nope").is_none());
}

#[test]
fn tight_mixture_is_linearly_separable() {
    let ds = make_gaussian_mixture(2, 3, &[100, 100], 1e-9, 11).unwrap();
    assert_eq!(ds.labels(), ds.groups());
    // nearest class mean is a linear rule
    let means: Vec<Vec<f64>> = (0..2)
        .map(|c| {
            let idx = ds.group_indices(c);
            (0..3).map(|j| idx.iter().map(|&i| ds.row(i)[j]).sum::<f64>() / idx.len() as f64).collect()
        })
        .collect();
    let dist = |x: &[f64], m: &[f64]| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let correct = (0..ds.len())
        .filter(|&i| {
            let x = ds.row(i);
            let pred = usize::from(dist(x, &means[1]) < dist(x, &means[0]));
            pred == ds.labels()[i]
        })
        .count();
    assert_eq!(correct, ds.len());
    assert!(make_gaussian_mixture(2, 3, &[100, 9], 0.1, 0).is_err());
    assert!(make_gaussian_mixture(2, 3, &[100], 0.1, 0).is_err());
}

#[test]
fn imbalance_examples() {
    let ds = make_gaussian_mixture(10, 2, &[100; 10], 0.2, 1).unwrap();
    assert_eq!(imbalance(&ds, &[1.0; 10], 3).unwrap(), ds);
    let mut keep = vec![0.9; 5];
    keep.extend([0.1; 5]);
    let out = imbalance(&ds, &keep, 3).unwrap();
    assert_eq!(out.class_sizes(), [vec![90; 5], vec![10; 5]].concat());

    let small = make_gaussian_mixture(2, 2, &[10, 10], 0.2, 1).unwrap();
    let seven: Vec<usize> = (0..small.len()).filter(|&i| small.labels()[i] == 1 || small.group_indices(0)[..7].contains(&i)).collect();
    let small = small.subset(&seven);
    assert_eq!(small.class_sizes(), vec![7, 10]);
    assert!(matches!(imbalance(&small, &[0.5, 1.0], 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn split_examples() {
    let ds = make_toy_boundary(1000, 0.1, 0.03, 2).unwrap();
    let spec = SplitSpec { train_fraction: 0.8, seed: 2, stratify_by: Stratify::Group };
    let (train, eval) = split(&ds, &spec).unwrap();
    assert_eq!(train.group_sizes(), vec![720, 80]);
    assert_eq!(eval.group_sizes(), vec![180, 20]);

    let lonely = GroupedDataset::new(vec![0.0, 1.0, 2.0], 1, vec![0, 1, 0], vec![0, 0, 1], vec!["a".into(), "b".into()], 2).unwrap();
    assert!(matches!(split(&lonely, &SplitSpec { stratify_by: Stratify::Group, ..spec }), Err(Error::Stratification(_))));
}

#[test]
fn csv_loading() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    std::fs::write(&good, "x,y,label,grp\n0.5,1,0,A\n-1,2.5,1,B\n3,0,1,A\n").unwrap();
    let ds = load_csv(&good, &["x", "y"], "label", "grp").unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.group_names(), ["A", "B"]);
    assert_eq!(ds.groups(), [0, 1, 0]);
    assert_eq!(ds.row(1), [-1.0, 2.5]);

    let mut text = String::from("x,label,grp\n");
    for i in 1..=9 {
        let x = if i == 7 { "oops".to_string() } else { i.to_string() };
        text.push_str(&format!("{x},0,g\n"));
    }
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, text).unwrap();
    let err = load_csv(&bad, &["x"], "label", "grp").unwrap_err();
    assert!(matches!(err, Error::Csv { row: 7, .. }), "{err}");
    assert!(err.to_string().contains("row 7"));

    assert!(load_csv(&good, &["z"], "label", "grp").is_err());
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "x,label,grp\n").unwrap();
    assert!(load_csv(&empty, &["x"], "label", "grp").is_err());
    assert!(matches!(load_csv(&dir.path().join("missing.csv"), &["x"], "label", "grp"), Err(Error::Io { .. })));
}

#[test]
fn export_round_trips_through_load() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_gaussian_mixture(3, 2, &[10, 12, 14], 0.4, 8).unwrap();
    let path = dir.path().join("mix.csv");
    ds.export_csv(&path).unwrap();
    let back = load_csv(&path, &["f0", "f1"], "label", "group").unwrap();
    assert_eq!(back.features(), ds.features());
    assert_eq!(back.labels(), ds.labels());
    let names: Vec<&str> = back.group_names().iter().map(String::as_str).collect();
    for i in 0..ds.len() {
        assert_eq!(names[back.groups()[i]], ds.group_names()[ds.groups()[i]]);
    }
    let meta: DatasetSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!((meta.c, meta.m, meta.n), (3, 3, 36));
    assert_eq!(meta.provenance.unwrap().generator, "gaussian_mixture");
}
