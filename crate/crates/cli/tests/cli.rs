use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proptest::prelude::*;
use relufair::audit::{AuditReport, REPORT_SCHEMA};
use relufair::model::{linearize_snl, Checkpoint, ReluBudget, SnlConfig};
use relufair_cli::config::{DatasetSpec, ExperimentConfig, Scheme};
use relufair_cli::manifest::RunManifest;
use relufair_cli::pipeline::seed_data;
use tempfile::TempDir;

const SMALL: &str = r#"
seeds = [3]

[dataset]
kind = "toy"
n = 400

[network]
hidden_widths = [2, 2]
head = "sigmoid"

[train]
epochs = 3
learning_rate = 0.05
optimizer = { kind = "sgd_momentum", beta = 0.9 }

[scratch]
linear_layers = [0]

[linearize]
scheme = "snl"
budgets = [0.5, 0.25]

[linearize.mask_train]
epochs = 2
learning_rate = 0.05
optimizer = { kind = "sgd" }

[linearize.finetune]
epochs = 3
learning_rate = 0.05
optimizer = { kind = "sgd" }

[mitigation]
enabled = true
mu = 0.01

[theory]
functions = ["square"]
ns = [1, 2, 4, 8]
region_widths = [[3]]
region_nets = 2
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_relufair"));
    c.env_remove("RELUFAIR_OUT");
    c
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "status {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn small() -> (TempDir, PathBuf, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    (tmp, cfg, out)
}

#[test]
fn exemplar_config_is_the_toy_recipe() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.toml")).unwrap();
    let cfg = ExperimentConfig::parse(&text).unwrap();
    assert_eq!(cfg, ExperimentConfig::toy());
}

#[test]
fn invalid_budget_names_the_field() {
    let err = ExperimentConfig::parse(&SMALL.replace("budgets = [0.5, 0.25]", "budgets = [1.2]")).unwrap_err();
    assert_eq!(err.field, "linearize.budgets");

    let err = ExperimentConfig::parse(&SMALL.replace("budgets = [0.5, 0.25]", "budgets = [0.25, 0.5]")).unwrap_err();
    assert_eq!(err.field, "linearize.budgets");

    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("budgets = [0.5, 0.25]", "budgets = [1.2]"));
    let o = run(&["train"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("linearize.budgets"));
    assert!(!tmp.path().join("out/seed-3").exists());
}

#[test]
fn zero_multiplier_step_is_rejected() {
    let err = ExperimentConfig::parse(&SMALL.replace("mu = 0.01", "mu = 0.0")).unwrap_err();
    assert_eq!(err.field, "mitigation.mu");
}

#[test]
fn other_validation_errors() {
    let err = ExperimentConfig::parse(&SMALL.replace("seeds = [3]", "seeds = []")).unwrap_err();
    assert_eq!(err.field, "seeds");
    let err = ExperimentConfig::parse(&SMALL.replace("linear_layers = [0]", "linear_layers = [2]")).unwrap_err();
    assert_eq!(err.field, "scratch.linear_layers");
    let err = ExperimentConfig::parse(&SMALL.replace("linear_layers = [0]", "linear_layers = [0, 1]")).unwrap_err();
    assert_eq!(err.field, "scratch.linear_layers");
    let err = ExperimentConfig::parse(&SMALL.replace("functions = [\"square\"]", "functions = [\"cube\"]")).unwrap_err();
    assert_eq!(err.field, "theory.functions");
}

#[test]
fn syntax_errors_report_the_line() {
    let err = ExperimentConfig::parse(&SMALL.replace("n = 400", "n = = 400")).unwrap_err();
    assert!(err.field.is_empty());
    assert!(err.message.contains("line 6"), "{}", err.message);

    let err = ExperimentConfig::parse(&SMALL.replace("n = 400", "n = 400\nsize = 3")).unwrap_err();
    assert!(err.message.contains("size"), "{}", err.message);
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        prop::collection::btree_set(0u64..1000, 1..5),
        prop::collection::vec(1usize..9, 1..4),
        prop::collection::btree_set(1u32..100, 1..4),
        1e-4f64..1.0,
        0usize..4,
        any::<bool>(),
        1usize..500,
    )
        .prop_map(|(seeds, widths, budgets, mu, kind, polish, epochs)| {
            let mut c = ExperimentConfig::toy();
            c.seeds = seeds.into_iter().collect();
            c.network.hidden_widths = widths;
            let total = c.network.hidden_widths.iter().sum::<usize>() as f64;
            let mut b: Vec<f64> = budgets.into_iter().map(|k| k as f64 / 100.0).filter(|b| (b * total).round() >= 1.0).collect();
            b.reverse();
            if b.is_empty() {
                b.push(1.0);
            }
            c.linearize.budgets = b;
            c.mitigation.mu = mu;
            c.train.epochs = epochs;
            c.scratch = None;
            if !polish {
                c.polish = None;
            }
            c.dataset = match kind {
                0 => c.dataset,
                1 => DatasetSpec::Mixture {
                    num_classes: 3,
                    dim: 4,
                    samples_per_class: vec![50, 60, 70],
                    spread: 0.3,
                    keep_fractions: Some(vec![1.0, 0.5, 0.25]),
                },
                2 => DatasetSpec::Preset {
                    preset: "utk-race".into(),
                    n: 500,
                    dim: 8,
                    spread: 0.5,
                },
                _ => DatasetSpec::Csv {
                    path: "data/x.csv".into(),
                    features: vec!["a".into(), "b".into()],
                    label: "y".into(),
                    group: "g".into(),
                },
            };
            if kind == 3 {
                c.network.hidden_widths.push(3);
                c.linearize.scheme = Scheme::Dr;
                c.linearize.dr_layers = vec![vec![0]];
            }
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(cfg in arb_config()) {
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn config_hash_ignores_the_output_directory() {
    let a = ExperimentConfig::toy();
    let mut b = a.clone();
    b.output_dir = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    b.mitigation.mu = 0.5;
    assert_ne!(a.hash(), b.hash());
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn train_writes_checkpoints_deterministically() {
    let (tmp, cfg, out) = small();
    ok(&run(&["train"], &cfg, &out));
    let ck = out.join("seed-3/base.ckpt.json");
    assert!(ck.is_file());
    assert!(out.join("seed-3/scratch.ckpt.json").is_file());
    let m = RunManifest::load(&out.join("manifest.train.json")).unwrap();
    assert!(m.missing(&out).is_empty());
    assert_eq!(m.manifest_hash, m.compute_hash());

    let out2 = tmp.path().join("out2");
    ok(&run(&["train"], &cfg, &out2));
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(out2.join("seed-3/base.ckpt.json")).unwrap());
    let m2 = RunManifest::load(&out2.join("manifest.train.json")).unwrap();
    assert_eq!(m.manifest_hash, m2.manifest_hash);
}

#[test]
fn linearize_meets_budgets_and_no_finetune_keeps_the_mask_output() {
    let (tmp, cfg, out) = small();
    ok(&run(&["train"], &cfg, &out));
    ok(&run(&["linearize"], &cfg, &out));
    let half = Checkpoint::load(&out.join("seed-3/snl-0.5.ckpt.json")).unwrap().network().unwrap();
    assert_eq!(half.relu_count().unwrap(), 2);
    let quarter = Checkpoint::load(&out.join("seed-3/snl-0.25.ckpt.json")).unwrap().network().unwrap();
    assert_eq!(quarter.relu_count().unwrap(), 1);

    let raw_out = tmp.path().join("raw");
    std::fs::create_dir_all(raw_out.join("seed-3")).unwrap();
    std::fs::copy(out.join("seed-3/base.ckpt.json"), raw_out.join("seed-3/base.ckpt.json")).unwrap();
    ok(&bin()
        .args(["linearize", "--no-finetune", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&raw_out)
        .output()
        .unwrap());
    let kept = Checkpoint::load(&raw_out.join("seed-3/snl-0.5.ckpt.json")).unwrap().network().unwrap();

    let config = ExperimentConfig::load(&cfg).unwrap();
    let base = Checkpoint::load(&out.join("seed-3/base.ckpt.json")).unwrap().network().unwrap();
    let data = seed_data(&config, 3).unwrap();
    let snl = SnlConfig {
        gate_l1_weight: config.linearize.gate_l1_weight,
        train: config.linearize.mask_train.to_config(3),
    };
    let direct = linearize_snl(&base, ReluBudget::new(0.5, 4).unwrap(), &snl, &data.train).unwrap();
    assert_eq!(kept.parameters(), direct.parameters());
    assert_eq!(kept.gates(), direct.gates());
    assert_ne!(kept.parameters(), half.parameters());
}

#[test]
fn dr_scheme_keeps_surviving_layers() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL
        .replace("hidden_widths = [2, 2]", "hidden_widths = [3, 2]")
        .replace("linear_layers = [0]", "linear_layers = [1]")
        .replace("scheme = \"snl\"\nbudgets = [0.5, 0.25]", "scheme = \"dr\"\ndr_layers = [[0], [1]]");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    ok(&run(&["train"], &cfg, &out));
    ok(&run(&["linearize"], &cfg, &out));
    let first = Checkpoint::load(&out.join("seed-3/dr-0.ckpt.json")).unwrap().network().unwrap();
    assert_eq!(first.relu_count().unwrap(), 2);
    let second = Checkpoint::load(&out.join("seed-3/dr-1.ckpt.json")).unwrap().network().unwrap();
    assert_eq!(second.relu_count().unwrap(), 3);
}

#[test]
fn mitigate_writes_one_multiplier_row_per_epoch_and_group() {
    let (tmp, cfg, out) = small();
    ok(&run(&["train"], &cfg, &out));
    ok(&run(&["linearize"], &cfg, &out));
    ok(&run(&["mitigate"], &cfg, &out));
    let csv = std::fs::read_to_string(out.join("seed-3/fair-snl-0.25.lambda.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 2);
    assert!(rows.iter().all(|r| r.split(',').count() == 3));

    // an explicit student with the sibling base as teacher gives the same model
    let out2 = tmp.path().join("out2");
    std::fs::create_dir_all(&out2).unwrap();
    let student = out.join("seed-3/snl-0.25.raw.ckpt.json");
    ok(&bin()
        .args(["mitigate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out2)
        .arg("--checkpoint")
        .arg(&student)
        .output()
        .unwrap());
    assert_eq!(
        std::fs::read(out.join("seed-3/fair-snl-0.25.ckpt.json")).unwrap(),
        std::fs::read(out2.join("seed-3/fair-snl-0.25.ckpt.json")).unwrap()
    );
}

#[test]
fn mitigate_needs_it_enabled() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("enabled = true", "enabled = false"));
    let o = run(&["mitigate"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn audit_of_base_against_itself_has_a_flat_zero_drop_line() {
    // long enough for both groups to score above zero
    let tmp = TempDir::new().unwrap();
    let text = SMALL
        .replace("n = 400", "n = 2000")
        .replace("hidden_widths = [2, 2]", "hidden_widths = [6, 6]")
        .replace(
            "epochs = 3\nlearning_rate = 0.05\noptimizer = { kind = \"sgd_momentum\", beta = 0.9 }",
            "epochs = 200\nlearning_rate = 0.01\noptimizer = { kind = \"adam\", beta1 = 0.9, beta2 = 0.999, eps = 1e-8 }",
        );
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    ok(&run(&["train"], &cfg, &out));
    let base = out.join("seed-3/base.ckpt.json");
    ok(&bin()
        .args(["audit", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--base")
        .arg(&base)
        .arg("--candidates")
        .arg(&base)
        .output()
        .unwrap());
    let report = AuditReport::from_json(&std::fs::read_to_string(out.join("seed-3/audit.json")).unwrap()).unwrap();
    assert_eq!(report.schema, REPORT_SCHEMA);
    for (_, drops) in relufair_cli::svg::drop_series(&report) {
        assert!(drops.iter().all(|d| *d == Some(0.0)), "{drops:?} {:?}", report.base.groups.iter().map(|g| g.accuracy).collect::<Vec<_>>());
    }
    let svg = std::fs::read_to_string(out.join("seed-3/plots/relative_drop.svg")).unwrap();
    let mut ys = BTreeSet::new();
    for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
        let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        for p in pts.split(' ') {
            ys.insert(p.split(',').nth(1).unwrap().to_string());
        }
    }
    assert_eq!(ys.len(), 1, "{ys:?}");
}

#[test]
fn audit_checks_paths_before_computing() {
    let (_tmp, cfg, out) = small();
    ok(&run(&["train"], &cfg, &out));
    let base = out.join("seed-3/base.ckpt.json");
    let o = bin()
        .args(["audit", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--base")
        .arg(&base)
        .arg("--candidates")
        .arg(out.join("seed-3/missing.ckpt.json"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.ckpt.json"));
    assert!(!out.join("seed-3/audit.json").exists());

    // the default candidate list needs the linearized models
    let o = run(&["audit"], &cfg, &out);
    assert_eq!(o.status.code(), Some(4));
    assert!(!out.join("seed-3/audit.json").exists());
}

#[test]
fn corrupt_checkpoint_is_an_io_class_failure() {
    let (_tmp, cfg, out) = small();
    std::fs::create_dir_all(out.join("seed-3")).unwrap();
    std::fs::write(out.join("seed-3/base.ckpt.json"), "{ not json").unwrap();
    let o = run(&["linearize"], &cfg, &out);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn diverging_training_exits_with_the_numeric_code() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("learning_rate = 0.05\noptimizer = { kind = \"sgd_momentum\", beta = 0.9 }", "learning_rate = 1e300\noptimizer = { kind = \"sgd\" }"));
    let o = run(&["train"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn theory_with_three_segment_counts_writes_three_rows() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    ok(&bin().args(["theory", "--fn", "square", "--ns", "1,2,4", "--out"]).arg(&out).output().unwrap());
    let csv = std::fs::read_to_string(out.join("theory/rate-square.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, n) in rows.iter().zip([1.0f64, 2.0, 4.0]) {
        let err: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((err - 1.0 / (8.0 * n * n)).abs() < 0.02 / (8.0 * n * n), "{row}");
    }
    assert!(out.join("theory/rate-square.svg").is_file());
}

#[test]
fn default_theory_run_reports_the_hinge_pair_and_square_slope() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    ok(&bin().args(["theory", "--out"]).arg(&out).output().unwrap());
    let regions = std::fs::read_to_string(out.join("theory/regions.csv")).unwrap();
    let count = |name: &str| -> usize {
        let row = regions.lines().find(|l| l.starts_with(&format!("{name},"))).unwrap();
        row.split(',').nth(3).unwrap().parse().unwrap()
    };
    assert_eq!(count("hinge"), 3);
    assert!(count("hinge-one-linear") <= 2);
    assert_eq!(count("hinge-all-linear"), 1);
    for row in regions.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert!(cols[3].parse::<u128>().unwrap() <= cols[4].parse::<u128>().unwrap(), "{row}");
    }
    let rates = std::fs::read_to_string(out.join("theory/rates.csv")).unwrap();
    let square = rates.lines().find(|l| l.starts_with("square,")).unwrap();
    let slope: f64 = square.rsplit(',').next().unwrap().parse().unwrap();
    assert!((-2.05..=-1.95).contains(&slope), "{slope}");
}

#[test]
fn env_var_overrides_out_flag() {
    let tmp = TempDir::new().unwrap();
    let env_out = tmp.path().join("from-env");
    let flag_out = tmp.path().join("from-flag");
    ok(&bin()
        .env("RELUFAIR_OUT", &env_out)
        .args(["theory", "--fn", "square", "--ns", "1,2", "--out"])
        .arg(&flag_out)
        .output()
        .unwrap());
    assert!(env_out.join("theory/rate-square.csv").is_file());
    assert!(!flag_out.exists());
}

#[test]
fn report_is_identical_across_runs_and_job_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("seeds = [3]", "seeds = [3, 4]"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&run(&["report"], &cfg, &a));
    ok(&bin()
        .args(["report", "--jobs", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap());
    let fa: Vec<_> = files(&a).into_iter().filter(|(p, _)| !p.starts_with("manifest")).collect();
    let fb: Vec<_> = files(&b).into_iter().filter(|(p, _)| !p.starts_with("manifest")).collect();
    assert_eq!(fa.len(), fb.len());
    for ((pa, ba), (pb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{pa} differs");
    }
    let ma = RunManifest::load(&a.join("manifest.report.json")).unwrap();
    let mb = RunManifest::load(&b.join("manifest.report.json")).unwrap();
    assert_eq!(ma.manifest_hash, mb.manifest_hash);
    assert!(ma.missing(&a).is_empty());
    // every produced file except the manifest itself is listed
    assert_eq!(ma.artifacts.len(), fa.len());
    assert!(a.join("seed-4/plots/accuracy.svg").is_file());
    assert!(a.join("summary.csv").is_file());
}

#[test]
fn seeds_flag_replaces_the_config_list() {
    let (_tmp, cfg, out) = small();
    ok(&bin()
        .args(["train", "--seeds", "7", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    assert!(out.join("seed-7/base.ckpt.json").is_file());
    assert!(!out.join("seed-3").exists());
}
