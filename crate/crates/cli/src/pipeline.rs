//! Per-seed experiment stages and the files they write.
//!
//! Compute functions (`train_stage`, `linearize_stage`, `mitigate_stage`)
//! return networks in memory; `SeedDir` owns the on-disk layout of one
//! seed's outputs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use relufair::audit::{build_report, AuditReport};
use relufair::data::{imbalance, load_csv, make_gaussian_mixture, make_toy_boundary, split, GroupWeightPreset, GroupedDataset, SplitSpec};
use relufair::model::{linearize_dr, linearize_snl, Checkpoint, CheckpointMetadata, GatedNetwork, NetworkShape, ReluBudget, SnlConfig};
use relufair::trainer::{converge, finetune_fair, finetune_kd, train_base, Convergence, FairOutcome, History};
use relufair::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig, Scheme};
use crate::svg;

/// Train and evaluation splits for one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub train: GroupedDataset,
    pub eval: GroupedDataset,
}

/// Build the dataset for `seed` and split it with the same seed.
pub fn seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let ds = match &cfg.dataset {
        DatasetSpec::Toy { n, minority_fraction, noise } => make_toy_boundary(*n, *minority_fraction, *noise, seed)?,
        DatasetSpec::Mixture {
            num_classes,
            dim,
            samples_per_class,
            spread,
            keep_fractions,
        } => {
            let full = make_gaussian_mixture(*num_classes, *dim, samples_per_class, *spread, seed)?;
            match keep_fractions {
                Some(k) => imbalance(&full, k, seed)?,
                None => full,
            }
        }
        DatasetSpec::Preset { preset, n, dim, spread } => {
            let p = GroupWeightPreset::by_name(preset).ok_or_else(|| Error::InvalidArgument(format!("unknown preset `{preset}`")))?;
            let sizes = p.allocate(*n);
            make_gaussian_mixture(sizes.len(), *dim, &sizes, *spread, seed)?
        }
        DatasetSpec::Csv { path, features, label, group } => {
            let cols: Vec<&str> = features.iter().map(String::as_str).collect();
            load_csv(path, &cols, label, group)?
        }
    };
    let spec = SplitSpec {
        train_fraction: cfg.split.train_fraction,
        seed,
        stratify_by: cfg.split.stratify_by,
    };
    let (train, eval) = split(&ds, &spec)?;
    Ok(SeedData { train, eval })
}

pub fn network_shape(cfg: &ExperimentConfig, data: &GroupedDataset) -> Result<NetworkShape> {
    let mut shape = NetworkShape::new(data.dim(), cfg.network.hidden_widths.clone(), data.num_classes().max(2))?;
    shape.head = cfg.network.head;
    shape.validate()?;
    Ok(shape)
}

/// A trained model with its training record.
#[derive(Debug, Clone)]
pub struct Trained {
    pub net: GatedNetwork,
    pub history: History,
    pub polish: Option<Convergence>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub base: Trained,
    /// Same shape trained from scratch with the configured layers linear.
    pub scratch: Option<Trained>,
}

fn fit(cfg: &ExperimentConfig, init: &GatedNetwork, data: &GroupedDataset, seed: u64) -> Result<Trained> {
    let (net, history) = train_base(init, data, &cfg.train.to_config(seed))?;
    match &cfg.polish {
        Some(p) => {
            let (net, conv) = converge(&net, data, p.tol, p.max_iters)?;
            Ok(Trained {
                net,
                history,
                polish: Some(conv),
            })
        }
        None => Ok(Trained {
            net,
            history,
            polish: None,
        }),
    }
}

pub fn train_stage(cfg: &ExperimentConfig, seed: u64, data: &SeedData) -> Result<TrainOutput> {
    let init = GatedNetwork::new(network_shape(cfg, &data.train)?, seed)?;
    let base = fit(cfg, &init, &data.train, seed)?;
    let scratch = match &cfg.scratch {
        Some(sc) => {
            let layers: BTreeSet<usize> = sc.linear_layers.iter().copied().collect();
            Some(fit(cfg, &linearize_dr(&init, &layers)?, &data.train, seed)?)
        }
        None => None,
    };
    Ok(TrainOutput { base, scratch })
}

/// One linearized model: the raw output of the scheme and the fine-tuned
/// version (identical to `raw` when fine-tuning is off).
#[derive(Debug, Clone)]
pub struct Linearized {
    pub name: String,
    pub budget: f64,
    pub raw: GatedNetwork,
    pub tuned: GatedNetwork,
    pub history: Option<History>,
}

/// Checkpoint stem for an SNL budget, e.g. `snl-0.5`.
pub fn snl_name(budget: f64) -> String {
    format!("snl-{budget}")
}

/// Checkpoint stem for a DR layer set, e.g. `dr-0+1`.
pub fn dr_name(layers: &[usize]) -> String {
    let parts: Vec<String> = layers.iter().map(usize::to_string).collect();
    format!("dr-{}", parts.join("+"))
}

pub fn linearize_stage(cfg: &ExperimentConfig, seed: u64, base: &GatedNetwork, data: &SeedData, finetune: bool) -> Result<Vec<Linearized>> {
    let lin = &cfg.linearize;
    let total = base.total_units();
    let mut raw = Vec::new();
    match lin.scheme {
        Scheme::Snl => {
            let snl = SnlConfig {
                gate_l1_weight: lin.gate_l1_weight,
                train: lin.mask_train.to_config(seed),
            };
            for &b in &lin.budgets {
                let net = linearize_snl(base, ReluBudget::new(b, total)?, &snl, &data.train)?;
                raw.push((snl_name(b), net));
            }
        }
        Scheme::Dr => {
            for layers in &lin.dr_layers {
                let set: BTreeSet<usize> = layers.iter().copied().collect();
                raw.push((dr_name(layers), linearize_dr(base, &set)?));
            }
        }
    }
    raw.into_iter()
        .map(|(name, net)| {
            let budget = net.relu_count()? as f64 / total as f64;
            let (tuned, history) = if finetune {
                let (t, h) = finetune_kd(&net, base, &data.train, &lin.finetune.to_config(seed), &cfg.kd)?;
                (t, Some(h))
            } else {
                (net.clone(), None)
            };
            Ok(Linearized {
                name,
                budget,
                raw: net,
                tuned,
                history,
            })
        })
        .collect()
}

/// Name of the mitigated counterpart of a linearized model.
pub fn fair_name(linearized: &str) -> String {
    format!("fair-{linearized}")
}

pub fn mitigate_stage(cfg: &ExperimentConfig, seed: u64, teacher: &GatedNetwork, student: &GatedNetwork, data: &SeedData) -> Result<(GatedNetwork, FairOutcome)> {
    finetune_fair(
        student,
        teacher,
        &data.train,
        &cfg.linearize.finetune.to_config(seed),
        &cfg.kd,
        cfg.mitigation.mu,
    )
}

pub fn audit_stage(cfg: &ExperimentConfig, base: &GatedNetwork, candidates: &[(String, GatedNetwork)], data: &SeedData) -> Result<AuditReport> {
    build_report(base, candidates, &data.eval, &data.train, &cfg.audit.options())
}

/// Outcome of the full-batch polish, kept next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolishRecord {
    pub model: String,
    pub convergence: Convergence,
}

/// Output directory of one seed. Every write is atomic and recorded.
#[derive(Debug)]
pub struct SeedDir {
    pub seed: u64,
    pub dir: PathBuf,
    written: Vec<PathBuf>,
}

impl SeedDir {
    pub fn new(out: &Path, seed: u64) -> Result<Self> {
        let dir = Self::path(out, seed);
        std::fs::create_dir_all(dir.join("plots")).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        Ok(Self {
            seed,
            dir,
            written: Vec::new(),
        })
    }

    pub fn path(out: &Path, seed: u64) -> PathBuf {
        out.join(format!("seed-{seed}"))
    }

    /// Files written so far, in write order.
    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn into_written(self) -> Vec<PathBuf> {
        self.written
    }

    pub fn checkpoint_path(&self, stem: &str) -> PathBuf {
        self.dir.join(format!("{stem}.ckpt.json"))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        relufair::model::write_atomic(&path, bytes)?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn save_checkpoint(&mut self, stem: &str, net: &GatedNetwork, created_by: &str, budget: Option<f64>) -> Result<PathBuf> {
        let ckpt = Checkpoint::new(
            net,
            CheckpointMetadata {
                seed: self.seed,
                created_by: created_by.to_string(),
                budget,
            },
        );
        let path = self.checkpoint_path(stem);
        ckpt.save(&path)?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn save_history(&mut self, stem: &str, history: &History) -> Result<PathBuf> {
        self.write(&format!("{stem}.history.csv"), history.to_csv().as_bytes())
    }

    pub fn save_trained(&mut self, stem: &str, t: &Trained) -> Result<()> {
        self.save_checkpoint(stem, &t.net, "train", None)?;
        self.save_history(stem, &t.history)?;
        if let Some(conv) = t.polish {
            let rec = PolishRecord {
                model: stem.to_string(),
                convergence: conv,
            };
            let text = serde_json::to_string_pretty(&rec).expect("record serialises");
            self.write(&format!("{stem}.polish.json"), text.as_bytes())?;
        }
        Ok(())
    }

    pub fn save_linearized(&mut self, lin: &Linearized) -> Result<()> {
        self.save_checkpoint(&format!("{}.raw", lin.name), &lin.raw, "linearize", Some(lin.budget))?;
        self.save_checkpoint(&lin.name, &lin.tuned, "linearize", Some(lin.budget))?;
        if let Some(h) = &lin.history {
            self.save_history(&lin.name, h)?;
        }
        Ok(())
    }

    pub fn save_mitigated(&mut self, stem: &str, net: &GatedNetwork, budget: f64, outcome: &FairOutcome) -> Result<()> {
        self.save_checkpoint(stem, net, "mitigate", Some(budget))?;
        self.save_history(stem, &outcome.history)?;
        self.write(&format!("{stem}.lambda.csv"), outcome.multipliers_csv().as_bytes())?;
        Ok(())
    }

    /// Report JSON and CSV plus the per-seed figures.
    pub fn save_audit(&mut self, report: &AuditReport) -> Result<()> {
        self.write("audit.json", report.to_json().as_bytes())?;
        self.write("audit.csv", report.to_csv().as_bytes())?;
        for (name, svg) in svg::audit_figures(report) {
            self.write(&format!("plots/{name}"), svg.as_bytes())?;
        }
        Ok(())
    }
}

/// Load a checkpoint, mapping a missing file to an I/O error naming it.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    Checkpoint::load(path)
}

/// The checkpoint stem of a file name: `snl-0.5.ckpt.json` → `snl-0.5`.
pub fn checkpoint_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".ckpt.json").map(str::to_string).unwrap_or(name)
}

/// Every linearized stem the config produces, in config order.
pub fn linearized_names(cfg: &ExperimentConfig) -> Vec<String> {
    match cfg.linearize.scheme {
        Scheme::Snl => cfg.linearize.budgets.iter().map(|&b| snl_name(b)).collect(),
        Scheme::Dr => cfg.linearize.dr_layers.iter().map(|l| dr_name(l)).collect(),
    }
}
