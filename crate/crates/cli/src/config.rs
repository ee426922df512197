//! Experiment configuration.
//!
//! A config is a TOML file; `configs/toy.toml` at the repository root is the
//! commented exemplar. Every training stage gets its seed from the run seed,
//! so the same file describes every entry of `seeds`.

use std::fmt;
use std::path::{Path, PathBuf};

use relufair::audit::{AuditOptions, EigenSettings};
use relufair::data::{Stratify, TOY_DEFAULT_MINORITY, TOY_DEFAULT_N, TOY_DEFAULT_NOISE};
use relufair::model::Head;
use relufair::trainer::{KdConfig, Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};

/// A rejected configuration. `field` is the dotted path of the offending
/// entry, or empty for syntax errors (whose message carries line and column).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn at(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "config error: {}", self.message)
        } else {
            write!(f, "config error in `{}`: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Two-group parabola task.
    Toy {
        #[serde(default = "toy_n")]
        n: usize,
        #[serde(default = "toy_minority")]
        minority_fraction: f64,
        #[serde(default = "toy_noise")]
        noise: f64,
    },
    /// One Gaussian blob per class, optionally thinned per class.
    Mixture {
        num_classes: usize,
        dim: usize,
        samples_per_class: Vec<usize>,
        spread: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        keep_fractions: Option<Vec<f64>>,
    },
    /// Gaussian blobs sized by a named group-weight preset.
    Preset {
        preset: String,
        n: usize,
        dim: usize,
        spread: f64,
    },
    Csv {
        path: PathBuf,
        features: Vec<String>,
        label: String,
        group: String,
    },
}

fn toy_n() -> usize {
    TOY_DEFAULT_N
}

fn toy_minority() -> f64 {
    TOY_DEFAULT_MINORITY
}

fn toy_noise() -> f64 {
    TOY_DEFAULT_NOISE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub stratify_by: Stratify,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            stratify_by: Stratify::Group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub head: Head,
}

/// A training stage without its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    #[serde(default = "yes")]
    pub shuffle: bool,
}

fn default_batch() -> usize {
    128
}

fn yes() -> bool {
    true
}

impl StageSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            seed,
            shuffle: self.shuffle,
        }
    }

    fn adam(epochs: usize, learning_rate: f64) -> Self {
        Self {
            epochs,
            batch_size: 128,
            learning_rate,
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            shuffle: true,
        }
    }
}

/// Full-batch L-BFGS after the stochastic phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolishSection {
    pub tol: f64,
    pub max_iters: usize,
}

/// A same-shape model trained from scratch with whole layers linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScratchSection {
    pub linear_layers: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Snl,
    Dr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearizeSection {
    pub scheme: Scheme,
    /// Retained ReLU fractions, used by `snl`.
    #[serde(default)]
    pub budgets: Vec<f64>,
    /// Layer sets to linearize, one checkpoint each, used by `dr`.
    #[serde(default)]
    pub dr_layers: Vec<Vec<usize>>,
    #[serde(default = "default_l1")]
    pub gate_l1_weight: f64,
    /// Joint weight and gate training while the mask is learned.
    pub mask_train: StageSection,
    /// Fine-tuning after linearization, shared by distillation and mitigation.
    pub finetune: StageSection,
}

fn default_l1() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationSection {
    pub enabled: bool,
    pub mu: f64,
}

impl Default for MitigationSection {
    fn default() -> Self {
        Self {
            enabled: false,
            mu: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub hessian: bool,
    pub eigen_tol: f64,
    pub eigen_max_iters: usize,
    pub eigen_seed: u64,
}

impl Default for AuditSection {
    fn default() -> Self {
        let e = EigenSettings::default();
        Self {
            hessian: true,
            eigen_tol: e.tol,
            eigen_max_iters: e.max_iters,
            eigen_seed: e.seed,
        }
    }
}

impl AuditSection {
    pub fn options(&self) -> AuditOptions {
        AuditOptions {
            eigen: EigenSettings {
                tol: self.eigen_tol,
                max_iters: self.eigen_max_iters,
                seed: self.eigen_seed,
            },
            hessian: self.hessian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub functions: Vec<String>,
    pub ns: Vec<usize>,
    /// Hidden widths of the random scalar networks used for region counts.
    pub region_widths: Vec<Vec<usize>>,
    pub region_nets: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            functions: vec!["square".into(), "exp".into(), "softplus".into()],
            ns: vec![1, 2, 4, 8, 16],
            region_widths: vec![vec![4], vec![8], vec![4, 4], vec![6, 6, 6]],
            region_nets: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub split: SplitSection,
    pub network: NetworkSection,
    pub train: StageSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polish: Option<PolishSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scratch: Option<ScratchSection>,
    pub linearize: LinearizeSection,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default)]
    pub mitigation: MitigationSection,
    #[serde(default)]
    pub audit: AuditSection,
    #[serde(default)]
    pub theory: TheorySection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// The toy parabola experiment with the settings used by the
    /// acceptance suite.
    pub fn toy() -> Self {
        Self {
            seeds: (0..10).collect(),
            output_dir: default_out(),
            dataset: DatasetSpec::Toy {
                n: TOY_DEFAULT_N,
                minority_fraction: TOY_DEFAULT_MINORITY,
                noise: TOY_DEFAULT_NOISE,
            },
            split: SplitSection::default(),
            network: NetworkSection {
                hidden_widths: vec![6, 6],
                head: Head::Sigmoid,
            },
            train: StageSection::adam(200, 0.01),
            polish: Some(PolishSection {
                tol: 1e-4,
                max_iters: 200,
            }),
            scratch: Some(ScratchSection { linear_layers: vec![0] }),
            linearize: LinearizeSection {
                scheme: Scheme::Snl,
                budgets: vec![0.5, 0.2, 0.1],
                dr_layers: Vec::new(),
                gate_l1_weight: 1e-3,
                mask_train: StageSection::adam(20, 0.01),
                finetune: StageSection::adam(30, 0.01),
            },
            kd: KdConfig::default(),
            mitigation: MitigationSection {
                enabled: true,
                mu: 0.005,
            },
            audit: AuditSection::default(),
            theory: TheorySection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::at("", e.to_string().trim_end()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| relufair::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Self::parse(&text).map_err(|mut e| {
            e.message = format!("{}: {}", path.display(), e.message);
            e
        })?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        relufair::model::sha256_hex(&serde_json::to_vec(&c).expect("config serialises"))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::at("seeds", "at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(ConfigError::at("seeds", "seeds must be distinct"));
        }
        self.validate_dataset()?;
        let s = &self.split;
        if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
            return Err(ConfigError::at("split.train_fraction", format!("{} is outside (0, 1)", s.train_fraction)));
        }
        let widths = &self.network.hidden_widths;
        if widths.is_empty() || widths.contains(&0) {
            return Err(ConfigError::at("network.hidden_widths", "need at least one layer and no zero widths"));
        }
        validate_stage("train", &self.train)?;
        validate_stage("linearize.mask_train", &self.linearize.mask_train)?;
        validate_stage("linearize.finetune", &self.linearize.finetune)?;
        if let Some(p) = &self.polish {
            if !(p.tol > 0.0) {
                return Err(ConfigError::at("polish.tol", "must be > 0"));
            }
        }
        if let Some(sc) = &self.scratch {
            check_layers("scratch.linear_layers", &sc.linear_layers, widths.len())?;
        }
        let lin = &self.linearize;
        match lin.scheme {
            Scheme::Snl => {
                if lin.budgets.is_empty() {
                    return Err(ConfigError::at("linearize.budgets", "scheme `snl` needs at least one budget"));
                }
                for b in &lin.budgets {
                    if !(*b > 0.0 && *b <= 1.0) {
                        return Err(ConfigError::at("linearize.budgets", format!("{b} is outside (0, 1]")));
                    }
                }
                if lin.budgets.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(ConfigError::at("linearize.budgets", "budgets must be strictly decreasing"));
                }
                let total: usize = widths.iter().sum();
                for b in &lin.budgets {
                    if (b * total as f64).round() < 1.0 {
                        return Err(ConfigError::at("linearize.budgets", format!("{b} of {total} units keeps no ReLU")));
                    }
                }
            }
            Scheme::Dr => {
                if lin.dr_layers.is_empty() {
                    return Err(ConfigError::at("linearize.dr_layers", "scheme `dr` needs at least one layer set"));
                }
                for set in &lin.dr_layers {
                    check_layers("linearize.dr_layers", set, widths.len())?;
                }
            }
        }
        if !(lin.gate_l1_weight >= 0.0) {
            return Err(ConfigError::at("linearize.gate_l1_weight", "must be ≥ 0"));
        }
        self.kd.validate().map_err(|e| ConfigError::at("kd", e.to_string()))?;
        if !(self.mitigation.mu > 0.0 && self.mitigation.mu.is_finite()) {
            return Err(ConfigError::at("mitigation.mu", format!("multiplier step must be > 0, got {}", self.mitigation.mu)));
        }
        let a = &self.audit;
        if !(a.eigen_tol > 0.0) || a.eigen_max_iters == 0 {
            return Err(ConfigError::at("audit", "eigen_tol must be > 0 and eigen_max_iters ≥ 1"));
        }
        let t = &self.theory;
        for f in &t.functions {
            if relufair::theory::ConvexFn1D::by_name(f).is_none() {
                return Err(ConfigError::at("theory.functions", format!("unknown function `{f}`")));
            }
        }
        if t.ns.is_empty() || t.ns[0] == 0 || t.ns.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ConfigError::at("theory.ns", "need increasing segment counts, all ≥ 1"));
        }
        if t.region_widths.iter().any(|w| w.is_empty() || w.contains(&0)) {
            return Err(ConfigError::at("theory.region_widths", "empty layer list or zero width"));
        }
        Ok(())
    }

    fn validate_dataset(&self) -> Result<(), ConfigError> {
        match &self.dataset {
            DatasetSpec::Toy { n, minority_fraction, noise } => {
                if *n < 100 {
                    return Err(ConfigError::at("dataset.n", "toy task needs n ≥ 100"));
                }
                if !(*minority_fraction > 0.0 && *minority_fraction < 0.5) {
                    return Err(ConfigError::at("dataset.minority_fraction", "must lie in (0, 0.5)"));
                }
                if !(*noise >= 0.0) {
                    return Err(ConfigError::at("dataset.noise", "must be ≥ 0"));
                }
            }
            DatasetSpec::Mixture {
                num_classes,
                samples_per_class,
                keep_fractions,
                ..
            } => {
                if samples_per_class.len() != *num_classes {
                    return Err(ConfigError::at("dataset.samples_per_class", "need one entry per class"));
                }
                if let Some(k) = keep_fractions {
                    if k.len() != *num_classes {
                        return Err(ConfigError::at("dataset.keep_fractions", "need one entry per class"));
                    }
                }
            }
            DatasetSpec::Preset { preset, .. } => {
                if relufair::data::GroupWeightPreset::by_name(preset).is_none() {
                    return Err(ConfigError::at("dataset.preset", format!("unknown preset `{preset}`")));
                }
            }
            DatasetSpec::Csv { features, .. } => {
                if features.is_empty() {
                    return Err(ConfigError::at("dataset.features", "need at least one feature column"));
                }
            }
        }
        Ok(())
    }
}

fn validate_stage(field: &str, s: &StageSection) -> Result<(), ConfigError> {
    s.to_config(0)
        .validate()
        .map_err(|e| ConfigError::at(field, e.to_string()))
}

fn check_layers(field: &str, layers: &[usize], depth: usize) -> Result<(), ConfigError> {
    if layers.is_empty() {
        return Err(ConfigError::at(field, "empty layer set"));
    }
    if let Some(l) = layers.iter().find(|&&l| l >= depth) {
        return Err(ConfigError::at(field, format!("layer {l} does not exist (network has {depth})")));
    }
    if (0..depth).all(|l| layers.contains(&l)) {
        return Err(ConfigError::at(field, "every layer would be linear; keep at least one rectified layer"));
    }
    Ok(())
}
