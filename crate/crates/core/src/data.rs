//! Grouped datasets: features, class labels and protected-group labels.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::write_atomic;
use crate::rng::{seeded, streams};

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: Option<u64>,
    pub args: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    groups: Vec<usize>,
    group_names: Vec<String>,
    num_classes: usize,
    provenance: Option<Provenance>,
}

impl GroupedDataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        groups: Vec<usize>,
        group_names: Vec<String>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if dim == 0 || features.len() != n * dim {
            return Err(Error::shape(format!(
                "{} feature values do not form {n} rows of {dim}",
                features.len()
            )));
        }
        if groups.len() != n {
            return Err(Error::shape(format!("{n} labels but {} group labels", groups.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {y} ≥ number of classes {num_classes}")));
        }
        if let Some(&a) = groups.iter().find(|&&a| a >= group_names.len()) {
            return Err(Error::invalid(format!("group {a} ≥ number of groups {}", group_names.len())));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
        Ok(Self {
            features,
            dim,
            labels,
            groups,
            group_names,
            num_classes,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = Some(p);
        self
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_groups()];
        for &a in &self.groups {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_classes];
        for &y in &self.labels {
            sizes[y] += 1;
        }
        sizes
    }

    /// Rows at `indices`, in the given order. Group and class vocabularies
    /// are kept.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
            group_names: self.group_names.clone(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }

    pub fn group_indices(&self, group: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.groups[i] == group).collect()
    }

    /// `S^a`: the members of one group.
    pub fn group_subset(&self, group: usize) -> Result<Self> {
        if group >= self.num_groups() {
            return Err(Error::invalid(format!("group {group} does not exist")));
        }
        let idx = self.group_indices(group);
        if idx.is_empty() {
            return Err(Error::EmptyGroup(group));
        }
        Ok(self.subset(&idx))
    }

    /// Write `f0..f{d-1},label,group` rows plus a JSON sidecar at
    /// `<path>.meta.json`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        header.push("group".into());
        w.write_record(&header).map_err(|e| csv_err(path, 0, e))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.group_names[self.groups[i]].clone());
            w.write_record(&rec).map_err(|e| csv_err(path, i + 1, e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        write_atomic(path, &bytes)?;
        let meta = DatasetSidecar {
            group_names: self.group_names.clone(),
            c: self.num_classes,
            m: self.num_groups(),
            n: self.len(),
            provenance: self.provenance.clone(),
        };
        let sidecar = sidecar_path(path);
        write_atomic(&sidecar, &serde_json::to_vec_pretty(&meta).expect("sidecar serialises"))
    }
}

/// JSON metadata written next to an exported CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub group_names: Vec<String>,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub provenance: Option<Provenance>,
}

pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

fn csv_err(path: &Path, row: usize, e: impl std::fmt::Display) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        message: e.to_string(),
    }
}

/// Vertical curvature of the toy boundary `x₂ = A·x₁² + B`.
pub const TOY_CURVE_A: f64 = 2.0;
pub const TOY_CURVE_B: f64 = -1.0;
/// Minority points sit within this vertical band above the boundary.
pub const TOY_MINORITY_BAND: f64 = 0.3;
/// Majority points keep at least this vertical gap below the boundary.
pub const TOY_MAJORITY_GAP: f64 = 0.15;

/// The toy decision boundary, a strictly convex parabola in `[−1,1]²`.
pub fn toy_curve(x1: f64) -> f64 {
    TOY_CURVE_A * x1 * x1 + TOY_CURVE_B
}

/// Defaults used by the toy experiments.
pub const TOY_DEFAULT_N: usize = 4000;
pub const TOY_DEFAULT_MINORITY: f64 = 0.07;
pub const TOY_DEFAULT_NOISE: f64 = 0.03;

/// Two-group, two-class task in `[−1,1]²` whose classes are split by a
/// convex parabola. The minority class (group 1, label 1) lies in a thin
/// band on the convex side of the curve; the majority (group 0, label 0)
/// fills the region below it. Gaussian noise of scale `noise` is added to
/// the features after labelling.
pub fn make_toy_boundary(n: usize, minority_fraction: f64, noise: f64, seed: u64) -> Result<GroupedDataset> {
    if n < 100 {
        return Err(Error::invalid(format!("toy task needs n ≥ 100, got {n}")));
    }
    if !(minority_fraction > 0.0 && minority_fraction < 0.5) {
        return Err(Error::invalid(format!(
            "minority_fraction must lie in (0, 0.5), got {minority_fraction}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid(format!("noise must be finite and ≥ 0, got {noise}")));
    }
    let n_min = (n as f64 * minority_fraction).round() as usize;
    let n_maj = n - n_min;
    let mut rng = seeded(seed, streams::DATA);
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    while rows.len() < n_maj {
        let x1 = rng.gen_range(-1.0..1.0);
        let x2 = rng.gen_range(-1.0..1.0);
        if x2 < toy_curve(x1) - TOY_MAJORITY_GAP {
            rows.push(([x1, x2], 0));
        }
    }
    while rows.len() < n {
        let x1 = rng.gen_range(-1.0..1.0);
        let u: f64 = rng.gen();
        let x2 = toy_curve(x1) + TOY_MINORITY_BAND * (1.0 - u);
        // keep the band inside the unit box
        if x2 <= 1.0 {
            rows.push(([x1, x2], 1));
        }
    }
    rows.shuffle(&mut rng);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (x, y) in rows {
        for v in x {
            let e: f64 = StandardNormal.sample(&mut rng);
            features.push(v + noise * e);
        }
        labels.push(y);
    }
    let groups = labels.clone();
    let ds = GroupedDataset::new(
        features,
        2,
        labels,
        groups,
        vec!["majority".into(), "minority".into()],
        2,
    )?;
    Ok(ds.with_provenance(Provenance {
        generator: "toy_boundary".into(),
        seed: Some(seed),
        args: serde_json::json!({ "n": n, "minority_fraction": minority_fraction, "noise": noise }),
    }))
}

/// Group proportions for class-as-group mixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeightPreset {
    pub name: String,
    pub weights: Vec<f64>,
}

impl GroupWeightPreset {
    pub fn new(name: impl Into<String>, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid("preset weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("preset weights sum to {total}, not 1")));
        }
        Ok(Self {
            name: name.into(),
            weights,
        })
    }

    /// UTKFace age-group composition.
    pub fn utk_age() -> Self {
        Self::new("utk-age", vec![0.1014, 0.0363, 0.7756, 0.0867]).expect("valid preset")
    }

    /// UTKFace race-group composition.
    pub fn utk_race() -> Self {
        Self::new("utk-race", vec![0.4251, 0.1909, 0.1449, 0.1677, 0.0714]).expect("valid preset")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "utk-age" => Some(Self::utk_age()),
            "utk-race" => Some(Self::utk_race()),
            _ => None,
        }
    }

    /// Largest-remainder apportionment of `n` samples; sums exactly to `n`.
    /// Equal remainders go to the lower index.
    pub fn allocate(&self, n: usize) -> Vec<usize> {
        let quotas: Vec<f64> = self.weights.iter().map(|w| w * n as f64).collect();
        let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = sizes.iter().sum();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            sizes[i] += 1;
        }
        sizes
    }
}

/// One isotropic Gaussian blob per class, centres drawn uniformly in
/// `[−1,1]^dim`; each class is its own group.
pub fn make_gaussian_mixture(num_classes: usize, dim: usize, samples_per_class: &[usize], spread: f64, seed: u64) -> Result<GroupedDataset> {
    if num_classes < 2 || dim == 0 {
        return Err(Error::invalid("mixture needs ≥ 2 classes and dim ≥ 1"));
    }
    if samples_per_class.len() != num_classes {
        return Err(Error::invalid(format!(
            "{} class sizes for {num_classes} classes",
            samples_per_class.len()
        )));
    }
    if let Some(&s) = samples_per_class.iter().find(|&&s| s < 10) {
        return Err(Error::invalid(format!("every class needs ≥ 10 samples, got {s}")));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be finite and ≥ 0, got {spread}")));
    }
    let mut rng = seeded(seed, streams::DATA);
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for (c, &count) in samples_per_class.iter().enumerate() {
        for _ in 0..count {
            let x = centres[c].iter().map(|&m| m + spread * normal.sample(&mut rng)).collect();
            rows.push((x, c));
        }
    }
    rows.shuffle(&mut rng);
    let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let features = rows.into_iter().flat_map(|r| r.0).collect();
    let names = (0..num_classes).map(|c| format!("class_{c}")).collect();
    let ds = GroupedDataset::new(features, dim, labels.clone(), labels, names, num_classes)?;
    Ok(ds.with_provenance(Provenance {
        generator: "gaussian_mixture".into(),
        seed: Some(seed),
        args: serde_json::json!({
            "num_classes": num_classes, "dim": dim,
            "samples_per_class": samples_per_class, "spread": spread
        }),
    }))
}

/// Smallest class size `imbalance` will produce.
pub const MIN_CLASS_SIZE: usize = 5;

/// Subsample each class `c` to `floor(keep_fractions[c]·n_c)` rows, uniformly
/// without replacement. Surviving rows keep their original order.
pub fn imbalance(ds: &GroupedDataset, keep_fractions: &[f64], seed: u64) -> Result<GroupedDataset> {
    if keep_fractions.len() != ds.num_classes() {
        return Err(Error::invalid(format!(
            "{} keep fractions for {} classes",
            keep_fractions.len(),
            ds.num_classes()
        )));
    }
    if let Some(f) = keep_fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::invalid(format!("keep fractions must lie in (0, 1], got {f}")));
    }
    let mut rng = seeded(seed, streams::IMBALANCE);
    let mut keep = vec![false; ds.len()];
    for (c, &f) in keep_fractions.iter().enumerate() {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        let k = (f * members.len() as f64 + 1e-9).floor() as usize;
        if k < MIN_CLASS_SIZE {
            return Err(Error::invalid(format!(
                "class {c} would keep {k} of {} samples (minimum {MIN_CLASS_SIZE})",
                members.len()
            )));
        }
        let chosen: Vec<usize> = if k == members.len() {
            members
        } else {
            members.choose_multiple(&mut rng, k).copied().collect()
        };
        for i in chosen {
            keep[i] = true;
        }
    }
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| keep[i]).collect();
    Ok(ds.subset(&idx))
}

/// Read a headered, comma-separated file. Labels that all parse as
/// non-negative integers are used directly; otherwise labels, like groups,
/// are coded by order of first appearance. Error rows are 1-based data rows
/// (the header is not counted).
pub fn load_csv(path: &Path, feature_cols: &[&str], label_col: &str, group_col: &str) -> Result<GroupedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            },
            _ => csv_err(path, 0, e),
        })?;
    let headers = rdr.headers().map_err(|e| csv_err(path, 0, e))?.clone();
    if headers.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "empty file".into(),
        });
    }
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: format!("missing column `{name}`"),
        })
    };
    let fidx = feature_cols.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    if fidx.is_empty() {
        return Err(Error::invalid("at least one feature column is required"));
    }
    let lidx = col(label_col)?;
    let gidx = col(group_col)?;

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut raw_groups = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| csv_err(path, row, e))?;
        for (&j, name) in fidx.iter().zip(feature_cols) {
            let cell = rec.get(j).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| csv_err(path, row, format!("non-numeric value `{cell}` in column `{name}`")))?;
            if !v.is_finite() {
                return Err(csv_err(path, row, format!("non-finite value in column `{name}`")));
            }
            features.push(v);
        }
        raw_labels.push(rec.get(lidx).unwrap_or("").trim().to_string());
        raw_groups.push(rec.get(gidx).unwrap_or("").trim().to_string());
    }
    if raw_labels.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "empty file: no data rows".into(),
        });
    }
    let (group_names, groups) = code_by_appearance(&raw_groups);
    let (labels, num_classes) = match raw_labels.iter().map(|s| s.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>() {
        Ok(ls) => {
            let c = ls.iter().max().map_or(0, |m| m + 1).max(2);
            (ls, c)
        }
        Err(_) => {
            let (names, codes) = code_by_appearance(&raw_labels);
            (codes, names.len().max(2))
        }
    };
    let ds = GroupedDataset::new(features, fidx.len(), labels, groups, group_names, num_classes)?;
    Ok(ds.with_provenance(Provenance {
        generator: "csv".into(),
        seed: None,
        args: serde_json::json!({ "path": path.display().to_string(), "features": feature_cols, "label": label_col, "group": group_col }),
    }))
}

fn code_by_appearance(values: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let codes = values
        .iter()
        .map(|v| {
            *index.entry(v.as_str()).or_insert_with(|| {
                names.push(v.clone());
                names.len() - 1
            })
        })
        .collect();
    (names, codes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratify {
    Group,
    Label,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratify_by: Stratify,
}

/// Seeded stratified split into disjoint train/eval sets covering `ds`.
/// Each stratum of size `s` sends `round(train_fraction·s)` rows (clamped to
/// `[1, s−1]`) to train; both sides keep original row order.
pub fn split(ds: &GroupedDataset, spec: &SplitSpec) -> Result<(GroupedDataset, GroupedDataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..ds.len() {
        let key = match spec.stratify_by {
            Stratify::Group => (ds.groups[i], 0),
            Stratify::Label => (ds.labels[i], 0),
            Stratify::Both => (ds.groups[i], ds.labels[i]),
        };
        strata.entry(key).or_default().push(i);
    }
    let mut rng = seeded(spec.seed, streams::SPLIT);
    let mut in_train = vec![false; ds.len()];
    for (key, mut members) in strata {
        if members.len() < 2 {
            return Err(Error::Stratification(format!(
                "stratum {key:?} has {} sample(s); at least 2 are needed",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let s = members.len();
        let k = ((spec.train_fraction * s as f64).round() as usize).clamp(1, s - 1);
        for &i in &members[..k] {
            in_train[i] = true;
        }
    }
    let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| in_train[i]).collect();
    let eval_idx: Vec<usize> = (0..ds.len()).filter(|&i| !in_train[i]).collect();
    let train = ds.subset(&train_idx);
    if let Some(a) = train.group_sizes().iter().position(|&s| s == 0) {
        if ds.group_sizes()[a] > 0 {
            return Err(Error::Stratification(format!("group {a} is empty in the training split")));
        }
    }
    Ok((train, ds.subset(&eval_idx)))
}
