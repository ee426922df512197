//! Dense feed-forward classifiers with gated hidden units.
//!
//! Every hidden unit applies `c·max(z,0) + (1−c)·z` to its pre-activation
//! `z`. A gate `c = 1` is an ordinary ReLU, `c = 0` is the identity. Frozen
//! networks only hold gates in `{0, 1}`; learnable gates live in `[0, 1]`
//! and are only ever touched by [`linearize_snl`].

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{gated_activation, matmul_into, ParameterVector, Tape, Tensor, Var};
use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::rng::{seeded, streams};
use crate::trainer::{self, TrainConfig};

/// Output head. A sigmoid head emits one score `z` and is read as the
/// two-class logits `(0, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    #[default]
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub head: Head,
}

impl NetworkShape {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = Self {
            input_dim,
            hidden_widths,
            num_classes,
            head: Head::Softmax,
        };
        s.validate()?;
        Ok(s)
    }

    /// Binary classifier with a single sigmoid score.
    pub fn binary_sigmoid(input_dim: usize, hidden_widths: Vec<usize>) -> Result<Self> {
        let s = Self {
            input_dim,
            hidden_widths,
            num_classes: 2,
            head: Head::Sigmoid,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be ≥ 1"));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::invalid("at least one hidden layer is required"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::invalid("hidden widths must be ≥ 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be ≥ 2"));
        }
        if self.head == Head::Sigmoid && self.num_classes != 2 {
            return Err(Error::invalid("a sigmoid head needs exactly 2 classes"));
        }
        Ok(())
    }

    /// Total number of gated units, `R`.
    pub fn total_units(&self) -> usize {
        self.hidden_widths.iter().sum()
    }

    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    pub fn output_width(&self) -> usize {
        match self.head {
            Head::Softmax => self.num_classes,
            Head::Sigmoid => 1,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_width()));
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Learnable,
    Frozen,
}

/// Affine layer `x ↦ x·W + b` with `W` stored row-major as `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedNetwork {
    shape: NetworkShape,
    layers: Vec<Layer>,
    gates: Vec<Vec<f64>>,
    gate_mode: GateMode,
}

/// Retained ReLU count `r` out of `R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReluBudget {
    pub retained_fraction: f64,
    pub retained_count: usize,
    pub total: usize,
}

impl ReluBudget {
    pub fn new(retained_fraction: f64, total: usize) -> Result<Self> {
        if !(retained_fraction > 0.0 && retained_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "budget fraction must lie in (0, 1], got {retained_fraction}"
            )));
        }
        let retained_count = (retained_fraction * total as f64).round() as usize;
        if retained_count < 1 || retained_count > total {
            return Err(Error::invalid(format!(
                "budget {retained_fraction} of {total} units retains {retained_count}"
            )));
        }
        Ok(Self {
            retained_fraction,
            retained_count,
            total,
        })
    }
}

impl GatedNetwork {
    /// He-normal weights, zero biases, every gate rectified, frozen.
    pub fn new(shape: NetworkShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = seeded(seed, streams::INIT);
        let layers = shape
            .layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let normal = Normal::new(0.0, (2.0 / i as f64).sqrt()).expect("positive std");
                Layer {
                    inputs: i,
                    outputs: o,
                    weight: (0..i * o).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; o],
                }
            })
            .collect();
        let gates = shape.hidden_widths.iter().map(|&w| vec![1.0; w]).collect();
        Ok(Self {
            shape,
            layers,
            gates,
            gate_mode: GateMode::Frozen,
        })
    }

    /// All weights and biases zero, every gate rectified.
    pub fn zeros(shape: NetworkShape) -> Result<Self> {
        let mut net = Self::new(shape, 0)?;
        for l in &mut net.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
        }
        Ok(net)
    }

    /// Assemble a network from explicit layers and gates.
    pub fn from_parts(shape: NetworkShape, layers: Vec<Layer>, gates: Vec<Vec<f64>>, gate_mode: GateMode) -> Result<Self> {
        shape.validate()?;
        let dims = shape.layer_dims();
        if layers.len() != dims.len() {
            return Err(Error::shape(format!("expected {} layers, got {}", dims.len(), layers.len())));
        }
        for (l, &(i, o)) in layers.iter().zip(&dims) {
            if l.inputs != i || l.outputs != o || l.weight.len() != i * o || l.bias.len() != o {
                return Err(Error::shape(format!("layer does not match {i}→{o}")));
            }
        }
        if gates.len() != shape.depth() || gates.iter().zip(&shape.hidden_widths).any(|(g, &w)| g.len() != w) {
            return Err(Error::shape("gate layout does not match hidden widths".to_string()));
        }
        if gates.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("gates must lie in [0, 1]"));
        }
        if gate_mode == GateMode::Frozen && gates.iter().flatten().any(|&c| c != 0.0 && c != 1.0) {
            return Err(Error::GateMode("frozen gates must be exactly 0 or 1".to_string()));
        }
        Ok(Self {
            shape,
            layers,
            gates,
            gate_mode,
        })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn gates(&self) -> &[Vec<f64>] {
        &self.gates
    }

    pub fn gate_mode(&self) -> GateMode {
        self.gate_mode
    }

    /// Weights and biases as `[W_0, b_0, W_1, b_1, …]`. Gates are excluded.
    pub fn parameters(&self) -> ParameterVector {
        let blocks: Vec<Tensor> = self
            .layers
            .iter()
            .flat_map(|l| {
                [
                    Tensor::from_parts(vec![l.inputs, l.outputs], l.weight.clone()),
                    Tensor::from_parts(vec![l.outputs], l.bias.clone()),
                ]
            })
            .collect();
        ParameterVector::from_tensors(&blocks)
    }

    pub fn set_parameters(&mut self, p: &ParameterVector) -> Result<()> {
        if p.shapes() != self.parameters().shapes() {
            return Err(Error::shape("parameter layout does not match the network".to_string()));
        }
        let mut offset = 0;
        let values = p.values();
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&values[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn with_parameters(&self, p: &ParameterVector) -> Result<Self> {
        let mut out = self.clone();
        out.set_parameters(p)?;
        Ok(out)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn total_units(&self) -> usize {
        self.shape.total_units()
    }

    /// Number of rectified units. Only defined for frozen gates.
    pub fn relu_count(&self) -> Result<usize> {
        if self.gate_mode != GateMode::Frozen {
            return Err(Error::GateMode("relu_count needs frozen gates".to_string()));
        }
        Ok(self.gates.iter().flatten().filter(|&&c| c == 1.0).count())
    }

    /// Switch to learnable gates, all initialised at 1.
    pub fn unfreeze_gates(&mut self) {
        self.gate_mode = GateMode::Learnable;
        self.gates.iter_mut().flatten().for_each(|c| *c = 1.0);
    }

    /// Overwrite learnable gates, clamping into `[0, 1]`.
    pub(crate) fn set_learnable_gates(&mut self, flat: &[f64]) {
        debug_assert_eq!(self.gate_mode, GateMode::Learnable);
        for (c, &v) in self.gates.iter_mut().flatten().zip(flat) {
            *c = v.clamp(0.0, 1.0);
        }
    }

    /// Freeze with exactly the listed `(layer, unit)` pairs rectified.
    pub fn freeze_with(&mut self, rectified: &BTreeSet<(usize, usize)>) -> Result<()> {
        for &(l, u) in rectified {
            if l >= self.gates.len() || u >= self.gates[l].len() {
                return Err(Error::invalid(format!("unit ({l}, {u}) does not exist")));
            }
        }
        for (l, layer) in self.gates.iter_mut().enumerate() {
            for (u, c) in layer.iter_mut().enumerate() {
                *c = if rectified.contains(&(l, u)) { 1.0 } else { 0.0 };
            }
        }
        self.gate_mode = GateMode::Frozen;
        Ok(())
    }

    /// Keep the first `round(fraction·ω_l)` units of every layer rectified
    /// and linearize the rest. Used for nets trained from scratch under a
    /// fixed linearization pattern.
    pub fn with_layerwise_fraction(mut self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
        }
        let keep: BTreeSet<(usize, usize)> = self
            .shape
            .hidden_widths
            .iter()
            .enumerate()
            .flat_map(|(l, &w)| {
                let k = ((fraction * w as f64).round() as usize).clamp(1, w);
                (0..k).map(move |u| (l, u))
            })
            .collect();
        self.freeze_with(&keep)?;
        Ok(self)
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.shape.input_dim {
            return Err(Error::shape(format!(
                "input has {width} features, network expects {}",
                self.shape.input_dim
            )));
        }
        Ok(())
    }

    /// Length-`C` logits for one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(x, 1)
    }

    /// Row-major `n×C` logits for `n` stacked inputs.
    pub fn forward_batch(&self, features: &[f64], n: usize) -> Result<Vec<f64>> {
        if n == 0 || features.len() % n != 0 {
            return Err(Error::shape(format!("{} values do not form {n} rows", features.len())));
        }
        self.check_input(features.len() / n)?;
        let mut h = features.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; n * layer.outputs];
            matmul_into(&h, &layer.weight, n, layer.inputs, layer.outputs, &mut out);
            for row in out.chunks_mut(layer.outputs) {
                for (o, b) in row.iter_mut().zip(&layer.bias) {
                    *o += b;
                }
            }
            if let Some(gates) = self.gates.get(li) {
                for row in out.chunks_mut(layer.outputs) {
                    for (z, &c) in row.iter_mut().zip(gates) {
                        *z = gated_activation(*z, c);
                    }
                }
            }
            h = out;
        }
        Ok(match self.shape.head {
            Head::Softmax => h,
            Head::Sigmoid => h.iter().flat_map(|&z| [0.0, z]).collect(),
        })
    }

    /// Predicted class: argmax of the logits, ties to the smallest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn predict_batch(&self, features: &[f64], n: usize) -> Result<Vec<usize>> {
        let logits = self.forward_batch(features, n)?;
        Ok(logits.chunks(self.shape.num_classes).map(argmax).collect())
    }

    /// Register weights and biases on `tape`, in [`Self::parameters`] order.
    pub fn params_on_tape<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.parameters().to_tape(tape)
    }

    /// Gates as per-layer tape leaves; differentiable iff `learnable`.
    pub fn gates_on_tape<'t>(&self, tape: &'t Tape, learnable: bool) -> Vec<Var<'t>> {
        self.gates
            .iter()
            .map(|g| tape.leaf(Tensor::vector(g.clone()).with_grad(learnable)))
            .collect()
    }

    /// Output-layer values `[n × out]` on the tape (logits for a softmax
    /// head, the single score for a sigmoid head).
    pub fn scores_on_tape<'t>(&self, params: &[Var<'t>], gates: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        assert_eq!(params.len(), 2 * self.layers.len(), "parameter block count");
        let n = x.value().rows();
        let mut h = x;
        for (li, pair) in params.chunks(2).enumerate() {
            let z = h.matmul(pair[0]) + pair[1].broadcast_rows(n);
            h = match gates.get(li) {
                Some(&c) => {
                    let width = z.value().cols();
                    let cb = c.broadcast_rows(n);
                    let one_minus = c.scale(-1.0).add_scalar(1.0).broadcast_rows(n);
                    debug_assert_eq!(cb.value().cols(), width);
                    cb * z.relu() + one_minus * z
                }
                None => z,
            };
        }
        h
    }

    /// Length-`C` logits per row, `[n × C]`, on the tape.
    pub fn logits_on_tape<'t>(&self, params: &[Var<'t>], gates: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let s = self.scores_on_tape(params, gates, x);
        match self.shape.head {
            Head::Softmax => s,
            Head::Sigmoid => {
                let n = s.value().rows();
                s.reshape(&[n]).scatter_cols(vec![1; n], 2)
            }
        }
    }

    /// Input matrix leaf for `n` stacked rows.
    pub fn input_on_tape<'t>(&self, tape: &'t Tape, features: &[f64], n: usize, requires_grad: bool) -> Result<Var<'t>> {
        if n == 0 || features.len() != n * self.shape.input_dim {
            return Err(Error::shape(format!(
                "{} values do not form {n} rows of {}",
                features.len(),
                self.shape.input_dim
            )));
        }
        Ok(tape.leaf(Tensor::from_parts(vec![n, self.shape.input_dim], features.to_vec()).with_grad(requires_grad)))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Euclidean distance between weight-and-bias vectors; gates excluded.
pub fn parameter_distance(a: &GatedNetwork, b: &GatedNetwork) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::shape("networks have different shapes".to_string()));
    }
    a.parameters().distance(&b.parameters())
}

/// Linearize every unit of the listed hidden layers and rectify the rest.
pub fn linearize_dr(net: &GatedNetwork, linear_layers: &BTreeSet<usize>) -> Result<GatedNetwork> {
    let depth = net.shape.depth();
    if let Some(&bad) = linear_layers.iter().find(|&&l| l >= depth) {
        return Err(Error::invalid(format!("layer {bad} does not exist (depth {depth})")));
    }
    if linear_layers.len() == depth {
        return Err(Error::invalid(
            "linearizing every layer leaves an affine network; keep at least one rectified layer",
        ));
    }
    let mut out = net.clone();
    let keep: BTreeSet<(usize, usize)> = net
        .shape
        .hidden_widths
        .iter()
        .enumerate()
        .filter(|(l, _)| !linear_layers.contains(l))
        .flat_map(|(l, &w)| (0..w).map(move |u| (l, u)))
        .collect();
    out.freeze_with(&keep)?;
    Ok(out)
}

/// Settings for the learned-mask linearization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnlConfig {
    /// Weight of the `Σc` penalty pulling gates towards linear.
    pub gate_l1_weight: f64,
    /// Optimisation of weights and gates during mask learning.
    pub train: TrainConfig,
}

impl Default for SnlConfig {
    fn default() -> Self {
        Self {
            gate_l1_weight: 1e-3,
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
        }
    }
}

/// Data-driven linearization under a ReLU budget.
///
/// Gates are made learnable at 1, trained jointly with the weights on the
/// task loss plus `gate_l1_weight·Σc` (clamped to `[0,1]` after every step),
/// then frozen with the `r` largest gates rectified. Ties go to the lower
/// `(layer, unit)`. The returned network is not fine-tuned.
pub fn linearize_snl(net: &GatedNetwork, budget: ReluBudget, cfg: &SnlConfig, data: &GroupedDataset) -> Result<GatedNetwork> {
    if net.gate_mode != GateMode::Frozen || net.relu_count()? != net.total_units() {
        return Err(Error::GateMode("linearize_snl expects a frozen all-ReLU network".to_string()));
    }
    if budget.total != net.total_units() {
        return Err(Error::invalid(format!(
            "budget is over {} units, network has {}",
            budget.total,
            net.total_units()
        )));
    }
    if budget.retained_count > budget.total {
        return Err(Error::invalid("budget retains more units than exist"));
    }
    if cfg.gate_l1_weight < 0.0 {
        return Err(Error::invalid("gate_l1_weight must be ≥ 0"));
    }
    let mut work = net.clone();
    work.unfreeze_gates();
    if cfg.train.epochs > 0 {
        trainer::train_gates(&mut work, data, &cfg.train, cfg.gate_l1_weight)?;
    }
    let mut ranked: Vec<(f64, usize, usize)> = work
        .gates
        .iter()
        .enumerate()
        .flat_map(|(l, g)| g.iter().enumerate().map(move |(u, &c)| (c, l, u)))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let keep: BTreeSet<(usize, usize)> = ranked
        .iter()
        .take(budget.retained_count)
        .map(|&(_, l, u)| (l, u))
        .collect();
    work.freeze_with(&keep)?;
    Ok(work)
}

/// Provenance stored alongside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub seed: u64,
    pub created_by: String,
    pub budget: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerWeights {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

/// On-disk JSON form of a [`GatedNetwork`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    shape: NetworkShape,
    weights: Vec<LayerWeights>,
    gates: Vec<Vec<f64>>,
    gate_mode: GateMode,
    pub metadata: CheckpointMetadata,
}

impl Checkpoint {
    pub fn new(net: &GatedNetwork, metadata: CheckpointMetadata) -> Self {
        let weights = net
            .layers
            .iter()
            .map(|l| LayerWeights {
                weight: l.weight.chunks(l.outputs).map(<[f64]>::to_vec).collect(),
                bias: l.bias.clone(),
            })
            .collect();
        Self {
            shape: net.shape.clone(),
            weights,
            gates: net.gates.clone(),
            gate_mode: net.gate_mode,
            metadata,
        }
    }

    pub fn network(&self) -> Result<GatedNetwork> {
        let dims = self.shape.layer_dims();
        if dims.len() != self.weights.len() {
            return Err(Error::shape("checkpoint layer count does not match its shape".to_string()));
        }
        let layers = self
            .weights
            .iter()
            .zip(dims)
            .map(|(lw, (i, o))| {
                if lw.weight.len() != i || lw.weight.iter().any(|r| r.len() != o) {
                    return Err(Error::shape(format!("checkpoint weight is not {i}×{o}")));
                }
                Ok(Layer {
                    inputs: i,
                    outputs: o,
                    weight: lw.weight.concat(),
                    bias: lw.bias.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GatedNetwork::from_parts(self.shape.clone(), layers, self.gates.clone(), self.gate_mode)
    }

    /// Canonical compact JSON encoding; the hash is taken over these bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serialises")
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Write via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}
