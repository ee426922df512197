//! Per-group fairness measurements of linearized networks and the
//! quantities that bound their excess loss.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{hessian, hvp, max_eigenvalue, value_and_grad, EigenEstimate, Objective, ParameterVector, Tape, Var};
use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::model::{argmax, parameter_distance, write_atomic, Checkpoint, CheckpointMetadata, GateMode, GatedNetwork, Head};
use crate::trainer::{cross_entropy, DatasetLoss};

pub const REPORT_SCHEMA: &str = "audit/1";

/// Power-iteration settings for Hessian eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenSettings {
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for EigenSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 500,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    pub eigen: EigenSettings,
    /// Compute the Hessian eigenvalue; when false it is reported as `None`.
    pub hessian: bool,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            eigen: EigenSettings::default(),
            hessian: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub size: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// `None` when the Hessian pass was skipped.
    pub hessian_lambda: Option<f64>,
    pub hessian_converged: bool,
    pub hessian_negative_dominant: bool,
    /// `None` when every sample has a flat margin.
    pub mean_boundary_distance: Option<f64>,
}

fn check_compatible(net: &GatedNetwork, data: &GroupedDataset) -> Result<()> {
    if net.gate_mode() != GateMode::Frozen {
        return Err(Error::GateMode("audits need frozen gates".to_string()));
    }
    if data.dim() != net.shape().input_dim {
        return Err(Error::shape(format!(
            "data has {} features, network expects {}",
            data.dim(),
            net.shape().input_dim
        )));
    }
    if data.num_classes() > net.shape().num_classes {
        return Err(Error::shape(format!(
            "data has {} classes, network predicts {}",
            data.num_classes(),
            net.shape().num_classes
        )));
    }
    Ok(())
}

/// Largest eigenvalue of the Hessian of `f` at `at`, matrix-free.
pub fn hessian_eigenvalue(f: &impl Objective, at: &ParameterVector, eigen: &EigenSettings) -> Result<EigenEstimate> {
    let probe = at.zeros_like();
    max_eigenvalue(
        |v| hvp(f, at, &probe.with_values(v.to_vec())?).map(ParameterVector::into_values),
        at.len(),
        eigen.tol,
        eigen.max_iters,
        eigen.seed,
    )
}

/// Metrics for one group's samples (already restricted to that group).
fn metrics_for(net: &GatedNetwork, name: &str, data: &GroupedDataset, opts: &AuditOptions) -> Result<GroupMetrics> {
    let theta = net.parameters();
    let objective = DatasetLoss { net, data };
    let (loss, g) = value_and_grad(&objective, &theta)?;
    let c = net.shape().num_classes;
    let logits = net.forward_batch(data.features(), data.len())?;
    let correct = logits
        .chunks(c)
        .zip(data.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    let (lambda, converged, negative) = if opts.hessian {
        let e = hessian_eigenvalue(&objective, &theta, &opts.eigen)?;
        (Some(e.lambda), e.converged, e.negative_dominant)
    } else {
        (None, false, false)
    };
    let distances = boundary_distances(net, data)?;
    Ok(GroupMetrics {
        group: name.to_string(),
        size: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        loss,
        grad_norm: g.norm(),
        hessian_lambda: lambda,
        hessian_converged: converged,
        hessian_negative_dominant: negative,
        mean_boundary_distance: mean_finite_distance(&distances),
    })
}

/// Mean over the finite distances.
pub fn mean_finite_distance(distances: &[BoundaryDistance]) -> Option<f64> {
    let finite: Vec<f64> = distances.iter().filter(|d| !d.infinite).map(|d| d.distance).collect();
    if finite.is_empty() {
        return None;
    }
    Some(finite.iter().sum::<f64>() / finite.len() as f64)
}

/// Per-group size, accuracy, mean cross-entropy, gradient norm of the group
/// mean loss, Hessian eigenvalue and mean boundary distance.
pub fn group_metrics(net: &GatedNetwork, data: &GroupedDataset, opts: &AuditOptions) -> Result<Vec<GroupMetrics>> {
    check_compatible(net, data)?;
    (0..data.num_groups())
        .map(|a| metrics_for(net, &data.group_names()[a], &data.group_subset(a)?, opts))
        .collect()
}

/// `max_a |acc_a − acc|`.
pub fn parity_gap(global_accuracy: f64, groups: &[GroupMetrics]) -> f64 {
    groups
        .iter()
        .map(|g| (g.accuracy - global_accuracy).abs())
        .fold(0.0, f64::max)
}

/// `(base − new) / base × 100`.
pub fn relative_accuracy_drop(base_acc: f64, new_acc: f64) -> Result<f64> {
    if base_acc == 0.0 {
        return Err(Error::invalid("relative accuracy drop against a zero baseline"));
    }
    Ok((base_acc - new_acc) / base_acc * 100.0)
}

fn mean_loss(net: &GatedNetwork, data: &GroupedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("mean loss over an empty sample"));
    }
    let c = net.shape().num_classes;
    let logits = net.forward_batch(data.features(), data.len())?;
    let total: f64 = logits.chunks(c).zip(data.labels()).map(|(row, &y)| cross_entropy(row, y)).sum();
    Ok(total / data.len() as f64)
}

/// `J(θ̃; S^a) − J(θ; S^a)` for one group's samples.
pub fn residual_loss(original: &GatedNetwork, linearized: &GatedNetwork, group_data: &GroupedDataset) -> Result<f64> {
    if original.shape() != linearized.shape() {
        return Err(Error::shape("original and linearized shapes differ".to_string()));
    }
    Ok(mean_loss(linearized, group_data)? - mean_loss(original, group_data)?)
}

/// Both sides of the second-order excess-loss bound for one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorBound {
    pub lhs: f64,
    pub grad_norm: f64,
    pub distance: f64,
    pub hessian_lambda: f64,
    pub rhs_linear_term: f64,
    pub rhs_quadratic_term: f64,
    pub rhs_total: f64,
    /// The eigenvalue iteration converged.
    pub reliable: bool,
}

/// `J(θ̃) − J(θ)` against `‖∇J(θ)‖·‖θ̃−θ‖ + ½·λ(∇²J(θ))·‖θ̃−θ‖²` for an
/// arbitrary objective.
pub fn taylor_bound_objective(f: &impl Objective, theta: &ParameterVector, theta_tilde: &ParameterVector, eigen: &EigenSettings) -> Result<TaylorBound> {
    let distance = theta.distance(theta_tilde)?;
    let (j0, g) = value_and_grad(f, theta)?;
    let (j1, _) = value_and_grad(f, theta_tilde)?;
    let e = hessian_eigenvalue(f, theta, eigen)?;
    let grad_norm = g.norm();
    let rhs_linear_term = grad_norm * distance;
    let rhs_quadratic_term = 0.5 * e.lambda * distance * distance;
    Ok(TaylorBound {
        lhs: j1 - j0,
        grad_norm,
        distance,
        hessian_lambda: e.lambda,
        rhs_linear_term,
        rhs_quadratic_term,
        rhs_total: rhs_linear_term + rhs_quadratic_term,
        reliable: e.converged,
    })
}

/// The excess-loss bound for a linearized network on one group's samples.
/// Gradient and Hessian are taken at the original weights under the
/// original gates.
pub fn taylor_bound(original: &GatedNetwork, linearized: &GatedNetwork, group_data: &GroupedDataset, eigen: &EigenSettings) -> Result<TaylorBound> {
    if original.shape() != linearized.shape() {
        return Err(Error::shape("original and linearized shapes differ".to_string()));
    }
    check_compatible(original, group_data)?;
    check_compatible(linearized, group_data)?;
    if group_data.is_empty() {
        return Err(Error::invalid("taylor bound over an empty group"));
    }
    let theta = original.parameters();
    let theta_tilde = linearized.parameters();
    let mut bound = taylor_bound_objective(&DatasetLoss { net: original, data: group_data }, &theta, &theta_tilde, eigen)?;
    // the left side compares the two networks with their own gates
    bound.lhs = residual_loss(original, linearized, group_data)?;
    Ok(bound)
}

/// Sigmoid-head score `z(θ; x)` of a single input.
struct SampleScore<'a> {
    net: &'a GatedNetwork,
    x: &'a [f64],
}

impl Objective for SampleScore<'_> {
    fn eval<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>> {
        let gates = self.net.gates_on_tape(tape, false);
        let x = self.net.input_on_tape(tape, self.x, 1, false)?;
        Ok(self.net.scores_on_tape(params, &gates, x).sum())
    }
}

/// Curvature bound for a binary sigmoid classifier on one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianBound {
    pub lambda_h: f64,
    pub z1: f64,
    pub z2: f64,
    pub converged: bool,
    /// `λ(H_a) ≤ Z1 + Z2 + 1e-6`.
    pub holds: bool,
}

pub const HESSIAN_BOUND_TOL: f64 = 1e-6;

/// Models with at most this many parameters get per-sample Hessians built
/// densely instead of by power iteration.
pub const DENSE_HESSIAN_LIMIT: usize = 256;

/// `max |λ|` of the Hessian of `f` at `at`, with a convergence flag.
fn spectral_radius(f: &impl Objective, at: &ParameterVector, eigen: &EigenSettings) -> Result<(f64, bool)> {
    let p = at.len();
    if p > DENSE_HESSIAN_LIMIT {
        let e = hessian_eigenvalue(f, at, eigen)?;
        return Ok((e.lambda.abs(), e.converged));
    }
    let h = hessian(f, at)?;
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "hessian" });
    }
    // all-zero rows only add zero eigenvalues; the eigensolver also handles
    // the reduced matrix more reliably
    let active: Vec<usize> = (0..p).filter(|&i| (0..p).any(|j| h[i * p + j] != 0.0 || h[j * p + i] != 0.0)).collect();
    if active.is_empty() {
        return Ok((0.0, true));
    }
    let k = active.len();
    let sym = DMatrix::from_fn(k, k, |r, c| 0.5 * (h[active[r] * p + active[c]] + h[active[c] * p + active[r]]));
    if let Some(eig) = SymmetricEigen::try_new(sym.clone(), f64::EPSILON, 10_000) {
        let rho = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        if rho.is_finite() {
            return Ok((rho, true));
        }
    }
    let e = max_eigenvalue(
        |v| Ok((&sym * DVector::from_column_slice(v)).as_slice().to_vec()),
        k,
        eigen.tol,
        eigen.max_iters,
        eigen.seed,
    )?;
    Ok((e.lambda.abs(), e.converged))
}

/// `Z1 = mean h(1−h)·‖∇_θ z‖²` and `Z2 = mean |h − y|·ρ(∇²_θ z)` for the
/// pre-sigmoid score `z` and `h = σ(z)`, alongside `λ(H_a)` of the group's
/// mean binary cross-entropy.
pub fn hessian_bound_z1z2(net: &GatedNetwork, group_data: &GroupedDataset, eigen: &EigenSettings) -> Result<HessianBound> {
    if net.shape().head != Head::Sigmoid || net.shape().num_classes != 2 {
        return Err(Error::invalid("the curvature bound needs a binary sigmoid-head network"));
    }
    check_compatible(net, group_data)?;
    if group_data.is_empty() {
        return Err(Error::invalid("curvature bound over an empty group"));
    }
    let theta = net.parameters();
    let per_sample = EigenSettings {
        tol: eigen.tol.min(1e-10),
        max_iters: eigen.max_iters.max(2000),
        seed: eigen.seed,
    };
    let mut z1 = 0.0;
    let mut z2 = 0.0;
    let mut converged = true;
    for i in 0..group_data.len() {
        let score = SampleScore { net, x: group_data.row(i) };
        let (z, g) = value_and_grad(&score, &theta)?;
        let h = 1.0 / (1.0 + (-z).exp());
        let y = group_data.labels()[i] as f64;
        z1 += h * (1.0 - h) * g.dot(&g);
        let err = (h - y).abs();
        if err > 0.0 {
            let (rho, ok) = spectral_radius(&score, &theta, &per_sample)?;
            converged &= ok;
            z2 += err * rho;
        }
    }
    let n = group_data.len() as f64;
    let (z1, z2) = (z1 / n, z2 / n);
    let e = hessian_eigenvalue(&DatasetLoss { net, data: group_data }, &theta, eigen)?;
    Ok(HessianBound {
        lambda_h: e.lambda,
        z1,
        z2,
        converged: converged && e.converged,
        holds: e.lambda <= z1 + z2 + HESSIAN_BOUND_TOL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDistance {
    /// Signed first-order distance; negative when misclassified.
    pub distance: f64,
    /// The margin gradient vanished and the distance is reported as `+∞`.
    pub infinite: bool,
}

/// Per-row margins on the tape together with the input leaf.
fn margin_rows<'t>(net: &GatedNetwork, tape: &'t Tape, features: &[f64], labels: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
    let n = labels.len();
    let params: Vec<Var<'t>> = net.parameters().unflatten().into_iter().map(|t| tape.constant(t)).collect();
    let gates = net.gates_on_tape(tape, false);
    let x = net.input_on_tape(tape, features, n, true)?;
    let logits = net.logits_on_tape(&params, &gates, x);
    let values = logits.value();
    let c = values.cols();
    if c < 2 {
        return Err(Error::invalid("boundary distance needs at least two classes"));
    }
    let rivals: Vec<usize> = values
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| {
            let mut best = if y == 0 { 1 } else { 0 };
            for j in 0..c {
                if j != y && row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok((logits.gather_cols(labels.to_vec()) - logits.gather_cols(rivals), x))
}

/// Margin-over-gradient distances `m(x)/‖∇ₓm(x)‖` for every row.
pub fn boundary_distances(net: &GatedNetwork, data: &GroupedDataset) -> Result<Vec<BoundaryDistance>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let (margins, x) = margin_rows(net, &tape, data.features(), data.labels())?;
    let m = margins.value();
    let grads = tape.backward(margins.sum(), &[x])?;
    tape.check()?;
    let gx = grads[0].value();
    let d = data.dim();
    Ok(m
        .data()
        .iter()
        .zip(gx.data().chunks(d))
        .map(|(&mi, g)| {
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn < 1e-12 {
                BoundaryDistance {
                    distance: f64::INFINITY,
                    infinite: true,
                }
            } else {
                BoundaryDistance {
                    distance: mi / gn,
                    infinite: false,
                }
            }
        })
        .collect())
}

/// Distance of a single input to the decision boundary.
pub fn boundary_distance(net: &GatedNetwork, x: &[f64], y: usize) -> Result<BoundaryDistance> {
    if y >= net.shape().num_classes {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    let ds = GroupedDataset::new(x.to_vec(), x.len(), vec![y], vec![0], vec!["all".into()], net.shape().num_classes)?;
    Ok(boundary_distances(net, &ds)?[0])
}

/// Divide by the 90th percentile of `|d|` and clamp to `[−1, 1]`.
/// Infinite distances map to `1`.
pub fn normalize_distances(distances: &[f64]) -> Vec<f64> {
    let mut mags: Vec<f64> = distances.iter().filter(|d| d.is_finite()).map(|d| d.abs()).collect();
    if mags.is_empty() {
        return distances.iter().map(|d| d.signum().clamp(-1.0, 1.0)).collect();
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((0.9 * mags.len() as f64).ceil() as usize).clamp(1, mags.len()) - 1;
    let scale = mags[rank];
    distances
        .iter()
        .map(|&d| {
            if scale > 0.0 {
                (d / scale).clamp(-1.0, 1.0)
            } else {
                d.signum().clamp(-1.0, 1.0)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalMetrics {
    pub size: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// One model's audit: evaluation metrics and, for candidates, bound
/// diagnostics against the base network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAudit {
    pub name: String,
    pub checkpoint_hash: String,
    pub relu_count: usize,
    pub total_units: usize,
    pub budget: f64,
    pub global: GlobalMetrics,
    /// Measured on the evaluation split.
    pub groups: Vec<GroupMetrics>,
    /// Measured on the training split.
    pub train_groups: Vec<GroupMetrics>,
    /// Per group, in percent against the base model's evaluation accuracy;
    /// `None` where the base model scored zero.
    pub relative_drops: Vec<Option<f64>>,
    pub parity_gap: f64,
    pub parameter_distance: f64,
    /// Per group on the training split.
    pub taylor: Vec<TaylorBound>,
    /// Per group on the training split; binary sigmoid models only.
    pub hessian_bound: Option<Vec<HessianBound>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema: String,
    pub baseline: String,
    pub group_names: Vec<String>,
    pub base: ModelAudit,
    pub candidates: Vec<ModelAudit>,
}

fn model_hash(net: &GatedNetwork) -> String {
    Checkpoint::new(
        net,
        CheckpointMetadata {
            seed: 0,
            created_by: String::new(),
            budget: None,
        },
    )
    .sha256()
}

fn audit_model(name: &str, net: &GatedNetwork, base: Option<(&GatedNetwork, &ModelAudit)>, data_eval: &GroupedDataset, data_train: &GroupedDataset, opts: &AuditOptions) -> Result<ModelAudit> {
    let groups = group_metrics(net, data_eval, opts)?;
    let train_groups = group_metrics(net, data_train, &AuditOptions { hessian: false, ..*opts })?;
    let (loss, g) = value_and_grad(&DatasetLoss { net, data: data_eval }, &net.parameters())?;
    let c = net.shape().num_classes;
    let preds = net.forward_batch(data_eval.features(), data_eval.len())?;
    let correct = preds.chunks(c).zip(data_eval.labels()).filter(|(r, &y)| argmax(r) == y).count();
    let global = GlobalMetrics {
        size: data_eval.len(),
        accuracy: correct as f64 / data_eval.len() as f64,
        loss,
        grad_norm: g.norm(),
    };
    let relu_count = net.relu_count()?;
    let total_units = net.total_units();
    let mut out = ModelAudit {
        name: name.to_string(),
        checkpoint_hash: model_hash(net),
        relu_count,
        total_units,
        budget: relu_count as f64 / total_units.max(1) as f64,
        parity_gap: parity_gap(global.accuracy, &groups),
        global,
        relative_drops: Vec::new(),
        parameter_distance: 0.0,
        taylor: Vec::new(),
        hessian_bound: None,
        groups,
        train_groups,
    };
    let Some((base_net, base_audit)) = base else {
        out.relative_drops = vec![Some(0.0); out.groups.len()];
        return Ok(out);
    };
    out.relative_drops = base_audit
        .groups
        .iter()
        .zip(&out.groups)
        .map(|(b, c)| relative_accuracy_drop(b.accuracy, c.accuracy).ok())
        .collect();
    out.parameter_distance = parameter_distance(base_net, net)?;
    let binary = net.shape().head == Head::Sigmoid && net.shape().num_classes == 2;
    let mut hb = Vec::new();
    for a in 0..data_train.num_groups() {
        let sub = data_train.group_subset(a)?;
        out.taylor.push(taylor_bound(base_net, net, &sub, &opts.eigen)?);
        if binary && opts.hessian {
            hb.push(hessian_bound_z1z2(net, &sub, &opts.eigen)?);
        }
    }
    if binary && opts.hessian {
        out.hessian_bound = Some(hb);
    }
    Ok(out)
}

/// Audit the base model and every candidate. Relative drops compare each
/// candidate with the base model group by group.
pub fn build_report(base: &GatedNetwork, candidates: &[(String, GatedNetwork)], data_eval: &GroupedDataset, data_train: &GroupedDataset, opts: &AuditOptions) -> Result<AuditReport> {
    for (name, c) in candidates {
        if c.shape() != base.shape() {
            return Err(Error::shape(format!("candidate `{name}` does not match the base shape")));
        }
    }
    if data_eval.group_names() != data_train.group_names() {
        return Err(Error::invalid("evaluation and training splits name different groups"));
    }
    let base_audit = audit_model("base", base, None, data_eval, data_train, opts)?;
    let candidates = candidates
        .iter()
        .map(|(name, net)| audit_model(name, net, Some((base, &base_audit)), data_eval, data_train, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(AuditReport {
        schema: REPORT_SCHEMA.to_string(),
        baseline: "base".to_string(),
        group_names: data_eval.group_names().to_vec(),
        base: base_audit,
        candidates,
    })
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            path: Default::default(),
            message: e.to_string(),
        })?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Format {
                path: Default::default(),
                message: format!("unsupported schema `{}`", r.schema),
            });
        }
        Ok(r)
    }

    /// Base plus candidates, in report order.
    pub fn models(&self) -> impl Iterator<Item = &ModelAudit> {
        std::iter::once(&self.base).chain(&self.candidates)
    }

    /// One row per candidate and group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,budget,group,size,accuracy,loss,grad_norm,hessian_lambda,hessian_converged,\
             mean_boundary_distance,relative_drop,residual_loss,taylor_rhs,z1,z2\n",
        );
        for m in &self.candidates {
            for (a, g) in m.groups.iter().enumerate() {
                let t = m.taylor.get(a);
                let h = m.hessian_bound.as_ref().and_then(|v| v.get(a));
                let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
                out.push_str(&format!(
                    "{},{:?},{},{},{:?},{:?},{:?},{},{},{},{},{},{},{},{}\n",
                    m.name,
                    m.budget,
                    g.group,
                    g.size,
                    g.accuracy,
                    g.loss,
                    g.grad_norm,
                    opt(g.hessian_lambda),
                    g.hessian_converged,
                    opt(g.mean_boundary_distance),
                    opt(m.relative_drops[a]),
                    opt(t.map(|t| t.lhs)),
                    opt(t.map(|t| t.rhs_total)),
                    opt(h.map(|h| h.z1)),
                    opt(h.map(|h| h.z2)),
                ));
            }
        }
        out
    }

    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        write_atomic(json_path, self.to_json().as_bytes())?;
        write_atomic(csv_path, self.to_csv().as_bytes())
    }
}
