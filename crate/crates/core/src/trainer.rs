//! Training loops: empirical-risk training, distillation fine-tuning and
//! multiplier-based fairness fine-tuning of linearized students.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, value_and_grad, Objective, ParameterVector, Tape, Tensor, Var};
use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::model::{argmax, write_atomic, GateMode, GatedNetwork};
use crate::rng::{seeded, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            learning_rate: 0.05,
            optimizer: Optimizer::SgdMomentum { beta: 0.9 },
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for fine-tuning loops (30 epochs).
    pub fn finetune() -> Self {
        Self {
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        match self.optimizer {
            Optimizer::Sgd => {}
            Optimizer::SgdMomentum { beta } if (0.0..1.0).contains(&beta) => {}
            Optimizer::Adam { beta1, beta2, eps }
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 => {}
            other => return Err(Error::invalid(format!("invalid optimizer settings {other:?}"))),
        }
        Ok(())
    }
}

/// Distillation loss settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub temperature: f64,
    pub distill_weight: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            distill_weight: 0.9,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.distill_weight) {
            return Err(Error::invalid(format!(
                "distill_weight must lie in [0, 1], got {}",
                self.distill_weight
            )));
        }
        Ok(())
    }
}

/// Per-group multipliers of the fairness fine-tuning loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub multipliers: Vec<f64>,
    pub multiplier_step: f64,
    pub epoch: usize,
}

impl LagrangianState {
    pub fn new(num_groups: usize, multiplier_step: f64) -> Result<Self> {
        if !(multiplier_step > 0.0 && multiplier_step.is_finite()) {
            return Err(Error::invalid(format!("multiplier step μ must be > 0, got {multiplier_step}")));
        }
        Ok(Self {
            multipliers: vec![0.0; num_groups],
            multiplier_step,
            epoch: 0,
        })
    }

    /// `λ_a ← λ_a + μ·|L − L_a|` for every group.
    pub fn update(&mut self, global_loss: f64, group_losses: &[f64]) {
        for (l, &la) in self.multipliers.iter_mut().zip(group_losses) {
            *l += self.multiplier_step * (global_loss - la).abs();
        }
        self.epoch += 1;
    }
}

struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, n: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::SgdMomentum { beta } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    *m = beta * *m + g;
                    *p -= lr * *m;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Mini-batches for one epoch. With shuffling, each group is shuffled
/// separately and the groups are interleaved proportionally, so every
/// batch carries roughly the population mix.
pub(crate) fn epoch_batches(data: &GroupedDataset, cfg: &TrainConfig, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let n = data.len();
    let order: Vec<usize> = if cfg.shuffle {
        let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
        for a in 0..data.num_groups() {
            let mut members = data.group_indices(a);
            members.shuffle(rng);
            let size = members.len() as f64;
            for (k, i) in members.into_iter().enumerate() {
                keyed.push(((k as f64 + 0.5) / size, a, i));
            }
        }
        keyed.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        keyed.into_iter().map(|(_, _, i)| i).collect()
    } else {
        (0..n).collect()
    };
    order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

/// The mini-batches a training run with `cfg` visits in `epoch`.
pub fn batch_plan(data: &GroupedDataset, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = seeded(cfg.seed, streams::SHUFFLE);
    for _ in 0..epoch {
        epoch_batches(data, cfg, &mut rng);
    }
    epoch_batches(data, cfg, &mut rng)
}

fn gather_rows(data: &GroupedDataset, idx: &[usize]) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let mut x = Vec::with_capacity(idx.len() * data.dim());
    for &i in idx {
        x.extend_from_slice(data.row(i));
    }
    let y = idx.iter().map(|&i| data.labels()[i]).collect();
    let a = idx.iter().map(|&i| data.groups()[i]).collect();
    (x, y, a)
}

/// `−log softmax(logits)[y]`.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    logsumexp(logits) - logits[y]
}

fn softmax_t(logits: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
    let lse = logsumexp(&scaled);
    scaled.iter().map(|z| (z - lse).exp()).collect()
}

/// `w·T²·KL(softmax(t/T) ‖ softmax(s/T)) + (1−w)·CE(s, y)`.
pub fn kd_loss(student: &[f64], teacher: &[f64], y: usize, kd: &KdConfig) -> f64 {
    assert_eq!(student.len(), teacher.len(), "kd_loss: logit lengths differ");
    let t = kd.temperature;
    let p_t = softmax_t(teacher, t);
    let s_scaled: Vec<f64> = student.iter().map(|z| z / t).collect();
    let lse_s = logsumexp(&s_scaled);
    let t_scaled: Vec<f64> = teacher.iter().map(|z| z / t).collect();
    let lse_t = logsumexp(&t_scaled);
    let kl: f64 = p_t
        .iter()
        .zip(s_scaled.iter().zip(&t_scaled))
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, (s, tt))| p * ((tt - lse_t) - (s - lse_s)))
        .sum();
    kd.distill_weight * t * t * kl + (1.0 - kd.distill_weight) * cross_entropy(student, y)
}

/// Per-row cross-entropy on the tape, `[n]`.
pub fn cross_entropy_rows<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    logits.logsumexp_rows() - logits.gather_cols(labels.to_vec())
}

/// Per-row distillation loss on the tape, `[n]`. `teacher` is the
/// row-major `n×C` block of teacher logits.
pub fn kd_rows<'t>(student: Var<'t>, teacher: &[f64], labels: &[usize], kd: &KdConfig) -> Var<'t> {
    let c = student.value().cols();
    let t = kd.temperature;
    let mut p_t = Vec::with_capacity(teacher.len());
    let mut neg_entropy = Vec::with_capacity(labels.len());
    for row in teacher.chunks(c) {
        let scaled: Vec<f64> = row.iter().map(|z| z / t).collect();
        let lse = logsumexp(&scaled);
        let mut h = 0.0;
        for z in scaled {
            let lp = z - lse;
            let p = lp.exp();
            if p > 0.0 {
                h += p * lp;
            }
            p_t.push(p);
        }
        neg_entropy.push(h);
    }
    let tape = student.tape();
    let log_ps = student.scale(1.0 / t).log_softmax_rows();
    let cross = log_ps.mul_const(p_t).sum_cols();
    let kl = tape.constant(Tensor::vector(neg_entropy)) - cross;
    let w = kd.distill_weight;
    kl.scale(w * t * t) + cross_entropy_rows(student, labels).scale(1.0 - w)
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    /// Group name, or `all` for the whole split.
    pub group: String,
    pub loss: f64,
    pub accuracy: f64,
    /// Multipliers in force after this epoch (fairness loop only).
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub group_names: Vec<String>,
    pub rows: Vec<HistoryRow>,
}

impl History {
    fn new(data: &GroupedDataset) -> Self {
        Self {
            group_names: data.group_names().to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn record(&mut self, epoch: usize, eval: &Evaluation, lambdas: &[f64]) {
        self.rows.push(HistoryRow {
            epoch,
            split: "train".into(),
            group: "all".into(),
            loss: eval.loss,
            accuracy: eval.accuracy,
            lambdas: lambdas.to_vec(),
        });
        for (a, name) in self.group_names.iter().enumerate() {
            self.rows.push(HistoryRow {
                epoch,
                split: "train".into(),
                group: name.clone(),
                loss: eval.group_loss[a],
                accuracy: eval.group_accuracy[a],
                lambdas: lambdas.to_vec(),
            });
        }
    }

    /// CSV with columns `epoch,split,group,loss,accuracy,lambda_<group>…`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,group,loss,accuracy");
        for g in &self.group_names {
            out.push_str(&format!(",lambda_{g}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{:?},{:?}", r.epoch, r.split, r.group, r.loss, r.accuracy));
            for a in 0..self.group_names.len() {
                match r.lambdas.get(a) {
                    Some(l) => out.push_str(&format!(",{l:?}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Plain (tape-free) evaluation of a network on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub group_loss: Vec<f64>,
    pub group_accuracy: Vec<f64>,
    pub group_sizes: Vec<usize>,
}

fn per_sample_losses(net: &GatedNetwork, data: &GroupedDataset, teacher: Option<(&[f64], &KdConfig)>) -> Result<(Vec<f64>, Vec<bool>)> {
    let c = net.shape().num_classes;
    let logits = net.forward_batch(data.features(), data.len())?;
    let mut losses = Vec::with_capacity(data.len());
    let mut correct = Vec::with_capacity(data.len());
    for (i, row) in logits.chunks(c).enumerate() {
        let y = data.labels()[i];
        let l = match teacher {
            Some((t, kd)) => kd_loss(row, &t[i * c..(i + 1) * c], y, kd),
            None => cross_entropy(row, y),
        };
        if !l.is_finite() {
            return Err(Error::NonFinite { op: "evaluate" });
        }
        losses.push(l);
        correct.push(argmax(row) == y);
    }
    Ok((losses, correct))
}

fn summarize(data: &GroupedDataset, losses: &[f64], correct: &[bool]) -> Evaluation {
    let m = data.num_groups();
    let mut gl = vec![0.0; m];
    let mut gc = vec![0usize; m];
    let mut gs = vec![0usize; m];
    for (i, &a) in data.groups().iter().enumerate() {
        gl[a] += losses[i];
        gc[a] += correct[i] as usize;
        gs[a] += 1;
    }
    let n = data.len().max(1) as f64;
    let div = |x: f64, s: usize| if s == 0 { f64::NAN } else { x / s as f64 };
    Evaluation {
        // summing group totals keeps `loss == group_loss[a]` exact when
        // every group has the same total over equal sizes
        loss: gl.iter().sum::<f64>() / n,
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / n,
        group_loss: gl.iter().zip(&gs).map(|(&l, &s)| div(l, s)).collect(),
        group_accuracy: gc.iter().zip(&gs).map(|(&c, &s)| div(c as f64, s)).collect(),
        group_sizes: gs,
    }
}

/// Global and per-group cross-entropy and accuracy. Groups without members
/// report `NaN`.
pub fn evaluate(net: &GatedNetwork, data: &GroupedDataset) -> Result<Evaluation> {
    let (l, c) = per_sample_losses(net, data, None)?;
    Ok(summarize(data, &l, &c))
}

/// Global and per-group distillation loss against fixed teacher logits.
pub fn evaluate_kd(net: &GatedNetwork, teacher_logits: &[f64], data: &GroupedDataset, kd: &KdConfig) -> Result<Evaluation> {
    let (l, c) = per_sample_losses(net, data, Some((teacher_logits, kd)))?;
    Ok(summarize(data, &l, &c))
}

fn check_data(net: &GatedNetwork, data: &GroupedDataset) -> Result<()> {
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
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    Ok(())
}

/// The loop shared by every trainer: per batch, build the objective on a
/// fresh tape, differentiate with respect to the weights (and optionally
/// the gates), step, and record history after each epoch.
fn run_epochs<F, E>(net: &mut GatedNetwork, data: &GroupedDataset, cfg: &TrainConfig, learn_gates: bool, mut batch_loss: F, mut end_epoch: E) -> Result<History>
where
    F: for<'t> FnMut(Var<'t>, &[Var<'t>], &[usize], &[usize], &[usize]) -> Result<Var<'t>>,
    E: FnMut(usize, &GatedNetwork, &mut History) -> Result<()>,
{
    cfg.validate()?;
    check_data(net, data)?;
    let mut history = History::new(data);
    let mut params = net.parameters();
    let n_weights = params.len();
    let n_gates = if learn_gates { net.total_units() } else { 0 };
    let mut opt = OptimizerState::new(cfg.optimizer, n_weights + n_gates);
    let mut rng = seeded(cfg.seed, streams::SHUFFLE);
    let mut flat = params.values().to_vec();
    if learn_gates {
        flat.extend(net.gates().iter().flatten());
    }
    for epoch in 0..cfg.epochs {
        for (b, idx) in epoch_batches(data, cfg, &mut rng).into_iter().enumerate() {
            let (x, y, a) = gather_rows(data, &idx);
            let tape = Tape::new();
            let pv = net.params_on_tape(&tape);
            let gv = net.gates_on_tape(&tape, learn_gates);
            let xv = net.input_on_tape(&tape, &x, idx.len(), false)?;
            let logits = net.logits_on_tape(&pv, &gv, xv);
            let loss = batch_loss(logits, &gv, &y, &a, &idx)?;
            if tape.check().is_err() || !loss.item().is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let mut wrt = pv.clone();
            if learn_gates {
                wrt.extend(gv.iter().copied());
            }
            let grads = tape.backward(loss, &wrt)?;
            let g: Vec<f64> = grads.iter().flat_map(|v| v.value().data().to_vec()).collect();
            opt.step(&mut flat, &g, cfg.learning_rate);
            params = params.with_values(flat[..n_weights].to_vec())?;
            net.set_parameters(&params)?;
            if learn_gates {
                net.set_learnable_gates(&flat[n_weights..]);
                for (dst, &c) in flat[n_weights..].iter_mut().zip(net.gates().iter().flatten()) {
                    *dst = c;
                }
            }
        }
        end_epoch(epoch, net, &mut history)?;
    }
    Ok(history)
}

fn require_frozen(net: &GatedNetwork, what: &str) -> Result<()> {
    if net.gate_mode() != GateMode::Frozen {
        return Err(Error::GateMode(format!("{what} needs frozen gates")));
    }
    Ok(())
}

/// Mini-batch empirical-risk training of weights and biases.
pub fn train_base(net: &GatedNetwork, data: &GroupedDataset, cfg: &TrainConfig) -> Result<(GatedNetwork, History)> {
    require_frozen(net, "train_base")?;
    let mut out = net.clone();
    if cfg.epochs == 0 {
        cfg.validate()?;
        return Ok((out, History::new(data)));
    }
    let history = run_epochs(
        &mut out,
        data,
        cfg,
        false,
        |logits, _, y, _, _| Ok(cross_entropy_rows(logits, y).mean()),
        |epoch, net, h| {
            let e = evaluate(net, data)?;
            h.record(epoch, &e, &[]);
            Ok(())
        },
    )?;
    Ok((out, history))
}

/// Joint training of weights and learnable gates with an L1 pull on the
/// gates; used by the learned-mask linearization.
pub(crate) fn train_gates(net: &mut GatedNetwork, data: &GroupedDataset, cfg: &TrainConfig, l1: f64) -> Result<History> {
    if net.gate_mode() != GateMode::Learnable {
        return Err(Error::GateMode("gate training needs learnable gates".to_string()));
    }
    if !(l1 >= 0.0 && l1.is_finite()) {
        return Err(Error::invalid(format!("gate L1 weight must be ≥ 0, got {l1}")));
    }
    run_epochs(
        net,
        data,
        cfg,
        true,
        |logits, gates, y, _, _| {
            let mut loss = cross_entropy_rows(logits, y).mean();
            for g in gates {
                loss = loss + g.sum().scale(l1);
            }
            Ok(loss)
        },
        |epoch, net, h| {
            let e = evaluate(net, data)?;
            h.record(epoch, &e, &[]);
            Ok(())
        },
    )
}

fn check_pair(student: &GatedNetwork, teacher: &GatedNetwork) -> Result<()> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape("student and teacher shapes differ".to_string()));
    }
    require_frozen(student, "fine-tuning (student)")?;
    require_frozen(teacher, "fine-tuning (teacher)")?;
    if teacher.relu_count()? != teacher.total_units() {
        return Err(Error::GateMode("the teacher must be an all-ReLU network".to_string()));
    }
    Ok(())
}

fn rows_of(all: &[f64], idx: &[usize], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&all[i * c..(i + 1) * c]);
    }
    out
}

/// Distillation fine-tuning of a linearized student against its teacher.
/// Gates are never modified; the teacher is only read.
pub fn finetune_kd(student: &GatedNetwork, teacher: &GatedNetwork, data: &GroupedDataset, cfg: &TrainConfig, kd: &KdConfig) -> Result<(GatedNetwork, History)> {
    check_pair(student, teacher)?;
    kd.validate()?;
    let mut out = student.clone();
    if cfg.epochs == 0 {
        cfg.validate()?;
        return Ok((out, History::new(data)));
    }
    let c = teacher.shape().num_classes;
    let t_logits = teacher.forward_batch(data.features(), data.len())?;
    let history = run_epochs(
        &mut out,
        data,
        cfg,
        false,
        |logits, _, y, _, idx| Ok(kd_rows(logits, &rows_of(&t_logits, idx, c), y, kd).mean()),
        |epoch, net, h| {
            let e = evaluate(net, data)?;
            h.record(epoch, &e, &[]);
            Ok(())
        },
    )?;
    Ok((out, history))
}

/// Result of the fairness fine-tuning loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairOutcome {
    pub history: History,
    /// Multipliers after each epoch's update, one vector per epoch.
    pub multipliers: Vec<Vec<f64>>,
    pub state: LagrangianState,
}

impl FairOutcome {
    /// CSV with columns `epoch,group,lambda`; one row per epoch and group.
    pub fn multipliers_csv(&self) -> String {
        let mut out = String::from("epoch,group,lambda\n");
        for (e, lam) in self.multipliers.iter().enumerate() {
            for (g, l) in self.history.group_names.iter().zip(lam) {
                out.push_str(&format!("{e},{g},{l:?}\n"));
            }
        }
        out
    }
}

/// Fairness-constrained distillation fine-tuning.
///
/// Each mini-batch `B` minimises `L(B) + Σ_a λ_a·|L(B) − L_a(B)|`, where
/// `L` is the distillation loss, `L_a` its mean over the batch members of
/// group `a`, and absent groups contribute nothing. After every epoch the
/// multipliers grow by `μ·|L(S_T) − L_a(S_T)|` measured on the whole
/// training set.
pub fn finetune_fair(student: &GatedNetwork, teacher: &GatedNetwork, data: &GroupedDataset, cfg: &TrainConfig, kd: &KdConfig, mu: f64) -> Result<(GatedNetwork, FairOutcome)> {
    check_pair(student, teacher)?;
    kd.validate()?;
    let m = data.num_groups();
    if let Some(a) = data.group_sizes().iter().position(|&s| s == 0) {
        return Err(Error::EmptyGroup(a));
    }
    let mut state = LagrangianState::new(m, mu)?;
    let mut out = student.clone();
    if cfg.epochs == 0 {
        cfg.validate()?;
        let outcome = FairOutcome {
            history: History::new(data),
            multipliers: Vec::new(),
            state,
        };
        return Ok((out, outcome));
    }
    let c = teacher.shape().num_classes;
    let t_logits = teacher.forward_batch(data.features(), data.len())?;
    let lambdas = std::cell::RefCell::new(state.multipliers.clone());
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    let history = run_epochs(
        &mut out,
        data,
        cfg,
        false,
        |logits, _, y, groups, idx| {
            let per = kd_rows(logits, &rows_of(&t_logits, idx, c), y, kd);
            let global = per.mean();
            let mut obj = global;
            let lam = lambdas.borrow();
            for (a, &l) in lam.iter().enumerate() {
                let mask: Vec<f64> = groups.iter().map(|&g| if g == a { 1.0 } else { 0.0 }).collect();
                let count = mask.iter().sum::<f64>();
                if count == 0.0 {
                    continue;
                }
                let group_mean = per.mul_const(mask).sum().scale(1.0 / count);
                obj = obj + (global - group_mean).abs().scale(l);
            }
            Ok(obj)
        },
        |epoch, net, h| {
            let kd_eval = evaluate_kd(net, &t_logits, data, kd)?;
            state.update(kd_eval.loss, &kd_eval.group_loss);
            *lambdas.borrow_mut() = state.multipliers.clone();
            trajectory.push(state.multipliers.clone());
            let e = evaluate(net, data)?;
            h.record(epoch, &e, &state.multipliers);
            Ok(())
        },
    )?;
    Ok((
        out,
        FairOutcome {
            history,
            multipliers: trajectory,
            state,
        },
    ))
}

/// Mean cross-entropy of a fixed-gate network as a function of its weights.
pub struct DatasetLoss<'a> {
    pub net: &'a GatedNetwork,
    pub data: &'a GroupedDataset,
}

impl Objective for DatasetLoss<'_> {
    fn eval<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>> {
        let gates = self.net.gates_on_tape(tape, false);
        let x = self.net.input_on_tape(tape, self.data.features(), self.data.len(), false)?;
        let logits = self.net.logits_on_tape(params, &gates, x);
        Ok(cross_entropy_rows(logits, self.data.labels()).mean())
    }
}

fn plain_loss(net: &GatedNetwork, data: &GroupedDataset) -> Result<f64> {
    let c = net.shape().num_classes;
    let logits = net.forward_batch(data.features(), data.len())?;
    let total: f64 = logits.chunks(c).zip(data.labels()).map(|(row, &y)| cross_entropy(row, y)).sum();
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "converge" });
    }
    Ok(total / data.len() as f64)
}

/// Outcome of [`converge`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Full-batch L-BFGS on the mean cross-entropy until `‖∇J‖ < tol`.
/// Gates are left untouched.
pub fn converge(net: &GatedNetwork, data: &GroupedDataset, tol: f64, max_iters: usize) -> Result<(GatedNetwork, Convergence)> {
    require_frozen(net, "converge")?;
    check_data(net, data)?;
    const HISTORY: usize = 10;
    let mut out = net.clone();
    let eval = |p: &ParameterVector, out: &GatedNetwork| -> Result<(f64, ParameterVector)> {
        value_and_grad(&DatasetLoss { net: out, data }, p)
    };
    let mut x = out.parameters();
    let (mut f, mut g) = eval(&x, &out)?;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    while g.norm() >= tol && iterations < max_iters {
        iterations += 1;
        // two-loop recursion
        let mut q = g.values().to_vec();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / crate::autodiff::dot(y, s);
            let a = rho * crate::autodiff::dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push((a, rho));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = crate::autodiff::dot(s, y) / crate::autodiff::dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let scale = 1.0 / g.norm().max(1.0);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, y), (a, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * crate::autodiff::dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = crate::autodiff::dot(&dir, g.values());
        if slope >= 0.0 {
            dir = g.values().iter().map(|v| -v).collect();
            slope = -g.dot(&g);
            s_hist.clear();
            y_hist.clear();
        }
        // Armijo backtracking on the loss alone
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.values().iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let cand = x.with_values(cand)?;
            match plain_loss(&out.with_parameters(&cand)?, data) {
                Ok(fc) if fc <= f + 1e-4 * step * slope => {
                    accepted = Some(cand);
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some(xn) = accepted else {
            if s_hist.is_empty() {
                break;
            }
            // retry from steepest descent
            s_hist.clear();
            y_hist.clear();
            continue;
        };
        let (fnew, gn) = eval(&xn, &out)?;
        let s: Vec<f64> = xn.values().iter().zip(x.values()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.values().iter().zip(g.values()).map(|(a, b)| a - b).collect();
        if crate::autodiff::dot(&s, &y) > 1e-12 {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > HISTORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        x = xn;
        f = fnew;
        g = gn;
    }
    out.set_parameters(&x)?;
    let grad_norm = g.norm();
    Ok((
        out,
        Convergence {
            loss: f,
            grad_norm,
            iterations,
            converged: grad_norm < tol,
        },
    ))
}
