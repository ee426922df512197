use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{dot, norm, Tensor};
use crate::error::{Error, Result};

/// Flat view of a model's trainable values with a stable block ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    shapes: Vec<Vec<usize>>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn from_tensors(blocks: &[Tensor]) -> Self {
        let shapes = blocks.iter().map(|t| t.shape().to_vec()).collect();
        let values = blocks.iter().flat_map(|t| t.data().iter().copied()).collect();
        Self { shapes, values }
    }

    /// Single-block vector.
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self {
            shapes: vec![vec![values.len()]],
            values,
        }
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            shapes: self.shapes.clone(),
            values,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shapes: self.shapes.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn unflatten(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut offset = 0;
        for shape in &self.shapes {
            let n: usize = shape.iter().product();
            out.push(Tensor::from_parts(shape.clone(), self.values[offset..offset + n].to_vec()));
            offset += n;
        }
        out
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        if self.shapes != other.shapes {
            return Err(Error::shape("parameter layouts differ".to_string()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Register every block on `tape` as a differentiable leaf.
    pub fn to_tape<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.unflatten().into_iter().map(|t| tape.param(t)).collect()
    }
}

/// A scalar function of parameter blocks recorded on a tape.
pub trait Objective {
    fn eval<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>>;
}

impl<F> Objective for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    fn eval<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>> {
        self(tape, params)
    }
}

fn flatten_vars(vars: &[Var<'_>]) -> Vec<f64> {
    vars.iter().flat_map(|v| v.value().data().to_vec()).collect()
}

/// Value and gradient of `f` at `at`.
pub fn value_and_grad(f: &impl Objective, at: &ParameterVector) -> Result<(f64, ParameterVector)> {
    let tape = Tape::new();
    let params = at.to_tape(&tape);
    let y = f.eval(&tape, &params)?;
    tape.check()?;
    let value = y.value();
    if value.numel() != 1 {
        return Err(Error::shape(format!("objective returned shape {:?}", value.shape())));
    }
    let grads = tape.backward(y, &params)?;
    Ok((value.item(), at.with_values(flatten_vars(&grads))?))
}

/// Gradient of `f` at `at`.
pub fn grad(f: &impl Objective, at: &ParameterVector) -> Result<ParameterVector> {
    value_and_grad(f, at).map(|(_, g)| g)
}

/// Hessian-vector product `∇²f(at)·v`, obtained by differentiating `⟨∇f, v⟩`.
pub fn hvp(f: &impl Objective, at: &ParameterVector, v: &ParameterVector) -> Result<ParameterVector> {
    if v.len() != at.len() {
        return Err(Error::shape(format!(
            "hvp direction has {} entries, parameters have {}",
            v.len(),
            at.len()
        )));
    }
    let tape = Tape::new();
    let params = at.to_tape(&tape);
    let y = f.eval(&tape, &params)?;
    let grads = tape.backward(y, &params)?;
    let blocks = v.unflatten();
    let mut inner: Option<Var<'_>> = None;
    for (g, vb) in grads.iter().zip(&blocks) {
        if !g.needs_grad() {
            continue;
        }
        let term = g.dot_const(vb.data());
        inner = Some(match inner {
            Some(acc) => acc + term,
            None => term,
        });
    }
    let Some(inner) = inner else {
        return Ok(at.zeros_like());
    };
    let hv = tape.backward(inner, &params)?;
    at.with_values(flatten_vars(&hv))
}

/// Dense Hessian of `f` at `at`, row-major `p×p`. The gradient graph is
/// recorded once and differentiated once per coordinate.
pub fn hessian(f: &impl Objective, at: &ParameterVector) -> Result<Vec<f64>> {
    let p = at.len();
    let tape = Tape::new();
    let params = at.to_tape(&tape);
    let y = f.eval(&tape, &params)?;
    let grads = tape.backward(y, &params)?;
    let mut out = vec![0.0; p * p];
    let mut offset = 0;
    for g in &grads {
        let width = g.value().numel();
        if g.needs_grad() {
            for k in 0..width {
                let mut unit = vec![0.0; width];
                unit[k] = 1.0;
                let row = tape.backward(g.dot_const(&unit), &params)?;
                out[(offset + k) * p..(offset + k + 1) * p].copy_from_slice(&flatten_vars(&row));
            }
        }
        offset += width;
    }
    Ok(out)
}
