//! Reverse-mode automatic differentiation with second-order support.
//!
//! [`Tape`] records primitive tensor operations; [`grad`] and [`hvp`] wrap
//! it for scalar objectives over a [`ParameterVector`], and
//! [`max_eigenvalue`] runs matrix-free power iteration on top of `hvp`.

mod eigen;
mod params;
mod tape;
mod tensor;

pub use eigen::{max_eigenvalue, EigenEstimate};
pub use params::{grad, hessian, hvp, value_and_grad, Objective, ParameterVector};
pub use tape::{Tape, Var};
pub use tensor::{gated_activation, Tensor};

pub(crate) use tape::logsumexp;
pub(crate) use tensor::{dot, matmul_into};
