use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::{dot, norm};
use crate::error::{Error, Result};

/// Result of a power iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimate {
    /// Dominant eigenvalue (largest in magnitude). When both `+ρ` and `−ρ`
    /// are eigenvalues the positive one is reported.
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The dominant eigenvalue is negative.
    pub negative_dominant: bool,
}

/// Power iteration for the dominant eigenvalue of a symmetric operator.
///
/// Two successive products give `H²v` for the previous iterate `v`; the
/// iteration stops once `v` is an eigenvector of `H²` up to a relative
/// residual `tol`, i.e. `‖H²v − σv‖ ≤ tol·σ` with `σ = vᵀH²v`. This test
/// also terminates when `+ρ` and `−ρ` tie. The magnitude is `√σ` and the
/// sign is read off the final iterate: `v + Hv/ρ` vanishes only when `+ρ`
/// is absent.
pub fn max_eigenvalue<F>(mut op: F, dim: usize, tol: f64, max_iters: usize, seed: u64) -> Result<EigenEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 {
        return Err(Error::invalid("power iteration on an empty operator"));
    }
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::invalid("power iteration needs tol > 0 and max_iters ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut prev: Option<(Vec<f64>, f64)> = None;
    let mut magnitude = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut w = Vec::new();
    for k in 0..max_iters {
        w = op(&v)?;
        if w.len() != dim {
            return Err(Error::shape(format!("operator returned {} entries, expected {dim}", w.len())));
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "power_iteration" });
        }
        iterations = k + 1;
        let mag = norm(&w);
        magnitude = mag;
        if mag == 0.0 {
            converged = true;
            break;
        }
        if let Some((pv, pmag)) = &prev {
            // H²·pv = pmag·w
            let sigma = pmag * dot(pv, &w);
            if sigma > 0.0 {
                let res = pv
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| (pmag * b - sigma * a).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if res <= tol * sigma {
                    magnitude = sigma.sqrt();
                    converged = true;
                    break;
                }
            }
        }
        let next: Vec<f64> = w.iter().map(|x| x / mag).collect();
        prev = Some((std::mem::replace(&mut v, next), mag));
    }

    let lambda = if magnitude == 0.0 {
        0.0
    } else {
        let mag = norm(&w);
        let plus: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a + b / mag).collect();
        if norm(&plus) > 1e-3 || dot(&v, &w) >= 0.0 {
            magnitude
        } else {
            -magnitude
        }
    };
    Ok(EigenEstimate {
        lambda,
        iterations,
        converged,
        negative_dominant: lambda < 0.0,
    })
}
