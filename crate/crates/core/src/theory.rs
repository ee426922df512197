//! Approximation-theory checks: optimal uniform piecewise-linear
//! approximation of convex functions and exact linear-region counting for
//! scalar ReLU networks.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum FnKind {
    Square,
    Exp,
    Softplus,
    /// Affine; not strictly convex, kept as a sanity path.
    Linear { slope: f64, intercept: f64 },
}

/// A named univariate convex function restricted to `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexFn1D {
    pub kind: FnKind,
    pub a: f64,
    pub b: f64,
}

impl ConvexFn1D {
    pub fn new(kind: FnKind, a: f64, b: f64) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::invalid(format!("domain [{a}, {b}] is empty or unbounded")));
        }
        Ok(Self { kind, a, b })
    }

    pub fn square(a: f64, b: f64) -> Result<Self> {
        Self::new(FnKind::Square, a, b)
    }

    pub fn exp(a: f64, b: f64) -> Result<Self> {
        Self::new(FnKind::Exp, a, b)
    }

    pub fn softplus(a: f64, b: f64) -> Result<Self> {
        Self::new(FnKind::Softplus, a, b)
    }

    /// Name and default domain: `square` on `[0,1]`, `exp` on `[0,2]`,
    /// `softplus` on `[−2,2]`.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "square" => Self::square(0.0, 1.0).ok(),
            "exp" => Self::exp(0.0, 2.0).ok(),
            "softplus" => Self::softplus(-2.0, 2.0).ok(),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            FnKind::Square => "square",
            FnKind::Exp => "exp",
            FnKind::Softplus => "softplus",
            FnKind::Linear { .. } => "linear",
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self.kind {
            FnKind::Square => x * x,
            FnKind::Exp => x.exp(),
            FnKind::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            FnKind::Linear { slope, intercept } => slope * x + intercept,
        }
    }

    /// The point in `[u, v]` where `f'` equals `slope`.
    fn tangent_point(&self, slope: f64, u: f64, v: f64) -> f64 {
        let x = match self.kind {
            FnKind::Square => 0.5 * slope,
            FnKind::Exp => slope.ln(),
            FnKind::Softplus => (slope / (1.0 - slope)).ln(),
            FnKind::Linear { .. } => u,
        };
        if x.is_finite() {
            x.clamp(u, v)
        } else {
            0.5 * (u + v)
        }
    }

    /// Largest gap between the chord over `[u, v]` and `f`.
    pub fn chord_gap(&self, u: f64, v: f64) -> f64 {
        if v <= u {
            return 0.0;
        }
        let (fu, fv) = (self.eval(u), self.eval(v));
        let s = (fv - fu) / (v - u);
        let xi = self.tangent_point(s, u, v);
        (fu + s * (xi - u) - self.eval(xi)).max(0.0)
    }

    /// Second differences on a 1000-step sample are all positive.
    pub fn is_strictly_convex(&self) -> bool {
        const STEPS: usize = 1000;
        let h = (self.b - self.a) / STEPS as f64;
        (1..STEPS).all(|i| {
            let x = self.a + i as f64 * h;
            self.eval(x - h) - 2.0 * self.eval(x) + self.eval(x + h) > 0.0
        })
    }
}

/// Continuous piecewise-linear function given by its breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 || breakpoints.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} breakpoints with {} values; need at least two of each, equally many",
                breakpoints.len(),
                values.len()
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
        Ok(Self { breakpoints, values })
    }

    /// Interpolates `f` at `n + 1` equally spaced points of its domain.
    pub fn interpolate(f: &ConvexFn1D, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("need at least one segment"));
        }
        let xs: Vec<f64> = (0..=n).map(|i| f.a + (f.b - f.a) * i as f64 / n as f64).collect();
        let ys = xs.iter().map(|&x| f.eval(x)).collect();
        Self::new(xs, ys)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn segments(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.breakpoints[0], self.breakpoints[self.breakpoints.len() - 1])
    }

    /// Value at `x`; outside the domain the end segments are extended.
    pub fn eval(&self, x: f64) -> f64 {
        let bp = &self.breakpoints;
        let i = bp.partition_point(|&b| b <= x).clamp(1, bp.len() - 1);
        let (x0, x1) = (bp[i - 1], bp[i]);
        let (y0, y1) = (self.values[i - 1], self.values[i]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

/// Sup-norm distance between `pwl` and `f` on `grid + 1` equally spaced
/// points of `f`'s domain.
pub fn pwl_residual(pwl: &PiecewiseLinear, f: &ConvexFn1D, grid: usize) -> Result<f64> {
    let (lo, hi) = pwl.domain();
    if lo > f.a || hi < f.b {
        return Err(Error::invalid(format!(
            "approximant covers [{lo}, {hi}], function domain is [{}, {}]",
            f.a, f.b
        )));
    }
    if grid == 0 {
        return Err(Error::invalid("grid must have at least one step"));
    }
    Ok((0..=grid)
        .map(|i| {
            let x = f.a + (f.b - f.a) * i as f64 / grid as f64;
            (pwl.eval(x) - f.eval(x)).abs()
        })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlFit {
    pub error: f64,
    /// Change in error from moving any chosen breakpoint by one grid step.
    pub uncertainty: f64,
    pub breakpoints: Vec<f64>,
    pub approximant: PiecewiseLinear,
}

/// Minimal uniform error of an `n`-segment continuous piecewise-linear
/// approximant whose breakpoints lie on `grid + 1` equally spaced points.
/// No resolution requirement is imposed.
pub fn best_pwl_on_grid(f: &ConvexFn1D, n: usize, grid: usize) -> Result<PwlFit> {
    if n == 0 {
        return Err(Error::invalid("need at least one segment"));
    }
    if grid < n {
        return Err(Error::invalid(format!("{grid} grid steps cannot hold {n} segments")));
    }
    let xs: Vec<f64> = (0..=grid).map(|i| f.a + (f.b - f.a) * i as f64 / grid as f64).collect();
    let half_gap = |i: usize, j: usize| 0.5 * f.chord_gap(xs[i], xs[j]);

    // best[j]: optimal error with the current number of segments on [x_0, x_j]
    let mut best: Vec<f64> = (0..=grid).map(|j| half_gap(0, j)).collect();
    let mut choices: Vec<Vec<usize>> = Vec::with_capacity(n);
    choices.push(vec![0; grid + 1]);
    for k in 2..=n {
        let mut next = vec![f64::INFINITY; grid + 1];
        let mut arg = vec![0; grid + 1];
        for j in k..=grid {
            // best[i] is non-decreasing in i, half_gap(i, j) non-increasing:
            // find the first i where best[i] ≥ half_gap(i, j)
            let (mut lo, mut hi) = (k - 1, j - 1);
            while lo < hi {
                let mid = (lo + hi) / 2;
                if best[mid] >= half_gap(mid, j) {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            for i in [lo.saturating_sub(1).max(k - 1), lo] {
                let e = best[i].max(half_gap(i, j));
                if e < next[j] {
                    next[j] = e;
                    arg[j] = i;
                }
            }
        }
        best = next;
        choices.push(arg);
    }
    let error = best[grid];

    let mut idx = vec![grid];
    for k in (1..n).rev() {
        let j = *idx.last().unwrap();
        idx.push(choices[k][j]);
    }
    idx.push(0);
    idx.reverse();
    idx.dedup();

    let mut uncertainty: f64 = 0.0;
    for w in idx.windows(2) {
        let (i, j) = (w[0], w[1]);
        let here = half_gap(i, j);
        if i > 0 {
            uncertainty = uncertainty.max((half_gap(i - 1, j) - here).abs());
        }
        if j < grid {
            uncertainty = uncertainty.max((half_gap(i, j + 1) - here).abs());
        }
    }
    let breakpoints: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
    let values = breakpoints.iter().map(|&x| f.eval(x) - error).collect();
    let approximant = PiecewiseLinear::new(breakpoints.clone(), values)?;
    Ok(PwlFit {
        error,
        uncertainty,
        breakpoints,
        approximant,
    })
}

/// Minimal uniform error of an `n`-segment continuous piecewise-linear
/// approximant of `f`, with breakpoints searched on a grid of at least
/// `1000·n` steps.
pub fn best_pwl_error(f: &ConvexFn1D, n: usize, grid: usize) -> Result<PwlFit> {
    if n == 0 {
        return Err(Error::invalid("need at least one segment"));
    }
    if grid < 1000 * n {
        return Err(Error::invalid(format!("grid of {grid} steps is too coarse for {n} segments (need ≥ {})", 1000 * n)));
    }
    best_pwl_on_grid(f, n, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub slope: f64,
    pub ns: Vec<usize>,
    pub errors: Vec<f64>,
}

/// Least-squares slope of `ln error` against `ln n`, each error from
/// [`best_pwl_error`] on a `1000·n` grid.
pub fn rate_check(f: &ConvexFn1D, ns: &[usize]) -> Result<RateCheck> {
    if ns.len() < 4 {
        return Err(Error::invalid(format!("rate check needs at least 4 segment counts, got {}", ns.len())));
    }
    if ns[0] == 0 {
        return Err(Error::invalid("segment counts must be ≥ 1"));
    }
    let ratio = ns[1] as f64 / ns[0] as f64;
    if !(ratio > 1.0) || ns.windows(2).any(|w| (w[1] as f64 / w[0] as f64 - ratio).abs() > 1e-12) {
        return Err(Error::invalid("segment counts must form an increasing geometric sequence"));
    }
    let errors = ns
        .iter()
        .map(|&n| best_pwl_error(f, n, 1000 * n).map(|fit| fit.error))
        .collect::<Result<Vec<_>>>()?;
    if errors.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::invalid("a zero error has no logarithm; is the function affine?"));
    }
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(RateCheck {
        slope: sxy / sxx,
        ns: ns.to_vec(),
        errors,
    })
}

/// One hidden layer of a scalar network: `weights[u][j]` feeds unit `u`
/// from input `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarLayer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// `true` for a rectified unit, `false` for a linear one.
    pub rectified: Vec<bool>,
}

/// A network `ℝ → ℝ` with `k` hidden layers and a linear read-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarReluNet {
    layers: Vec<ScalarLayer>,
    out_weights: Vec<f64>,
    out_bias: f64,
}

/// Exact region counting handles at most this many hidden units.
pub const REGION_UNIT_BUDGET: usize = 64;

impl ScalarReluNet {
    pub fn new(layers: Vec<ScalarLayer>, out_weights: Vec<f64>, out_bias: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a scalar network needs at least one hidden layer"));
        }
        let mut fan_in = 1;
        for (l, layer) in layers.iter().enumerate() {
            let w = layer.bias.len();
            if w == 0 {
                return Err(Error::invalid(format!("hidden layer {l} has no units")));
            }
            if layer.weights.len() != w || layer.rectified.len() != w || layer.weights.iter().any(|r| r.len() != fan_in) {
                return Err(Error::shape(format!("hidden layer {l} is not {w} units × {fan_in} inputs")));
            }
            fan_in = w;
        }
        if out_weights.len() != fan_in {
            return Err(Error::shape(format!("read-out has {} weights, last layer has {fan_in} units", out_weights.len())));
        }
        Ok(Self {
            layers,
            out_weights,
            out_bias,
        })
    }

    /// Gaussian weights and biases, all units rectified, read-out weights 1.
    pub fn random(widths: &[usize], seed: u64) -> Result<Self> {
        let mut rng = seeded(seed, streams::INIT);
        let mut fan_in = 1;
        let mut layers = Vec::with_capacity(widths.len());
        for &w in widths {
            let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
            let weights = (0..w).map(|_| (0..fan_in).map(|_| g()).collect()).collect();
            let bias = (0..w).map(|_| g()).collect();
            layers.push(ScalarLayer {
                weights,
                bias,
                rectified: vec![true; w],
            });
            fan_in = w;
        }
        let out: Vec<f64> = (0..fan_in).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self::new(layers, out, 0.0)
    }

    /// `relu(x + 1) + relu(x − 1)`: one hidden layer of two units whose
    /// kinks sit at `±1`, giving three pieces on `[−2, 2]`.
    pub fn two_unit_hinge() -> Self {
        Self::new(
            vec![ScalarLayer {
                weights: vec![vec![1.0], vec![1.0]],
                bias: vec![1.0, -1.0],
                rectified: vec![true, true],
            }],
            vec![1.0, 1.0],
            0.0,
        )
        .expect("valid example network")
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.bias.len()).collect()
    }

    pub fn total_units(&self) -> usize {
        self.widths().iter().sum()
    }

    pub fn layers(&self) -> &[ScalarLayer] {
        &self.layers
    }

    pub fn set_rectified(&mut self, layer: usize, unit: usize, rectified: bool) -> Result<()> {
        let l = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::invalid(format!("no hidden layer {layer}")))?;
        let g = l
            .rectified
            .get_mut(unit)
            .ok_or_else(|| Error::invalid(format!("layer {layer} has no unit {unit}")))?;
        *g = rectified;
        Ok(())
    }

    pub fn linearize_all(&mut self) {
        for l in &mut self.layers {
            l.rectified.iter_mut().for_each(|r| *r = false);
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut h = vec![x];
        for l in &self.layers {
            h = l
                .weights
                .iter()
                .zip(&l.bias)
                .zip(&l.rectified)
                .map(|((w, b), &r)| {
                    let z = w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + b;
                    if r {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
        }
        self.out_weights.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + self.out_bias
    }
}

/// Affine function `s·x + t`.
type Affine = (f64, f64);

const MERGE_TOL: f64 = 1e-10;

/// Exact number of maximal intervals of `[a, b]` on which `net` is affine.
pub fn count_linear_regions(net: &ScalarReluNet, a: f64, b: f64) -> Result<usize> {
    if !(a < b) {
        return Err(Error::invalid(format!("domain [{a}, {b}] is empty")));
    }
    if net.total_units() > REGION_UNIT_BUDGET {
        return Err(Error::invalid(format!(
            "{} hidden units exceed the exact-enumeration budget of {REGION_UNIT_BUDGET}",
            net.total_units()
        )));
    }
    // intervals with the affine form of every current hidden value
    let mut cuts = vec![a, b];
    let mut states: Vec<Vec<Affine>> = vec![vec![(1.0, 0.0)]];
    for layer in net.layers() {
        let pre: Vec<Vec<Affine>> = states
            .iter()
            .map(|h| {
                layer
                    .weights
                    .iter()
                    .zip(&layer.bias)
                    .map(|(w, &bias)| {
                        w.iter()
                            .zip(h)
                            .fold((0.0, bias), |(s, t), (wj, (sj, tj))| (s + wj * sj, t + wj * tj))
                    })
                    .collect()
            })
            .collect();
        let mut new_cuts = vec![a];
        let mut new_pre = Vec::new();
        for (k, p) in pre.iter().enumerate() {
            let (lo, hi) = (cuts[k], cuts[k + 1]);
            let mut roots: Vec<f64> = p
                .iter()
                .zip(&layer.rectified)
                .filter(|(_, &r)| r)
                .filter_map(|(&(s, t), _)| (s != 0.0).then(|| -t / s))
                .filter(|&r| r > lo && r < hi)
                .collect();
            roots.sort_by(f64::total_cmp);
            roots.dedup();
            for r in roots {
                new_cuts.push(r);
                new_pre.push(p.clone());
            }
            new_cuts.push(hi);
            new_pre.push(p.clone());
        }
        states = new_pre
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mid = 0.5 * (new_cuts[k] + new_cuts[k + 1]);
                p.iter()
                    .zip(&layer.rectified)
                    .map(|(&(s, t), &r)| if r && s * mid + t <= 0.0 { (0.0, 0.0) } else { (s, t) })
                    .collect()
            })
            .collect();
        cuts = new_cuts;
    }
    let outputs: Vec<Affine> = states
        .iter()
        .map(|h| {
            net.out_weights
                .iter()
                .zip(h)
                .fold((0.0, net.out_bias), |(s, t), (w, (sj, tj))| (s + w * sj, t + w * tj))
        })
        .collect();
    let mut count = 1;
    for w in outputs.windows(2) {
        if (w[0].0 - w[1].0).abs() > MERGE_TOL || (w[0].1 - w[1].1).abs() > MERGE_TOL {
            count += 1;
        }
    }
    Ok(count)
}

/// `2^{k−1}·(ω_1 + 1)·ω_2·…·ω_k`.
pub fn region_upper_bound(widths: &[usize]) -> Result<u128> {
    let (&first, rest) = widths
        .split_first()
        .ok_or_else(|| Error::invalid("the bound needs at least one hidden layer"))?;
    if widths.contains(&0) {
        return Err(Error::invalid("hidden widths must be ≥ 1"));
    }
    let overflow = || Error::invalid("region bound overflows 128 bits");
    let mut bound = 1u128.checked_shl(rest.len() as u32).ok_or_else(overflow)?;
    bound = bound.checked_mul(first as u128 + 1).ok_or_else(overflow)?;
    for &w in rest {
        bound = bound.checked_mul(w as u128).ok_or_else(overflow)?;
    }
    Ok(bound)
}
