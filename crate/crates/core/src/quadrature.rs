//! Gauss–Legendre rules, composite rules, and the tensorised quadrature
//! estimate of the diffused density
//! `p_{μ,σ}(x) = ∫_{[-1,1]^D} p_0(y) φ_σ(x - μ y) dy` and its gradient for
//! compactly supported factorizable `p_0`.

use std::f64::consts::PI;
use std::io::Write;

use crate::densities::FactorDensity;
use crate::error::{check_dim, Error, Result};

/// Nodes (ascending, in `(-1, 1)`) and positive weights of the `n`-point
/// Gauss–Legendre rule.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussLegendreRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
pub fn legendre_eval(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p_prev, mut p) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = next;
    }
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

/// Roots of `P_n` by Newton iteration from Chebyshev-type initial guesses;
/// weights `2 / ((1 - x²) P_n'(x)²)`, which equal the integrals of the
/// Lagrange basis polynomials.
pub fn legendre_rule(n: usize) -> Result<GaussLegendreRule> {
    if n == 0 {
        return Err(Error::InvalidSize("Gauss–Legendre order must be at least 1".into()));
    }
    if n == 1 {
        return Ok(GaussLegendreRule {
            nodes: vec![0.0],
            weights: vec![2.0],
        });
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut converged = false;
        for _ in 0..100 {
            let (p, dp) = legendre_eval(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        let (p, dp) = legendre_eval(n, x);
        if !converged && p.abs() > 1e-14 * dp.abs().max(1.0) {
            return Err(Error::ConvergenceFailure(n));
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // symmetric pair; the middle node of odd orders is exactly zero
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
        if 2 * i + 1 == n {
            nodes[i] = 0.0;
        }
    }
    Ok(GaussLegendreRule { nodes, weights })
}

impl GaussLegendreRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `∫_{-1}^{1} f`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Largest integer strictly smaller than `max(β, 2)`.
pub fn block_order_for_smoothness(beta: f64) -> usize {
    (beta.max(2.0).ceil() as usize) - 1
}

/// `m`-point composite rule on `[a, b]`: `m / block` equal blocks, each
/// carrying a `block`-point Gauss–Legendre rule.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeRule {
    pub a: f64,
    pub b: f64,
    pub block_order: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl CompositeRule {
    pub fn new(a: f64, b: f64, m: usize, block_order: usize) -> Result<Self> {
        if block_order == 0 || m == 0 || !m.is_multiple_of(block_order) {
            return Err(Error::BadPointCount { m, block: block_order });
        }
        if !(a < b) {
            return Err(Error::InvalidSize(format!("empty interval [{a}, {b}]")));
        }
        let base = legendre_rule(block_order)?;
        let (nodes, weights) = scaled_composite(&base, a, b - a, m);
        Ok(Self {
            a,
            b,
            block_order,
            nodes,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Node `r` of block `k` sits at `a + h (x̃_r + 2k + 1)` with weight `h w̃_r`,
/// `h = len · n / (2m)`.
fn scaled_composite(base: &GaussLegendreRule, a: f64, len: f64, m: usize) -> (Vec<f64>, Vec<f64>) {
    let n = base.order();
    let h = len * n as f64 / (2.0 * m as f64);
    let mut nodes = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for k in 0..m / n {
        for (x, w) in base.nodes.iter().zip(&base.weights) {
            nodes.push(a + h * (x + 2.0 * k as f64 + 1.0));
            weights.push(h * w);
        }
    }
    (nodes, weights)
}

/// `∫_a^b g` by the `m`-point composite rule with block order `block_order`.
pub fn composite_quadrature(g: impl Fn(f64) -> f64, a: f64, b: f64, m: usize, block_order: usize) -> Result<f64> {
    Ok(CompositeRule::new(a, b, m, block_order)?.integrate(g))
}

/// Parameters of the tensor rule for `p_{μ,σ}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TensorQuadratureConfig {
    /// Points per axis; a multiple of `block_order`.
    pub m: usize,
    pub block_order: usize,
    pub tau_tail: f64,
    pub tau_bd: f64,
}

impl Default for TensorQuadratureConfig {
    fn default() -> Self {
        Self {
            m: 32,
            block_order: 2,
            tau_tail: 1.0,
            tau_bd: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PtEstimate {
    pub p_hat: f64,
    pub grad_hat: Vec<f64>,
}

fn std_normal_pdf(y: f64) -> f64 {
    (-0.5 * y * y).exp() / (2.0 * PI).sqrt()
}

/// Quadrature estimate of `p_{μ,σ}(x)` and `∇p_{μ,σ}(x)`.
///
/// After the substitution `x + σ y = μ u` the integral becomes
/// `μ^{-D} ∫ p_0((x + σ y)/μ) Π φ(y_i) dy`. Along axis `i` the rule places
/// `m` composite nodes on the window `c·(-x_i - μ, -x_i + μ)` with
/// `c = 2√(2τ_tail) (log 1/σ)^{τ_bd + 1/2}`:
///
/// ```text
/// y_j = c (-x_i - μ + (n μ / m)(x̃_r + 2k + 1)),   w_j = c n w̃_r,   j = k n + r
/// p̂   = m^{-D} Σ_j Π_i w_{j_i} φ(y_{j_i}) p_0((x + σ ỹ_j)/μ)
/// ∇̂   = σ^{-1} m^{-D} Σ_j ỹ_j Π_i w_{j_i} φ(y_{j_i}) p_0((x + σ ỹ_j)/μ)
/// ```
///
/// Every argument `(x + σ ỹ_j)/μ` is checked to lie within
/// `1 - (log 1/σ)^{-τ_bd} / 2` in sup-norm.
pub fn pt_quadrature(
    p0: &FactorDensity,
    x: &[f64],
    mu: f64,
    sigma: f64,
    config: &TensorQuadratureConfig,
) -> Result<PtEstimate> {
    let dim = p0.dim();
    check_dim(dim, x.len())?;
    if dim > 3 {
        return Err(Error::DimensionTooLarge(dim));
    }
    let TensorQuadratureConfig {
        m,
        block_order,
        tau_tail,
        tau_bd,
    } = *config;
    if block_order == 0 || m == 0 || !m.is_multiple_of(block_order) {
        return Err(Error::BadPointCount { m, block: block_order });
    }
    if !(0.0 < sigma && sigma < 1.0) {
        return Err(Error::PreconditionViolated(format!(
            "sigma must lie in (0, 1), got {sigma}"
        )));
    }
    if !(0.5..=1.0).contains(&mu) {
        return Err(Error::PreconditionViolated(format!(
            "mu must lie in [1/2, 1], got {mu}"
        )));
    }
    if !(tau_tail > 0.0 && tau_bd > 0.0) {
        return Err(Error::PreconditionViolated(
            "tail and boundary parameters must be positive".into(),
        ));
    }
    let log_inv = (1.0 / sigma).ln();
    let margin = log_inv.powf(-tau_bd);
    let x_max = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if x_max > mu - mu * margin {
        return Err(Error::PreconditionViolated(format!(
            "|x|_inf = {x_max} exceeds mu (1 - (log 1/sigma)^-tau_bd) = {}",
            mu - mu * margin
        )));
    }
    let scale = 2.0 * (2.0 * tau_tail).sqrt() * log_inv.powf(tau_bd + 0.5);
    let base = legendre_rule(block_order)?;
    let limit = 1.0 - margin / 2.0;

    // per-axis nodes, memoised w_j φ(y_j), and the p_0 argument
    let mut ys = Vec::with_capacity(dim);
    let mut factors = Vec::with_capacity(dim);
    let mut args = Vec::with_capacity(dim);
    for &xi in x {
        let (unit, unit_w) = scaled_composite(&base, -xi - mu, 2.0 * mu, m);
        let y: Vec<f64> = unit.iter().map(|u| scale * u).collect();
        // composite weight on the scaled window is μ·c·n·w̃/m; the μ cancels
        // against the μ^{-D} prefactor and 1/m is applied once at the end
        let f: Vec<f64> = y
            .iter()
            .zip(&unit_w)
            .map(|(y, uw)| scale * uw * m as f64 / mu * std_normal_pdf(*y))
            .collect();
        let a: Vec<f64> = y.iter().map(|y| (xi + sigma * y) / mu).collect();
        if let Some(bad) = a.iter().find(|v| v.abs() > limit + 1e-12) {
            return Err(Error::ContainmentViolated(format!("argument {bad} exceeds {limit}")));
        }
        ys.push(y);
        factors.push(f);
        args.push(a);
    }

    let mut p_sum = 0.0;
    let mut g_sum = vec![0.0; dim];
    let mut idx = vec![0usize; dim];
    let mut point = vec![0.0; dim];
    loop {
        let mut w = 1.0;
        for i in 0..dim {
            w *= factors[i][idx[i]];
            point[i] = args[i][idx[i]];
        }
        let term = w * p0.density(&point)?;
        p_sum += term;
        for i in 0..dim {
            g_sum[i] += ys[i][idx[i]] * term;
        }
        // odometer over [m]^D
        let mut axis = 0;
        loop {
            if axis == dim {
                let norm = (m as f64).powi(dim as i32);
                return Ok(PtEstimate {
                    p_hat: p_sum / norm,
                    grad_hat: g_sum.iter().map(|g| g / (sigma * norm)).collect(),
                });
            }
            idx[axis] += 1;
            if idx[axis] < m {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
    }
}

/// Midpoint-rule value of `∫_{[-1,1]^D} p_0(y) φ_σ(x - μ y) dy` on a grid of
/// `points` cells per axis (reference route for convergence studies).
pub fn riemann_reference(p0: &FactorDensity, x: &[f64], mu: f64, sigma: f64, points: usize) -> Result<f64> {
    let dim = p0.dim();
    check_dim(dim, x.len())?;
    if dim > 3 {
        return Err(Error::DimensionTooLarge(dim));
    }
    let h = 2.0 / points as f64;
    let centers: Vec<f64> = (0..points).map(|k| -1.0 + h * (k as f64 + 0.5)).collect();
    let kernel: Vec<Vec<f64>> = x
        .iter()
        .map(|&xi| {
            centers
                .iter()
                .map(|c| std_normal_pdf((xi - mu * c) / sigma) / sigma)
                .collect()
        })
        .collect();
    let mut idx = vec![0usize; dim];
    let mut y = vec![0.0; dim];
    let mut total = 0.0;
    loop {
        let mut k = 1.0;
        for i in 0..dim {
            y[i] = centers[idx[i]];
            k *= kernel[i][idx[i]];
        }
        if k > 0.0 {
            total += k * p0.density(&y)?;
        }
        let mut axis = 0;
        loop {
            if axis == dim {
                return Ok(total * h.powi(dim as i32));
            }
            idx[axis] += 1;
            if idx[axis] < points {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
    }
}

/// One row of a convergence study.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub m: usize,
    pub p_hat: f64,
    pub oracle: f64,
}

impl ConvergenceRow {
    pub fn abs_err(&self) -> f64 {
        (self.p_hat - self.oracle).abs()
    }

    pub fn rel_err(&self) -> f64 {
        self.abs_err() / self.oracle.abs()
    }
}

/// Runs [`pt_quadrature`] for each point count in `ms` against a Riemann
/// reference with `oracle_points` cells per axis.
pub fn pt_convergence_study(
    p0: &FactorDensity,
    x: &[f64],
    mu: f64,
    sigma: f64,
    ms: &[usize],
    config: &TensorQuadratureConfig,
    oracle_points: usize,
) -> Result<Vec<ConvergenceRow>> {
    let oracle = riemann_reference(p0, x, mu, sigma, oracle_points)?;
    ms.iter()
        .map(|&m| {
            let est = pt_quadrature(p0, x, mu, sigma, &TensorQuadratureConfig { m, ..*config })?;
            Ok(ConvergenceRow {
                m,
                p_hat: est.p_hat,
                oracle,
            })
        })
        .collect()
}

/// CSV with columns `m,p_hat,oracle,abs_err,rel_err`.
pub fn write_convergence_csv<W: Write>(out: W, rows: &[ConvergenceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["m", "p_hat", "oracle", "abs_err", "rel_err"])?;
    for r in rows {
        w.write_record([
            r.m.to_string(),
            format!("{:?}", r.p_hat),
            format!("{:?}", r.oracle),
            format!("{:?}", r.abs_err()),
            format!("{:?}", r.rel_err()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
