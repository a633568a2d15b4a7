//! Reverse-time SDE sampling from a score model, vanilla (time-free) score
//! matching, and unadjusted Langevin sampling.

use std::fmt;

use crate::densities::{Density, FactorDensity, ScoreOperator};
use crate::diffusion::{minibatch_loop, mu_sigma, DiffusionSchedule, EpochRecord, ScoreNetwork, TrainConfig};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{norm_sq, Matrix, Rng};
use crate::quadrature::{pt_quadrature, TensorQuadratureConfig};
use crate::wsnn::{
    backward_trace, forward, forward_trace, jacobian_trace, jacobian_trace_param_grad, WsnnArchitecture, WsnnParams,
};

/// Where a score field came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreProvenance {
    Learned,
    Analytic,
    Zero,
}

impl fmt::Display for ScoreProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreProvenance::Learned => "learned",
            ScoreProvenance::Analytic => "analytic",
            ScoreProvenance::Zero => "zero",
        })
    }
}

/// A vector field `(x, t) ↦ f(x, t)` with `f(x, t) ∈ R^D`.
pub trait ScoreFunction {
    fn dim(&self) -> usize;

    fn provenance(&self) -> ScoreProvenance;

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// Row-wise `score` of `xs` at a common time.
    fn score_batch(&self, xs: &Matrix, t: f64) -> Result<Matrix> {
        check_dim(self.dim(), xs.cols())?;
        let mut out = Matrix::zeros(xs.rows(), xs.cols());
        for (r, x) in xs.row_iter().enumerate() {
            let s = self.score(x, t)?;
            check_dim(xs.cols(), s.len())?;
            out.row_mut(r).copy_from_slice(&s);
        }
        Ok(out)
    }
}

/// Score given by a closure.
pub struct FnScore<F> {
    dim: usize,
    provenance: ScoreProvenance,
    f: F,
}

impl<F: Fn(&[f64], f64) -> Result<Vec<f64>>> FnScore<F> {
    pub fn new(dim: usize, provenance: ScoreProvenance, f: F) -> Self {
        Self { dim, provenance, f }
    }
}

impl<F: Fn(&[f64], f64) -> Result<Vec<f64>>> ScoreFunction for FnScore<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn provenance(&self) -> ScoreProvenance {
        self.provenance
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let s = (self.f)(x, t)?;
        check_dim(self.dim, s.len())?;
        Ok(s)
    }
}

/// `f ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroScore(pub usize);

impl ScoreFunction for ZeroScore {
    fn dim(&self) -> usize {
        self.0
    }

    fn provenance(&self) -> ScoreProvenance {
        ScoreProvenance::Zero
    }

    fn score(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
        check_dim(self.0, x.len())?;
        Ok(vec![0.0; x.len()])
    }
}

/// Closed-form `∇log p_t` of a Gaussian-family density.
#[derive(Clone, Debug)]
pub struct AnalyticScore {
    density: Density,
    schedule: DiffusionSchedule,
}

impl AnalyticScore {
    pub fn new(density: &Density, schedule: &DiffusionSchedule) -> Result<Self> {
        if !density.has_analytic_score() {
            return Err(Error::NoAnalyticScore);
        }
        Ok(Self {
            density: density.clone(),
            schedule: schedule.clone(),
        })
    }
}

impl ScoreFunction for AnalyticScore {
    fn dim(&self) -> usize {
        self.density.dim()
    }

    fn provenance(&self) -> ScoreProvenance {
        ScoreProvenance::Analytic
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.density.analytic_score_t(x, t, &self.schedule)
    }

    fn score_batch(&self, xs: &Matrix, t: f64) -> Result<Matrix> {
        check_dim(self.dim(), xs.cols())?;
        let op = self.density.score_operator(t, &self.schedule)?;
        let mut out = Matrix::zeros(xs.rows(), xs.cols());
        if let ScoreOperator::Identity = op {
            for (o, x) in out.as_mut_slice().iter_mut().zip(xs.as_slice()) {
                *o = -x;
            }
            return Ok(out);
        }
        for (r, x) in xs.row_iter().enumerate() {
            out.row_mut(r).copy_from_slice(&op.apply(x)?);
        }
        Ok(out)
    }
}

/// `∇log p_t = ∇p̂_t / p̂_t` for a factor density, with both terms from the
/// tensor quadrature rule.
#[derive(Clone, Debug)]
pub struct QuadratureScore {
    density: FactorDensity,
    schedule: DiffusionSchedule,
    config: TensorQuadratureConfig,
}

impl QuadratureScore {
    pub fn new(density: &FactorDensity, schedule: &DiffusionSchedule, config: TensorQuadratureConfig) -> Self {
        Self {
            density: density.clone(),
            schedule: schedule.clone(),
            config,
        }
    }
}

impl ScoreFunction for QuadratureScore {
    fn dim(&self) -> usize {
        self.density.dim()
    }

    fn provenance(&self) -> ScoreProvenance {
        ScoreProvenance::Analytic
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let (mu, sigma) = mu_sigma(&self.schedule, t)?;
        let est = pt_quadrature(&self.density, x, mu, sigma, &self.config)?;
        if est.p_hat <= 0.0 {
            return Err(Error::NonFiniteState { step: 0 });
        }
        Ok(est.grad_hat.iter().map(|g| g / est.p_hat).collect())
    }
}

/// A trained score network.
#[derive(Clone, Debug)]
pub struct LearnedScore {
    net: ScoreNetwork,
    schedule: DiffusionSchedule,
}

impl LearnedScore {
    pub fn new(net: &ScoreNetwork, schedule: &DiffusionSchedule) -> Self {
        Self {
            net: net.clone(),
            schedule: schedule.clone(),
        }
    }

    pub fn network(&self) -> &ScoreNetwork {
        &self.net
    }
}

impl ScoreFunction for LearnedScore {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn provenance(&self) -> ScoreProvenance {
        ScoreProvenance::Learned
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.net.eval(&self.schedule, x, t)
    }
}

/// Spacing of the Euler–Maruyama grid in forward time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TimeGrid {
    #[default]
    Uniform,
    /// Forward times `T̄ (T̲/T̄)^{k/n}`: finer steps near `T̲`.
    Geometric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub grid: TimeGrid,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 500,
            n_samples: 1000,
            seed: 0,
            grid: TimeGrid::Uniform,
        }
    }
}

/// Coordinates beyond this magnitude abort sampling.
pub const BLOW_UP: f64 = 1e6;

fn guard(y: &Matrix, step: usize) -> Result<()> {
    if y.as_slice().iter().all(|v| v.abs() <= BLOW_UP) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { step })
    }
}

/// Forward times visited by the reverse chain, from `T̄` down to `T̲`.
pub fn time_grid(schedule: &DiffusionSchedule, n_steps: usize, grid: TimeGrid) -> Vec<f64> {
    let (lo, hi) = (schedule.t_min(), schedule.t_max());
    (0..=n_steps)
        .map(|k| {
            if k == n_steps {
                return lo;
            }
            let frac = k as f64 / n_steps as f64;
            match grid {
                TimeGrid::Uniform => hi - frac * (hi - lo),
                TimeGrid::Geometric => hi * (lo / hi).powf(frac),
            }
        })
        .collect()
}

/// Euler–Maruyama solution of
/// `dY = [α Y + 2α f(Y, T̄ - s)] ds + √(2α) dB`, `Y_0 ~ N(0, I)`, run for
/// reverse time `T̄ - T̲`. Path `i` draws all of its noise from
/// `Rng::new(seed).split(i)`.
pub fn reverse_sde_sample(
    score: &dyn ScoreFunction,
    schedule: &DiffusionSchedule,
    config: &SamplerConfig,
) -> Result<Matrix> {
    if config.n_steps == 0 {
        return Err(Error::InvalidConfig("n_steps must be at least 1".into()));
    }
    if config.n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    let d = score.dim();
    let root = Rng::new(config.seed);
    let mut rngs: Vec<Rng> = (0..config.n_samples).map(|i| root.split(i as u64)).collect();
    let mut y = Matrix::zeros(config.n_samples, d);
    for (r, rng) in rngs.iter_mut().enumerate() {
        rng.fill_normal(y.row_mut(r));
    }
    let times = time_grid(schedule, config.n_steps, config.grid);
    let mut z = vec![0.0; d];
    for k in 0..config.n_steps {
        let t = times[k];
        let h = t - times[k + 1];
        let a = schedule.alpha(t);
        let f = score.score_batch(&y, t)?;
        let noise = (2.0 * a * h).sqrt();
        for (r, rng) in rngs.iter_mut().enumerate() {
            rng.fill_normal(&mut z);
            for ((yi, fi), zi) in y.row_mut(r).iter_mut().zip(f.row(r)).zip(&z) {
                *yi += h * (a * *yi + 2.0 * a * fi) + noise * zi;
            }
        }
        guard(&y, k + 1)?;
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LangevinConfig {
    pub step_size: f64,
    pub n_steps: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// Unadjusted Langevin iteration `Z ← Z + h ∇log p(Z) + √(2h) z` from
/// `Z_0 ~ N(0, I)`; `score` is evaluated at `t = 0`.
pub fn langevin_sample(score: &dyn ScoreFunction, config: &LangevinConfig) -> Result<Matrix> {
    let h = config.step_size;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!("step size must be positive, got {h}")));
    }
    if config.n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    let d = score.dim();
    let root = Rng::new(config.seed);
    let mut rngs: Vec<Rng> = (0..config.n_samples).map(|i| root.split(i as u64)).collect();
    let mut z = Matrix::zeros(config.n_samples, d);
    for (r, rng) in rngs.iter_mut().enumerate() {
        rng.fill_normal(z.row_mut(r));
    }
    let noise = (2.0 * h).sqrt();
    let mut xi = vec![0.0; d];
    for k in 0..config.n_steps {
        let g = score.score_batch(&z, 0.0)?;
        for (r, rng) in rngs.iter_mut().enumerate() {
            rng.fill_normal(&mut xi);
            for ((zi, gi), e) in z.row_mut(r).iter_mut().zip(g.row(r)).zip(&xi) {
                *zi += h * gi + noise * e;
            }
        }
        guard(&z, k + 1)?;
    }
    Ok(z)
}

/// How the divergence `tr ∇f` is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Divergence {
    /// `D` reverse-mode passes through the network.
    #[default]
    Exact,
    /// Central differences with step `1e-4`.
    FiniteDifference,
}

pub const FD_DIVERGENCE_STEP: f64 = 1e-4;

fn check_time_free(arch: &WsnnArchitecture, x: &[f64]) -> Result<()> {
    check_dim(arch.input_dim(), arch.output_dim())?;
    check_dim(arch.input_dim(), x.len())
}

/// `tr ∇f(x) + ½‖f(x)‖²` for a time-free network `f: R^D → R^D`.
pub fn vanilla_sm_loss(arch: &WsnnArchitecture, params: &WsnnParams, x: &[f64], divergence: Divergence) -> Result<f64> {
    check_time_free(arch, x)?;
    let trace = forward_trace(arch, params, x)?;
    let div = match divergence {
        Divergence::Exact => jacobian_trace(arch, params, &trace, x.len())?,
        Divergence::FiniteDifference => {
            let mut total = 0.0;
            let mut p = x.to_vec();
            for k in 0..x.len() {
                p[k] = x[k] + FD_DIVERGENCE_STEP;
                let plus = forward(arch, params, &p)?[k];
                p[k] = x[k] - FD_DIVERGENCE_STEP;
                let minus = forward(arch, params, &p)?[k];
                p[k] = x[k];
                total += (plus - minus) / (2.0 * FD_DIVERGENCE_STEP);
            }
            total
        }
    };
    Ok(div + 0.5 * norm_sq(&trace.output))
}

/// Loss at one example, adding `weight · ∇_θ loss` into `grads`.
pub fn vanilla_sm_loss_and_grad(
    arch: &WsnnArchitecture,
    params: &WsnnParams,
    x: &[f64],
    weight: f64,
    grads: &mut WsnnParams,
) -> Result<f64> {
    check_time_free(arch, x)?;
    let trace = forward_trace(arch, params, x)?;
    let div = jacobian_trace(arch, params, &trace, x.len())?;
    jacobian_trace_param_grad(arch, params, &trace, x.len(), weight, grads)?;
    let g: Vec<f64> = trace.output.iter().map(|f| weight * f).collect();
    backward_trace(arch, params, &trace, &g, grads, true)?;
    Ok(div + 0.5 * norm_sq(&trace.output))
}

/// Adam minimisation of the mean vanilla score-matching loss.
pub fn train_vanilla_sm(
    dataset: &Matrix,
    arch: &WsnnArchitecture,
    init: &WsnnParams,
    config: &TrainConfig,
) -> Result<(WsnnParams, Vec<EpochRecord>)> {
    if dataset.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    check_dim(arch.input_dim(), arch.output_dim())?;
    check_dim(arch.input_dim(), dataset.cols())?;
    minibatch_loop(dataset, init, arch, config, |params, x, weight, _rng, grads| {
        vanilla_sm_loss_and_grad(arch, params, x, weight, grads)
    })
}

/// Samples CSV, same layout as datasets.
pub use crate::densities::{read_samples_csv, write_samples_csv};
