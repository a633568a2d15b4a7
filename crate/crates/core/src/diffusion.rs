//! Forward Ornstein–Uhlenbeck process, denoising score matching and ERM
//! training of the score network.
//!
//! The forward process is `dX = -α_t X dt + √(2α_t) dB`, so that
//! `X_t | X_0 ~ N(μ_t X_0, σ_t² I)` with `μ_t = exp(-∫₀ᵗ α)` and
//! `σ_t² = 1 - μ_t²`. Training draws `t ~ Uniform[T_min, T_max]` (constant
//! weight λ_t = 1) independently per example.

use std::sync::Arc;

use crate::densities::Density;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{mean_and_stderr, norm_sq, Matrix, Rng};
use crate::sampler::ScoreFunction;
use crate::wsnn::{backward_trace, forward, forward_trace, project_params, ForwardTrace, WsnnArchitecture, WsnnParams};

type AlphaFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Speed function `t ↦ α_t` of the forward process.
#[derive(Clone)]
pub enum Alpha {
    Constant(f64),
    /// General α with declared bounds `lower ≤ α_t ≤ upper`; `∫α` is
    /// evaluated by adaptive quadrature.
    Custom {
        f: AlphaFn,
        lower: f64,
        upper: f64,
    },
}

impl std::fmt::Debug for Alpha {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Alpha::Constant(a) => write!(f, "Constant({a})"),
            Alpha::Custom { lower, upper, .. } => write!(f, "Custom {{ lower: {lower}, upper: {upper} }}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    alpha: Alpha,
    t_min: f64,
    t_max: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            alpha: Alpha::Constant(1.0),
            t_min: 1e-3,
            t_max: 3.0,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(alpha: Alpha, t_min: f64, t_max: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_max > t_min) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < T_min < T_max, got [{t_min}, {t_max}]"
            )));
        }
        match &alpha {
            Alpha::Constant(a) if !(*a > 0.0) => {
                return Err(Error::InvalidConfig(format!("alpha must be positive, got {a}")))
            }
            Alpha::Custom { lower, upper, .. } if !(*lower > 0.0 && upper >= lower) => {
                return Err(Error::InvalidConfig(format!("bad alpha bounds [{lower}, {upper}]")))
            }
            _ => {}
        }
        Ok(Self { alpha, t_min, t_max })
    }

    /// Standard OU clock (α ≡ 1) on `[t_min, t_max]`.
    pub fn ou(t_min: f64, t_max: f64) -> Result<Self> {
        Self::new(Alpha::Constant(1.0), t_min, t_max)
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn span(&self) -> f64 {
        self.t_max - self.t_min
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match &self.alpha {
            Alpha::Constant(a) => *a,
            Alpha::Custom { f, .. } => f(t),
        }
    }

    /// `(τ_lower, τ_upper)` with `τ_lower ≤ α_t ≤ τ_upper`.
    pub fn tau_bounds(&self) -> (f64, f64) {
        match &self.alpha {
            Alpha::Constant(a) => (*a, *a),
            Alpha::Custom { lower, upper, .. } => (*lower, *upper),
        }
    }

    /// Loss weight; constant one on `[t_min, t_max]`.
    pub fn lambda(&self, t: f64) -> f64 {
        if (self.t_min..=self.t_max).contains(&t) {
            1.0
        } else {
            0.0
        }
    }

    /// `∫₀ᵗ α_s ds`
    pub fn alpha_integral(&self, t: f64) -> f64 {
        match &self.alpha {
            Alpha::Constant(a) => a * t,
            Alpha::Custom { f, .. } => adaptive_simpson(&**f, 0.0, t, 1e-10),
        }
    }

    pub fn sample_time(&self, rng: &mut Rng) -> f64 {
        rng.uniform_range(self.t_min, self.t_max)
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 40)
}

/// `(μ_t, σ_t)` of the forward process.
pub fn mu_sigma(schedule: &DiffusionSchedule, t: f64) -> Result<(f64, f64)> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::NegativeTime(t));
    }
    let integral = schedule.alpha_integral(t);
    let mu = (-integral).exp();
    let sigma = (-(-2.0 * integral).exp_m1()).sqrt();
    Ok((mu, sigma))
}

/// `x_t = μ_t x_0 + σ_t z`, `z ~ N(0, I)`.
pub fn forward_sample(schedule: &DiffusionSchedule, x0: &[f64], t: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let (mu, sigma) = mu_sigma(schedule, t)?;
    Ok(x0.iter().map(|x| mu * x + sigma * rng.normal()).collect())
}

/// `∇ log p_t(x_t | x_0) = -(x_t - μ_t x_0) / σ_t²`.
pub fn conditional_score(schedule: &DiffusionSchedule, x0: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(x0.len(), xt.len())?;
    let (mu, sigma) = mu_sigma(schedule, t)?;
    if sigma == 0.0 {
        return Err(Error::SingularTime(t));
    }
    let s2 = sigma * sigma;
    Ok(xt.iter().zip(x0).map(|(xt, x0)| -(xt - mu * x0) / s2).collect())
}

/// How the time coordinate is fed to the score network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TimeInput {
    /// Input is `x` only (time-free network for vanilla score matching).
    None,
    /// Input is `concat(x, t)`.
    #[default]
    Time,
    /// Input is `concat(x, t, σ_t, 1/σ_t)`.
    TimeAndNoiseScale,
}

impl TimeInput {
    pub fn extra_inputs(self) -> usize {
        match self {
            TimeInput::None => 0,
            TimeInput::Time => 1,
            TimeInput::TimeAndNoiseScale => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TimeInput::None => "none",
            TimeInput::Time => "time",
            TimeInput::TimeAndNoiseScale => "time+noise-scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TimeInput::None),
            "time" => Ok(TimeInput::Time),
            "time+noise-scale" => Ok(TimeInput::TimeAndNoiseScale),
            other => Err(Error::Parse(format!("unknown time input {other:?}"))),
        }
    }
}

/// A WSNN used as a score model `(x, t) ↦ f(x, t) ∈ R^D`.
#[derive(Clone, Debug)]
pub struct ScoreNetwork {
    pub arch: WsnnArchitecture,
    pub params: WsnnParams,
    pub time_input: TimeInput,
}

impl ScoreNetwork {
    pub fn new(arch: WsnnArchitecture, params: WsnnParams, time_input: TimeInput) -> Result<Self> {
        let dim = arch.output_dim();
        check_dim(dim + time_input.extra_inputs(), arch.input_dim())?;
        Ok(Self {
            arch,
            params,
            time_input,
        })
    }

    /// Dense ReLU network of data dimension `dim` with the given hidden
    /// widths, He-initialised from `rng`.
    pub fn mlp(dim: usize, hidden: &[usize], time_input: TimeInput, bound: f64, rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![dim + time_input.extra_inputs()];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let arch = WsnnArchitecture::dense(&widths, bound)?;
        let params = WsnnParams::he_init(&arch, rng);
        Self::new(arch, params, time_input)
    }

    pub fn dim(&self) -> usize {
        self.arch.output_dim()
    }

    pub fn input(&self, schedule: &DiffusionSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        network_input(self.time_input, schedule, x, t)
    }

    pub fn eval(&self, schedule: &DiffusionSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        forward(&self.arch, &self.params, &self.input(schedule, x, t)?)
    }

    pub fn trace(&self, schedule: &DiffusionSchedule, x: &[f64], t: f64) -> Result<ForwardTrace> {
        forward_trace(&self.arch, &self.params, &self.input(schedule, x, t)?)
    }
}

fn network_input(time_input: TimeInput, schedule: &DiffusionSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(x.len() + time_input.extra_inputs());
    v.extend_from_slice(x);
    match time_input {
        TimeInput::None => {}
        TimeInput::Time => v.push(t),
        TimeInput::TimeAndNoiseScale => {
            let (_, sigma) = mu_sigma(schedule, t)?;
            v.extend_from_slice(&[t, sigma, 1.0 / sigma.max(1e-12)]);
        }
    }
    Ok(v)
}

/// `‖f(x_t, t) + (x_t - μ_t x_0) / σ_t²‖²` for an arbitrary score model.
pub fn dsm_loss(
    score: &dyn ScoreFunction,
    schedule: &DiffusionSchedule,
    x0: &[f64],
    xt: &[f64],
    t: f64,
) -> Result<f64> {
    let target = conditional_score(schedule, x0, xt, t)?;
    let f = score.score(xt, t)?;
    check_dim(target.len(), f.len())?;
    Ok(f.iter().zip(&target).map(|(f, c)| (f - c).powi(2)).sum())
}

/// DSM loss of a network at one example, adding `weight · ∇_θ loss` into
/// `grads`.
pub fn dsm_loss_and_grad(
    net: &ScoreNetwork,
    schedule: &DiffusionSchedule,
    x0: &[f64],
    xt: &[f64],
    t: f64,
    weight: f64,
    grads: &mut WsnnParams,
) -> Result<f64> {
    check_dim(net.dim(), xt.len())?;
    dsm_example(
        &net.arch,
        &net.params,
        net.time_input,
        schedule,
        x0,
        xt,
        t,
        weight,
        grads,
    )
}

#[allow(clippy::too_many_arguments)]
fn dsm_example(
    arch: &WsnnArchitecture,
    params: &WsnnParams,
    time_input: TimeInput,
    schedule: &DiffusionSchedule,
    x0: &[f64],
    xt: &[f64],
    t: f64,
    weight: f64,
    grads: &mut WsnnParams,
) -> Result<f64> {
    let target = conditional_score(schedule, x0, xt, t)?;
    let trace = forward_trace(arch, params, &network_input(time_input, schedule, xt, t)?)?;
    let residual: Vec<f64> = trace.output.iter().zip(&target).map(|(f, c)| f - c).collect();
    let g: Vec<f64> = residual.iter().map(|r| 2.0 * weight * r).collect();
    backward_trace(arch, params, &trace, &g, grads, true)?;
    Ok(norm_sq(&residual))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Total optimizer steps.
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Clip parameters into `[-M, M]` after each step.
    pub clip_to_bound: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            clip_to_bound: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} is negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: &TrainConfig, n_values: usize) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            m: vec![0.0; n_values],
            v: vec![0.0; n_values],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut WsnnParams, grads: &WsnnParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut k = 0;
        for (p, g) in params.buffers_mut().zip(grads.buffers()) {
            for (p, &g) in p.iter_mut().zip(g) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub score_mse: Option<f64>,
    pub wall_time_s: f64,
}

/// Loss trace as CSV with columns `epoch,mean_loss,score_mse,wall_time_s`.
pub fn write_trace_csv<W: std::io::Write>(out: W, trace: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "mean_loss", "score_mse", "wall_time_s"])?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.mean_loss),
            r.score_mse.map(|v| format!("{v:?}")).unwrap_or_default(),
            format!("{:.3}", r.wall_time_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub(crate) fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub(crate) fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

/// Row indices sorted lexicographically by row content, so downstream
/// batching does not depend on the order rows were supplied in.
pub(crate) fn canonical_order(data: &Matrix) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.rows()).collect();
    idx.sort_by(|&a, &b| {
        data.row(a)
            .iter()
            .zip(data.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Shared minibatch/Adam loop. `example` computes the loss of one example
/// and adds its weighted gradient; it receives the per-step random stream.
pub(crate) fn minibatch_loop<F>(
    data: &Matrix,
    init: &WsnnParams,
    arch: &WsnnArchitecture,
    config: &TrainConfig,
    mut example: F,
) -> Result<(WsnnParams, Vec<EpochRecord>)>
where
    F: FnMut(&WsnnParams, &[f64], f64, &mut Rng, &mut WsnnParams) -> Result<f64>,
{
    config.validate()?;
    if data.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let clock = Stopwatch::start();
    let root = Rng::new(config.seed);
    let order = canonical_order(data);
    let n = data.rows();
    let batch = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let mut params = init.clone();
    let mut grads = WsnnParams::zeros(arch);
    let mut adam = Adam::new(config, params.num_values());
    let mut trace = Vec::new();
    let mut epoch_perm = order.clone();
    let (mut epoch_loss, mut epoch_count) = (0.0, 0usize);
    for step in 0..config.steps {
        let epoch = step / steps_per_epoch;
        let within = step % steps_per_epoch;
        if within == 0 {
            epoch_perm.copy_from_slice(&order);
            root.split_path(&[0, epoch as u64]).shuffle(&mut epoch_perm);
        }
        let chunk = &epoch_perm[within * batch..((within + 1) * batch).min(n)];
        let weight = 1.0 / chunk.len() as f64;
        let mut rng = root.split_path(&[1, step as u64]);
        grads.fill_zero();
        for &i in chunk {
            let loss = example(&params, data.row(i), weight, &mut rng, &mut grads)?;
            epoch_loss += loss;
            epoch_count += 1;
        }
        grads.apply_masks(arch);
        adam.step(&mut params, &grads);
        if config.clip_to_bound {
            params = project_params(&params, arch.bound());
        }
        if within + 1 == steps_per_epoch || step + 1 == config.steps {
            trace.push(EpochRecord {
                epoch,
                mean_loss: epoch_loss / epoch_count as f64,
                score_mse: None,
                wall_time_s: clock.seconds(),
            });
            epoch_loss = 0.0;
            epoch_count = 0;
        }
    }
    Ok((params, trace))
}

/// Denoising score-matching ERM with Adam. Each step draws a minibatch of
/// `x_0`, an independent `t ~ Uniform[T_min, T_max]` and `x_t` per element,
/// and descends the mean DSM loss.
pub fn train(
    dataset: &Matrix,
    init: &ScoreNetwork,
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
) -> Result<(ScoreNetwork, Vec<EpochRecord>)> {
    if dataset.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    check_dim(init.dim(), dataset.cols())?;
    let mut xt = vec![0.0; init.dim()];
    let (params, trace) = minibatch_loop(
        dataset,
        &init.params,
        &init.arch,
        config,
        |params, x0, weight, rng, grads| {
            let t = schedule.sample_time(rng);
            let (mu, sigma) = mu_sigma(schedule, t)?;
            for (o, x) in xt.iter_mut().zip(x0) {
                *o = mu * x + sigma * rng.normal();
            }
            dsm_example(&init.arch, params, init.time_input, schedule, x0, &xt, t, weight, grads)
        },
    )?;
    let mut net = init.clone();
    net.params = params;
    Ok((net, trace))
}

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let (mean, std_error) = mean_and_stderr(values);
        Self { mean, std_error }
    }
}

/// Monte Carlo estimate of `∫_{T_min}^{T_max} E‖f(X_t, t) - ∇log p_t(X_t)‖² dt`
/// with `t ~ Uniform`, `X_0 ~ p_0` and `X_t` from the forward process.
pub fn score_mse(
    score: &dyn ScoreFunction,
    density: &Density,
    schedule: &DiffusionSchedule,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<McEstimate> {
    if !density.has_analytic_score() {
        return Err(Error::NoAnalyticScore);
    }
    if n_mc == 0 {
        return Err(Error::InvalidConfig("n_mc must be at least 1".into()));
    }
    let x0 = density.sample(n_mc, rng)?;
    let span = schedule.span();
    let mut values = Vec::with_capacity(n_mc);
    for row in x0.row_iter() {
        let t = schedule.sample_time(rng);
        let xt = forward_sample(schedule, row, t, rng)?;
        let f = score.score(&xt, t)?;
        let truth = density.analytic_score_t(&xt, t, schedule)?;
        values.push(span * f.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
    }
    Ok(McEstimate::from_samples(&values))
}
