//! Ground-truth densities: isotropic Gaussian, grid Markov random field
//! Gaussian, equal-weight Gaussian mixtures and generic factor densities on
//! `[-1, 1]^D`, with exact sampling, log-density, closed-form diffused
//! scores and the bits-per-dimension metric.

use std::f64::consts::{LN_2, PI};
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{mu_sigma, DiffusionSchedule};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{cholesky, cholesky_logdet, cholesky_solve, spd_inverse, Matrix, Rng};
use crate::quadrature::{legendre_rule, CompositeRule};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `N(0, I_D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IsoGaussian {
    pub dim: usize,
}

/// Zero-mean Gaussian on a `K × K` grid whose precision couples each pixel
/// only to its four grid neighbours: diagonal `a`, neighbour entries `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMrfGaussian {
    pub side: usize,
    pub a: f64,
    pub b: f64,
    pub precision: Matrix,
    pub covariance: Matrix,
    cov_factor: Matrix,
    logdet_precision: f64,
}

impl GridMrfGaussian {
    pub fn new(side: usize, a: f64, b: f64) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidSize("grid side must be positive".into()));
        }
        let precision = grid_precision(side, a, b);
        let prec_factor = cholesky(&precision)?;
        let covariance = spd_inverse(&precision)?;
        let cov_factor = cholesky(&covariance)?;
        Ok(Self {
            side,
            a,
            b,
            logdet_precision: cholesky_logdet(&prec_factor),
            precision,
            covariance,
            cov_factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn logdet_precision(&self) -> f64 {
        self.logdet_precision
    }
}

/// Precision matrix of the 4-neighbour grid MRF (row-major pixel order).
pub fn grid_precision(side: usize, a: f64, b: f64) -> Matrix {
    let d = side * side;
    let mut p = Matrix::zeros(d, d);
    for r in 0..side {
        for c in 0..side {
            let i = r * side + c;
            p[(i, i)] = a;
            if c + 1 < side {
                p[(i, i + 1)] = b;
                p[(i + 1, i)] = b;
            }
            if r + 1 < side {
                p[(i, i + side)] = b;
                p[(i + side, i)] = b;
            }
        }
    }
    p
}

/// `Σ_m (1/M) N(μ_m, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussMixture {
    pub means: Vec<Vec<f64>>,
}

impl GaussMixture {
    pub fn new(means: Vec<Vec<f64>>) -> Result<Self> {
        let dim = means
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidSize("mixture needs a component".into()))?;
        for m in &means {
            check_dim(dim, m.len())?;
        }
        Ok(Self { means })
    }

    /// Means drawn from `N(0, I_dim)`.
    pub fn random(dim: usize, components: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(
            (0..components)
                .map(|_| (0..dim).map(|_| rng.normal()).collect())
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }
}

type FactorFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One factor `g_I` acting on the coordinates `indices`.
#[derive(Clone)]
pub struct Factor {
    pub indices: Vec<usize>,
    pub g: FactorFn,
}

impl Factor {
    pub fn new(indices: Vec<usize>, g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            indices,
            g: Arc::new(g),
        }
    }
}

/// `p_0(x) ∝ Π_I g_I(x_I)` on `[-1, 1]^D`.
#[derive(Clone)]
pub struct FactorDensity {
    dim: usize,
    factors: Vec<Factor>,
    log_norm: f64,
    envelope: f64,
    label: String,
}

impl std::fmt::Debug for FactorDensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FactorDensity")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field(
                "index_sets",
                &self.factors.iter().map(|f| f.indices.clone()).collect::<Vec<_>>(),
            )
            .field("log_norm", &self.log_norm)
            .finish()
    }
}

impl PartialEq for FactorDensity {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label && self.dim == other.dim && self.log_norm == other.log_norm
    }
}

fn grid_points_per_axis(d: usize) -> Result<usize> {
    match d {
        1 | 2 => Ok(128),
        3 => Ok(48),
        4 => Ok(16),
        _ => Err(Error::DimensionTooLarge(d)),
    }
}

/// Sum and max of `f` over a tensor composite Gauss–Legendre grid on `[-1,1]^d`.
fn tensor_sum_and_max(d: usize, f: &dyn Fn(&[f64]) -> f64) -> Result<(f64, f64)> {
    let rule = CompositeRule::new(-1.0, 1.0, grid_points_per_axis(d)?, 8)?;
    let m = rule.len();
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    let (mut total, mut max) = (0.0, 0.0f64);
    loop {
        let mut w = 1.0;
        for i in 0..d {
            x[i] = rule.nodes[idx[i]];
            w *= rule.weights[idx[i]];
        }
        let v = f(&x);
        total += w * v;
        max = max.max(v);
        let mut axis = 0;
        loop {
            if axis == d {
                return Ok((total, max));
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

impl FactorDensity {
    /// Normalises numerically. When the index sets partition the coordinates
    /// the constant is a product of per-factor integrals; otherwise the whole
    /// product is integrated on a tensor grid (`D ≤ 4`). The rejection
    /// envelope is the grid maximum inflated by 5%.
    pub fn new(dim: usize, factors: Vec<Factor>, label: impl Into<String>) -> Result<Self> {
        if dim == 0 || factors.is_empty() {
            return Err(Error::InvalidSize(
                "factor density needs a dimension and factors".into(),
            ));
        }
        let mut cover = vec![0usize; dim];
        for f in &factors {
            if f.indices.is_empty() {
                return Err(Error::InvalidSize("empty index set".into()));
            }
            for &i in &f.indices {
                if i >= dim {
                    return Err(Error::InvalidSize(format!(
                        "index {i} out of range for dimension {dim}"
                    )));
                }
                cover[i] += 1;
            }
        }
        let partition = cover.iter().all(|&c| c == 1);
        let (norm, envelope) = if partition {
            let mut norm = 1.0;
            let mut env = 1.0;
            for f in &factors {
                let (s, m) = tensor_sum_and_max(f.indices.len(), &*f.g)?;
                norm *= s;
                env *= m;
            }
            (norm, env)
        } else {
            let prod = |x: &[f64]| -> f64 {
                factors
                    .iter()
                    .map(|f| (f.g)(&f.indices.iter().map(|&i| x[i]).collect::<Vec<_>>()))
                    .product()
            };
            tensor_sum_and_max(dim, &prod)?
        };
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidSize(format!("factor product has normaliser {norm}")));
        }
        Ok(Self {
            dim,
            factors,
            log_norm: norm.ln(),
            envelope: envelope * 1.05,
            label: label.into(),
        })
    }

    /// `p_0(x) = Π_i (1 + cos(π x_i)) / 2` on `[-1, 1]^D`.
    pub fn cosine_bump(dim: usize) -> Result<Self> {
        let factors = (0..dim)
            .map(|i| Factor::new(vec![i], |x: &[f64]| 0.5 * (1.0 + (PI * x[0]).cos())))
            .collect();
        Self::new(dim, factors, "cosine-bump")
    }

    pub fn with_envelope(mut self, envelope: f64) -> Self {
        self.envelope = envelope;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn index_sets(&self) -> Vec<Vec<usize>> {
        self.factors.iter().map(|f| f.indices.clone()).collect()
    }

    /// `max_I |I|`
    pub fn effective_dim(&self) -> usize {
        self.factors.iter().map(|f| f.indices.len()).max().unwrap_or(0)
    }

    pub fn log_normaliser(&self) -> f64 {
        self.log_norm
    }

    fn unnormalised(&self, x: &[f64]) -> f64 {
        let mut buf = Vec::new();
        self.factors
            .iter()
            .map(|f| {
                buf.clear();
                buf.extend(f.indices.iter().map(|&i| x[i]));
                (f.g)(&buf)
            })
            .product()
    }

    fn in_support(x: &[f64]) -> bool {
        x.iter().all(|v| v.abs() <= 1.0)
    }

    /// Normalised density; zero outside `[-1, 1]^D`.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        if !Self::in_support(x) {
            return Ok(0.0);
        }
        Ok(self.unnormalised(x) * (-self.log_norm).exp())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        if !Self::in_support(x) {
            return Err(Error::OutOfSupport);
        }
        Ok(self.unnormalised(x).ln() - self.log_norm)
    }

    /// Rejection sampling from the uniform envelope on `[-1, 1]^D`.
    pub fn sample(&self, n: usize, rng: &mut Rng, budget: usize) -> Result<Matrix> {
        let mut out = Matrix::zeros(n, self.dim);
        let mut proposals = 0usize;
        let mut x = vec![0.0; self.dim];
        for r in 0..n {
            loop {
                if proposals >= budget {
                    return Err(Error::RejectionBudgetExceeded { budget });
                }
                proposals += 1;
                x.iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
                let accept = self.unnormalised(&x) / self.envelope;
                if rng.uniform() < accept {
                    break;
                }
            }
            out.row_mut(r).copy_from_slice(&x);
        }
        Ok(out)
    }
}

/// A ground-truth density.
#[derive(Clone, Debug, PartialEq)]
pub enum Density {
    IsoGaussian(IsoGaussian),
    GridMrf(GridMrfGaussian),
    Mixture(GaussMixture),
    Factor(FactorDensity),
}

/// Serializable description of a density, stored next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensitySpec {
    pub family: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_side: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_diag: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_offdiag: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub means: Vec<Vec<f64>>,
}

/// Samples plus the metadata needed to regenerate or evaluate them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub data: Matrix,
    pub meta: DatasetMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub density: DensitySpec,
    pub seed: u64,
    pub n: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// Rejection budget per requested factor-density sample.
pub const REJECTION_BUDGET_PER_SAMPLE: usize = 10_000;

/// Precomputed `x ↦ ∇log p_t(x)` at a fixed time.
#[derive(Clone, Debug)]
pub enum ScoreOperator {
    /// `-x`
    Identity,
    /// `-A x` with `A = (μ_t² Σ + σ_t² I)^{-1}` given by its Cholesky factor
    Gaussian(Matrix),
    /// mixture of `N(μ_t m_k, I)` with the listed scaled means
    Mixture(Vec<Vec<f64>>),
}

impl ScoreOperator {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            ScoreOperator::Identity => Ok(x.iter().map(|v| -v).collect()),
            ScoreOperator::Gaussian(chol) => Ok(cholesky_solve(chol, x)?.into_iter().map(|v| -v).collect()),
            ScoreOperator::Mixture(means) => {
                check_dim(means[0].len(), x.len())?;
                let logits: Vec<f64> = means
                    .iter()
                    .map(|m| -0.5 * m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut out = vec![0.0; x.len()];
                for (m, wk) in means.iter().zip(&w) {
                    for ((o, mi), xi) in out.iter_mut().zip(m).zip(x) {
                        *o += wk / total * (mi - xi);
                    }
                }
                Ok(out)
            }
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

impl Density {
    pub fn iso_gaussian(dim: usize) -> Self {
        Density::IsoGaussian(IsoGaussian { dim })
    }

    pub fn grid_mrf(side: usize, a: f64, b: f64) -> Result<Self> {
        Ok(Density::GridMrf(GridMrfGaussian::new(side, a, b)?))
    }

    pub fn mixture(means: Vec<Vec<f64>>) -> Result<Self> {
        Ok(Density::Mixture(GaussMixture::new(means)?))
    }

    pub fn cosine_bump(dim: usize) -> Self {
        Density::Factor(FactorDensity::cosine_bump(dim).expect("cosine bump normalises"))
    }

    pub fn dim(&self) -> usize {
        match self {
            Density::IsoGaussian(g) => g.dim,
            Density::GridMrf(g) => g.dim(),
            Density::Mixture(m) => m.dim(),
            Density::Factor(f) => f.dim(),
        }
    }

    /// Largest factor size in the density's factorisation.
    pub fn effective_dim(&self) -> usize {
        match self {
            Density::IsoGaussian(_) => 1,
            Density::GridMrf(g) => 2.min(g.dim()),
            Density::Mixture(m) => m.dim(),
            Density::Factor(f) => f.effective_dim(),
        }
    }

    pub fn has_analytic_score(&self) -> bool {
        !matches!(self, Density::Factor(_))
    }

    pub fn spec(&self) -> Result<DensitySpec> {
        let mut spec = DensitySpec {
            family: String::new(),
            dim: self.dim(),
            grid_side: None,
            precision_diag: None,
            precision_offdiag: None,
            means: Vec::new(),
        };
        match self {
            Density::IsoGaussian(_) => spec.family = "iso-gaussian".into(),
            Density::GridMrf(g) => {
                spec.family = "grid-mrf".into();
                spec.grid_side = Some(g.side);
                spec.precision_diag = Some(g.a);
                spec.precision_offdiag = Some(g.b);
            }
            Density::Mixture(m) => {
                spec.family = "gauss-mixture".into();
                spec.means = m.means.clone();
            }
            Density::Factor(f) if f.label() == "cosine-bump" => spec.family = "cosine-bump".into(),
            Density::Factor(f) => {
                return Err(Error::InvalidConfig(format!(
                    "factor density {:?} has no serial form",
                    f.label()
                )))
            }
        }
        Ok(spec)
    }

    pub fn from_spec(spec: &DensitySpec) -> Result<Self> {
        let missing = |f: &str| Error::InvalidConfig(format!("density spec lacks {f}"));
        match spec.family.as_str() {
            "iso-gaussian" => Ok(Self::iso_gaussian(spec.dim)),
            "grid-mrf" => Self::grid_mrf(
                spec.grid_side.ok_or_else(|| missing("grid_side"))?,
                spec.precision_diag.ok_or_else(|| missing("precision_diag"))?,
                spec.precision_offdiag.ok_or_else(|| missing("precision_offdiag"))?,
            ),
            "gauss-mixture" => Self::mixture(spec.means.clone()),
            "cosine-bump" => Ok(Self::cosine_bump(spec.dim)),
            other => Err(Error::InvalidConfig(format!("unknown density family {other:?}"))),
        }
    }

    /// `n` i.i.d. draws packaged with metadata.
    pub fn sample_dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        let data = self.sample(n, &mut Rng::new(seed))?;
        Ok(Dataset {
            data,
            meta: DatasetMeta {
                density: self.spec()?,
                seed,
                n,
            },
        })
    }

    /// `n` i.i.d. draws as rows.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Matrix> {
        if n == 0 {
            return Err(Error::InvalidSize("sample count must be at least 1".into()));
        }
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        match self {
            Density::IsoGaussian(_) => rng.fill_normal(out.as_mut_slice()),
            Density::GridMrf(g) => {
                let mut z = vec![0.0; d];
                for r in 0..n {
                    rng.fill_normal(&mut z);
                    let x = g.cov_factor.matvec(&z)?;
                    out.row_mut(r).copy_from_slice(&x);
                }
            }
            Density::Mixture(m) => {
                for r in 0..n {
                    let k = rng.below(m.components());
                    for (o, mu) in out.row_mut(r).iter_mut().zip(&m.means[k]) {
                        *o = mu + rng.normal();
                    }
                }
            }
            Density::Factor(f) => return f.sample(n, rng, n.saturating_mul(REJECTION_BUDGET_PER_SAMPLE)),
        }
        Ok(out)
    }

    /// Exact `log p_0(x)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let d = x.len() as f64;
        match self {
            Density::IsoGaussian(_) => Ok(-0.5 * d * LN_2PI - 0.5 * x.iter().map(|v| v * v).sum::<f64>()),
            Density::GridMrf(g) => {
                let px = g.precision.matvec(x)?;
                let quad: f64 = px.iter().zip(x).map(|(a, b)| a * b).sum();
                Ok(0.5 * g.logdet_precision - 0.5 * d * LN_2PI - 0.5 * quad)
            }
            Density::Mixture(m) => {
                let log_w = -(m.components() as f64).ln();
                let terms: Vec<f64> = m
                    .means
                    .iter()
                    .map(|mu| log_w - 0.5 * mu.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .collect();
                Ok(log_sum_exp(&terms) - 0.5 * d * LN_2PI)
            }
            Density::Factor(f) => f.log_density(x),
        }
    }

    /// Closed-form `∇log p_t` at time `t`, ready to apply to many points.
    pub fn score_operator(&self, t: f64, schedule: &DiffusionSchedule) -> Result<ScoreOperator> {
        let (mu, sigma) = mu_sigma(schedule, t)?;
        match self {
            Density::IsoGaussian(_) => Ok(ScoreOperator::Identity),
            Density::GridMrf(g) => {
                let cov_t = g
                    .covariance
                    .scaled(mu * mu)
                    .add(&Matrix::identity(g.dim()).scaled(sigma * sigma))?;
                Ok(ScoreOperator::Gaussian(cholesky(&cov_t)?))
            }
            Density::Mixture(m) => Ok(ScoreOperator::Mixture(
                m.means.iter().map(|v| v.iter().map(|x| mu * x).collect()).collect(),
            )),
            Density::Factor(_) => Err(Error::NoAnalyticScore),
        }
    }

    /// `∇ log p_t(x)` where `p_t` is `p_0` pushed through the forward process.
    pub fn analytic_score_t(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        self.score_operator(t, schedule)?.apply(x)
    }
}

/// Bits-per-dimension summary over a sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BpdEstimate {
    pub bpd: f64,
    pub std_error: f64,
    /// Some sample had zero density; `bpd` is then `+∞`.
    pub infinite: bool,
}

/// `-(1/(n D)) Σ_i log₂ p_0(x_i)`.
pub fn bpd(density: &Density, samples: &Matrix) -> Result<BpdEstimate> {
    if samples.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    check_dim(density.dim(), samples.cols())?;
    let d = density.dim() as f64;
    let mut per_sample = Vec::with_capacity(samples.rows());
    for row in samples.row_iter() {
        let lp = density.log_density(row)?;
        if lp == f64::NEG_INFINITY {
            return Ok(BpdEstimate {
                bpd: f64::INFINITY,
                std_error: f64::INFINITY,
                infinite: true,
            });
        }
        per_sample.push(-lp / (LN_2 * d));
    }
    let (mean, se) = crate::numerics::mean_and_stderr(&per_sample);
    Ok(BpdEstimate {
        bpd: mean,
        std_error: se,
        infinite: false,
    })
}

/// BPD of exact samples from `density`, i.e. its entropy in bits per dimension.
pub fn reference_bpd(density: &Density, n_mc: usize, rng: &mut Rng) -> Result<BpdEstimate> {
    bpd(density, &density.sample(n_mc, rng)?)
}

/// Dataset CSV: header `x1,…,xD`, then one row per sample.
pub fn write_samples_csv<W: Write>(out: W, data: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record((1..=data.cols()).map(|i| format!("x{i}")))?;
    for row in data.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(input: R) -> Result<Matrix> {
    let mut r = csv::Reader::from_reader(input);
    let cols = r.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        check_dim(cols, rec.len())?;
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("non-finite entry {field:?}")));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn write_meta_json<W: Write>(out: W, meta: &DatasetMeta) -> Result<()> {
    serde_json::to_writer_pretty(out, meta)?;
    Ok(())
}

pub fn read_meta_json<R: Read>(input: R) -> Result<DatasetMeta> {
    Ok(serde_json::from_reader(input)?)
}

/// Integral of a 1-D factor over `[-1, 1]` with a 64-point rule (test helper
/// for factor normalisation).
pub fn integrate_unit_interval(f: impl Fn(f64) -> f64) -> f64 {
    legendre_rule(64).expect("order 64 converges").integrate(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sample_moments;

    #[test]
    fn iso_gaussian_log_density_at_origin() {
        let d = Density::iso_gaussian(1);
        assert!((d.log_density(&[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn iso_gaussian_sample_covariance() {
        let d = Density::iso_gaussian(2);
        let s = d.sample(100_000, &mut Rng::new(1)).unwrap();
        let (_, cov) = sample_moments(&s);
        for r in 0..2 {
            for c in 0..2 {
                let target = if r == c { 1.0 } else { 0.0 };
                assert!((cov[(r, c)] - target).abs() < 0.05);
            }
        }
    }

    #[test]
    fn grid_precision_structure() {
        let p = grid_precision(3, 1.0, -0.2);
        // pixel 4 is the centre: four neighbours
        let nbrs: Vec<usize> = (0..9).filter(|&j| j != 4 && p[(4, j)] != 0.0).collect();
        assert_eq!(nbrs, vec![1, 3, 5, 7]);
        // corner 0 has two
        assert_eq!((1..9).filter(|&j| p[(0, j)] != 0.0).count(), 2);
        // no wrap-around between rows
        assert_eq!(p[(2, 3)], 0.0);
        assert!(p.is_symmetric(0.0));
    }

    #[test]
    fn grid_mrf_sample_covariance() {
        let d = Density::grid_mrf(3, 1.0, -0.2).unwrap();
        let Density::GridMrf(g) = &d else { unreachable!() };
        let s = d.sample(100_000, &mut Rng::new(2)).unwrap();
        let (_, cov) = sample_moments(&s);
        for (a, b) in cov.as_slice().iter().zip(g.covariance.as_slice()) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn grid_mrf_log_density_at_origin() {
        let d = Density::grid_mrf(3, 1.0, -0.2).unwrap();
        let Density::GridMrf(g) = &d else { unreachable!() };
        // determinant by elimination on the dense precision
        let mut a = g.precision.clone();
        let n = a.rows();
        let mut det = 1.0;
        for k in 0..n {
            det *= a[(k, k)];
            for i in k + 1..n {
                let f = a[(i, k)] / a[(k, k)];
                for j in k..n {
                    a[(i, j)] -= f * a[(k, j)];
                }
            }
        }
        let expected = 0.5 * det.ln() - 4.5 * LN_2PI;
        assert!((d.log_density(&[0.0; 9]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn indefinite_grid_is_rejected() {
        assert!(matches!(
            Density::grid_mrf(3, 1.0, -0.6),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn mixture_occupancy_and_symmetry() {
        let d = Density::mixture(vec![vec![2.0, 0.0], vec![-2.0, 0.0]]).unwrap();
        let s = d.sample(10_000, &mut Rng::new(3)).unwrap();
        let right = s.row_iter().filter(|r| r[0] > 0.0).count() as f64 / 10_000.0;
        // P(x > 0 | left component) = Φ(-2) ≈ 0.023 leaks symmetrically
        assert!((right - 0.5).abs() < 0.03, "{right}");
        let lp = d.log_density(&[0.0, 0.3]).unwrap();
        let single = -0.5 * (4.0 + 0.09) - LN_2PI;
        assert!((lp - single).abs() < 1e-12);
        let sc = d
            .analytic_score_t(&[0.0, 0.0], 0.4, &DiffusionSchedule::default())
            .unwrap();
        assert!(sc.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn iso_gaussian_score_is_stationary() {
        let d = Density::iso_gaussian(3);
        let s = DiffusionSchedule::default();
        for &t in &[0.001, 0.5, 2.9] {
            assert_eq!(
                d.analytic_score_t(&[1.0, -2.0, 0.5], t, &s).unwrap(),
                vec![-1.0, 2.0, -0.5]
            );
        }
    }

    #[test]
    fn grid_mrf_score_matches_finite_difference() {
        let d = Density::grid_mrf(3, 1.0, -0.2).unwrap();
        let Density::GridMrf(g) = &d else { unreachable!() };
        let s = DiffusionSchedule::default();
        let t = 0.3;
        let (mu, sigma) = mu_sigma(&s, t).unwrap();
        let cov_t = g
            .covariance
            .scaled(mu * mu)
            .add(&Matrix::identity(9).scaled(sigma * sigma))
            .unwrap();
        let prec_t = spd_inverse(&cov_t).unwrap();
        let logp = |x: &[f64]| -0.5 * prec_t.matvec(x).unwrap().iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let mut rng = Rng::new(8);
        let x: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let score = d.analytic_score_t(&x, t, &s).unwrap();
        for k in 0..9 {
            let h = 1e-5;
            let mut a = x.clone();
            let mut b = x.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (logp(&a) - logp(&b)) / (2.0 * h);
            assert!((fd - score[k]).abs() < 1e-6, "{fd} vs {}", score[k]);
        }
    }

    #[test]
    fn gaussian_scores_approach_data_score_at_small_t() {
        let s = DiffusionSchedule::default();
        // weak coupling keeps Σ close to I, so μ²Σ + σ²I ≈ Σ to O(σ²‖Σ - I‖)
        let d = Density::grid_mrf(3, 1.0, -0.05).unwrap();
        let Density::GridMrf(g) = &d else { unreachable!() };
        let mut rng = Rng::new(4);
        for _ in 0..10 {
            let x: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
            let at_min = d.analytic_score_t(&x, s.t_min(), &s).unwrap();
            let data_score: Vec<f64> = g.precision.matvec(&x).unwrap().iter().map(|v| -v).collect();
            for (a, b) in at_min.iter().zip(&data_score) {
                assert!((a - b).abs() < 1e-3 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn factor_density_without_score() {
        let d = Density::cosine_bump(2);
        let s = DiffusionSchedule::default();
        assert!(matches!(
            d.analytic_score_t(&[0.0, 0.0], 0.1, &s),
            Err(Error::NoAnalyticScore)
        ));
        assert!(matches!(d.log_density(&[1.5, 0.0]), Err(Error::OutOfSupport)));
        assert_eq!(d.effective_dim(), 1);
    }

    #[test]
    fn cosine_bump_is_normalised_and_separable() {
        let f = FactorDensity::cosine_bump(2).unwrap();
        assert!(f.log_normaliser().abs() < 1e-12);
        // fine midpoint grid
        let n = 400;
        let h = 2.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [-1.0 + h * (i as f64 + 0.5), -1.0 + h * (j as f64 + 0.5)];
                total += f.density(&x).unwrap() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3);
        let x = [0.3, -0.6];
        let one = FactorDensity::cosine_bump(1).unwrap();
        let sum = one.log_density(&[0.3]).unwrap() + one.log_density(&[-0.6]).unwrap();
        assert!((f.log_density(&x).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn overlapping_factors_are_normalised_on_the_grid() {
        // g(x1, x2) = 1 + x1 x2, g(x2) = 1 + x2² / 2 on [-1,1]²: Z = 14/3
        let f = FactorDensity::new(
            2,
            vec![
                Factor::new(vec![0, 1], |x: &[f64]| 1.0 + x[0] * x[1]),
                Factor::new(vec![1], |x: &[f64]| 1.0 + 0.5 * x[0] * x[0]),
            ],
            "test",
        )
        .unwrap();
        assert!((f.log_normaliser() - (14.0 / 3.0f64).ln()).abs() < 1e-12);
        assert_eq!(f.effective_dim(), 2);
    }

    #[test]
    fn factor_sampling_matches_marginal_moment() {
        let f = FactorDensity::cosine_bump(1).unwrap();
        let s = f.sample(20_000, &mut Rng::new(5), 1_000_000).unwrap();
        // E x² = 1/3 - 2/π² under (1 + cos πx)/2
        let m2 = s.as_slice().iter().map(|v| v * v).sum::<f64>() / 20_000.0;
        let expected = 1.0 / 3.0 - 2.0 / (PI * PI);
        assert!((m2 - expected).abs() < 0.006, "{m2} vs {expected}");
        let narrow = f.clone().with_envelope(1e9);
        assert!(matches!(
            narrow.sample(10, &mut Rng::new(1), 100),
            Err(Error::RejectionBudgetExceeded { .. })
        ));
    }

    #[test]
    fn bpd_reference_values() {
        let d = Density::iso_gaussian(1);
        let one = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        assert!((bpd(&d, &one).unwrap().bpd - 0.5 * (2.0 * PI).log2()).abs() < 1e-12);
        let same = Matrix::from_vec(3, 1, vec![0.7; 3]).unwrap();
        let single = Matrix::from_vec(1, 1, vec![0.7]).unwrap();
        assert!((bpd(&d, &same).unwrap().bpd - bpd(&d, &single).unwrap().bpd).abs() < 1e-15);
        assert!(matches!(bpd(&d, &Matrix::zeros(0, 1)), Err(Error::EmptyDataset)));
    }

    #[test]
    fn bpd_flags_zero_density() {
        let d = Density::Factor(FactorDensity::cosine_bump(1).unwrap());
        let edge = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let est = bpd(&d, &edge).unwrap();
        assert!(est.infinite && est.bpd == f64::INFINITY);
    }

    #[test]
    fn reference_bpd_of_gaussian_families() {
        let entropy_bits = 0.5 * (2.0 * PI * std::f64::consts::E).log2();
        let est = reference_bpd(&Density::iso_gaussian(4), 3000, &mut Rng::new(6)).unwrap();
        assert!((est.bpd - entropy_bits).abs() < 0.1);
        let single = reference_bpd(
            &Density::mixture(vec![vec![3.0, -1.0]]).unwrap(),
            20_000,
            &mut Rng::new(6),
        )
        .unwrap();
        assert!((single.bpd - entropy_bits).abs() < 3.0 * single.std_error);

        let d = Density::grid_mrf(3, 1.0, -0.2).unwrap();
        let Density::GridMrf(g) = &d else { unreachable!() };
        let closed = (9.0 * (2.0 * PI * std::f64::consts::E).ln() - g.logdet_precision()) / (2.0 * 9.0 * LN_2);
        let est = reference_bpd(&d, 20_000, &mut Rng::new(7)).unwrap();
        assert!((est.bpd - closed).abs() < 3.0 * est.std_error, "{est:?} vs {closed}");
    }

    #[test]
    fn spec_round_trip() {
        let mut rng = Rng::new(1);
        let mix = Density::Mixture(GaussMixture::random(4, 3, &mut rng).unwrap());
        for d in [
            Density::iso_gaussian(3),
            Density::grid_mrf(2, 1.0, -0.2).unwrap(),
            mix,
            Density::cosine_bump(2),
        ] {
            assert_eq!(Density::from_spec(&d.spec().unwrap()).unwrap(), d);
        }
    }

    #[test]
    fn samples_csv_round_trip() {
        let d = Density::iso_gaussian(3);
        let s = d.sample(5, &mut Rng::new(2)).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &s).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x1,x2,x3\n"));
        assert_eq!(read_samples_csv(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn factor_integral_helper() {
        assert!((integrate_unit_interval(|x| 0.5 * (1.0 + (PI * x).cos())) - 1.0).abs() < 1e-14);
    }
}
