//! Browser bindings: sample a 2-D Gaussian mixture with the reverse SDE or
//! Langevin dynamics, and trace `p_t` of the 1-D cosine bump by quadrature.

use diffusion_density::densities::{Density, FactorDensity, GaussMixture};
use diffusion_density::diffusion::{mu_sigma, DiffusionSchedule};
use diffusion_density::numerics::{Matrix, Rng};
use diffusion_density::quadrature::{pt_quadrature, riemann_reference, TensorQuadratureConfig};
use diffusion_density::sampler::{
    langevin_sample, reverse_sde_sample, AnalyticScore, LangevinConfig, SamplerConfig, TimeGrid,
};
use diffusion_density::Result;
use wasm_bindgen::prelude::*;

fn to_js(e: diffusion_density::Error) -> JsError {
    JsError::new(&format!("{}: {e}", e.name()))
}

fn flatten(m: &Matrix) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Component means as `[x0, y0, x1, y1, ...]`, spread by `scale`.
pub fn mixture_means_impl(components: usize, seed: u64, scale: f64) -> Result<Vec<f64>> {
    let means = GaussMixture::random(2, components.max(1), &mut Rng::new(seed))?;
    Ok(means.means.iter().flatten().map(|v| v * scale).collect())
}

fn scaled_mixture(components: usize, seed: u64, scale: f64) -> Result<Density> {
    let means = mixture_means_impl(components, seed, scale)?;
    Density::mixture(means.chunks(2).map(<[f64]>::to_vec).collect())
}

pub fn reverse_sde_impl(components: usize, scale: f64, n: usize, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let density = scaled_mixture(components, seed, scale)?;
    let schedule = DiffusionSchedule::default();
    let score = AnalyticScore::new(&density, &schedule)?;
    let cfg = SamplerConfig {
        n_steps: steps,
        n_samples: n,
        seed: seed ^ 0x5eed,
        grid: TimeGrid::Uniform,
    };
    Ok(flatten(&reverse_sde_sample(&score, &schedule, &cfg)?))
}

pub fn langevin_impl(
    components: usize,
    scale: f64,
    n: usize,
    steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let density = scaled_mixture(components, seed, scale)?;
    let score = AnalyticScore::new(&density, &DiffusionSchedule::default())?;
    let cfg = LangevinConfig {
        step_size,
        n_steps: steps,
        n_samples: n,
        seed: seed ^ 0x5eed,
    };
    Ok(flatten(&langevin_sample(&score, &cfg)?))
}

/// Rows `[x, p̂, reference]` for `x` evenly spaced on `[-half_width, half_width]`.
/// Points where the quadrature window leaves the support give NaN for `p̂`.
pub fn pt_curve_impl(t: f64, points: usize, half_width: f64, m: usize) -> Result<Vec<f64>> {
    let p0: FactorDensity = FactorDensity::cosine_bump(1)?;
    let (mu, sigma) = mu_sigma(&DiffusionSchedule::default(), t)?;
    let cfg = TensorQuadratureConfig {
        m,
        ..TensorQuadratureConfig::default()
    };
    let mut out = Vec::with_capacity(3 * points);
    for i in 0..points {
        let x = if points == 1 {
            0.0
        } else {
            -half_width + 2.0 * half_width * i as f64 / (points - 1) as f64
        };
        let quad = pt_quadrature(&p0, &[x], mu, sigma, &cfg)
            .map(|e| e.p_hat)
            .unwrap_or(f64::NAN);
        let reference = riemann_reference(&p0, &[x], mu, sigma, 20_000)?;
        out.extend([x, quad, reference]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn mixture_means(components: usize, seed: u64, scale: f64) -> std::result::Result<Vec<f64>, JsError> {
    mixture_means_impl(components, seed, scale).map_err(to_js)
}

#[wasm_bindgen]
pub fn sample_reverse_sde(
    components: usize,
    scale: f64,
    n: usize,
    steps: usize,
    seed: u64,
) -> std::result::Result<Vec<f64>, JsError> {
    reverse_sde_impl(components, scale, n, steps, seed).map_err(to_js)
}

#[wasm_bindgen]
pub fn sample_langevin(
    components: usize,
    scale: f64,
    n: usize,
    steps: usize,
    step_size: f64,
    seed: u64,
) -> std::result::Result<Vec<f64>, JsError> {
    langevin_impl(components, scale, n, steps, step_size, seed).map_err(to_js)
}

#[wasm_bindgen]
pub fn pt_curve(t: f64, points: usize, half_width: f64, m: usize) -> std::result::Result<Vec<f64>, JsError> {
    pt_curve_impl(t, points, half_width, m).map_err(to_js)
}
