#![allow(dead_code)]

use diffusion_density::numerics::{Matrix, Rng};
use diffusion_density::wsnn::{backward, forward, forward_trace, Permutation, Replica, WsnnArchitecture, WsnnParams};

pub fn random_arch(rng: &mut Rng, max_width: usize, masked: bool) -> WsnnArchitecture {
    let depth = 2 + rng.below(3);
    let widths: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(max_width)).collect();
    let replicas = (0..depth - 1)
        .map(|i| {
            let m = 1 + rng.below(3);
            (0..m)
                .map(|_| Replica {
                    q: Permutation::random(widths[i], rng),
                    r: Permutation::random(widths[i + 1], rng),
                })
                .collect()
        })
        .collect();
    let mut arch = WsnnArchitecture::new(widths.clone(), replicas, 10_000, 10.0).unwrap();
    if masked {
        let layer = rng.below(depth);
        let mask: Vec<bool> = (0..widths[layer] * widths[layer + 1])
            .map(|_| rng.uniform() < 0.6)
            .collect();
        arch = arch.with_weight_mask(layer, mask).unwrap();
    }
    arch
}

pub fn random_params(arch: &WsnnArchitecture, rng: &mut Rng) -> WsnnParams {
    let mut p = WsnnParams::he_init(arch, rng);
    for b in p.biases.iter_mut() {
        rng.fill_normal(b);
        b.iter_mut().for_each(|v| *v *= 0.3);
    }
    p.apply_masks(arch);
    p
}

pub fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Forward pass through the materialised dense layers.
pub fn dense_forward(arch: &WsnnArchitecture, params: &WsnnParams, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for i in 0..arch.depth() {
        let (w, b) = arch.materialize_layer(i, params);
        let mut z = w.matvec(&a).unwrap();
        z.iter_mut().zip(&b).for_each(|(z, b)| *z += b);
        if i + 1 < arch.depth() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        a = z;
    }
    a
}

fn pattern(arch: &WsnnArchitecture, params: &WsnnParams, x: &[f64]) -> Vec<Vec<bool>> {
    forward_trace(arch, params, x).unwrap().active
}

/// Worst relative deviation between the analytic gradient of `⟨c, f(x)⟩`
/// (parameters and input) and central differences with step `eps`, skipping
/// coordinates whose perturbation flips an activation.
pub fn max_gradient_error(
    arch: &WsnnArchitecture,
    params: &WsnnParams,
    x: &[f64],
    c: &[f64],
    eps: f64,
) -> (f64, usize) {
    let (grads, gi) = backward(arch, params, x, c).unwrap();
    let base = pattern(arch, params, x);
    let objective = |p: &WsnnParams, x: &[f64]| {
        forward(arch, p, x)
            .unwrap()
            .iter()
            .zip(c)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let rel = |fd: f64, g: f64| (fd - g).abs() / g.abs().max(fd.abs()).max(1e-3);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let flat = params.flatten();
    let g = grads.flatten();
    let mut masked = WsnnParams::zeros(arch);
    masked.assign_flat(&vec![1.0; flat.len()]).unwrap();
    masked.apply_masks(arch);
    let free = masked.flatten();
    let mut q = params.clone();
    for k in 0..flat.len() {
        if free[k] == 0.0 {
            assert_eq!(g[k], 0.0, "masked entry {k} received gradient");
            continue;
        }
        let mut v = flat.clone();
        v[k] = flat[k] + eps;
        q.assign_flat(&v).unwrap();
        if pattern(arch, &q, x) != base {
            continue;
        }
        let up = objective(&q, x);
        v[k] = flat[k] - eps;
        q.assign_flat(&v).unwrap();
        if pattern(arch, &q, x) != base {
            continue;
        }
        let down = objective(&q, x);
        worst = worst.max(rel((up - down) / (2.0 * eps), g[k]));
        checked += 1;
    }
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        xp[k] = x[k] + eps;
        let ok_up = pattern(arch, params, &xp) == base;
        let up = objective(params, &xp);
        xp[k] = x[k] - eps;
        let ok_down = pattern(arch, params, &xp) == base;
        let down = objective(params, &xp);
        xp[k] = x[k];
        if ok_up && ok_down {
            worst = worst.max(rel((up - down) / (2.0 * eps), gi[k]));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Direct valid cross-correlation of a square image with a square filter.
pub fn direct_conv(image: &[f64], side: usize, filter: &[f64], fside: usize) -> Vec<f64> {
    let out = side - fside + 1;
    let mut y = vec![0.0; out * out];
    for oy in 0..out {
        for ox in 0..out {
            let mut s = 0.0;
            for fy in 0..fside {
                for fx in 0..fside {
                    s += filter[fy * fside + fx] * image[(oy + fy) * side + ox + fx];
                }
            }
            y[oy * out + ox] = s;
        }
    }
    y
}

pub fn column_moments(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (mean, cov) = diffusion_density::numerics::sample_moments(m);
    let var = (0..m.cols()).map(|i| cov[(i, i)]).collect();
    (mean, var)
}
