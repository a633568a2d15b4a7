//! Sparse weight-sharing ReLU networks.
//!
//! A hidden layer maps `a ↦ ρ(Σ_j R_j (W Q_j a + b))`, where each replica `j`
//! is a pair of permutations `(Q_j, R_j)` and the block `(W, b)` is shared by
//! all replicas. The output layer is a plain affine map `W_L a + b_L`. With one
//! identity replica per layer this is an ordinary (sparse) MLP.
//!
//! Permutations are stored as index arrays; applying one is a gather.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{Matrix, Rng};

/// Bijection on `0..n`, acting on vectors as `(P x)_i = x[map[i]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
    identity: bool,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &m in &map {
            if m >= n || seen[m] {
                return Err(Error::InvalidSize(format!("{map:?} is not a permutation")));
            }
            seen[m] = true;
        }
        let identity = map.iter().enumerate().all(|(i, &m)| i == m);
        Ok(Self { map, identity })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).collect(),
            identity: true,
        }
    }

    /// Exchanges positions `a` and `b`.
    pub fn transposition(n: usize, a: usize, b: usize) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        map.swap(a, b);
        Self { identity: a == b, map }
    }

    pub fn random(n: usize, rng: &mut Rng) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut map);
        Self::new(map).expect("shuffle yields a bijection")
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        Self {
            map: inv,
            identity: self.identity,
        }
    }

    /// `out = P x`
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, &m) in out.iter_mut().zip(&self.map) {
            *o = x[m];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }

    /// `out += Pᵀ y`
    pub fn add_transposed(&self, y: &[f64], out: &mut [f64]) {
        for (&yi, &m) in y.iter().zip(&self.map) {
            out[m] += yi;
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        let n = self.len();
        let mut p = Matrix::zeros(n, n);
        for (i, &m) in self.map.iter().enumerate() {
            p[(i, m)] = 1.0;
        }
        p
    }
}

/// One `(Q, R)` pair of a hidden layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Replica {
    pub q: Permutation,
    pub r: Permutation,
}

impl Replica {
    pub fn identity(d_in: usize, d_out: usize) -> Self {
        Self {
            q: Permutation::identity(d_in),
            r: Permutation::identity(d_out),
        }
    }
}

/// The network class: depth, widths, replica permutations, structural zero
/// pattern, sparsity budget `s` and magnitude bound `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct WsnnArchitecture {
    widths: Vec<usize>,
    replicas: Vec<Vec<Replica>>,
    weight_masks: Vec<Option<Vec<bool>>>,
    bias_masks: Vec<Option<Vec<bool>>>,
    sparsity: usize,
    bound: f64,
}

impl WsnnArchitecture {
    /// `widths = (d_1, …, d_{L+1})`, `replicas[i]` for hidden layers `i < L-1`.
    pub fn new(widths: Vec<usize>, replicas: Vec<Vec<Replica>>, sparsity: usize, bound: f64) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidSize(format!(
                "depth must be at least 2, got widths {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidSize("zero layer width".into()));
        }
        let depth = widths.len() - 1;
        check_dim(depth - 1, replicas.len())?;
        for (i, reps) in replicas.iter().enumerate() {
            if reps.is_empty() {
                return Err(Error::InvalidSize(format!("layer {i} has no replicas")));
            }
            for rep in reps {
                check_dim(widths[i], rep.q.len())?;
                check_dim(widths[i + 1], rep.r.len())?;
            }
        }
        if sparsity == 0 {
            return Err(Error::InvalidSize("sparsity budget must be at least 1".into()));
        }
        if !(bound > 0.0) {
            return Err(Error::InvalidSize(format!(
                "magnitude bound must be positive, got {bound}"
            )));
        }
        Ok(Self {
            weight_masks: vec![None; depth],
            bias_masks: vec![None; depth],
            widths,
            replicas,
            sparsity,
            bound,
        })
    }

    /// Fully connected network with one identity replica per layer; the
    /// sparsity budget is set to the parameter count.
    pub fn dense(widths: &[usize], bound: f64) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidSize(format!(
                "depth must be at least 2, got widths {widths:?}"
            )));
        }
        let replicas = (0..widths.len() - 2)
            .map(|i| vec![Replica::identity(widths[i], widths[i + 1])])
            .collect();
        let count: usize = widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        Self::new(widths.to_vec(), replicas, count, bound)
    }

    /// Restricts layer `layer` to the free weight entries flagged in `mask`
    /// (row-major, `d_{i+1} × d_i`).
    pub fn with_weight_mask(mut self, layer: usize, mask: Vec<bool>) -> Result<Self> {
        check_dim(self.widths[layer + 1] * self.widths[layer], mask.len())?;
        self.weight_masks[layer] = Some(mask);
        Ok(self)
    }

    pub fn with_bias_mask(mut self, layer: usize, mask: Vec<bool>) -> Result<Self> {
        check_dim(self.widths[layer + 1], mask.len())?;
        self.bias_masks[layer] = Some(mask);
        Ok(self)
    }

    pub fn with_sparsity(mut self, sparsity: usize) -> Self {
        self.sparsity = sparsity.max(1);
        self
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    /// Number of affine layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.depth()]
    }

    pub fn replicas(&self, layer: usize) -> &[Replica] {
        &self.replicas[layer]
    }

    pub fn replica_counts(&self) -> Vec<usize> {
        self.replicas.iter().map(Vec::len).collect()
    }

    pub fn sparsity(&self) -> usize {
        self.sparsity
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn weight_mask(&self, layer: usize) -> Option<&[bool]> {
        self.weight_masks[layer].as_deref()
    }

    pub fn bias_mask(&self, layer: usize) -> Option<&[bool]> {
        self.bias_masks[layer].as_deref()
    }

    /// Count of trainable (structurally nonzero) entries.
    pub fn free_parameter_count(&self) -> usize {
        (0..self.depth())
            .map(|i| {
                let w = self.widths[i + 1] * self.widths[i];
                let b = self.widths[i + 1];
                self.weight_masks[i]
                    .as_ref()
                    .map_or(w, |m| m.iter().filter(|x| **x).count())
                    + self.bias_masks[i]
                        .as_ref()
                        .map_or(b, |m| m.iter().filter(|x| **x).count())
            })
            .sum()
    }

    /// Effective dense weight `Σ_j R_j W Q_j` and bias `Σ_j R_j b` of a layer.
    pub fn materialize_layer(&self, layer: usize, params: &WsnnParams) -> (Matrix, Vec<f64>) {
        let w = &params.weights[layer];
        let b = &params.biases[layer];
        if layer + 1 == self.depth() {
            return (w.clone(), b.clone());
        }
        let mut dense = Matrix::zeros(w.rows(), w.cols());
        let mut bias = vec![0.0; b.len()];
        for rep in &self.replicas[layer] {
            let term = rep
                .r
                .to_matrix()
                .matmul(&w.matmul(&rep.q.to_matrix()).expect("shapes"))
                .expect("shapes");
            dense = dense.add(&term).expect("shapes");
            let rb = rep.r.apply(b);
            bias.iter_mut().zip(rb).for_each(|(x, y)| *x += y);
        }
        (dense, bias)
    }

    fn check_params(&self, params: &WsnnParams) -> Result<()> {
        check_dim(self.depth(), params.weights.len())?;
        check_dim(self.depth(), params.biases.len())?;
        for i in 0..self.depth() {
            check_dim(self.widths[i + 1], params.weights[i].rows())?;
            check_dim(self.widths[i], params.weights[i].cols())?;
            check_dim(self.widths[i + 1], params.biases[i].len())?;
        }
        Ok(())
    }
}

/// Trainable weights `W_i` (`d_{i+1} × d_i`) and biases `b_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct WsnnParams {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl WsnnParams {
    pub fn zeros(arch: &WsnnArchitecture) -> Self {
        let w = arch.widths();
        Self {
            weights: w.windows(2).map(|p| Matrix::zeros(p[1], p[0])).collect(),
            biases: w[1..].iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    /// He-scaled normal weights (variance `2 / fan_in`), zero biases, masked
    /// entries left at zero.
    pub fn he_init(arch: &WsnnArchitecture, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(arch);
        for (i, w) in p.weights.iter_mut().enumerate() {
            let scale = (2.0 / w.cols() as f64).sqrt();
            let mask = arch.weight_mask(i);
            for (k, v) in w.as_mut_slice().iter_mut().enumerate() {
                let z = rng.normal();
                if mask.is_none_or(|m| m[k]) {
                    *v = scale * z;
                }
            }
        }
        p
    }

    pub fn num_values(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// All value buffers in layer order: `W_1, b_1, W_2, b_2, …`.
    pub fn buffers(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.buffers().flatten().copied().collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.num_values(), flat.len())?;
        let mut it = flat.iter();
        for buf in self.buffers_mut() {
            buf.iter_mut().for_each(|v| *v = *it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.buffers_mut().for_each(|b| b.iter_mut().for_each(|v| *v = 0.0));
    }

    pub fn scale(&mut self, s: f64) {
        self.buffers_mut().for_each(|b| b.iter_mut().for_each(|v| *v *= s));
    }

    pub fn nnz(&self) -> usize {
        self.buffers().map(|b| b.iter().filter(|v| **v != 0.0).count()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.buffers().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Checks `max |entry| ≤ M` and `nnz ≤ s`.
    pub fn check_constraints(&self, arch: &WsnnArchitecture) -> Result<()> {
        arch.check_params(self)?;
        if self.max_abs() > arch.bound() {
            return Err(Error::PreconditionViolated(format!(
                "max entry {} exceeds bound {}",
                self.max_abs(),
                arch.bound()
            )));
        }
        if self.nnz() > arch.sparsity() {
            return Err(Error::PreconditionViolated(format!(
                "{} nonzero entries exceed sparsity budget {}",
                self.nnz(),
                arch.sparsity()
            )));
        }
        Ok(())
    }

    /// Zeroes every entry the architecture marks as structurally absent.
    pub fn apply_masks(&mut self, arch: &WsnnArchitecture) {
        for i in 0..self.weights.len() {
            if let Some(mask) = arch.weight_mask(i) {
                for (v, &keep) in self.weights[i].as_mut_slice().iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
            if let Some(mask) = arch.bias_mask(i) {
                for (v, &keep) in self.biases[i].iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

/// Clips every entry into `[-bound, bound]`.
pub fn project_params(params: &WsnnParams, bound: f64) -> WsnnParams {
    let mut out = params.clone();
    out.buffers_mut()
        .for_each(|b| b.iter_mut().for_each(|v| *v = v.clamp(-bound, bound)));
    out
}

/// Layer inputs and ReLU activity recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `inputs[i]` is the input of layer `i`; `inputs[0]` is the network input.
    pub inputs: Vec<Vec<f64>>,
    /// `active[i][k]` is true when hidden unit `k` of layer `i` had positive
    /// pre-activation (the derivative at exactly 0 is taken as 0).
    pub active: Vec<Vec<bool>>,
    pub output: Vec<f64>,
}

fn affine_into(w: &Matrix, x: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = w.row(r);
        let mut s = bias.map_or(0.0, |b| b[r]);
        for (a, b) in row.iter().zip(x) {
            s += a * b;
        }
        *o = s;
    }
}

/// Pre-activation of hidden layer `i`: `Σ_j R_j (W Q_j x + b)`.
fn shared_preactivation(reps: &[Replica], w: &Matrix, b: Option<&[f64]>, x: &[f64], out: &mut [f64]) {
    if let [rep] = reps {
        if rep.q.is_identity() && rep.r.is_identity() {
            affine_into(w, x, b, out);
            return;
        }
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut qx = vec![0.0; x.len()];
    let mut tmp = vec![0.0; out.len()];
    for rep in reps {
        rep.q.apply_into(x, &mut qx);
        affine_into(w, &qx, b, &mut tmp);
        for (o, &m) in out.iter_mut().zip(rep.r.as_slice()) {
            *o += tmp[m];
        }
    }
}

pub fn forward_trace(arch: &WsnnArchitecture, params: &WsnnParams, x: &[f64]) -> Result<ForwardTrace> {
    arch.check_params(params)?;
    check_dim(arch.input_dim(), x.len())?;
    let depth = arch.depth();
    let mut inputs = Vec::with_capacity(depth);
    let mut active = Vec::with_capacity(depth - 1);
    let mut a = x.to_vec();
    for i in 0..depth - 1 {
        let mut pre = vec![0.0; arch.widths[i + 1]];
        shared_preactivation(
            &arch.replicas[i],
            &params.weights[i],
            Some(&params.biases[i]),
            &a,
            &mut pre,
        );
        let mask: Vec<bool> = pre.iter().map(|v| *v > 0.0).collect();
        pre.iter_mut().for_each(|v| *v = v.max(0.0));
        inputs.push(std::mem::replace(&mut a, pre));
        active.push(mask);
    }
    let mut output = vec![0.0; arch.output_dim()];
    affine_into(
        &params.weights[depth - 1],
        &a,
        Some(&params.biases[depth - 1]),
        &mut output,
    );
    inputs.push(a);
    Ok(ForwardTrace { inputs, active, output })
}

pub fn forward(arch: &WsnnArchitecture, params: &WsnnParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_trace(arch, params, x)?.output)
}

/// Reverse pass over a recorded trace. Parameter gradients are added into
/// `grads`; the gradient with respect to the network input is returned.
/// With `with_bias = false` bias gradients are left untouched (used for
/// the bias-free tangent network).
pub fn backward_trace(
    arch: &WsnnArchitecture,
    params: &WsnnParams,
    trace: &ForwardTrace,
    grad_output: &[f64],
    grads: &mut WsnnParams,
    with_bias: bool,
) -> Result<Vec<f64>> {
    check_dim(arch.output_dim(), grad_output.len())?;
    let depth = arch.depth();
    let last = depth - 1;
    // output layer
    let a = &trace.inputs[last];
    {
        let gw = &mut grads.weights[last];
        for (r, &g) in grad_output.iter().enumerate() {
            if g != 0.0 {
                for (dst, &ai) in gw.row_mut(r).iter_mut().zip(a) {
                    *dst += g * ai;
                }
            }
        }
        if with_bias {
            grads.biases[last]
                .iter_mut()
                .zip(grad_output)
                .for_each(|(d, g)| *d += g);
        }
    }
    let mut delta = params.weights[last].matvec_t(grad_output)?;
    for i in (0..last).rev() {
        delta.iter_mut().zip(&trace.active[i]).for_each(|(d, &on)| {
            if !on {
                *d = 0.0
            }
        });
        let a = &trace.inputs[i];
        let w = &params.weights[i];
        let mut grad_in = vec![0.0; a.len()];
        let mut rt_delta = vec![0.0; delta.len()];
        let mut qa = vec![0.0; a.len()];
        for rep in &arch.replicas[i] {
            rt_delta.iter_mut().for_each(|v| *v = 0.0);
            rep.r.add_transposed(&delta, &mut rt_delta);
            rep.q.apply_into(a, &mut qa);
            let gw = &mut grads.weights[i];
            for (r, &g) in rt_delta.iter().enumerate() {
                if g != 0.0 {
                    for (dst, &ai) in gw.row_mut(r).iter_mut().zip(&qa) {
                        *dst += g * ai;
                    }
                }
            }
            if with_bias {
                grads.biases[i].iter_mut().zip(&rt_delta).for_each(|(d, g)| *d += g);
            }
            let wt = w.matvec_t(&rt_delta)?;
            rep.q.add_transposed(&wt, &mut grad_in);
        }
        delta = grad_in;
    }
    Ok(delta)
}

/// Gradients of `⟨grad_output, f(x)⟩` with respect to parameters and input.
pub fn backward(
    arch: &WsnnArchitecture,
    params: &WsnnParams,
    x: &[f64],
    grad_output: &[f64],
) -> Result<(WsnnParams, Vec<f64>)> {
    let trace = forward_trace(arch, params, x)?;
    let mut grads = WsnnParams::zeros(arch);
    let gi = backward_trace(arch, params, &trace, grad_output, &mut grads, true)?;
    grads.apply_masks(arch);
    Ok((grads, gi))
}

/// Directional derivative `J(x)·v` of the network at a recorded trace,
/// returned as a trace of the bias-free linearised network.
pub fn tangent_trace(
    arch: &WsnnArchitecture,
    params: &WsnnParams,
    trace: &ForwardTrace,
    v: &[f64],
) -> Result<ForwardTrace> {
    check_dim(arch.input_dim(), v.len())?;
    let depth = arch.depth();
    let mut inputs = Vec::with_capacity(depth);
    let mut u = v.to_vec();
    for i in 0..depth - 1 {
        let mut pre = vec![0.0; arch.widths[i + 1]];
        shared_preactivation(&arch.replicas[i], &params.weights[i], None, &u, &mut pre);
        pre.iter_mut().zip(&trace.active[i]).for_each(|(p, &on)| {
            if !on {
                *p = 0.0
            }
        });
        inputs.push(std::mem::replace(&mut u, pre));
    }
    let mut output = vec![0.0; arch.output_dim()];
    affine_into(&params.weights[depth - 1], &u, None, &mut output);
    inputs.push(u);
    Ok(ForwardTrace {
        inputs,
        active: trace.active.clone(),
        output,
    })
}

/// `Σ_{k<coords} ∂f_k/∂x_k` at a recorded trace, computed with one reverse
/// pass per coordinate.
pub fn jacobian_trace(
    arch: &WsnnArchitecture,
    params: &WsnnParams,
    trace: &ForwardTrace,
    coords: usize,
) -> Result<f64> {
    let mut scratch = WsnnParams::zeros(arch);
    let mut e = vec![0.0; arch.output_dim()];
    let mut total = 0.0;
    for k in 0..coords {
        e[k] = 1.0;
        let gi = backward_trace(arch, params, trace, &e, &mut scratch, false)?;
        total += gi[k];
        e[k] = 0.0;
    }
    Ok(total)
}

/// Adds `scale · ∇_θ Σ_{k<coords} ∂f_k/∂x_k` into `grads`. Activation
/// patterns are held fixed (their derivative vanishes almost everywhere), so
/// each diagonal entry is a multilinear function of the weights and biases
/// drop out.
pub fn jacobian_trace_param_grad(
    arch: &WsnnArchitecture,
    params: &WsnnParams,
    trace: &ForwardTrace,
    coords: usize,
    scale: f64,
    grads: &mut WsnnParams,
) -> Result<()> {
    let mut e_in = vec![0.0; arch.input_dim()];
    let mut e_out = vec![0.0; arch.output_dim()];
    for k in 0..coords {
        e_in[k] = 1.0;
        e_out[k] = scale;
        let tangent = tangent_trace(arch, params, trace, &e_in)?;
        backward_trace(arch, params, &tangent, &e_out, grads, false)?;
        e_in[k] = 0.0;
        e_out[k] = 0.0;
    }
    Ok(())
}

/// Layout of a 2-D valid convolution expressed as one weight-sharing layer.
#[derive(Clone, Debug)]
pub struct ConvLayout {
    pub input_side: usize,
    pub filter_side: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// One `(Q, R)` pair per output pixel.
    pub replicas: Vec<Replica>,
    /// Free entries of the shared `d_out × d_in` template: first row, first
    /// `filter_side²` columns.
    pub weight_mask: Vec<bool>,
    pub bias_mask: Vec<bool>,
}

/// Expresses the valid cross-correlation of an `input_side²` image with an
/// `filter_side²` filter as `Σ_j R_j W Q_j`, where `W` holds the filter in
/// its first row, `Q_j` gathers the receptive field of output pixel `j` into
/// the leading positions and `R_j` swaps rows `0` and `j`.
pub fn conv_as_wsnn(input_side: usize, filter_side: usize) -> Result<ConvLayout> {
    if filter_side == 0 || filter_side > input_side {
        return Err(Error::InvalidSize(format!(
            "filter side {filter_side} must be in 1..={input_side}"
        )));
    }
    let out_side = input_side - filter_side + 1;
    let d_in = input_side * input_side;
    let d_out = out_side * out_side;
    let taps = filter_side * filter_side;
    let mut replicas = Vec::with_capacity(d_out);
    for oy in 0..out_side {
        for ox in 0..out_side {
            let j = oy * out_side + ox;
            let mut map = Vec::with_capacity(d_in);
            let mut used = vec![false; d_in];
            for fy in 0..filter_side {
                for fx in 0..filter_side {
                    let pix = (oy + fy) * input_side + (ox + fx);
                    map.push(pix);
                    used[pix] = true;
                }
            }
            map.extend((0..d_in).filter(|p| !used[*p]));
            replicas.push(Replica {
                q: Permutation::new(map)?,
                r: Permutation::transposition(d_out, 0, j),
            });
        }
    }
    let mut weight_mask = vec![false; d_out * d_in];
    weight_mask[..taps].iter_mut().for_each(|m| *m = true);
    let mut bias_mask = vec![false; d_out];
    bias_mask[0] = true;
    Ok(ConvLayout {
        input_side,
        filter_side,
        d_in,
        d_out,
        replicas,
        weight_mask,
        bias_mask,
    })
}

impl ConvLayout {
    pub fn replica_count(&self) -> usize {
        self.replicas.len()
    }

    /// Shared template `W` holding the row-major filter in its first row.
    pub fn weight_template(&self, filter: &[f64]) -> Result<Matrix> {
        check_dim(self.filter_side * self.filter_side, filter.len())?;
        let mut w = Matrix::zeros(self.d_out, self.d_in);
        w.row_mut(0)[..filter.len()].copy_from_slice(filter);
        Ok(w)
    }

    /// Two-layer network: the convolution as hidden layer followed by a
    /// dense output layer of width `d_out_final`.
    pub fn architecture(&self, d_out_final: usize, bound: f64) -> Result<WsnnArchitecture> {
        let taps = self.filter_side * self.filter_side;
        let sparsity = taps + 1 + d_out_final * self.d_out + d_out_final;
        WsnnArchitecture::new(
            vec![self.d_in, self.d_out, d_out_final],
            vec![self.replicas.clone()],
            sparsity,
            bound,
        )?
        .with_weight_mask(0, self.weight_mask.clone())?
        .with_bias_mask(0, self.bias_mask.clone())
    }
}

/// Numerator `4 L² ‖d‖∞² {‖m‖∞ ‖d‖∞ (M ∨ 1)}^L (L + C + 2)` of the
/// covering-number bound.
pub fn covering_numerator(arch: &WsnnArchitecture, c: f64) -> f64 {
    let l = arch.depth() as f64;
    let d_max = *arch.widths().iter().max().expect("nonempty") as f64;
    let m_max = arch.replica_counts().into_iter().max().unwrap_or(1) as f64;
    4.0 * l * l * d_max * d_max * (m_max * d_max * arch.bound().max(1.0)).powi(arch.depth() as i32) * (l + c + 2.0)
}

/// `(s+1) log(numerator / δ)`: log covering number of the class at radius
/// `δ` in sup-norm over `[-C, C]^{d_1}`.
pub fn covering_log_bound(arch: &WsnnArchitecture, c: f64, delta: f64) -> f64 {
    let s1 = (arch.sparsity() + 1) as f64;
    let num = covering_numerator(arch, c);
    if num.is_finite() {
        s1 * (num / delta).ln()
    } else {
        let l = arch.depth() as f64;
        let d_max = (*arch.widths().iter().max().expect("nonempty") as f64).ln();
        let m_max = (arch.replica_counts().into_iter().max().unwrap_or(1) as f64).ln();
        let log_num = 4f64.ln()
            + 2.0 * l.ln()
            + 2.0 * d_max
            + l * (m_max + d_max + arch.bound().max(1.0).ln())
            + (l + c + 2.0).ln();
        s1 * (log_num - delta.ln())
    }
}

// Checkpoint format (text, one record per line, in this order):
//   wsnn-checkpoint 1
//   widths d_1 … d_{L+1}
//   replicas m_1 … m_{L-1}
//   sparsity s
//   bound M
//   perm <layer> <replica> q <idx…>      then the matching `r` line
//   wmask <layer> <0/1 string>           only for masked layers
//   bmask <layer> <0/1 string>
//   weight <layer> <rows> <cols> <row-major values…>
//   bias <layer> <len> <values…>
//   meta <key> <value>                   optional, repeated
//   end

/// Writes `arch` and `params` in the text checkpoint format.
pub fn write_checkpoint<W: Write>(
    mut out: W,
    arch: &WsnnArchitecture,
    params: &WsnnParams,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    arch.check_params(params)?;
    let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(" ");
    writeln!(out, "wsnn-checkpoint 1")?;
    writeln!(out, "widths {}", join(&mut arch.widths.iter().map(|v| v.to_string())))?;
    writeln!(
        out,
        "replicas {}",
        join(&mut arch.replica_counts().iter().map(|v| v.to_string()))
    )?;
    writeln!(out, "sparsity {}", arch.sparsity)?;
    writeln!(out, "bound {:?}", arch.bound)?;
    for (i, reps) in arch.replicas.iter().enumerate() {
        for (j, rep) in reps.iter().enumerate() {
            writeln!(
                out,
                "perm {i} {j} q {}",
                join(&mut rep.q.as_slice().iter().map(|v| v.to_string()))
            )?;
            writeln!(
                out,
                "perm {i} {j} r {}",
                join(&mut rep.r.as_slice().iter().map(|v| v.to_string()))
            )?;
        }
    }
    let bits = |m: &[bool]| m.iter().map(|b| if *b { '1' } else { '0' }).collect::<String>();
    for i in 0..arch.depth() {
        if let Some(m) = arch.weight_mask(i) {
            writeln!(out, "wmask {i} {}", bits(m))?;
        }
        if let Some(m) = arch.bias_mask(i) {
            writeln!(out, "bmask {i} {}", bits(m))?;
        }
    }
    for i in 0..arch.depth() {
        let w = &params.weights[i];
        writeln!(
            out,
            "weight {i} {} {} {}",
            w.rows(),
            w.cols(),
            join(&mut w.as_slice().iter().map(|v| format!("{v:?}")))
        )?;
        let b = &params.biases[i];
        writeln!(
            out,
            "bias {i} {} {}",
            b.len(),
            join(&mut b.iter().map(|v| format!("{v:?}")))
        )?;
    }
    for (k, v) in meta {
        writeln!(out, "meta {k} {v}")?;
    }
    writeln!(out, "end")?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<R: BufRead>(input: R) -> Result<(WsnnArchitecture, WsnnParams, BTreeMap<String, String>)> {
    fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
        s.parse()
            .map_err(|_| Error::Parse(format!("bad checkpoint token {s:?}")))
    }
    let bad = |what: &str| Error::Parse(format!("checkpoint: {what}"));
    let mut widths: Option<Vec<usize>> = None;
    let mut counts: Vec<usize> = Vec::new();
    let mut sparsity = None;
    let mut bound = None;
    let mut perms: BTreeMap<(usize, usize, bool), Permutation> = BTreeMap::new();
    let mut wmasks = BTreeMap::new();
    let mut bmasks = BTreeMap::new();
    let mut weights = BTreeMap::new();
    let mut biases = BTreeMap::new();
    let mut meta = BTreeMap::new();
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some("wsnn-checkpoint 1") {
        return Err(bad("missing header"));
    }
    let mut ended = false;
    for line in lines {
        let line = line?;
        let mut tok = line.split_whitespace();
        let Some(key) = tok.next() else { continue };
        let rest: Vec<&str> = tok.collect();
        let bits = |s: &str| s.chars().map(|c| c == '1').collect::<Vec<bool>>();
        match key {
            "widths" => widths = Some(rest.iter().map(|s| parse(s)).collect::<Result<_>>()?),
            "replicas" => counts = rest.iter().map(|s| parse(s)).collect::<Result<_>>()?,
            "sparsity" => sparsity = Some(parse::<usize>(rest.first().ok_or_else(|| bad("sparsity"))?)?),
            "bound" => bound = Some(parse::<f64>(rest.first().ok_or_else(|| bad("bound"))?)?),
            "perm" => {
                if rest.len() < 3 {
                    return Err(bad("perm record"));
                }
                let (i, j) = (parse(rest[0])?, parse(rest[1])?);
                let map = rest[3..].iter().map(|s| parse(s)).collect::<Result<Vec<usize>>>()?;
                perms.insert((i, j, rest[2] == "q"), Permutation::new(map)?);
            }
            "wmask" | "bmask" => {
                if rest.len() != 2 {
                    return Err(bad("mask record"));
                }
                let target = if key == "wmask" { &mut wmasks } else { &mut bmasks };
                target.insert(parse::<usize>(rest[0])?, bits(rest[1]));
            }
            "weight" => {
                if rest.len() < 3 {
                    return Err(bad("weight record"));
                }
                let (i, r, c) = (parse::<usize>(rest[0])?, parse(rest[1])?, parse(rest[2])?);
                let vals = rest[3..].iter().map(|s| parse(s)).collect::<Result<Vec<f64>>>()?;
                weights.insert(i, Matrix::from_vec(r, c, vals)?);
            }
            "bias" => {
                if rest.len() < 2 {
                    return Err(bad("bias record"));
                }
                let i = parse::<usize>(rest[0])?;
                let vals = rest[2..].iter().map(|s| parse(s)).collect::<Result<Vec<f64>>>()?;
                check_dim(parse(rest[1])?, vals.len())?;
                biases.insert(i, vals);
            }
            "meta" => {
                if let Some((k, v)) = rest.split_first() {
                    meta.insert(k.to_string(), v.join(" "));
                }
            }
            "end" => {
                ended = true;
                break;
            }
            other => return Err(bad(&format!("unknown record {other:?}"))),
        }
    }
    if !ended {
        return Err(bad("truncated (no end record)"));
    }
    let widths = widths.ok_or_else(|| bad("widths"))?;
    let mut replicas = Vec::new();
    for (i, &m) in counts.iter().enumerate() {
        let mut layer = Vec::with_capacity(m);
        for j in 0..m {
            let q = perms
                .remove(&(i, j, true))
                .ok_or_else(|| bad("missing q permutation"))?;
            let r = perms
                .remove(&(i, j, false))
                .ok_or_else(|| bad("missing r permutation"))?;
            layer.push(Replica { q, r });
        }
        replicas.push(layer);
    }
    let mut arch = WsnnArchitecture::new(
        widths,
        replicas,
        sparsity.ok_or_else(|| bad("sparsity"))?,
        bound.ok_or_else(|| bad("bound"))?,
    )?;
    for (i, m) in wmasks {
        arch = arch.with_weight_mask(i, m)?;
    }
    for (i, m) in bmasks {
        arch = arch.with_bias_mask(i, m)?;
    }
    let depth = arch.depth();
    let params = WsnnParams {
        weights: (0..depth)
            .map(|i| weights.remove(&i).ok_or_else(|| bad("missing weight")))
            .collect::<Result<_>>()?,
        biases: (0..depth)
            .map(|i| biases.remove(&i).ok_or_else(|| bad("missing bias")))
            .collect::<Result<_>>()?,
    };
    arch.check_params(&params)?;
    Ok((arch, params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_forward(arch: &WsnnArchitecture, params: &WsnnParams, x: &[f64]) -> Vec<f64> {
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

    fn random_arch(rng: &mut Rng) -> WsnnArchitecture {
        let depth = 2 + rng.below(3);
        let widths: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(8)).collect();
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
        WsnnArchitecture::new(widths, replicas, 10_000, 10.0).unwrap()
    }

    fn random_params(arch: &WsnnArchitecture, rng: &mut Rng) -> WsnnParams {
        let mut p = WsnnParams::he_init(arch, rng);
        for b in p.biases.iter_mut() {
            rng.fill_normal(b);
            b.iter_mut().for_each(|v| *v *= 0.3);
        }
        p
    }

    #[test]
    fn identity_replicas_match_plain_mlp() {
        let mut rng = Rng::new(1);
        let arch = WsnnArchitecture::dense(&[3, 5, 4, 2], 10.0).unwrap();
        let p = random_params(&arch, &mut rng);
        let x = [0.3, -1.2, 0.7];
        let mut a = x.to_vec();
        for i in 0..3 {
            let mut z = p.weights[i].matvec(&a).unwrap();
            z.iter_mut().zip(&p.biases[i]).for_each(|(z, b)| *z += b);
            if i < 2 {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        let out = forward(&arch, &p, &x).unwrap();
        for (u, v) in out.iter().zip(&a) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut rng = Rng::new(2);
        let arch = random_arch(&mut rng);
        let p = WsnnParams::zeros(&arch);
        let x: Vec<f64> = (0..arch.input_dim()).map(|_| rng.normal()).collect();
        assert!(forward(&arch, &p, &x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn replica_sum_matches_materialized_dense() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let arch = random_arch(&mut rng);
            let p = random_params(&arch, &mut rng);
            let x: Vec<f64> = (0..arch.input_dim()).map(|_| rng.normal()).collect();
            let a = forward(&arch, &p, &x).unwrap();
            let b = dense_forward(&arch, &p, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let arch = WsnnArchitecture::dense(&[3, 4, 2], 1.0).unwrap();
        let p = WsnnParams::zeros(&arch);
        assert!(matches!(
            forward(&arch, &p, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            backward(&arch, &p, &[1.0, 2.0, 3.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = Rng::new(4);
        let arch = random_arch(&mut rng);
        let p = random_params(&arch, &mut rng);
        let x: Vec<f64> = (0..arch.input_dim()).map(|_| rng.normal()).collect();
        let (g, gi) = backward(&arch, &p, &x, &vec![0.0; arch.output_dim()]).unwrap();
        assert_eq!(g.nnz(), 0);
        assert!(gi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_region_input_gradient_is_transpose() {
        // hidden layer holds the identity and a large bias keeps every unit active
        let arch = WsnnArchitecture::dense(&[2, 2, 2], 100.0).unwrap();
        let mut p = WsnnParams::zeros(&arch);
        p.weights[0] = Matrix::identity(2);
        p.biases[0] = vec![10.0, 10.0];
        p.weights[1] = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let g = [0.7, -1.1];
        let (_, gi) = backward(&arch, &p, &[0.2, -0.4], &g).unwrap();
        let expected = p.weights[1].matvec_t(&g).unwrap();
        assert_eq!(gi, expected);
    }

    #[test]
    fn permutation_inverse_round_trip() {
        let mut rng = Rng::new(5);
        for n in 1..20 {
            let p = Permutation::random(n, &mut rng);
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            assert_eq!(p.inverse().apply(&p.apply(&x)), x);
        }
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3, 1]).is_err());
    }

    #[test]
    fn nnz_matches_brute_force() {
        let mut rng = Rng::new(6);
        let arch = random_arch(&mut rng);
        let mut p = random_params(&arch, &mut rng);
        p.weights[0].as_mut_slice()[0] = 0.0;
        let brute = p.flatten().iter().filter(|v| **v != 0.0).count();
        assert_eq!(p.nnz(), brute);
    }

    #[test]
    fn projection_clips_and_is_idempotent() {
        let arch = WsnnArchitecture::dense(&[1, 2, 1], 1.0).unwrap();
        let mut p = WsnnParams::zeros(&arch);
        p.weights[0] = Matrix::from_rows(&[vec![2.0], vec![-0.5]]).unwrap();
        p.biases[1] = vec![-3.0];
        let once = project_params(&p, 1.0);
        assert_eq!(once.weights[0].as_slice(), &[1.0, -0.5]);
        assert_eq!(once.biases[1], vec![-1.0]);
        assert_eq!(project_params(&once, 1.0), once);
        let inside = project_params(&once, 5.0);
        assert_eq!(inside, once);
    }

    #[test]
    fn conv_layout_sizes() {
        let c = conv_as_wsnn(4, 2).unwrap();
        assert_eq!((c.d_in, c.d_out, c.replica_count()), (16, 9, 9));
        assert!(matches!(conv_as_wsnn(2, 3), Err(Error::InvalidSize(_))));
        assert!(matches!(conv_as_wsnn(2, 0), Err(Error::InvalidSize(_))));
    }

    #[test]
    fn unit_filter_scales_and_selects() {
        let c = conv_as_wsnn(3, 1).unwrap();
        let arch = c.architecture(9, 10.0).unwrap();
        let mut p = WsnnParams::zeros(&arch);
        p.weights[0] = c.weight_template(&[2.5]).unwrap();
        let (dense, _) = arch.materialize_layer(0, &p);
        assert_eq!(dense, Matrix::identity(9).scaled(2.5));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = Rng::new(8);
        let c = conv_as_wsnn(4, 2).unwrap();
        let arch = c.architecture(3, 4.0).unwrap();
        let mut p = WsnnParams::he_init(&arch, &mut rng);
        p.biases[0][0] = 0.125;
        let mut meta = BTreeMap::new();
        meta.insert("time_features".to_string(), "plain".to_string());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &arch, &p, &meta).unwrap();
        let (a2, p2, m2) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(a2, arch);
        assert_eq!(p2, p);
        assert_eq!(m2, meta);
        assert!(read_checkpoint(&buf[..buf.len() / 2]).is_err());
    }

    #[test]
    fn covering_bound_logarithm_laws() {
        let arch = WsnnArchitecture::new(
            vec![2, 3, 1],
            vec![vec![Replica::identity(2, 3), Replica::identity(2, 3)]],
            5,
            1.0,
        )
        .unwrap();
        let num = covering_numerator(&arch, 1.0);
        assert_eq!(covering_log_bound(&arch, 1.0, num), 0.0);
        let a = covering_log_bound(&arch, 1.0, 0.1);
        let b = covering_log_bound(&arch, 1.0, 0.05);
        assert!((b - a - 6.0 * 2f64.ln()).abs() < 1e-12);
        // 6 ln 259200, evaluated independently at 50 digits
        assert!((a - 74.792_131_460_761_54).abs() < 1e-11, "{a}");
    }
}
