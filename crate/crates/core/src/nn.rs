//! Dense ReLU networks with hand-written reverse mode.
//!
//! Hidden layers apply ReLU; the last layer is affine only. Weights are
//! stored row-major as `out x in`, so output `i` is
//! `bias[i] + sum_j weights[i * in + j] * x[j]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Floor on `|analytic| + |numeric|` in the relative error of
/// [`grad_check`]; keeps coordinates that are zero up to round-off from
/// dominating the report.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseNetSpec {
    layer_sizes: Vec<usize>,
}

impl DenseNetSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::domain("network needs input and output sizes"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::domain(format!("zero-width layer in {layer_sizes:?}")));
        }
        Ok(Self { layer_sizes })
    }

    /// `input -> hidden... -> output`, every hidden layer `width` wide.
    pub fn mlp(input: usize, width: usize, num_layers: usize, output: usize) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::domain("network needs at least one layer"));
        }
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(width, num_layers - 1));
        sizes.push(output);
        Self::new(sizes)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("spec has >= 2 sizes")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.n_in)
                .zip(&self.bias)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
        );
    }
}

/// Parameters of one network (weights and biases per layer).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    spec: DenseNetSpec,
    layers: Vec<Dense>,
}

/// Per-parameter gradients, shaped like the network they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layers: Vec<Dense>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds the input")
    }
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(format!("{what} contains non-finite values")))
    }
}

impl DenseNet {
    pub fn zeros(spec: DenseNetSpec) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1]))
            .collect();
        Self { spec, layers }
    }

    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))` per layer; zero biases.
    pub fn init<R: Rng + ?Sized>(spec: DenseNetSpec, rng: &mut R) -> Self {
        let mut net = Self::zeros(spec);
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..=limit);
            }
        }
        net
    }

    pub fn spec(&self) -> &DenseNetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn from_flat(spec: DenseNetSpec, flat: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(spec);
        net.set_params_flat(flat)?;
        Ok(net)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        check_finite("network input", input)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.n_out);
            layer.apply(&activations[l], &mut out);
            if l < last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            activations.push(out);
        }
        let output = activations.last().cloned().expect("at least one layer");
        Ok((output, ForwardCache { activations }))
    }

    /// Forward pass without keeping intermediate activations.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.0)
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        let sizes = &self.spec.layer_sizes;
        if cache.activations.len() != sizes.len()
            || cache
                .activations
                .iter()
                .zip(sizes)
                .any(|(a, &n)| a.len() != n)
        {
            return Err(Error::domain(
                "forward cache does not match this network's shape",
            ));
        }
        Ok(())
    }

    /// Adds `scale * dL/dtheta` into `grads` and returns `dL/dinput`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        grads: &mut GradientSet,
        scale: f64,
    ) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        if output_grad.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "output gradient has length {}, network output is {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.n_in != l.n_in || g.n_out != l.n_out)
        {
            return Err(Error::shape("gradient set does not match network"));
        }
        let last = self.layers.len() - 1;
        let mut delta = output_grad.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l < last {
                // ReLU gate: the stored post-activation is positive iff the unit was active
                for (d, &a) in delta.iter_mut().zip(&cache.activations[l + 1]) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &cache.activations[l];
            let g = &mut grads.layers[l];
            let mut dx = vec![0.0; layer.n_in];
            for (i, &di) in delta.iter().enumerate() {
                if di == 0.0 {
                    continue;
                }
                g.bias[i] += scale * di;
                let sd = scale * di;
                let row = i * layer.n_in;
                for ((gw, &xj), (w, dxj)) in g.weights[row..row + layer.n_in]
                    .iter_mut()
                    .zip(x)
                    .zip(layer.weights[row..row + layer.n_in].iter().zip(dx.iter_mut()))
                {
                    *gw += sd * xj;
                    *dxj += w * di;
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    /// Exact gradients for a loss whose derivative w.r.t. the network output
    /// is `output_grad`. Returns the parameter gradients and `dL/dinput`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
    ) -> Result<(GradientSet, Vec<f64>)> {
        let mut grads = GradientSet::zeros_like(self);
        let dx = self.backward_into(cache, output_grad, &mut grads, 1.0)?;
        Ok((grads, dx))
    }

    /// `theta <- theta - lr * grad`, in place.
    pub fn apply_gradient(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        grads.check_shape(self)?;
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        Ok(())
    }
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.n_in, l.n_out))
                .collect(),
        }
    }

    fn check_shape(&self, net: &DenseNet) -> Result<()> {
        if self.layers.len() != net.layers.len()
            || self
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.n_in != l.n_in || g.n_out != l.n_out)
        {
            return Err(Error::shape("gradient set does not match network"));
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`GradientSet::flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n: usize = self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum();
        if flat.len() != n {
            return Err(Error::shape(format!("expected {n} values, got {}", flat.len())));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|&v| v == 0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }
}

/// Gradient descent step producing a new parameter value.
pub fn sgd_step(params: &DenseNet, grads: &GradientSet, learning_rate: f64) -> Result<DenseNet> {
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(Error::domain(format!(
            "learning rate must be >= 0, got {learning_rate}"
        )));
    }
    let mut next = params.clone();
    next.apply_gradient(grads, learning_rate)?;
    Ok(next)
}

/// Moment estimates for the adaptive-moment optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new(net: &DenseNet) -> Self {
        Self {
            m: GradientSet::zeros_like(net),
            v: GradientSet::zeros_like(net),
            step: 0,
        }
    }

    pub fn update(
        &mut self,
        net: &mut DenseNet,
        grads: &GradientSet,
        lr: f64,
        hp: &AdamParams,
    ) -> Result<()> {
        grads.check_shape(net)?;
        self.step += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.step as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.step as i32);
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
            let gs = g.weights.iter().chain(&g.bias);
            let ms = m.weights.iter_mut().chain(m.bias.iter_mut());
            let vs = v.weights.iter_mut().chain(v.bias.iter_mut());
            for (((p, &gi), mi), vi) in params.zip(gs).zip(ms).zip(vs) {
                *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
                *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + hp.epsilon);
            }
        }
        Ok(())
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    check_finite("logits", logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `-log softmax(logits)[label]` and its gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::domain(format!(
            "label {label} outside [0, {})",
            logits.len()
        )));
    }
    let probs = softmax(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss` around `theta`.
///
/// The relative error of coordinate `i` is
/// `|a_i - n_i| / max(|a_i| + |n_i|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(theta: &[f64], analytic: &[f64], mut loss: F, tolerance: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic.len(), "theta and gradient lengths differ");
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
        tolerance,
        passed: true,
    };
    for i in 0..theta.len() {
        probe[i] = theta[i] + FD_STEP;
        let up = loss(&probe);
        probe[i] = theta[i] - FD_STEP;
        let down = loss(&probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let denom = (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if !rel.is_finite() || rel > report.max_relative_error {
            report.max_relative_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_relative_error < tolerance;
    report
}
