//! Parameter containers and the small layers the model is assembled from.

use std::sync::Mutex;

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, RunningStats, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

impl From<Mode> for BatchNormMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval,
        }
    }
}

/// Dotted parameter path.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns named parameters (and optionally batch-norm buffers).
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(String, &Mutex<RunningStats<T>>)) {}

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_grad(&self) {
        self.visit("", &mut |_, t| t.zero_grad());
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Mutex<RunningStats<T>>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit_buffers(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Mutex<RunningStats<T>>)) {
        if let Some(m) = self {
            m.visit_buffers(prefix, f);
        }
    }
}

/// A single free parameter tensor.
impl<T: Scalar> Module<T> for Tensor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(prefix.to_string(), self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(prefix.to_string(), self);
    }
}

/// `y = x·W + b` with `W: [in, out]`.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Truncated-normal (std 0.02) weights, zero bias.
    pub fn new(rng: &mut Rng, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::param([d_in, d_out], rng.trunc_normal_vec(d_in * d_out, 0.02)).expect("shape"),
            bias: Tensor::param([d_out], vec![T::zero(); d_out]).expect("shape"),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, Some(&self.bias))
    }

    pub fn d_in(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn d_out(&self) -> usize {
        self.weight.dim(1)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::ones([dim]).into_param(),
            bias: Tensor::zeros([dim]).into_param(),
            eps: T::lit(1e-6),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Batch norm over `[rows, channels]`; running statistics sit behind a lock
/// so the forward pass can take `&self`.
pub struct BatchNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub running: Mutex<RunningStats<T>>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gain: Tensor::ones([channels]).into_param(),
            bias: Tensor::zeros([channels]).into_param(),
            running: Mutex::new(RunningStats::new(channels)),
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut running = self.running.lock().expect("running stats lock");
        x.batch_norm(&self.gain, &self.bias, &mut running, mode.into(), self.momentum, self.eps)
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Mutex<RunningStats<T>>)) {
        f(join(prefix, "running"), &self.running);
    }
}

pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights (`std = √(2 / fan_in)`), zero bias.
    pub fn new(rng: &mut Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let fan_in = c_in * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv2d {
            weight: Tensor::param([c_out, c_in, kernel, kernel], rng.normal_vec(c_out * fan_in, std)).expect("shape"),
            bias: Tensor::param([c_out], vec![T::zero(); c_out]).expect("shape"),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding)
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim(0)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Finite-difference comparison for one named parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamGradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    /// (flat index, analytic, numeric) at the worst coordinate.
    pub worst: (usize, f64, f64),
}

/// Replaces the parameter called `name`; returns whether it was found.
pub fn replace_param<T: Scalar, M: Module<T> + ?Sized>(m: &mut M, name: &str, value: Tensor<T>) -> bool {
    let mut slot = Some(value);
    m.visit_mut("", &mut |n, t| {
        if n == name {
            if let Some(v) = slot.take() {
                *t = v;
            }
        }
    });
    slot.is_none()
}

/// Checks the stored gradients of `names` against central differences of
/// `loss` at a sample of coordinates per tensor: the largest-|gradient|
/// entry plus up to `per_tensor - 1` seeded random entries.
///
/// Gradients must already be populated by a backward pass of the same loss.
pub fn check_param_grads<M: Module<f64>>(
    m: &mut M,
    names: &[String],
    loss: &dyn Fn(&M) -> f64,
    per_tensor: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> crate::error::Result<Vec<ParamGradCheck>> {
    use crate::error::Error;
    use crate::tensor::gradcheck::relative_error;
    use crate::tensor::no_grad;

    let params: std::collections::HashMap<String, Tensor<f64>> = m.named_params().into_iter().collect();
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let p = params.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?.clone();
        let g = p.grad().ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let argmax = (0..g.len())
            .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()))
            .unwrap_or(0);
        let mut idx = vec![argmax];
        while idx.len() < per_tensor.min(g.len()) {
            let i = rng.below(g.len());
            if !idx.contains(&i) {
                idx.push(i);
            }
        }
        let mut worst = (0, 0.0, 0.0);
        let mut max_rel: f64 = -1.0;
        for &i in &idx {
            let mut eval = |delta: f64| {
                let mut d = p.data().to_vec();
                d[i] += delta;
                replace_param(m, name, p.with_data(d).expect("shape"));
                let _guard = no_grad();
                loss(m)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            replace_param(m, name, p.clone());
            let rel = relative_error(g[i], numeric, floor);
            if rel > max_rel {
                max_rel = rel;
                worst = (i, g[i], numeric);
            }
        }
        out.push(ParamGradCheck {
            name: name.clone(),
            checked: idx.len(),
            max_rel,
            worst,
        });
    }
    Ok(out)
}
