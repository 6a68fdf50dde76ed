//! Parameter containers and differentiable building blocks.
//!
//! Every layer follows the same protocol: `forward` returns the output plus a
//! cache, and `backward` consumes that cache together with the upstream
//! gradient, accumulates parameter gradients into [`Param::grad`], and returns
//! the gradient with respect to the layer input. Tensors are per-sample
//! `rows × features` matrices in `f64`.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(Array2::from_elem((rows, cols), v))
    }

    pub fn trunc_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        Self::new(trunc_normal(rows, cols, std, rng))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Normal(0, std) truncated to ±2·std by rejection.
pub fn trunc_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std must be positive");
    Array2::from_shape_fn((rows, cols), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Hierarchical parameter traversal. Names are dot-joined paths such as
/// `encoder.blocks.0.attn.qkv.weight`.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    /// `in × out`
    pub weight: Param,
    /// `1 × out`
    pub bias: Param,
}

pub struct LinearCache {
    input: Array2<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::trunc_normal(fan_in, fan_out, INIT_STD, rng),
            bias: Param::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Param::zeros(fan_in, fan_out),
            bias: Param::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value) + &self.bias.value
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, LinearCache) {
        let y = self.apply(&x);
        (y, LinearCache { input: x })
    }

    pub fn backward(&mut self, cache: LinearCache, dy: &Array2<f64>) -> Array2<f64> {
        self.weight.grad += &cache.input.t().dot(dy);
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.value.t())
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(1, dim, 1.0),
            beta: Param::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            *s = is;
        }
        let y = &normalized * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&mut self, cache: LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let LayerNormCache { normalized, inv_std } = cache;
        self.gamma.grad += &(dy * &normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma.value;
        let n = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), is) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(normalized.rows())
            .zip(inv_std.iter())
        {
            let mean_g = g.sum() / n;
            let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                *o = is * (gi - mean_g - xi * mean_gx);
            });
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }
}

// ---------------------------------------------------------------------------

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    fc1: LinearCache,
    pre_act: Array2<f64>,
    fc2: LinearCache,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, out, rng),
        }
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let (pre_act, fc1) = self.fc1.forward(x);
        let act = pre_act.mapv(gelu);
        let (y, fc2) = self.fc2.forward(act);
        (y, MlpCache { fc1, pre_act, fc2 })
    }

    pub fn backward(&mut self, cache: MlpCache, dy: &Array2<f64>) -> Array2<f64> {
        let dact = self.fc2.backward(cache.fc2, dy);
        let dpre = Zip::from(&dact)
            .and(&cache.pre_act)
            .map_collect(|&g, &x| g * gelu_grad(x));
        self.fc1.backward(cache.fc1, &dpre)
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Numerically stable softmax along each row, in place.
pub fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}
