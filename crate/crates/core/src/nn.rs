//! Layer parameter containers and their tape bindings.
//!
//! A layer struct owns plain tensors. `bind` copies them onto a tape —
//! as trainable params or frozen leaves — and returns a handle that knows
//! how to apply the op. Binding order defines the canonical parameter
//! order used by optimizers and checkpoints, so every model keeps its
//! `bind`, `named_params`, and `params_mut` in the same sequence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Standard normal draw via Box-Muller; deterministic for a given stream.
pub fn normal<F: Scalar>(rng: &mut ChaCha8Rng, std: f64) -> F {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    c(z * std)
}

fn normal_tensor<F: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal(rng, std)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Weight init family. `He` for ReLU stacks trained from scratch,
/// `Gan` (N(0, 0.02)) for the translation networks.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    He,
    Gan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer<F> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
    pub spec: ConvSpec,
}

impl<F: Scalar> Conv2dLayer<F> {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = match init {
            Init::He => (2.0 / fan_in).sqrt(),
            Init::Gan => 0.02,
        };
        Self {
            w: normal_tensor(rng, vec![out_ch, in_ch, kernel, kernel], std),
            b: Tensor::zeros(vec![out_ch]),
            spec: ConvSpec { stride, pad },
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool, params: &mut Vec<Var>) -> BoundConv {
        let w = if trainable { tape.param(self.w.clone()) } else { tape.leaf(self.w.clone()) };
        let b = if trainable { tape.param(self.b.clone()) } else { tape.leaf(self.b.clone()) };
        if trainable {
            params.push(w);
            params.push(b);
        }
        BoundConv { w, b, spec: self.spec }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub w: Var,
    pub b: Var,
    pub spec: ConvSpec,
}

impl BoundConv {
    pub fn apply<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Var {
        tape.conv2d(x, self.w, self.b, self.spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<F> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> LinearLayer<F> {
    pub fn init(in_dim: usize, out_dim: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let std = match init {
            Init::He => (2.0 / in_dim as f64).sqrt(),
            Init::Gan => 0.02,
        };
        Self {
            w: normal_tensor(rng, vec![out_dim, in_dim], std),
            b: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool, params: &mut Vec<Var>) -> BoundLinear {
        let w = if trainable { tape.param(self.w.clone()) } else { tape.leaf(self.w.clone()) };
        let b = if trainable { tape.param(self.b.clone()) } else { tape.leaf(self.b.clone()) };
        if trainable {
            params.push(w);
            params.push(b);
        }
        BoundLinear { w, b }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn apply<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Var {
        tape.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNormLayer<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

impl<F: Scalar> InstanceNormLayer<F> {
    pub fn init(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], F::one()),
            beta: Tensor::zeros(vec![channels]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool, params: &mut Vec<Var>) -> BoundInstanceNorm {
        let gamma = if trainable { tape.param(self.gamma.clone()) } else { tape.leaf(self.gamma.clone()) };
        let beta = if trainable { tape.param(self.beta.clone()) } else { tape.leaf(self.beta.clone()) };
        if trainable {
            params.push(gamma);
            params.push(beta);
        }
        BoundInstanceNorm { gamma, beta }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundInstanceNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl BoundInstanceNorm {
    pub fn apply<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Var {
        tape.instance_norm(x, self.gamma, self.beta, c(1e-5))
    }
}

/// Collects `(name, tensor)` pairs in canonical order.
pub struct ParamCollector<'a, F> {
    prefix: String,
    out: Vec<(String, &'a Tensor<F>)>,
}

impl<'a, F> ParamCollector<'a, F> {
    pub fn new() -> Self {
        Self { prefix: String::new(), out: Vec::new() }
    }

    pub fn push(&mut self, name: &str, t: &'a Tensor<F>) {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.out.push((full, t));
    }

    pub fn scoped(&mut self, scope: &str, f: impl FnOnce(&mut Self)) {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() { scope.to_string() } else { format!("{saved}.{scope}") };
        f(self);
        self.prefix = saved;
    }

    pub fn finish(self) -> Vec<(String, &'a Tensor<F>)> {
        self.out
    }
}

impl<'a, F> Default for ParamCollector<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamId};

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut r1 = stream(5, StreamId::AcanInit);
        let mut r2 = stream(5, StreamId::AcanInit);
        let a: Conv2dLayer<f32> = Conv2dLayer::init(3, 8, 3, 1, 1, Init::He, &mut r1);
        let b: Conv2dLayer<f32> = Conv2dLayer::init(3, 8, 3, 1, 1, Init::He, &mut r2);
        assert_eq!(a.w, b.w);
        let c: Conv2dLayer<f32> = Conv2dLayer::init(3, 8, 3, 1, 1, Init::He, &mut r1);
        assert_ne!(a.w, c.w);
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = stream(11, StreamId::AcanInit);
        let xs: Vec<f64> = (0..20000).map(|_| normal::<f64>(&mut rng, 1.0)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
