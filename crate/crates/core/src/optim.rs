//! Adam optimizer over a flat parameter list.

use serde::{Deserialize, Serialize};

use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Classic GAN setting.
    pub fn gan(lr: f64) -> Self {
        Self { lr, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }

    pub fn standard(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state; moment buffers follow the model's canonical
/// parameter order and are part of training checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, param_shapes: &[Vec<usize>]) -> Self {
        Self {
            config,
            step_count: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    /// One update. `grads[i]` may be `None` (parameter untouched this step);
    /// its moments still decay so resumed runs match uninterrupted ones.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[Option<&Tensor<F>>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/param count mismatch");
        assert_eq!(params.len(), grads.len());
        self.step_count += 1;
        let b1 = c::<F>(self.config.beta1);
        let b2 = c::<F>(self.config.beta2);
        let lr = c::<F>(self.config.lr);
        let eps = c::<F>(self.config.eps);
        let t = self.step_count as i32;
        let bias1 = F::one() - b1.powi(t);
        let bias2 = F::one() - b2.powi(t);

        for i in 0..params.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            match grads[i] {
                Some(g) => {
                    let g = g.data();
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                        let mhat = m[j] / bias1;
                        let vhat = v[j] / bias2;
                        p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                None => {
                    for j in 0..p.len() {
                        m[j] = b1 * m[j];
                        v[j] = b2 * v[j];
                        let mhat = m[j] / bias1;
                        let vhat = v[j] / bias2;
                        p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut x = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::standard(0.1), &[vec![1]]);
        for _ in 0..200 {
            let g = Tensor::new(vec![1], vec![2.0 * (x.data()[0] - 3.0)]).unwrap();
            opt.step(&mut [&mut x], &[Some(&g)]);
        }
        assert!((x.data()[0] - 3.0).abs() < 1e-2, "x = {}", x.data()[0]);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut x = Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap();
            let mut opt = Adam::new(AdamConfig::gan(2e-4), &[vec![2]]);
            for i in 0..50 {
                let g = Tensor::new(vec![2], vec![x.data()[0] * 0.3 + i as f32 * 0.01, -x.data()[1]]).unwrap();
                opt.step(&mut [&mut x], &[Some(&g)]);
            }
            x.to_le_bytes()
        };
        assert_eq!(run(), run());
    }
}
