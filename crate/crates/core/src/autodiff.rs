//! Tape-based reverse-mode autodiff.
//!
//! A `Tape` is an append-only arena of op nodes; `Var` is an index into it.
//! Ops are recorded in topological order by construction, so the backward
//! pass is a single reverse sweep with gradients accumulated in a fixed
//! order — results are bit-reproducible for a given graph.
//!
//! The op set is exactly what the models here need: convolutions, a few
//! pointwise nonlinearities, instance norm, pooling, and the loss heads.

use rayon::prelude::*;

use crate::linalg::{matmul, matmul_nt, matmul_tn};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// y = x * mul + add
    AffineConst {
        x: Var,
        mul: F,
    },
    Relu(Var),
    LeakyRelu(Var, F),
    Tanh(Var),
    Abs(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    UpsampleNearest2x(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        invstd: Vec<F>,
    },
    GlobalAvgPool(Var),
    ConcatCols(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        sumsq: Vec<F>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MeanAll(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Per-variable gradients produced by a backward sweep.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root with respect to `v`, if `v` required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires: bool) -> Var {
        self.nodes.push(Node { value, op, requires });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Constant input; gradients will not flow into it.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input (parameters, or any tensor under gradient test).
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let r = self.req(a) || self.req(b);
        self.push(t, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let r = self.req(a) || self.req(b);
        self.push(t, Op::Sub(a, b), r)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "hadamard shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let r = self.req(a) || self.req(b);
        self.push(t, Op::Hadamard(a, b), r)
    }

    /// `y = x * mul + add`, elementwise with constants.
    pub fn affine(&mut self, x: Var, mul: F, add: F) -> Var {
        let t = self.value(x).map(|v| v * mul + add);
        let r = self.req(x);
        self.push(t, Op::AffineConst { x, mul }, r)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let r = self.req(x);
        self.push(t, Op::Relu(x), r)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        let t = self.value(x).map(|v| if v > F::zero() { v } else { v * slope });
        let r = self.req(x);
        self.push(t, Op::LeakyRelu(x, slope), r)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        let r = self.req(x);
        self.push(t, Op::Tanh(x), r)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.abs());
        let r = self.req(x);
        self.push(t, Op::Abs(x), r)
    }

    /// 2-D convolution. `x: [N,IC,IH,IW]`, `w: [OC,IC,KH,KW]`, `b: [OC]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        assert_eq!(xs.len(), 4, "conv2d input must be 4-d");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-d");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (n, ic, ih, iw) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(self.value(b).shape(), &[oc], "conv2d bias shape");
        let oh = conv_out(ih, kh, spec);
        let ow = conv_out(iw, kw, spec);
        assert!(oh > 0 && ow > 0, "conv2d output collapsed to zero size");

        let cols = im2col(self.value(x), kh, kw, spec, oh, ow);
        let m = n * oh * ow;
        let kdim = ic * kh * kw;
        let y_mat = matmul_nt(&cols, self.value(w).data(), m, kdim, oc);

        let mut y = vec![F::zero(); n * oc * oh * ow];
        let bias = self.value(b).data().to_vec();
        let hw = oh * ow;
        y.par_chunks_mut(hw).enumerate().for_each(|(chunk, out)| {
            let nn = chunk / oc;
            let cc = chunk % oc;
            let base = nn * hw;
            for (p, o) in out.iter_mut().enumerate() {
                *o = y_mat[(base + p) * oc + cc] + bias[cc];
            }
        });
        let t = Tensor::new(vec![n, oc, oh, ow], y).unwrap();
        let r = self.req(x) || self.req(w) || self.req(b);
        self.push(t, Op::Conv2d { x, w, b, spec }, r)
    }

    /// Max pooling with kernel 3, stride 2, pad 1 (the stem's shape rule).
    pub fn maxpool2d_3x3s2(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (n, cch, ih, iw) = (xs[0], xs[1], xs[2], xs[3]);
        let spec = ConvSpec { stride: 2, pad: 1 };
        let oh = conv_out(ih, 3, spec);
        let ow = conv_out(iw, 3, spec);
        let xd = self.value(x).data();
        let mut y = vec![F::zero(); n * cch * oh * ow];
        let mut argmax = vec![0usize; y.len()];
        for nc in 0..n * cch {
            let in_base = nc * ih * iw;
            let out_base = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let yy = (oy * 2 + ky) as isize - 1;
                            let xx = (ox * 2 + kx) as isize - 1;
                            if yy >= 0 && yy < ih as isize && xx >= 0 && xx < iw as isize {
                                let idx = in_base + yy as usize * iw + xx as usize;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    y[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_idx;
                }
            }
        }
        let t = Tensor::new(vec![n, cch, oh, ow], y).unwrap();
        let r = self.req(x);
        self.push(t, Op::MaxPool2d { x, argmax }, r)
    }

    pub fn upsample_nearest_2x(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (n, cch, ih, iw) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.value(x).data();
        let (oh, ow) = (ih * 2, iw * 2);
        let mut y = vec![F::zero(); n * cch * oh * ow];
        for nc in 0..n * cch {
            for yy in 0..oh {
                for xx in 0..ow {
                    y[nc * oh * ow + yy * ow + xx] = xd[nc * ih * iw + (yy / 2) * iw + (xx / 2)];
                }
            }
        }
        let t = Tensor::new(vec![n, cch, oh, ow], y).unwrap();
        let r = self.req(x);
        self.push(t, Op::UpsampleNearest2x(x), r)
    }

    /// Per-sample, per-channel normalization with learned scale and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (n, cch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(self.value(gamma).shape(), &[cch]);
        assert_eq!(self.value(beta).shape(), &[cch]);
        let hw = h * w;
        let xd = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut mean = vec![F::zero(); n * cch];
        let mut invstd = vec![F::zero(); n * cch];
        let mut y = vec![F::zero(); xd.len()];
        let denom = c::<F>(hw as f64);
        for nc in 0..n * cch {
            let xs_slice = &xd[nc * hw..(nc + 1) * hw];
            let mu = xs_slice.iter().copied().sum::<F>() / denom;
            let var = xs_slice.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / denom;
            let is = (var + eps).sqrt().recip();
            mean[nc] = mu;
            invstd[nc] = is;
            let ch = nc % cch;
            for (o, &v) in y[nc * hw..(nc + 1) * hw].iter_mut().zip(xs_slice) {
                *o = g[ch] * (v - mu) * is + be[ch];
            }
        }
        let t = Tensor::new(xs, y).unwrap();
        let r = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(t, Op::InstanceNorm { x, gamma, beta, mean, invstd }, r)
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (n, cch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let denom = c::<F>(hw as f64);
        let xd = self.value(x).data();
        let mut y = vec![F::zero(); n * cch];
        for nc in 0..n * cch {
            y[nc] = xd[nc * hw..(nc + 1) * hw].iter().copied().sum::<F>() / denom;
        }
        let t = Tensor::new(vec![n, cch], y).unwrap();
        let r = self.req(x);
        self.push(t, Op::GlobalAvgPool(x), r)
    }

    /// Concatenates `[N,D_i]` inputs along the feature axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of zero inputs");
        let n = self.value(xs[0]).shape()[0];
        let mut total = 0usize;
        for &v in xs {
            let s = self.value(v).shape();
            assert_eq!(s.len(), 2, "concat_cols expects 2-d inputs");
            assert_eq!(s[0], n, "concat_cols batch mismatch");
            total += s[1];
        }
        let mut y = vec![F::zero(); n * total];
        let mut offset = 0usize;
        for &v in xs {
            let d = self.value(v).shape()[1];
            let data = self.value(v).data();
            for row in 0..n {
                y[row * total + offset..row * total + offset + d]
                    .copy_from_slice(&data[row * d..(row + 1) * d]);
            }
            offset += d;
        }
        let t = Tensor::new(vec![n, total], y).unwrap();
        let r = xs.iter().any(|&v| self.req(v));
        self.push(t, Op::ConcatCols(xs.to_vec()), r)
    }

    /// Row-wise `x / sqrt(sum(x^2) + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: F) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2);
        let (n, d) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut sumsq = vec![F::zero(); n];
        let mut y = vec![F::zero(); xd.len()];
        for row in 0..n {
            let s = xd[row * d..(row + 1) * d]
                .iter()
                .map(|&v| v * v)
                .sum::<F>()
                + eps;
            sumsq[row] = s;
            let scale = s.sqrt().recip();
            for (o, &v) in y[row * d..(row + 1) * d].iter_mut().zip(&xd[row * d..(row + 1) * d]) {
                *o = v * scale;
            }
        }
        let t = Tensor::new(xs, y).unwrap();
        let r = self.req(x);
        self.push(t, Op::L2NormalizeRows { x, sumsq }, r)
    }

    /// Affine layer: `x: [N,D]`, `w: [K,D]`, `b: [K]` -> `[N,K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(ws.len(), 2);
        assert_eq!(xs[1], ws[1], "linear dim mismatch");
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        assert_eq!(self.value(b).shape(), &[k]);
        let mut y = matmul_nt(self.value(x).data(), self.value(w).data(), n, d, k);
        let bias = self.value(b).data();
        for row in 0..n {
            for (o, &bv) in y[row * k..(row + 1) * k].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let t = Tensor::new(vec![n, k], y).unwrap();
        let r = self.req(x) || self.req(w) || self.req(b);
        self.push(t, Op::Linear { x, w, b }, r)
    }

    /// Mean over all elements -> `[1]`.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let len = self.value(x).len();
        let m = self.value(x).data().iter().copied().sum::<F>() / c::<F>(len as f64);
        let r = self.req(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), r)
    }

    /// Mean softmax cross-entropy of `logits: [N,K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let ls = self.value(logits).shape().to_vec();
        assert_eq!(ls.len(), 2);
        let (n, k) = (ls[0], ls[1]);
        assert_eq!(targets.len(), n, "one target class per row");
        let z = self.value(logits).data();
        let mut probs = vec![F::zero(); n * k];
        let mut total = F::zero();
        for row in 0..n {
            let zrow = &z[row * k..(row + 1) * k];
            let m = zrow.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut sum = F::zero();
            for (p, &v) in probs[row * k..(row + 1) * k].iter_mut().zip(zrow) {
                *p = (v - m).exp();
                sum += *p;
            }
            for p in probs[row * k..(row + 1) * k].iter_mut() {
                *p = *p / sum;
            }
            let t = targets[row];
            assert!(t < k, "target class out of range");
            let lse = m + sum.ln();
            total += lse - zrow[t];
        }
        let loss = total / c::<F>(n as f64);
        let r = self.req(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
            r,
        )
    }

    /// Weighted sum of scalar terms, accumulated in argument order.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Var {
        let mut total = F::zero();
        for &(v, w) in terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum expects scalar terms");
            total += self.value(v).item() * w;
        }
        let r = terms.iter().any(|&(v, _)| self.req(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), r)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, delta: Tensor<F>) {
        if !self.req(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn dispatch_backward(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.req(*a) {
                    let d = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(bv.data()).map(|(&gv, &x)| gv * x).collect(),
                    )
                    .unwrap();
                    self.accumulate(grads, *a, d);
                }
                if self.req(*b) {
                    let d = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect(),
                    )
                    .unwrap();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AffineConst { x, mul } => {
                self.accumulate(grads, *x, g.map(|v| v * *mul));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &x)| if x > F::zero() { gv } else { F::zero() })
                        .collect(),
                )
                .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &x)| if x > F::zero() { gv } else { gv * *slope })
                        .collect(),
                )
                .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let yv = &self.nodes[i].value;
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(yv.data())
                        .map(|(&gv, &y)| gv * (F::one() - y * y))
                        .collect(),
                )
                .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &x)| {
                            if x > F::zero() {
                                gv
                            } else if x < F::zero() {
                                -gv
                            } else {
                                F::zero()
                            }
                        })
                        .collect(),
                )
                .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d { x, w, b, spec } => {
                self.conv2d_backward(*x, *w, *b, *spec, g, grads);
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                let dxd = dx.data_mut();
                for (out_idx, &in_idx) in argmax.iter().enumerate() {
                    dxd[in_idx] += g.data()[out_idx];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::UpsampleNearest2x(x) => {
                let xs = self.value(*x).shape();
                let (n, cch, ih, iw) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (ih * 2, iw * 2);
                let mut dx = Tensor::zeros(xs.to_vec());
                let dxd = dx.data_mut();
                let gd = g.data();
                for nc in 0..n * cch {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            dxd[nc * ih * iw + (yy / 2) * iw + (xx / 2)] +=
                                gd[nc * oh * ow + yy * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::InstanceNorm { x, gamma, beta, mean, invstd } => {
                self.instance_norm_backward(*x, *gamma, *beta, mean, invstd, g, grads);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let (n, cch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                let scale = c::<F>(1.0 / hw as f64);
                let mut dx = Tensor::zeros(xs.to_vec());
                let dxd = dx.data_mut();
                let gd = g.data();
                for nc in 0..n * cch {
                    let gv = gd[nc] * scale;
                    for v in dxd[nc * hw..(nc + 1) * hw].iter_mut() {
                        *v = gv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let n = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0usize;
                for &p in parts {
                    let d = self.value(p).shape()[1];
                    if self.req(p) {
                        let mut dp = Tensor::zeros(vec![n, d]);
                        let dpd = dp.data_mut();
                        for row in 0..n {
                            dpd[row * d..(row + 1) * d].copy_from_slice(
                                &g.data()[row * total + offset..row * total + offset + d],
                            );
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += d;
                }
            }
            Op::L2NormalizeRows { x, sumsq } => {
                let xv = self.value(*x);
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let dxd = dx.data_mut();
                for row in 0..n {
                    let s = sumsq[row];
                    let s_inv_sqrt = s.sqrt().recip();
                    let s_inv_32 = s_inv_sqrt / s;
                    let xr = &xv.data()[row * d..(row + 1) * d];
                    let gr = &g.data()[row * d..(row + 1) * d];
                    let dot = xr.iter().zip(gr).map(|(&x, &gv)| x * gv).sum::<F>();
                    for ((o, &x), &gv) in dxd[row * d..(row + 1) * d].iter_mut().zip(xr).zip(gr) {
                        *o = gv * s_inv_sqrt - x * dot * s_inv_32;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, d, k) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.req(*x) {
                    let dx = matmul(g.data(), wv.data(), n, k, d);
                    self.accumulate(grads, *x, Tensor::new(vec![n, d], dx).unwrap());
                }
                if self.req(*w) {
                    let dw = matmul_tn(g.data(), xv.data(), n, k, d);
                    self.accumulate(grads, *w, Tensor::new(vec![k, d], dw).unwrap());
                }
                if self.req(*b) {
                    let mut db = vec![F::zero(); k];
                    for row in 0..n {
                        for (o, &gv) in db.iter_mut().zip(&g.data()[row * k..(row + 1) * k]) {
                            *o += gv;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![k], db).unwrap());
                }
            }
            Op::MeanAll(x) => {
                let len = self.value(*x).len();
                let gv = g.item() / c::<F>(len as f64);
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), gv));
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let ls = self.value(*logits).shape();
                let (n, k) = (ls[0], ls[1]);
                let scale = g.item() / c::<F>(n as f64);
                let mut dz = vec![F::zero(); n * k];
                for row in 0..n {
                    for col in 0..k {
                        let indicator = if col == targets[row] { F::one() } else { F::zero() };
                        dz[row * k + col] = (probs[row * k + col] - indicator) * scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![n, k], dz).unwrap());
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(g.item() * w));
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, ic, ih, iw) = {
            let s = xv.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (oc, kh, kw) = {
            let s = wv.shape();
            (s[0], s[2], s[3])
        };
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let m = n * oh * ow;
        let kdim = ic * kh * kw;
        let hw = oh * ow;

        // [N,OC,OH,OW] -> [M,OC]
        let gd = g.data();
        let mut g_mat = vec![F::zero(); m * oc];
        g_mat.par_chunks_mut(oc).enumerate().for_each(|(row, out)| {
            let nn = row / hw;
            let p = row % hw;
            for (cc, o) in out.iter_mut().enumerate() {
                *o = gd[(nn * oc + cc) * hw + p];
            }
        });

        if self.req(w) {
            let cols = im2col(xv, kh, kw, spec, oh, ow);
            let dw = matmul_tn(&g_mat, &cols, m, oc, kdim);
            self.accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
        }
        if self.req(b) {
            let mut db = vec![F::zero(); oc];
            for row in 0..m {
                for (o, &gv) in db.iter_mut().zip(&g_mat[row * oc..(row + 1) * oc]) {
                    *o += gv;
                }
            }
            self.accumulate(grads, b, Tensor::new(vec![oc], db).unwrap());
        }
        if self.req(x) {
            let dcols = matmul(&g_mat, wv.data(), m, oc, kdim);
            let dx = col2im(&dcols, n, ic, ih, iw, kh, kw, spec, oh, ow);
            self.accumulate(grads, x, dx);
        }
    }

    fn instance_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        invstd: &[F],
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, cch, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let denom = c::<F>(hw as f64);
        let gam = self.value(gamma).data();
        let gd = g.data();
        let xd = xv.data();

        if self.req(gamma) || self.req(beta) {
            let mut dgamma = vec![F::zero(); cch];
            let mut dbeta = vec![F::zero(); cch];
            for nc in 0..n * cch {
                let ch = nc % cch;
                let (mu, is) = (mean[nc], invstd[nc]);
                for p in 0..hw {
                    let gv = gd[nc * hw + p];
                    dbeta[ch] += gv;
                    dgamma[ch] += gv * (xd[nc * hw + p] - mu) * is;
                }
            }
            if self.req(gamma) {
                self.accumulate(grads, gamma, Tensor::new(vec![cch], dgamma).unwrap());
            }
            if self.req(beta) {
                self.accumulate(grads, beta, Tensor::new(vec![cch], dbeta).unwrap());
            }
        }

        if self.req(x) {
            let mut dx = Tensor::zeros(s.to_vec());
            let dxd = dx.data_mut();
            for nc in 0..n * cch {
                let ch = nc % cch;
                let (mu, is) = (mean[nc], invstd[nc]);
                let mut sum_dxhat = F::zero();
                let mut sum_dxhat_xhat = F::zero();
                for p in 0..hw {
                    let xhat = (xd[nc * hw + p] - mu) * is;
                    let dxhat = gd[nc * hw + p] * gam[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                let mean_dxhat = sum_dxhat / denom;
                let mean_dxhat_xhat = sum_dxhat_xhat / denom;
                for p in 0..hw {
                    let xhat = (xd[nc * hw + p] - mu) * is;
                    let dxhat = gd[nc * hw + p] * gam[ch];
                    dxd[nc * hw + p] = is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
            self.accumulate(grads, x, dx);
        }
    }
}

pub fn conv_out(input: usize, kernel: usize, spec: ConvSpec) -> usize {
    (input + 2 * spec.pad).saturating_sub(kernel) / spec.stride + 1
}

fn im2col<F: Scalar>(
    x: &Tensor<F>,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let s = x.shape();
    let (n, ic, ih, iw) = (s[0], s[1], s[2], s[3]);
    let kdim = ic * kh * kw;
    let xd = x.data();
    let mut cols = vec![F::zero(); n * oh * ow * kdim];
    cols.par_chunks_mut(kdim).enumerate().for_each(|(row, out)| {
        let nn = row / (oh * ow);
        let p = row % (oh * ow);
        let oy = p / ow;
        let ox = p % ow;
        let mut j = 0usize;
        for cc in 0..ic {
            let base = (nn * ic + cc) * ih * iw;
            for ky in 0..kh {
                let yy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                for kx in 0..kw {
                    let xx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if yy >= 0 && yy < ih as isize && xx >= 0 && xx < iw as isize {
                        out[j] = xd[base + yy as usize * iw + xx as usize];
                    }
                    j += 1;
                }
            }
        }
    });
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcols: &[F],
    n: usize,
    ic: usize,
    ih: usize,
    iw: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
) -> Tensor<F> {
    let kdim = ic * kh * kw;
    let mut dx = Tensor::zeros(vec![n, ic, ih, iw]);
    let plane = ic * ih * iw;
    let dxd = dx.data_mut();
    dxd.par_chunks_mut(plane).enumerate().for_each(|(nn, out)| {
        for p in 0..oh * ow {
            let row = nn * oh * ow + p;
            let oy = p / ow;
            let ox = p % ow;
            let col_row = &dcols[row * kdim..(row + 1) * kdim];
            let mut j = 0usize;
            for cc in 0..ic {
                for ky in 0..kh {
                    let yy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    for kx in 0..kw {
                        let xx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if yy >= 0 && yy < ih as isize && xx >= 0 && xx < iw as isize {
                            out[cc * ih * iw + yy as usize * iw + xx as usize] += col_row[j];
                        }
                        j += 1;
                    }
                }
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(vec![1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()));
        let w = tape.leaf(t64(vec![1, 1, 1, 1], vec![2.0]));
        let b = tape.leaf(t64(vec![1], vec![0.5]));
        let y = tape.conv2d(x, w, b, ConvSpec { stride: 1, pad: 0 });
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data()[0], 2.5);
        assert_eq!(tape.value(y).data()[8], 18.5);
    }

    #[test]
    fn conv_shapes_follow_ceil_rule() {
        // 7x7 stride-2 pad-3 halves odd and even sizes alike.
        let mut tape = Tape::<f64>::new();
        for (input, expect) in [(64usize, 32usize), (63, 32), (8, 4)] {
            let x = tape.leaf(Tensor::zeros(vec![1, 1, input, input]));
            let w = tape.leaf(Tensor::zeros(vec![1, 1, 7, 7]));
            let b = tape.leaf(Tensor::zeros(vec![1]));
            let y = tape.conv2d(x, w, b, ConvSpec { stride: 2, pad: 3 });
            assert_eq!(tape.value(y).shape()[2], expect);
        }
    }

    #[test]
    fn linear_matches_manual() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(vec![1, 2], vec![1.0, 2.0]));
        let w = tape.leaf(t64(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let b = tape.leaf(t64(vec![3], vec![0.0, 0.0, 1.0]));
        let y = tape.linear(x, w, b);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 4.0]);
    }

    #[test]
    fn backward_through_simple_chain() {
        // f(x) = mean((x * 3 + 1)^2), df/dx_i = 2*(3x+1)*3 / n
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![2], vec![1.0, -2.0]));
        let y = tape.affine(x, 3.0, 1.0);
        let sq = tape.hadamard(y, y);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let gx = grads.wrt(x).unwrap();
        assert!((gx.data()[0] - 2.0 * 4.0 * 3.0 / 2.0).abs() < 1e-12);
        assert!((gx.data()[1] - 2.0 * (-5.0) * 3.0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_uniform_logits_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t64(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(z, &[2]);
        assert!((tape.value(loss).item() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(vec![1, 2], vec![3.0, 4.0]));
        let y = tape.l2_normalize_rows(x, 1e-12);
        assert!((tape.value(y).data()[0] - 0.6).abs() < 1e-9);
        assert!((tape.value(y).data()[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(
            vec![1, 1, 4, 4],
            vec![
                0.0, 1.0, 0.0, 0.0, //
                2.0, 0.0, 0.0, 3.0, //
                0.0, 0.0, 5.0, 0.0, //
                0.0, 4.0, 0.0, 0.0,
            ],
        ));
        let y = tape.maxpool2d_3x3s2(x);
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss);
        let gx = grads.wrt(x).unwrap();
        // Each output cell contributes 1/4 to its argmax input.
        assert_eq!(gx.data()[4], 0.25); // the 2.0
        assert_eq!(gx.data()[7], 0.25); // the 3.0
        assert_eq!(gx.data()[10], 0.25); // the 5.0
        assert_eq!(gx.data()[13], 0.25); // the 4.0
    }

    #[test]
    fn weighted_sum_accumulates_in_order() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::scalar(2.0));
        let b = tape.param(Tensor::scalar(3.0));
        let s = tape.weighted_sum(&[(a, 10.0), (b, 0.5)]);
        assert_eq!(tape.value(s).item(), 21.5);
        let grads = tape.backward(s);
        assert_eq!(grads.wrt(a).unwrap().item(), 10.0);
        assert_eq!(grads.wrt(b).unwrap().item(), 0.5);
    }
}
