//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are recorded on a [`Graph`] in execution order, so node indices
//! are already a topological order and [`Graph::backward`] is a single reverse
//! sweep. Gradients of intermediate nodes live only for the duration of a
//! sweep; gradients of leaves created with [`Graph::param`] accumulate across
//! sweeps until [`Graph::zero_grad`].

use crate::reparam;
use crate::tensor::{self, ConvGeometry, Tensor};
use crate::{Error, Real, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics of a training-mode batch-norm, per channel.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    /// Biased (population) variance.
    pub var: Vec<Real>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, Real),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        geo: ConvGeometry,
    },
    Relu(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm2d {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<Real>,
        labels: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Square(Var),
    Exp(Var),
    Reciprocal(Var),
    Abs(Var),
    EvenPower(Var, u32),
    Reshape(Var),
    GlobalAvgPool(Var),
    Stopband {
        x: Var,
        log_t: Var,
        n: u32,
    },
    Apparent {
        w: Var,
        log_t: Var,
        n: u32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

/// Recorded computation. One graph is built per training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Target number of elements of one unfolded convolution chunk.
const CONV_CHUNK: usize = 1 << 22;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if a backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ----- elementwise binary ops with broadcasting -----

    fn binary(&self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = tensor::broadcast_shape(&sa, &sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<Real> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = tensor::broadcast_offsets(&sa, &out_shape);
            let ob = tensor::broadcast_offsets(&sb, &out_shape);
            oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Tensor::new(out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: Real, shift: Real) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, scale: Real) -> Var {
        self.affine(x, scale, 0.0)
    }

    // ----- elementwise unary ops -----

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(Real) -> Real) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    /// `max(x, 0)`; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), Real::exp)
    }

    pub fn reciprocal(&mut self, x: Var) -> Var {
        self.unary(x, Op::Reciprocal(x), |v| 1.0 / v)
    }

    /// `|x|`; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), Real::abs)
    }

    /// `x^n` for even `n >= 2`.
    pub fn even_power(&mut self, x: Var, n: u32) -> Result<Var> {
        if n < 2 || n % 2 != 0 {
            return Err(Error::usage(format!("even_power needs an even n >= 2, got {n}")));
        }
        let half = (n / 2) as i32;
        Ok(self.unary(x, Op::EvenPower(x, n), move |v| (v * v).powi(half)))
    }

    // ----- reductions and shape ops -----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.len() as Real;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `[N × ...] -> [N × prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, vec![n, rest])
    }

    /// `[N × C × H × W] -> [N × C]` by averaging over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool expects NCHW, got {shape:?}")));
        }
        let plane = shape[2] * shape[3];
        let out: Vec<Real> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<Real>() / plane as Real)
            .collect();
        let out = Tensor::new(vec![shape[0], shape[1]], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    // ----- linear algebra -----

    /// `[m×k] · [k×p] -> [m×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        tensor::gemm_nn(m, k, p, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of `x: [N×C×H×W]` with `k: [F×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::dim(format!("conv2d of input {sx:?} with kernel {sk:?}")));
        }
        let geo = ConvGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sk[2],
            kernel_w: sk[3],
            stride,
            padding,
        };
        geo.validate()?;
        let (n, f) = (sx[0], sk[0]);
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let spatial = oh * ow;
        let rows = geo.patch_len();
        let sample = geo.channels * geo.height * geo.width;
        let chunk = (CONV_CHUNK / (rows * spatial)).clamp(1, n);

        let xd = self.value(x).data();
        let kd = self.value(k).data();
        let mut out = vec![0.0; n * f * spatial];
        let mut cols = vec![0.0; rows * chunk * spatial];
        let mut prod = vec![0.0; f * chunk * spatial];
        for start in (0..n).step_by(chunk) {
            let nb = chunk.min(n - start);
            let width = nb * spatial;
            for b in 0..nb {
                let xs = &xd[(start + b) * sample..(start + b + 1) * sample];
                tensor::im2col(&geo, xs, &mut cols[b * spatial..], width);
            }
            prod[..f * width].fill(0.0);
            tensor::gemm_nn(f, rows, width, kd, &cols[..rows * width], &mut prod[..f * width]);
            for b in 0..nb {
                for fi in 0..f {
                    let dst = ((start + b) * f + fi) * spatial;
                    let src = fi * width + b * spatial;
                    out[dst..dst + spatial].copy_from_slice(&prod[src..src + spatial]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(
            Tensor::new(vec![n, f, oh, ow], out)?,
            Op::Conv2d { x, k, geo },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2. Ties go to the first element in
    /// row-major order of the window.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::dim(format!("maxpool2d expects NCHW with H,W >= 2, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], oh, ow], out)?,
            Op::MaxPool2d { x, argmax },
            rg,
        ))
    }

    /// Training-mode batch normalization over `N, H, W` per channel.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: Real,
    ) -> Result<(Var, BatchStats)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("batchnorm2d expects NCHW, got {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("batchnorm2d affine parameters must have one entry per channel"));
        }
        let count = n * plane;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                mean[ch] += xd[off..off + plane].iter().sum::<Real>();
            }
        }
        for m in &mut mean {
            *m /= count as Real;
        }
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                var[ch] += xd[off..off + plane]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<Real>();
            }
        }
        for v in &mut var {
            *v /= count as Real;
        }
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(s, out)?,
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "logits {s:?} do not match {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut denom = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[i * k + j] /= denom;
            }
            loss += denom.ln() + max - row[labels[i]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as Real),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ----- reparametrization -----

    fn log_temperature(&self, log_t: Var) -> Result<Real> {
        let v = self.value(log_t);
        if v.len() != 1 {
            return Err(Error::dim(format!(
                "log-temperature must be a scalar, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.item())
    }

    /// Elementwise `h_t(x)` with `t = exp(log_t)`.
    pub fn stopband(&mut self, x: Var, log_t: Var, n: u32) -> Result<Var> {
        let t = self.log_temperature(log_t)?.exp();
        let out = self.value(x).map(|v| reparam::h(v, t, n));
        let rg = self.rg(x) || self.rg(log_t);
        Ok(self.push(out, Op::Stopband { x, log_t, n }, rg))
    }

    /// Apparent weights `w ⊙ h_t(w)` with `t = exp(log_t)`.
    pub fn apparent_weights(&mut self, w: Var, log_t: Var, n: u32) -> Result<Var> {
        let t = self.log_temperature(log_t)?.exp();
        let out = self.value(w).map(|v| v * reparam::h(v, t, n));
        let rg = self.rg(w) || self.rg(log_t);
        Ok(self.push(out, Op::Apparent { w, log_t, n }, rg))
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<Real>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Constant => {}
                op => self.propagate(op, &node.value, &g, &mut grads)?,
            }
        }

        for (i, g) in leaf_grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of leaf {i}")));
            }
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &[Real],
        grads: &mut [Option<Vec<Real>>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.reduce_into(*a, out.shape(), g, 1.0, grads);
                self.reduce_into(*b, out.shape(), g, sign, grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let oa = tensor::broadcast_offsets(va.shape(), out.shape());
                let ob = tensor::broadcast_offsets(vb.shape(), out.shape());
                if self.rg(*a) {
                    let ga = slot(grads, *a, va.len());
                    for ((&i, &j), &gi) in oa.iter().zip(&ob).zip(g) {
                        ga[i] += gi * vb.data()[j];
                    }
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, vb.len());
                    for ((&i, &j), &gi) in oa.iter().zip(&ob).zip(g) {
                        gb[j] += gi * va.data()[i];
                    }
                }
            }
            Op::Affine(x, scale) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += scale * b);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, p) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    let ga = slot(grads, *a, m * k);
                    tensor::gemm_nt(m, p, k, g, vb.data(), ga);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, k * p);
                    tensor::gemm_tn(k, m, p, va.data(), g, gb);
                }
            }
            Op::Conv2d { x, k, geo } => self.conv2d_backward(*x, *k, geo, g, grads),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for ((a, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *a += gi;
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let len = self.value(*x).len();
                let gx = slot(grads, *x, len);
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
            }
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let m = (n * plane) as Real;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.rg(*gamma) {
                    let gg = slot(grads, *gamma, c);
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
                }
                if self.rg(*beta) {
                    let gb = slot(grads, *beta, c);
                    gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
                }
                if self.rg(*x) {
                    let gamma_v = self.value(*gamma).data().to_vec();
                    let gx = slot(grads, *x, g.len());
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = gamma_v[ch] * inv_std[ch] / m;
                            for i in off..off + plane {
                                gx[i] += k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / n as Real;
                let gl = slot(grads, *logits, n * k);
                for i in 0..n {
                    for j in 0..k {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, *x, self.value(*x).len());
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let gx = slot(grads, *x, len);
                let v = g[0] / len as Real;
                gx.iter_mut().for_each(|a| *a += v);
            }
            Op::Square(x) => self.unary_backward(*x, g, grads, |v, _| 2.0 * v, out),
            Op::Exp(x) => self.unary_backward(*x, g, grads, |_, y| y, out),
            Op::Reciprocal(x) => self.unary_backward(*x, g, grads, |_, y| -y * y, out),
            Op::Abs(x) => self.unary_backward(
                *x,
                g,
                grads,
                |v, _| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                },
                out,
            ),
            Op::EvenPower(x, n) => {
                let n = *n;
                self.unary_backward(*x, g, grads, |v, _| n as Real * v.powi(n as i32 - 1), out)
            }
            Op::Reshape(x) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let gx = slot(grads, *x, g.len() * plane);
                for (chunk, &gi) in gx.chunks_mut(plane).zip(g) {
                    let v = gi / plane as Real;
                    chunk.iter_mut().for_each(|a| *a += v);
                }
            }
            Op::Stopband { x, log_t, n } => {
                let t = self.value(*log_t).item().exp();
                let xv = self.value(*x).data();
                let mut d_log_t = 0.0;
                let want_x = self.rg(*x);
                let mut gx = want_x.then(|| vec![0.0; xv.len()]);
                for (i, (&v, &gi)) in xv.iter().zip(g).enumerate() {
                    let (dx, dt) = reparam::h_grad(v, t, *n);
                    if let Some(gx) = gx.as_mut() {
                        gx[i] = gi * dx;
                    }
                    d_log_t += gi * dt * t;
                }
                if let Some(gx) = gx {
                    add_into(grads, *x, &gx);
                }
                if self.rg(*log_t) {
                    slot(grads, *log_t, 1)[0] += d_log_t;
                }
            }
            Op::Apparent { w, log_t, n } => {
                let t = self.value(*log_t).item().exp();
                let wv = self.value(*w).data();
                let mut d_log_t = 0.0;
                let want_w = self.rg(*w);
                let mut gw = want_w.then(|| vec![0.0; wv.len()]);
                for (i, (&v, &gi)) in wv.iter().zip(g).enumerate() {
                    let (h, dx, dt) = reparam::h_with_grad(v, t, *n);
                    if let Some(gw) = gw.as_mut() {
                        gw[i] = gi * (h + v * dx);
                    }
                    d_log_t += gi * v * dt * t;
                }
                if let Some(gw) = gw {
                    add_into(grads, *w, &gw);
                }
                if self.rg(*log_t) {
                    slot(grads, *log_t, 1)[0] += d_log_t;
                }
            }
        }
        Ok(())
    }

    fn unary_backward(
        &self,
        x: Var,
        g: &[Real],
        grads: &mut [Option<Vec<Real>>],
        deriv: impl Fn(Real, Real) -> Real,
        out: &Tensor,
    ) {
        let xv = self.value(x).data();
        let gx = slot(grads, x, g.len());
        for (((a, &gi), &v), &y) in gx.iter_mut().zip(g).zip(xv).zip(out.data()) {
            *a += gi * deriv(v, y);
        }
    }

    /// Sums `sign · g` over the axes `x` was broadcast along.
    fn reduce_into(
        &self,
        x: Var,
        out_shape: &[usize],
        g: &[Real],
        sign: Real,
        grads: &mut [Option<Vec<Real>>],
    ) {
        if !self.rg(x) {
            return;
        }
        let xs = self.shape(x);
        let len = self.value(x).len();
        let gx = slot(grads, x, len);
        if xs == out_shape {
            gx.iter_mut().zip(g).for_each(|(a, &b)| *a += sign * b);
        } else {
            let offs = tensor::broadcast_offsets(xs, out_shape);
            for (&o, &gi) in offs.iter().zip(g) {
                gx[o] += sign * gi;
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        k: Var,
        geo: &ConvGeometry,
        g: &[Real],
        grads: &mut [Option<Vec<Real>>],
    ) {
        let xv = self.value(x);
        let kv = self.value(k);
        let (n, f) = (xv.shape()[0], kv.shape()[0]);
        let spatial = geo.out_height() * geo.out_width();
        let rows = geo.patch_len();
        let sample = geo.channels * geo.height * geo.width;
        let chunk = (CONV_CHUNK / (rows * spatial)).clamp(1, n);
        let (want_x, want_k) = (self.rg(x), self.rg(k));

        let mut gk = want_k.then(|| vec![0.0; kv.len()]);
        let mut gx = want_x.then(|| vec![0.0; xv.len()]);
        let mut cols = vec![0.0; rows * chunk * spatial];
        let mut gchunk = vec![0.0; f * chunk * spatial];
        for start in (0..n).step_by(chunk) {
            let nb = chunk.min(n - start);
            let width = nb * spatial;
            for b in 0..nb {
                for fi in 0..f {
                    let src = ((start + b) * f + fi) * spatial;
                    let dst = fi * width + b * spatial;
                    gchunk[dst..dst + spatial].copy_from_slice(&g[src..src + spatial]);
                }
            }
            if let Some(gk) = gk.as_mut() {
                for b in 0..nb {
                    let xs = &xv.data()[(start + b) * sample..(start + b + 1) * sample];
                    tensor::im2col(geo, xs, &mut cols[b * spatial..], width);
                }
                tensor::gemm_nt(f, width, rows, &gchunk[..f * width], &cols[..rows * width], gk);
            }
            if let Some(gx) = gx.as_mut() {
                let dcols = &mut cols[..rows * width];
                dcols.fill(0.0);
                tensor::gemm_tn(rows, f, width, kv.data(), &gchunk[..f * width], dcols);
                for b in 0..nb {
                    let dst = &mut gx[(start + b) * sample..(start + b + 1) * sample];
                    tensor::col2im(geo, &cols[b * spatial..], dst, width);
                }
            }
        }
        if let Some(gk) = gk {
            add_into(grads, k, &gk);
        }
        if let Some(gx) = gx {
            add_into(grads, x, &gx);
        }
    }
}

fn slot(grads: &mut [Option<Vec<Real>>], v: Var, len: usize) -> &mut [Real] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<Real>>], v: Var, g: &[Real]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
