//! The reverse-mode tape. Operations execute eagerly and append a node;
//! `backward` walks the nodes in reverse, which is already a topological
//! order because the tape is append-only.

use rayon::prelude::*;

use super::Tensor;

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Border handling for fixed-kernel convolutions.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PadKind {
    Zero,
    Replicate,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Mean(Var),
    Sum(Var),
    ConcatC(Var, Var),
    ExpandC(Var),
    Luma(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    FixedConv {
        x: Var,
        kernel: Tensor,
        pad: PadKind,
    },
    Downsample2(Var),
    Upsample {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u8>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mu: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<f64>,
    },
    GridSample {
        img: Var,
        u: Var,
        v: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Luma weights shared with `Frame::luma`.
const LUMA_W: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.req(a) || self.req(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.req(a);
        self.push(out, op, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let m = va.data().iter().sum::<f64>() / va.numel() as f64;
        let rg = self.req(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let s = va.data().iter().sum::<f64>();
        let rg = self.req(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Channel concatenation of two (N, C, H, W) tensors.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, ca, h, w) = va.nchw();
        let (nb, cb, hb, wb) = vb.nchw();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let plane = h * w;
        let mut data = vec![0.0; n * (ca + cb) * plane];
        for i in 0..n {
            let dst = &mut data[i * (ca + cb) * plane..];
            dst[..ca * plane]
                .copy_from_slice(&va.data()[i * ca * plane..(i + 1) * ca * plane]);
            dst[ca * plane..(ca + cb) * plane]
                .copy_from_slice(&vb.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], data);
        let rg = self.req(a) || self.req(b);
        self.push(out, Op::ConcatC(a, b), rg)
    }

    /// Repeats a (N, 1, H, W) tensor across `channels`.
    pub fn expand_c(&mut self, a: Var, channels: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let (n, c, h, w) = va.nchw();
        assert_eq!(c, 1, "expand_c expects a single-channel tensor");
        let plane = h * w;
        let mut data = vec![0.0; n * channels * plane];
        for i in 0..n {
            let src = &va.data()[i * plane..(i + 1) * plane];
            for ch in 0..channels {
                data[(i * channels + ch) * plane..(i * channels + ch + 1) * plane]
                    .copy_from_slice(src);
            }
        }
        let out = Tensor::new(vec![n, channels, h, w], data);
        let rg = self.req(a);
        self.push(out, Op::ExpandC(a), rg)
    }

    /// Rec. 601 luma of an RGB batch: (N, 3, H, W) -> (N, 1, H, W).
    pub fn luma(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let (n, c, h, w) = va.nchw();
        assert_eq!(c, 3, "luma expects RGB");
        let plane = h * w;
        let mut data = vec![0.0; n * plane];
        for i in 0..n {
            let base = i * 3 * plane;
            let src = va.data();
            for p in 0..plane {
                data[i * plane + p] = LUMA_W[0] * src[base + p]
                    + LUMA_W[1] * src[base + plane + p]
                    + LUMA_W[2] * src[base + 2 * plane + p];
            }
        }
        let out = Tensor::new(vec![n, 1, h, w], data);
        let rg = self.req(a);
        self.push(out, Op::Luma(a), rg)
    }

    /// 2-d convolution with stride 1 and symmetric zero padding.
    /// `w` has shape (C_out, C_in, kh, kw); `b`, when present, shape (C_out).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let out = conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|bv| &self.nodes[bv.0].value.data()[..]),
            pad,
        );
        let rg = self.req(x) || self.req(w) || b.map(|bv| self.req(bv)).unwrap_or(false);
        self.push(out, Op::Conv2d { x, w, b, pad }, rg)
    }

    /// Same-size depthwise convolution with a fixed (non-learnable) odd
    /// kernel, applied to every channel independently.
    pub fn fixed_conv(&mut self, x: Var, kernel: Tensor, pad: PadKind) -> Var {
        let out = fixed_conv_forward(&self.nodes[x.0].value, &kernel, pad);
        let rg = self.req(x);
        self.push(out, Op::FixedConv { x, kernel, pad }, rg)
    }

    /// 2x2 mean downsampling with ceil semantics at odd borders.
    pub fn downsample2(&mut self, x: Var) -> Var {
        let out = downsample2_forward(&self.nodes[x.0].value);
        let rg = self.req(x);
        self.push(out, Op::Downsample2(x), rg)
    }

    /// Bilinear resize to (out_h, out_w) with half-pixel sample centers.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let out = upsample_forward(&self.nodes[x.0].value, out_h, out_w);
        let rg = self.req(x);
        self.push(out, Op::Upsample { x }, rg)
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (out, argmax) = max_pool2_forward(&self.nodes[x.0].value);
        let rg = self.req(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Batch normalization over (N, H, W) per channel using batch statistics.
    /// Returns the output plus the batch mean and (biased) variance per
    /// channel, for running-statistics updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let vx = &self.nodes[x.0].value;
        let (n, c, h, w) = vx.nchw();
        let m = (n * h * w) as f64;
        let plane = h * w;
        let mut mu = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for i in 0..n {
                let src = &vx.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                for &v in src {
                    s += v;
                    s2 += v * v;
                }
            }
            mu[ch] = s / m;
            var[ch] = (s2 / m - mu[ch] * mu[ch]).max(0.0);
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data().to_vec();
        let bt = self.nodes[beta.0].value.data().to_vec();
        let mut data = vec![0.0; vx.numel()];
        for i in 0..n {
            for ch in 0..c {
                let src = &vx.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                let dst = &mut data[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                let (scale, shift) = (g[ch] * inv_std[ch], bt[ch]);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = scale * (s - mu[ch]) + shift;
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], data);
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mu: mu.clone(),
                inv_std,
            },
            rg,
        );
        (v, mu, var)
    }

    /// Per-channel affine map with constant scale and bias (inference-mode
    /// normalization folded into one op).
    pub fn channel_affine(&mut self, x: Var, scale: Vec<f64>, bias: Vec<f64>) -> Var {
        let vx = &self.nodes[x.0].value;
        let (n, c, h, w) = vx.nchw();
        assert_eq!(scale.len(), c);
        assert_eq!(bias.len(), c);
        let plane = h * w;
        let mut data = vec![0.0; vx.numel()];
        for i in 0..n {
            for ch in 0..c {
                let src = &vx.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                let dst = &mut data[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = scale[ch] * s + bias[ch];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], data);
        let rg = self.req(x);
        self.push(out, Op::ChannelAffine { x, scale, bias }, rg)
    }

    /// Backward warp: out(n, c, y, x) = img(n, c, y + v, x + u) with
    /// bilinear interpolation and border clamping. Differentiable in both
    /// the image and the flow.
    pub fn grid_sample(&mut self, img: Var, u: Var, v: Var) -> Var {
        let out = grid_sample_forward(
            &self.nodes[img.0].value,
            &self.nodes[u.0].value,
            &self.nodes[v.0].value,
        );
        let rg = self.req(img) || self.req(u) || self.req(v);
        self.push(out, Op::GridSample { img, u, v }, rg)
    }

    /// Runs reverse-mode accumulation from a scalar root. Returns one
    /// gradient slot per node; only nodes reachable from the root with
    /// `requires_grad` receive values.
    pub fn backward(&mut self, root: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(Tensor::filled(&root_shape, 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let mut acc = |var: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                let mut n = g.clone();
                for v in n.data_mut() {
                    *v = -*v;
                }
                acc(*b, n, grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(vb.data()).map(|(&gg, &y)| gg * y).collect(),
                );
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(va.data()).map(|(&gg, &x)| gg * x).collect(),
                );
                acc(*a, da, grads);
                acc(*b, db, grads);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(vb.data()).map(|(&gg, &y)| gg / y).collect(),
                );
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&gg, (&x, &y))| -gg * x / (y * y))
                        .collect(),
                );
                acc(*a, da, grads);
                acc(*b, db, grads);
            }
            Op::AddScalar(a) => acc(*a, g.clone(), grads),
            Op::MulScalar(a, c) => {
                let mut t = g.clone();
                for v in t.data_mut() {
                    *v *= c;
                }
                acc(*a, t, grads);
            }
            Op::Abs(a) => {
                let va = val(*a);
                let t = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gg, &x)| gg * x.signum() * (x != 0.0) as u8 as f64)
                        .collect(),
                );
                acc(*a, t, grads);
            }
            Op::Relu(a) => {
                let va = val(*a);
                let t = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gg, &x)| if x > 0.0 { gg } else { 0.0 })
                        .collect(),
                );
                acc(*a, t, grads);
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                let t = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gg, &s)| gg * s * (1.0 - s))
                        .collect(),
                );
                acc(*a, t, grads);
            }
            Op::Square(a) => {
                let va = val(*a);
                let t = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gg, &x)| gg * 2.0 * x)
                        .collect(),
                );
                acc(*a, t, grads);
            }
            Op::Mean(a) => {
                let va = val(*a);
                let gv = g.item() / va.numel() as f64;
                acc(*a, Tensor::filled(va.shape(), gv), grads);
            }
            Op::Sum(a) => {
                let va = val(*a);
                acc(*a, Tensor::filled(va.shape(), g.item()), grads);
            }
            Op::ConcatC(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (n, ca, h, w) = va.nchw();
                let cb = vb.nchw().1;
                let plane = h * w;
                let mut da = Tensor::zeros(va.shape());
                let mut db = Tensor::zeros(vb.shape());
                for i in 0..n {
                    let src = &g.data()[i * (ca + cb) * plane..(i + 1) * (ca + cb) * plane];
                    da.data_mut()[i * ca * plane..(i + 1) * ca * plane]
                        .copy_from_slice(&src[..ca * plane]);
                    db.data_mut()[i * cb * plane..(i + 1) * cb * plane]
                        .copy_from_slice(&src[ca * plane..]);
                }
                acc(*a, da, grads);
                acc(*b, db, grads);
            }
            Op::ExpandC(a) => {
                let va = val(*a);
                let (n, _, h, w) = va.nchw();
                let channels = node.value.nchw().1;
                let plane = h * w;
                let mut da = Tensor::zeros(va.shape());
                for i in 0..n {
                    for ch in 0..channels {
                        let src = &g.data()
                            [(i * channels + ch) * plane..(i * channels + ch + 1) * plane];
                        let dst = &mut da.data_mut()[i * plane..(i + 1) * plane];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                acc(*a, da, grads);
            }
            Op::Luma(a) => {
                let va = val(*a);
                let (n, _, h, w) = va.nchw();
                let plane = h * w;
                let mut da = Tensor::zeros(va.shape());
                for i in 0..n {
                    let src = &g.data()[i * plane..(i + 1) * plane];
                    for c in 0..3 {
                        let dst =
                            &mut da.data_mut()[(i * 3 + c) * plane..(i * 3 + c + 1) * plane];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += LUMA_W[c] * s;
                        }
                    }
                }
                acc(*a, da, grads);
            }
            Op::Conv2d { x, w, b, pad } => {
                let (vx, vw) = (val(*x), val(*w));
                if self.nodes[x.0].requires_grad {
                    acc(*x, conv2d_backward_input(g, vw, vx.shape(), *pad), grads);
                }
                if self.nodes[w.0].requires_grad {
                    acc(*w, conv2d_backward_weight(g, vx, vw.shape(), *pad), grads);
                }
                if let Some(bv) = b {
                    if self.nodes[bv.0].requires_grad {
                        acc(*bv, conv2d_backward_bias(g), grads);
                    }
                }
            }
            Op::FixedConv { x, kernel, pad } => {
                acc(*x, fixed_conv_backward(g, kernel, *pad), grads);
            }
            Op::Downsample2(a) => {
                let va = val(*a);
                acc(*a, downsample2_backward(g, va.shape()), grads);
            }
            Op::Upsample { x } => {
                let vx = val(*x);
                acc(*x, upsample_backward(g, vx.shape()), grads);
            }
            Op::MaxPool2 { x, argmax } => {
                let vx = val(*x);
                acc(*x, max_pool2_backward(g, vx.shape(), argmax), grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mu,
                inv_std,
            } => {
                let vx = val(*x);
                let vg = val(*gamma);
                let (n, c, h, w) = vx.nchw();
                let m = (n * h * w) as f64;
                let plane = h * w;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let xs = &vx.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                        let gs = &g.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                        for (xv, gv) in xs.iter().zip(gs) {
                            let xhat = (xv - mu[ch]) * inv_std[ch];
                            dgamma[ch] += gv * xhat;
                            dbeta[ch] += gv;
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = Tensor::zeros(vx.shape());
                    for i in 0..n {
                        for ch in 0..c {
                            let xs =
                                &vx.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                            let gs = &g.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                            let ds = &mut dx.data_mut()
                                [(i * c + ch) * plane..(i * c + ch + 1) * plane];
                            let k = vg.data()[ch] * inv_std[ch];
                            for ((xv, gv), dv) in xs.iter().zip(gs).zip(ds.iter_mut()) {
                                let xhat = (xv - mu[ch]) * inv_std[ch];
                                *dv = k * (gv - (dbeta[ch] + dgamma[ch] * xhat) / m);
                            }
                        }
                    }
                    acc(*x, dx, grads);
                }
                acc(*gamma, Tensor::new(vec![c], dgamma), grads);
                acc(*beta, Tensor::new(vec![c], dbeta), grads);
            }
            Op::ChannelAffine { x, scale, .. } => {
                let vx = val(*x);
                let (n, c, h, w) = vx.nchw();
                let plane = h * w;
                let mut dx = Tensor::zeros(vx.shape());
                for i in 0..n {
                    for ch in 0..c {
                        let gs = &g.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                        let ds =
                            &mut dx.data_mut()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                        for (d, &s) in ds.iter_mut().zip(gs) {
                            *d = scale[ch] * s;
                        }
                    }
                }
                acc(*x, dx, grads);
            }
            Op::GridSample { img, u, v } => {
                let (vi, vu, vv) = (val(*img), val(*u), val(*v));
                let (dimg, du, dv) = grid_sample_backward(g, vi, vu, vv);
                if self.nodes[img.0].requires_grad {
                    acc(*img, dimg, grads);
                }
                if self.nodes[u.0].requires_grad {
                    acc(*u, du, grads);
                }
                if self.nodes[v.0].requires_grad {
                    acc(*v, dv, grads);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels. Each output element has exactly one writer, so parallel execution
// is bitwise deterministic regardless of thread count.
// ---------------------------------------------------------------------------

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&[f64]>, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.nchw();
    let (cout, cin_w, kh, kw) = w.nchw();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let p = pad as isize;
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (ni, co) = (idx / cout, idx % cout);
            if let Some(bias) = b {
                plane.fill(bias[co]);
            }
            for ci in 0..cin {
                let xplane = &x.data()[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                for ky in 0..kh {
                    let dy = ky as isize - p;
                    for kx in 0..kw {
                        let dx = kx as isize - p;
                        let wv = w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let y_lo = (-dy).max(0) as usize;
                        let y_hi = (oh as isize).min(h as isize - dy).max(0) as usize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (ow as isize).min(wd as isize - dx).max(0) as usize;
                        for y in y_lo..y_hi {
                            let src_off = ((y as isize + dy) as usize * wd) as isize + dx;
                            let src = &xplane[(src_off as usize + x_lo)..(src_off as usize + x_hi)];
                            let dst = &mut plane[y * ow + x_lo..y * ow + x_hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        });
    out
}

fn conv2d_backward_input(g: &Tensor, w: &Tensor, x_shape: &[usize], pad: usize) -> Tensor {
    let (n, cout, oh, ow) = g.nchw();
    let (_, cin, kh, kw) = w.nchw();
    let (h, wd) = (x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    let p = pad as isize;
    dx.data_mut()
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (ni, ci) = (idx / cin, idx % cin);
            for co in 0..cout {
                let gplane = &g.data()[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                for ky in 0..kh {
                    let dy = ky as isize - p;
                    for kx in 0..kw {
                        let dx_off = kx as isize - p;
                        let wv = w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let y_lo = (-dy).max(0) as usize;
                        let y_hi = (oh as isize).min(h as isize - dy).max(0) as usize;
                        let x_lo = (-dx_off).max(0) as usize;
                        let x_hi = (ow as isize).min(wd as isize - dx_off).max(0) as usize;
                        for y in y_lo..y_hi {
                            let dst_off = ((y as isize + dy) as usize * wd) as isize + dx_off;
                            let src = &gplane[y * ow + x_lo..y * ow + x_hi];
                            let dst =
                                &mut plane[(dst_off as usize + x_lo)..(dst_off as usize + x_hi)];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        });
    dx
}

fn conv2d_backward_weight(g: &Tensor, x: &Tensor, w_shape: &[usize], pad: usize) -> Tensor {
    let (n, cout, oh, ow) = g.nchw();
    let (_, cin, h, wd) = x.nchw();
    let (kh, kw) = (w_shape[2], w_shape[3]);
    let mut dw = Tensor::zeros(w_shape);
    let p = pad as isize;
    dw.data_mut()
        .par_chunks_mut(cin * kh * kw)
        .enumerate()
        .for_each(|(co, wslice)| {
            for ni in 0..n {
                let gplane = &g.data()[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                for ci in 0..cin {
                    let xplane =
                        &x.data()[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                    for ky in 0..kh {
                        let dy = ky as isize - p;
                        for kx in 0..kw {
                            let dx = kx as isize - p;
                            let y_lo = (-dy).max(0) as usize;
                            let y_hi = (oh as isize).min(h as isize - dy).max(0) as usize;
                            let x_lo = (-dx).max(0) as usize;
                            let x_hi = (ow as isize).min(wd as isize - dx).max(0) as usize;
                            let mut acc = 0.0;
                            for y in y_lo..y_hi {
                                let src_off = ((y as isize + dy) as usize * wd) as isize + dx;
                                let xs =
                                    &xplane[(src_off as usize + x_lo)..(src_off as usize + x_hi)];
                                let gs = &gplane[y * ow + x_lo..y * ow + x_hi];
                                for (a, b) in xs.iter().zip(gs) {
                                    acc += a * b;
                                }
                            }
                            wslice[(ci * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        });
    dw
}

fn conv2d_backward_bias(g: &Tensor) -> Tensor {
    let (n, cout, oh, ow) = g.nchw();
    let mut db = vec![0.0; cout];
    for ni in 0..n {
        for co in 0..cout {
            let plane = &g.data()[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            db[co] += plane.iter().sum::<f64>();
        }
    }
    Tensor::new(vec![cout], db)
}

fn fixed_conv_forward(x: &Tensor, kernel: &Tensor, pad: PadKind) -> Tensor {
    let (n, c, h, w) = x.nchw();
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    assert!(kh % 2 == 1 && kw % 2 == 1, "fixed kernels must be odd-sized");
    let (ry, rx) = (kh as isize / 2, kw as isize / 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    out.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let src = &x.data()[idx * h * w..(idx + 1) * h * w];
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = 0.0;
                    for ky in -ry..=ry {
                        for kx in -rx..=rx {
                            let kv =
                                kernel.data()[((ky + ry) as usize) * kw + (kx + rx) as usize];
                            if kv == 0.0 {
                                continue;
                            }
                            let (sy, sx) = (y + ky, xx + kx);
                            let sample = match pad {
                                PadKind::Replicate => {
                                    let cy = sy.clamp(0, h as isize - 1) as usize;
                                    let cx = sx.clamp(0, w as isize - 1) as usize;
                                    src[cy * w + cx]
                                }
                                PadKind::Zero => {
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        0.0
                                    } else {
                                        src[sy as usize * w + sx as usize]
                                    }
                                }
                            };
                            acc += kv * sample;
                        }
                    }
                    plane[y as usize * w + xx as usize] = acc;
                }
            }
        });
    out
}

fn fixed_conv_backward(g: &Tensor, kernel: &Tensor, pad: PadKind) -> Tensor {
    let (n, c, h, w) = g.nchw();
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (ry, rx) = (kh as isize / 2, kw as isize / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let gs = &g.data()[idx * h * w..(idx + 1) * h * w];
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let gv = gs[y as usize * w + xx as usize];
                    if gv == 0.0 {
                        continue;
                    }
                    for ky in -ry..=ry {
                        for kx in -rx..=rx {
                            let kv =
                                kernel.data()[((ky + ry) as usize) * kw + (kx + rx) as usize];
                            if kv == 0.0 {
                                continue;
                            }
                            let (sy, sx) = (y + ky, xx + kx);
                            match pad {
                                PadKind::Replicate => {
                                    let cy = sy.clamp(0, h as isize - 1) as usize;
                                    let cx = sx.clamp(0, w as isize - 1) as usize;
                                    plane[cy * w + cx] += kv * gv;
                                }
                                PadKind::Zero => {
                                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                        plane[sy as usize * w + sx as usize] += kv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

fn downsample2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.nchw();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for idx in 0..n * c {
        let src = &x.data()[idx * h * w..(idx + 1) * h * w];
        let dst = &mut out.data_mut()[idx * oh * ow..(idx + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let (y1, x1) = ((2 * y + 2).min(h), (2 * xx + 2).min(w));
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for yy in 2 * y..y1 {
                    for xv in 2 * xx..x1 {
                        acc += src[yy * w + xv];
                        cnt += 1.0;
                    }
                }
                dst[y * ow + xx] = acc / cnt;
            }
        }
    }
    out
}

fn downsample2_backward(g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (n, c, oh, ow) = g.nchw();
    let (h, w) = (x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    for idx in 0..n * c {
        let gs = &g.data()[idx * oh * ow..(idx + 1) * oh * ow];
        let dst = &mut dx.data_mut()[idx * h * w..(idx + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let (y1, x1) = ((2 * y + 2).min(h), (2 * xx + 2).min(w));
                let cnt = ((y1 - 2 * y) * (x1 - 2 * xx)) as f64;
                let gv = gs[y * ow + xx] / cnt;
                for yy in 2 * y..y1 {
                    for xv in 2 * xx..x1 {
                        dst[yy * w + xv] += gv;
                    }
                }
            }
        }
    }
    dx
}

/// (src index 0, src index 1, weight of index 1) per output coordinate,
/// half-pixel convention with border clamping.
fn resize_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let s = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else if s >= (in_len - 1) as f64 {
                (in_len - 1, in_len - 1, 0.0)
            } else {
                let i0 = s.floor() as usize;
                (i0, i0 + 1, s - i0 as f64)
            }
        })
        .collect()
}

fn upsample_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = x.nchw();
    let ty = resize_taps(oh, h);
    let tx = resize_taps(ow, w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let src = &x.data()[idx * h * w..(idx + 1) * h * w];
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = (1.0 - fy) * (1.0 - fx) * src[y0 * w + x0]
                        + (1.0 - fy) * fx * src[y0 * w + x1]
                        + fy * (1.0 - fx) * src[y1 * w + x0]
                        + fy * fx * src[y1 * w + x1];
                    plane[y * ow + xx] = v;
                }
            }
        });
    out
}

fn upsample_backward(g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (n, c, oh, ow) = g.nchw();
    let (h, w) = (x_shape[2], x_shape[3]);
    let ty = resize_taps(oh, h);
    let tx = resize_taps(ow, w);
    let mut dx = Tensor::zeros(x_shape);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let gs = &g.data()[idx * oh * ow..(idx + 1) * oh * ow];
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = gs[y * ow + xx];
                    plane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                    plane[y0 * w + x1] += (1.0 - fy) * fx * gv;
                    plane[y1 * w + x0] += fy * (1.0 - fx) * gv;
                    plane[y1 * w + x1] += fy * fx * gv;
                }
            }
        });
    let _ = (n, c);
    dx
}

fn max_pool2_forward(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (n, c, h, w) = x.nchw();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u8; n * c * oh * ow];
    for idx in 0..n * c {
        let src = &x.data()[idx * h * w..(idx + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0u8;
                for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = src[(2 * y + dy) * w + 2 * xx + dx];
                    if v > best {
                        best = v;
                        arg = k as u8;
                    }
                }
                out.data_mut()[idx * oh * ow + y * ow + xx] = best;
                argmax[idx * oh * ow + y * ow + xx] = arg;
            }
        }
    }
    (out, argmax)
}

fn max_pool2_backward(g: &Tensor, x_shape: &[usize], argmax: &[u8]) -> Tensor {
    let (n, c, oh, ow) = g.nchw();
    let (h, w) = (x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    for idx in 0..n * c {
        let gs = &g.data()[idx * oh * ow..(idx + 1) * oh * ow];
        let dst = &mut dx.data_mut()[idx * h * w..(idx + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let arg = argmax[idx * oh * ow + y * ow + xx] as usize;
                let (dy, dx_off) = (arg / 2, arg % 2);
                dst[(2 * y + dy) * w + 2 * xx + dx_off] += gs[y * ow + xx];
            }
        }
    }
    dx
}

/// Bilinear taps for a clamped sample position; `slope` is zero when the
/// unclamped position falls outside the image, killing flow gradients at
/// saturated borders.
#[inline]
fn sample_taps(s: f64, len: usize) -> (usize, usize, f64, f64) {
    let max = (len - 1) as f64;
    if len == 1 {
        return (0, 0, 0.0, 0.0);
    }
    if s <= 0.0 {
        let slope = if s < 0.0 { 0.0 } else { 1.0 };
        (0, 1, 0.0, slope)
    } else if s >= max {
        let slope = if s > max { 0.0 } else { 1.0 };
        (len - 2, len - 1, 1.0, slope)
    } else {
        let i0 = s.floor() as usize;
        let i0 = i0.min(len - 2);
        (i0, i0 + 1, s - i0 as f64, 1.0)
    }
}

fn grid_sample_forward(img: &Tensor, u: &Tensor, v: &Tensor) -> Tensor {
    let (n, c, h, w) = img.nchw();
    let (nu, cu, hu, wu) = u.nchw();
    assert_eq!((nu, cu, hu, wu), (n, 1, h, w), "flow plane shape mismatch");
    assert_eq!(u.shape(), v.shape());
    let mut out = Tensor::zeros(&[n, c, h, w]);
    out.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (ni, _ci) = (idx / c, idx % c);
            let src = &img.data()[idx * h * w..(idx + 1) * h * w];
            let us = &u.data()[ni * h * w..(ni + 1) * h * w];
            let vs = &v.data()[ni * h * w..(ni + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    let sx = xx as f64 + us[p];
                    let sy = y as f64 + vs[p];
                    let (x0, x1, fx, _) = sample_taps(sx, w);
                    let (y0, y1, fy, _) = sample_taps(sy, h);
                    plane[p] = (1.0 - fy) * (1.0 - fx) * src[y0 * w + x0]
                        + (1.0 - fy) * fx * src[y0 * w + x1]
                        + fy * (1.0 - fx) * src[y1 * w + x0]
                        + fy * fx * src[y1 * w + x1];
                }
            }
        });
    out
}

fn grid_sample_backward(
    g: &Tensor,
    img: &Tensor,
    u: &Tensor,
    v: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = img.nchw();
    let mut dimg = Tensor::zeros(img.shape());
    let mut du = Tensor::zeros(u.shape());
    let mut dv = Tensor::zeros(v.shape());
    for ni in 0..n {
        let us = &u.data()[ni * h * w..(ni + 1) * h * w];
        let vs = &v.data()[ni * h * w..(ni + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let p = y * w + xx;
                let sx = xx as f64 + us[p];
                let sy = y as f64 + vs[p];
                let (x0, x1, fx, slope_x) = sample_taps(sx, w);
                let (y0, y1, fy, slope_y) = sample_taps(sy, h);
                let mut du_acc = 0.0;
                let mut dv_acc = 0.0;
                for ci in 0..c {
                    let idx = ni * c + ci;
                    let gv = g.data()[idx * h * w + p];
                    if gv == 0.0 {
                        continue;
                    }
                    let src = &img.data()[idx * h * w..(idx + 1) * h * w];
                    let dst = &mut dimg.data_mut()[idx * h * w..(idx + 1) * h * w];
                    dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                    dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                    dst[y1 * w + x1] += gv * fy * fx;
                    let dval_dx = (1.0 - fy) * (src[y0 * w + x1] - src[y0 * w + x0])
                        + fy * (src[y1 * w + x1] - src[y1 * w + x0]);
                    let dval_dy = (1.0 - fx) * (src[y1 * w + x0] - src[y0 * w + x0])
                        + fx * (src[y1 * w + x1] - src[y0 * w + x1]);
                    du_acc += gv * dval_dx * slope_x;
                    dv_acc += gv * dval_dy * slope_y;
                }
                du.data_mut()[ni * h * w + p] += du_acc;
                dv.data_mut()[ni * h * w + p] += dv_acc;
            }
        }
    }
    (dimg, du, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn mean_of_sum_backward_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item(), 2.5);
        let grads = tape.backward(m);
        let gx = grads[x.0].as_ref().unwrap();
        assert!(gx.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn conv2d_known_values() {
        // 1x1 input channel, 3x3 kernel of ones, pad 1 on a 2x2 image sums
        // the in-bounds neighborhood.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let w = tape.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0), false);
        let y = tape.conv2d(x, w, None, 1);
        assert_eq!(tape.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn pointwise_and_reduction_gradients() {
        let mut r = rng();
        let shapes: Vec<Box<dyn Fn(&mut Tape, &[Var]) -> Var>> = vec![
            Box::new(|t, v| {
                let a = t.abs(v[0]);
                t.mean(a)
            }),
            Box::new(|t, v| {
                let a = t.sigmoid(v[0]);
                let b = t.square(a);
                t.sum(b)
            }),
            Box::new(|t, v| {
                let a = t.relu(v[0]);
                let b = t.mul_scalar(a, 3.0);
                let c = t.add_scalar(b, -0.2);
                t.mean(c)
            }),
        ];
        for f in shapes {
            let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
            check_gradients(&f, &[x], 1e-5, 1e-6, 1e-8).unwrap();
        }
    }

    #[test]
    fn binary_op_gradients() {
        let mut r = rng();
        let a = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut r);
        let mut b = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut r);
        for v in b.data_mut() {
            *v += 3.0; // keep divisors away from zero
        }
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.mul(v[0], v[1]);
            let d = t.div(s, v[1]);
            let e = t.sub(d, v[0]);
            let g = t.add(e, s);
            t.mean(g)
        };
        check_gradients(&f, &[a, b], 1e-5, 1e-6, 1e-8).unwrap();
    }

    #[test]
    fn conv2d_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1);
            t.mean(y)
        };
        check_gradients(&f, &[x, w, b], 1e-5, 1e-5, 1e-9).unwrap();
    }

    #[test]
    fn fixed_conv_gradients_both_pads() {
        let mut r = rng();
        let kernel = Tensor::new(vec![3, 3], vec![0.05, 0.1, 0.05, 0.1, 0.4, 0.1, 0.05, 0.1, 0.05]);
        for pad in [PadKind::Zero, PadKind::Replicate] {
            let x = Tensor::randn(&[1, 2, 5, 4], 1.0, &mut r);
            let k = kernel.clone();
            let f = move |t: &mut Tape, v: &[Var]| {
                let y = t.fixed_conv(v[0], k.clone(), pad);
                let z = t.square(y);
                t.mean(z)
            };
            check_gradients(&f, &[x], 1e-5, 1e-6, 1e-9).unwrap();
        }
    }

    #[test]
    fn pool_resize_and_norm_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut r);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.max_pool2(v[0]);
            let z = t.upsample_bilinear(y, 6, 6);
            let d = t.downsample2(z);
            t.mean(d)
        };
        check_gradients(&f, &[x], 1e-5, 1e-5, 1e-9).unwrap();

        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let gamma = Tensor::randn(&[3], 0.3, &mut r);
        let beta = Tensor::randn(&[3], 0.3, &mut r);
        let f = |t: &mut Tape, v: &[Var]| {
            let (y, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5);
            let s = t.square(y);
            t.mean(s)
        };
        check_gradients(&f, &[x, gamma, beta], 1e-5, 2e-5, 1e-8).unwrap();
    }

    #[test]
    fn structural_op_gradients() {
        let mut r = rng();
        let a = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut r);
        let rgb = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut r);
        let f = |t: &mut Tape, v: &[Var]| {
            let e = t.expand_c(v[1], 2);
            let m = t.mul(v[0], e);
            let l = t.luma(v[2]);
            let cat = t.concat_c(m, l);
            let s = t.square(cat);
            t.mean(s)
        };
        check_gradients(&f, &[a, b, rgb], 1e-5, 1e-6, 1e-9).unwrap();
    }

    #[test]
    fn grid_sample_matches_hand_bilinear_and_gradients() {
        // Single row [0, 1], flow u = 0.5 at x = 0 samples halfway: 0.5.
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]), false);
        let u = tape.leaf(Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.0]), false);
        let v = tape.leaf(Tensor::zeros(&[1, 1, 1, 2]), false);
        let out = tape.grid_sample(img, u, v);
        assert!((tape.value(out).data()[0] - 0.5).abs() < 1e-12);

        // Gradcheck away from integer flow values, where the bilinear kernel
        // is smooth.
        let mut r = rng();
        let img = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        let mut u0 = Tensor::randn(&[1, 1, 5, 5], 0.2, &mut r);
        let mut v0 = Tensor::randn(&[1, 1, 5, 5], 0.2, &mut r);
        for t in u0.data_mut().iter_mut().chain(v0.data_mut().iter_mut()) {
            *t += 0.31; // push away from the integer lattice
        }
        let f = |t: &mut Tape, v: &[Var]| {
            let o = t.grid_sample(v[0], v[1], v[2]);
            let s = t.square(o);
            t.mean(s)
        };
        check_gradients(&f, &[img, u0, v0], 1e-5, 1e-5, 1e-9).unwrap();
    }

    #[test]
    fn no_grad_paths_stay_empty() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0), false);
        let b = tape.leaf(Tensor::scalar(3.0), true);
        let c = tape.mul(a, b);
        let grads = tape.backward(c);
        assert!(grads[a.0].is_none());
        assert_eq!(grads[b.0].as_ref().unwrap().item(), 2.0);
    }
}
