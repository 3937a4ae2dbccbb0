//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Parameter leaves borrow their values from a [`ParamStore`]; calling
//! [`Graph::backward`] on a scalar node returns gradients aligned with that
//! store. Graphs built with [`Graph::inference`] skip all gradient
//! bookkeeping.

use crate::nn::params::{ParamGrads, ParamId, ParamStore};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Constant,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MulConst(Var, Tensor<S>),
    AddChannel {
        x: Var,
        v: Var,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    GroupNorm {
        x: Var,
        groups: usize,
        rstd: Vec<S>,
    },
    Silu(Var),
    Upsample2x(Var),
    Concat(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<S>,
        scale: S,
    },
    SumSquares(Var),
    GroupSum {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
}

struct Node<S> {
    op: Op<S>,
    value: Option<Tensor<S>>,
    needs_grad: bool,
}

pub struct Graph<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// Graph that records everything needed for [`Graph::backward`].
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Graph for forward evaluation only.
    pub fn inference(params: &'p ParamStore<S>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(t),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution with square kernels; weight is `[Cout, Cin, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, k, k2) = self.value(w).dims4();
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
        assert_eq!(k, k2, "conv2d: non-square kernel");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let ckk = cin * k * k;
        let plane_out = ho * wo;
        let mut out = vec![S::zero(); n * cout * plane_out];
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![S::zero(); ckk * plane_out]
        };
        {
            let xv = self.value(x).as_slice();
            let wv = self.value(w).as_slice();
            let bias = b.map(|b| self.value(b).as_slice());
            for i in 0..n {
                let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
                let src: &[S] = if geo.is_pointwise() {
                    xi
                } else {
                    im2col(xi, &geo, &mut cols);
                    &cols
                };
                let oi = &mut out[i * cout * plane_out..(i + 1) * cout * plane_out];
                mm(cout, ckk, plane_out, wv, false, src, false, oi, false);
                if let Some(bias) = bias {
                    for (co, row) in oi.chunks_mut(plane_out).enumerate() {
                        let bv = bias[co];
                        for v in row {
                            *v = *v + bv;
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let value = Tensor::from_vec(&[n, cout, ho, wo], out).expect("conv output shape");
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            value,
            &inputs,
        )
    }

    /// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(ws.len(), 2);
        assert_eq!(xs[1], ws[1], "linear: input width mismatch");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![S::zero(); n * dout];
        mm(
            n,
            din,
            dout,
            self.value(x).as_slice(),
            false,
            self.value(w).as_slice(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).as_slice();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o = *o + bb;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let value = Tensor::from_vec(&[n, dout], out).expect("linear output shape");
        self.push(Op::Linear { x, w, b }, value, &inputs)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise op shape mismatch");
        let data = av
            .as_slice()
            .iter()
            .zip(bv.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), t, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), t, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), t, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let av = self.value(a);
        let data = av.as_slice().iter().map(|&x| x * s).collect();
        let t = Tensor::from_vec(av.shape(), data).expect("same shape");
        self.push(Op::Scale(a, s), t, &[a])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<S>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "mul_const shape mismatch");
        let data = av
            .as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(av.shape(), data).expect("same shape");
        self.push(Op::MulConst(a, c), t, &[a])
    }

    /// Adds a per-(sample, channel) offset `v: [N, C]` to `x: [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(v).shape(), &[n, c], "add_channel: offset shape");
        let plane = h * w;
        let mut data = self.value(x).as_slice().to_vec();
        let vv = self.value(v).as_slice();
        for (idx, chunk) in data.chunks_mut(plane).enumerate() {
            let o = vv[idx];
            for d in chunk {
                *d = *d + o;
            }
        }
        let t = Tensor::from_vec(&[n, c, h, w], data).expect("same shape");
        self.push(Op::AddChannel { x, v }, t, &[x, v])
    }

    /// Per-channel `gamma * x + beta` with `gamma, beta: [C]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gamma).shape(), &[c]);
        assert_eq!(self.value(beta).shape(), &[c]);
        let plane = h * w;
        let mut data = self.value(x).as_slice().to_vec();
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        for (idx, chunk) in data.chunks_mut(plane).enumerate() {
            let ch = idx % c;
            for d in chunk {
                *d = *d * g[ch] + b[ch];
            }
        }
        let t = Tensor::from_vec(&[n, c, h, w], data).expect("same shape");
        self.push(Op::ChannelAffine { x, gamma, beta }, t, &[x, gamma, beta])
    }

    /// Group normalization without affine; `groups == C` normalizes each
    /// channel over its spatial extent, `groups == 1` over `(C, H, W)`.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(groups >= 1 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let len = (c / groups) * h * w;
        let mut data = self.value(x).as_slice().to_vec();
        let mut rstd = Vec::with_capacity(n * groups);
        let eps = S::of(NORM_EPS);
        let inv_len = S::one() / S::of(len as f64);
        for chunk in data.chunks_mut(len) {
            let mean = chunk.iter().copied().sum::<S>() * inv_len;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_len;
            let r = S::one() / (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::from_vec(&[n, c, h, w], data).expect("same shape");
        self.push(Op::GroupNorm { x, groups, rstd }, t, &[x])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.as_slice().iter().map(|&x| x * sigmoid(x)).collect();
        let t = Tensor::from_vec(av.shape(), data).expect("same shape");
        self.push(Op::Silu(a), t, &[a])
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let src = self.value(a).as_slice();
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![S::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut data[p * h2 * w2..(p + 1) * h2 * w2];
            for r in 0..h2 {
                let srow = &s[(r / 2) * w..(r / 2 + 1) * w];
                let drow = &mut d[r * w2..(r + 1) * w2];
                for (cc, v) in drow.iter_mut().enumerate() {
                    *v = srow[cc / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, h2, w2], data).expect("shape");
        self.push(Op::Upsample2x(a), t, &[a])
    }

    /// Channel concatenation of two `[N, *, H, W]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: mismatched shapes");
        let plane = h * w;
        let av = self.value(a).as_slice();
        let bv = self.value(b).as_slice();
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&av[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&bv[i * cb * plane..(i + 1) * cb * plane]);
        }
        let t = Tensor::from_vec(&[n, ca + cb, h, w], data).expect("shape");
        self.push(Op::Concat(a, b), t, &[a, b])
    }

    /// Single-head dot-product self-attention over spatial positions.
    ///
    /// `q, k, v: [N, C, H, W]`; position `a` attends to `b` with weight
    /// `softmax_b(q_a . k_b / sqrt(C))`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (n, c, h, w) = self.value(q).dims4();
        assert_eq!(self.value(k).dims4(), (n, c, h, w));
        assert_eq!(self.value(v).dims4(), (n, c, h, w));
        let l = h * w;
        let scale = S::one() / S::of(c as f64).sqrt();
        let mut probs = vec![S::zero(); n * l * l];
        let mut out = vec![S::zero(); n * c * l];
        {
            let qv = self.value(q).as_slice();
            let kv = self.value(k).as_slice();
            let vv = self.value(v).as_slice();
            for i in 0..n {
                let qi = &qv[i * c * l..(i + 1) * c * l];
                let ki = &kv[i * c * l..(i + 1) * c * l];
                let vi = &vv[i * c * l..(i + 1) * c * l];
                let pi = &mut probs[i * l * l..(i + 1) * l * l];
                // scores[a, b] = sum_c q[c, a] k[c, b]
                mm(l, c, l, qi, true, ki, false, pi, false);
                for row in pi.chunks_mut(l) {
                    let mut mx = S::neg_infinity();
                    for s in row.iter_mut() {
                        *s = *s * scale;
                        mx = mx.max(*s);
                    }
                    let mut total = S::zero();
                    for s in row.iter_mut() {
                        *s = (*s - mx).exp();
                        total = total + *s;
                    }
                    for s in row.iter_mut() {
                        *s = *s / total;
                    }
                }
                // out[c, a] = sum_b v[c, b] p[a, b]
                let oi = &mut out[i * c * l..(i + 1) * c * l];
                mm(c, l, l, vi, false, pi, true, oi, false);
            }
        }
        let t = Tensor::from_vec(&[n, c, h, w], out).expect("shape");
        self.push(
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
            t,
            &[q, k, v],
        )
    }

    /// Sum of squared entries, as a `[1]` tensor.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().map(|&x| x * x).sum();
        self.push(Op::SumSquares(a), Tensor::scalar(s), &[a])
    }

    /// Sums batch items (leading axis) within each group.
    pub fn group_sum(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let shape = self.value(x).shape().to_vec();
        let item: usize = shape[1..].iter().product();
        let xv = self.value(x).as_slice();
        let mut data = vec![S::zero(); groups.len() * item];
        for (g, members) in groups.iter().enumerate() {
            let dst = &mut data[g * item..(g + 1) * item];
            for &m in members {
                assert!(m < shape[0], "group_sum: index {m} out of range");
                for (d, &s) in dst.iter_mut().zip(&xv[m * item..(m + 1) * item]) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[0] = groups.len();
        let t = Tensor::from_vec(&out_shape, data).expect("shape");
        self.push(Op::GroupSum { x, groups }, t, &[x])
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> ParamGrads<S> {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut param_grads = ParamGrads::empty(self.params.len());
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), S::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, g, &mut grads, &mut param_grads);
        }
        param_grads
    }

    fn backward_node(
        &self,
        idx: usize,
        g: Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        param_grads: &mut ParamGrads<S>,
    ) {
        let out = self.nodes[idx].value.as_ref();
        match &self.nodes[idx].op {
            Op::Constant => {}
            Op::Param(id) => param_grads.add(*id, g),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(*x, *w, *b, *stride, *pad, &g, grads),
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![S::zero(); n * din];
                    mm(n, dout, din, g.as_slice(), false, self.value(*w).as_slice(), false, &mut dx, false);
                    accumulate(grads, *x, Tensor::from_vec(&[n, din], dx).expect("shape"));
                }
                if self.needs(*w) {
                    let mut dw = vec![S::zero(); dout * din];
                    mm(dout, n, din, g.as_slice(), true, self.value(*x).as_slice(), false, &mut dw, false);
                    accumulate(grads, *w, Tensor::from_vec(&[dout, din], dw).expect("shape"));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![S::zero(); dout];
                        for row in g.as_slice().chunks(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        accumulate(grads, *b, Tensor::from_vec(&[dout], db).expect("shape"));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, map(&g, |v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, zip(&g, self.value(*b), |d, y| d * y));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, zip(&g, self.value(*a), |d, x| d * x));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, map(&g, |d| d * s));
            }
            Op::MulConst(a, c) => accumulate(grads, *a, zip(&g, c, |d, y| d * y)),
            Op::AddChannel { x, v } => {
                let (n, c, h, w) = self.value(*x).dims4();
                if self.needs(*v) {
                    let dv = g
                        .as_slice()
                        .chunks(h * w)
                        .map(|ch| ch.iter().copied().sum::<S>())
                        .collect();
                    accumulate(grads, *v, Tensor::from_vec(&[n, c], dv).expect("shape"));
                }
                if self.needs(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (_, c, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let xv = self.value(*x).as_slice();
                let gv = self.value(*gamma).as_slice();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![S::zero(); c];
                    let mut db = vec![S::zero(); c];
                    for (idx, (gc, xc)) in g.as_slice().chunks(plane).zip(xv.chunks(plane)).enumerate() {
                        let ch = idx % c;
                        for (&d, &xx) in gc.iter().zip(xc) {
                            dg[ch] = dg[ch] + d * xx;
                            db[ch] = db[ch] + d;
                        }
                    }
                    if self.needs(*gamma) {
                        accumulate(grads, *gamma, Tensor::from_vec(&[c], dg).expect("shape"));
                    }
                    if self.needs(*beta) {
                        accumulate(grads, *beta, Tensor::from_vec(&[c], db).expect("shape"));
                    }
                }
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (idx, chunk) in dx.as_mut_slice().chunks_mut(plane).enumerate() {
                        let gm = gv[idx % c];
                        for d in chunk {
                            *d = *d * gm;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::GroupNorm { x, groups, rstd } => {
                let y = out.expect("group norm value");
                let (_, c, h, w) = y.dims4();
                let len = (c / groups) * h * w;
                let inv_len = S::one() / S::of(len as f64);
                let mut dx = g.clone();
                for ((dxc, yc), &r) in dx
                    .as_mut_slice()
                    .chunks_mut(len)
                    .zip(y.as_slice().chunks(len))
                    .zip(rstd)
                {
                    let mean_d = dxc.iter().copied().sum::<S>() * inv_len;
                    let mean_dy = dxc.iter().zip(yc).map(|(&d, &yy)| d * yy).sum::<S>() * inv_len;
                    for (d, &yy) in dxc.iter_mut().zip(yc) {
                        *d = r * (*d - mean_d - yy * mean_dy);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Silu(a) => {
                let dx = zip(&g, self.value(*a), |d, x| {
                    let s = sigmoid(x);
                    d * s * (S::one() + x * (S::one() - s))
                });
                accumulate(grads, *a, dx);
            }
            Op::Upsample2x(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![S::zero(); n * c * h * w];
                let gv = g.as_slice();
                for p in 0..n * c {
                    let gs = &gv[p * h2 * w2..(p + 1) * h2 * w2];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for r in 0..h2 {
                        let grow = &gs[r * w2..(r + 1) * w2];
                        let drow = &mut d[(r / 2) * w..(r / 2 + 1) * w];
                        for (cc, &v) in grow.iter().enumerate() {
                            drow[cc / 2] = drow[cc / 2] + v;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::from_vec(&[n, c, h, w], dx).expect("shape"));
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let plane = h * w;
                let gv = g.as_slice();
                let stride = (ca + cb) * plane;
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(n * ca * plane);
                    for i in 0..n {
                        da.extend_from_slice(&gv[i * stride..i * stride + ca * plane]);
                    }
                    accumulate(grads, *a, Tensor::from_vec(&[n, ca, h, w], da).expect("shape"));
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(n * cb * plane);
                    for i in 0..n {
                        db.extend_from_slice(&gv[i * stride + ca * plane..(i + 1) * stride]);
                    }
                    accumulate(grads, *b, Tensor::from_vec(&[n, cb, h, w], db).expect("shape"));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => self.attention_backward(*q, *k, *v, probs, *scale, &g, grads),
            Op::SumSquares(a) => {
                let s = g.as_slice()[0] * S::of(2.0);
                accumulate(grads, *a, map(self.value(*a), |x| x * s));
            }
            Op::GroupSum { x, groups } => {
                let shape = self.value(*x).shape().to_vec();
                let item: usize = shape[1..].iter().product();
                let mut dx = vec![S::zero(); shape.iter().product()];
                let gv = g.as_slice();
                for (gi, members) in groups.iter().enumerate() {
                    for &m in members {
                        for (d, &s) in dx[m * item..(m + 1) * item]
                            .iter_mut()
                            .zip(&gv[gi * item..(gi + 1) * item])
                        {
                            *d = *d + s;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&shape, dx).expect("shape"));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, _, k, _) = self.value(w).dims4();
        let (_, _, ho, wo) = g.dims4();
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let ckk = cin * k * k;
        let plane_out = ho * wo;
        let plane_in = cin * h * wd;
        let gv = g.as_slice();
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = vec![S::zero(); cout];
                for (idx, chunk) in gv.chunks(plane_out).enumerate() {
                    let co = idx % cout;
                    db[co] = db[co] + chunk.iter().copied().sum::<S>();
                }
                accumulate(grads, b, Tensor::from_vec(&[cout], db).expect("shape"));
            }
        }
        let need_w = self.needs(w);
        let need_x = self.needs(x);
        if !need_w && !need_x {
            return;
        }
        let xv = self.value(x).as_slice();
        let wv = self.value(w).as_slice();
        let mut dw = if need_w { vec![S::zero(); cout * ckk] } else { Vec::new() };
        let mut dx = if need_x { vec![S::zero(); n * plane_in] } else { Vec::new() };
        let pointwise = geo.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![S::zero(); ckk * plane_out] };
        let mut dcols = if pointwise || !need_x {
            Vec::new()
        } else {
            vec![S::zero(); ckk * plane_out]
        };
        for i in 0..n {
            let gi = &gv[i * cout * plane_out..(i + 1) * cout * plane_out];
            let xi = &xv[i * plane_in..(i + 1) * plane_in];
            if need_w {
                let src: &[S] = if pointwise {
                    xi
                } else {
                    im2col(xi, &geo, &mut cols);
                    &cols
                };
                mm(cout, plane_out, ckk, gi, false, src, true, &mut dw, true);
            }
            if need_x {
                let dxi = &mut dx[i * plane_in..(i + 1) * plane_in];
                if pointwise {
                    mm(ckk, cout, plane_out, wv, true, gi, false, dxi, false);
                } else {
                    mm(ckk, cout, plane_out, wv, true, gi, false, &mut dcols, false);
                    col2im(&dcols, &geo, dxi);
                }
            }
        }
        if need_w {
            accumulate(grads, w, Tensor::from_vec(&[cout, cin, k, k], dw).expect("shape"));
        }
        if need_x {
            accumulate(grads, x, Tensor::from_vec(&[n, cin, h, wd], dx).expect("shape"));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        probs: &[S],
        scale: S,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (n, c, h, w) = self.value(q).dims4();
        let l = h * w;
        let qv = self.value(q).as_slice();
        let kv = self.value(k).as_slice();
        let vv = self.value(v).as_slice();
        let gv = g.as_slice();
        let mut dq = vec![S::zero(); n * c * l];
        let mut dk = vec![S::zero(); n * c * l];
        let mut dv = vec![S::zero(); n * c * l];
        let mut dp = vec![S::zero(); l * l];
        for i in 0..n {
            let r = i * c * l..(i + 1) * c * l;
            let pi = &probs[i * l * l..(i + 1) * l * l];
            let gi = &gv[r.clone()];
            // dv = dOut . P
            mm(c, l, l, gi, false, pi, false, &mut dv[r.clone()], false);
            // dP = dOut^T . v   ([l, c] . [c, l])
            mm(l, c, l, gi, true, &vv[r.clone()], false, &mut dp, false);
            // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
            for (prow, drow) in pi.chunks(l).zip(dp.chunks_mut(l)) {
                let dot = prow.iter().zip(drow.iter()).map(|(&p, &d)| p * d).sum::<S>();
                for (d, &p) in drow.iter_mut().zip(prow) {
                    *d = p * (*d - dot) * scale;
                }
            }
            // dq = k . dS^T, dk = q . dS
            mm(c, l, l, &kv[r.clone()], false, &dp, true, &mut dq[r.clone()], false);
            mm(c, l, l, &qv[r.clone()], false, &dp, false, &mut dk[r.clone()], false);
        }
        let shape = [n, c, h, w];
        if self.needs(q) {
            accumulate(grads, q, Tensor::from_vec(&shape, dq).expect("shape"));
        }
        if self.needs(k) {
            accumulate(grads, k, Tensor::from_vec(&shape, dk).expect("shape"));
        }
        if self.needs(v) {
            accumulate(grads, v, Tensor::from_vec(&shape, dv).expect("shape"));
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, t: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn map<S: Scalar>(t: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::from_vec(t.shape(), t.as_slice().iter().map(|&v| f(v)).collect()).expect("shape")
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(
        a.shape(),
        a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape")
}

/// `c (+)= op(a) . op(b)` for row-major matrices; `ta`/`tb` mark operands
/// stored transposed. Logical shapes: `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
fn mm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    c: &mut [S],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    S::gemm(m, k, n, S::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output column range `[lo, hi)` whose input column `ox*stride + kj - pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let off = kj as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((self.w as isize - off) + s - 1) / s;
        let hi = hi.clamp(0, self.wo as isize);
        (lo as usize, (hi.max(lo)) as usize)
    }
}

fn im2col<S: Scalar>(x: &[S], geo: &ConvGeometry, cols: &mut [S]) {
    let plane_out = geo.ho * geo.wo;
    let k = geo.k;
    for c in 0..geo.cin {
        let xc = &x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                let (lo, hi) = geo.valid_cols(kj);
                for oy in 0..geo.ho {
                    let d = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        d.fill(S::zero());
                        continue;
                    }
                    let xrow = &xc[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    d[..lo].fill(S::zero());
                    d[hi..].fill(S::zero());
                    if geo.stride == 1 {
                        let start = (lo + kj) - geo.pad;
                        d[lo..hi].copy_from_slice(&xrow[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = xrow[ox * geo.stride + kj - geo.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], geo: &ConvGeometry, dx: &mut [S]) {
    let plane_out = geo.ho * geo.wo;
    let k = geo.k;
    for c in 0..geo.cin {
        let xc = &mut dx[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                let (lo, hi) = geo.valid_cols(kj);
                for oy in 0..geo.ho {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let s = &src[oy * geo.wo..(oy + 1) * geo.wo];
                    let xrow = &mut xc[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for ox in lo..hi {
                        let ix = ox * geo.stride + kj - geo.pad;
                        xrow[ix] = xrow[ix] + s[ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(loss)/d(param) against central differences for every parameter entry.
    fn check<F>(store: &mut ParamStore<f64>, build: F)
    where
        F: Fn(&mut Graph<'_, f64>) -> Var,
    {
        let grads = {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss)
        };
        let h = 1e-6;
        let ids: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
        for id in ids {
            for e in 0..store.get(id).len() {
                let orig = store.get(id).as_slice()[e];
                store.get_mut(id).as_mut_slice()[e] = orig + h;
                let plus = {
                    let mut g = Graph::inference(store);
                    let l = build(&mut g);
                    g.value(l).as_slice()[0]
                };
                store.get_mut(id).as_mut_slice()[e] = orig - h;
                let minus = {
                    let mut g = Graph::inference(store);
                    let l = build(&mut g);
                    g.value(l).as_slice()[0]
                };
                store.get_mut(id).as_mut_slice()[e] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |t| t.as_slice()[e]);
                let denom = numeric.abs().max(analytic.abs()).max(1e-3);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-5,
                    "param {} entry {e}: numeric {numeric} analytic {analytic}",
                    id.0
                );
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let mut store = ParamStore::new();
            let x = store.add("x", rand_tensor(&[2, 2, 5, 6], &mut rng));
            let w = store.add("w", rand_tensor(&[3, 2, k, k], &mut rng));
            let b = store.add("b", rand_tensor(&[3], &mut rng));
            check(&mut store, |g| {
                let (xv, wv, bv) = (g.param(x), g.param(w), g.param(b));
                let y = g.conv2d(xv, wv, Some(bv), stride, pad);
                g.sum_squares(y)
            });
        }
    }

    #[test]
    fn norm_affine_silu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&[2, 4, 3, 3], &mut rng));
        let gm = store.add("g", rand_tensor(&[4], &mut rng));
        let bt = store.add("b", rand_tensor(&[4], &mut rng));
        let off = store.add("o", rand_tensor(&[2, 4], &mut rng));
        let target = rand_tensor(&[2, 4, 3, 3], &mut rng);
        for groups in [1, 2, 4] {
            check(&mut store, |g| {
                let xv = g.param(x);
                let n = g.group_norm(xv, groups);
                let (gv, bv) = (g.param(gm), g.param(bt));
                let a = g.channel_affine(n, gv, bv);
                let ov = g.param(off);
                let a = g.add_channel(a, ov);
                let s = g.silu(a);
                let t = g.constant(target.clone());
                let d = g.sub(s, t);
                g.sum_squares(d)
            });
        }
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&[2, 2, 2, 3], &mut rng));
        let b = store.add("b", rand_tensor(&[2, 1, 2, 3], &mut rng));
        let mask = rand_tensor(&[2, 3, 4, 6], &mut rng);
        check(&mut store, |g| {
            let (av, bv) = (g.param(a), g.param(b));
            let c = g.concat(av, bv);
            let u = g.upsample2x(c);
            let m = g.mul_const(u, mask.clone());
            let p = g.mul(m, u);
            let s = g.scale(p, 0.3);
            let gs = g.group_sum(s, vec![vec![0, 1], vec![1]]);
            g.sum_squares(gs)
        });
    }

    #[test]
    fn linear_and_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&[3, 4], &mut rng));
        let w = store.add("w", rand_tensor(&[5, 4], &mut rng));
        let b = store.add("b", rand_tensor(&[5], &mut rng));
        let q = store.add("q", rand_tensor(&[2, 3, 2, 2], &mut rng));
        let k = store.add("k", rand_tensor(&[2, 3, 2, 2], &mut rng));
        let v = store.add("v", rand_tensor(&[2, 3, 2, 2], &mut rng));
        check(&mut store, |g| {
            let (xv, wv, bv) = (g.param(x), g.param(w), g.param(b));
            let y = g.linear(xv, wv, Some(bv));
            let l1 = g.sum_squares(y);
            let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
            let att = g.attention(qv, kv, vv);
            let l2 = g.sum_squares(att);
            g.add(l1, l2)
        });
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let q = g.constant(rand_tensor(&[1, 2, 2, 2], &mut rng));
        let k = g.constant(rand_tensor(&[1, 2, 2, 2], &mut rng));
        // v = all ones => every output equals the row sum of the attention weights.
        let v = g.constant(Tensor::filled(&[1, 2, 2, 2], 1.0));
        let out = g.attention(q, k, v);
        for &o in g.value(out).as_slice() {
            assert!((o - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_branches_get_no_gradient_work() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::filled(&[1, 1, 3, 3], 0.5));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::filled(&[1, 1, 4, 4], 1.0));
        let wv = g.param(w);
        let y = g.conv2d(x, wv, None, 1, 1);
        assert!(!g.needs(x));
        assert!(g.needs(y));
        let l = g.sum_squares(y);
        let grads = g.backward(l);
        assert!(grads.get(w).is_some());
    }
}
