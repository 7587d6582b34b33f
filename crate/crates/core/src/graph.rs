//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes
//! are pushed, and [`Graph::backward`] walks the tape in reverse. Leaves are
//! either trainable inputs (`leaf(_, true)`) or constants. Shape errors inside
//! the tape are programming errors and panic; public operations validate their
//! inputs before building on the tape.

use crate::kernels::{self, ConvGeom};
use crate::tensor::{cast, nchw, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    MulPerSample(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    InstanceNorm {
        x: Var,
        invstd: Vec<T>,
    },
    Modulate {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    MeanSpatial(Var),
    Gather(Var, Vec<usize>),
    SelectRows(Vec<Var>, Vec<usize>),
    Narrow {
        x: Var,
        start: usize,
    },
    GradImage(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`'s current value (gradient does not flow back).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y).unwrap();
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y).unwrap();
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y).unwrap();
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), move |x| {
            if x > T::zero() {
                x
            } else {
                x * slope
            }
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a), &[a])
    }

    /// (N, ...) -> (N): sum of every sample's elements.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.shape()[0];
        let inner = t.numel() / n.max(1);
        let data = t.data().chunks(inner.max(1)).map(|c| c.iter().copied().sum()).collect();
        let value = Tensor::from_vec(&[n], data).unwrap();
        self.push(value, Op::SumPerSample(a), &[a])
    }

    /// x (N, ...) scaled sample-wise by s (N).
    pub fn mul_per_sample(&mut self, x: Var, s: Var) -> Var {
        let (xt, st) = (self.value(x), self.value(s));
        let n = xt.shape()[0];
        assert_eq!(st.shape(), &[n], "mul_per_sample: scale must be (N)");
        let inner = xt.numel() / n.max(1);
        let mut value = xt.clone();
        for (chunk, &sv) in value.data_mut().chunks_mut(inner.max(1)).zip(st.data()) {
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        self.push(value, Op::MulPerSample(x, s), &[x, s])
    }

    /// 2-D convolution, NCHW input, weight (out, in, k, k), optional bias (out).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = nchw(self.shape(x)).expect("conv2d input");
        let ws = self.shape(w).to_vec();
        assert!(
            ws.len() == 4 && ws[1] == c && ws[2] == ws[3],
            "conv2d: weight {ws:?} does not fit input channels {c}"
        );
        let geom = ConvGeom {
            in_ch: c,
            out_ch: ws[0],
            h,
            w: wd,
            kernel: ws[2],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[n, geom.out_ch, geom.out_h(), geom.out_w()], out).unwrap();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// x (B, in) times weightᵀ (out, in) plus bias (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1],
            "linear: input {xs:?} vs weight {ws:?}"
        );
        let (bsz, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); bsz * dout];
        let mut beta = T::zero();
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
            beta = T::one();
        }
        T::gemm(
            bsz,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            1,
            din as isize,
            beta,
            &mut out,
            dout as isize,
            1,
        );
        let value = Tensor::from_vec(&[bsz, dout], out).unwrap();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = nchw(self.shape(x)).expect("avg_pool2 input");
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes");
        let out = kernels::avg_pool2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::from_vec(&[n, c, h / 2, w / 2], out).unwrap();
        self.push(value, Op::AvgPool2(x), &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = nchw(self.shape(x)).expect("upsample2 input");
        let out = kernels::upsample2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out).unwrap();
        self.push(value, Op::Upsample2(x), &[x])
    }

    /// Channel concatenation of NCHW tensors with equal N, H, W.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = nchw(self.shape(parts[0])).expect("concat input");
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = nchw(self.shape(p)).expect("concat input");
            assert!(pn == n && ph == h && pw == w, "concat: incompatible parts");
            channels += pc;
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * h * w;
                data.extend_from_slice(&t.data()[s * per..(s + 1) * per]);
            }
        }
        let value = Tensor::from_vec(&[n, channels, h, w], data).unwrap();
        self.push(value, Op::Concat(parts.to_vec()), parts)
    }

    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (n, c, h, w) = nchw(self.shape(x)).expect("instance_norm input");
        let (out, invstd) = kernels::instance_norm_forward(self.value(x).data(), n * c, h * w);
        let value = Tensor::from_vec(&[n, c, h, w], out).unwrap();
        self.push(value, Op::InstanceNorm { x, invstd }, &[x])
    }

    /// `x * (1 + gamma) + beta` with per-sample, per-channel gamma/beta of shape (N, C).
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, c, h, w) = nchw(self.shape(x)).expect("modulate input");
        assert_eq!(self.shape(gamma), &[n, c], "modulate: gamma shape");
        assert_eq!(self.shape(beta), &[n, c], "modulate: beta shape");
        let hw = h * w;
        let mut value = self.value(x).clone();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        for (p, plane) in value.data_mut().chunks_mut(hw).enumerate() {
            let (scale, shift) = (T::one() + g[p], b[p]);
            plane.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        self.push(value, Op::Modulate { x, gamma, beta }, &[x, gamma, beta])
    }

    /// (N, C, H, W) -> (N, C) spatial mean.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let (n, c, h, w) = nchw(self.shape(x)).expect("mean_spatial input");
        let inv = cast::<T>(1.0 / (h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(&[n, c], data).unwrap();
        self.push(value, Op::MeanSpatial(x), &[x])
    }

    /// (B, K) -> (B): picks column `idx[b]` of row b.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 2 && s[0] == idx.len(), "gather: shape {s:?}");
        let k = s[1];
        let data = idx
            .iter()
            .enumerate()
            .map(|(b, &i)| {
                assert!(i < k, "gather index out of range");
                self.value(x).data()[b * k + i]
            })
            .collect();
        let value = Tensor::from_vec(&[idx.len()], data).unwrap();
        self.push(value, Op::Gather(x, idx.to_vec()), &[x])
    }

    /// Row b of the result is row b of `choices[idx[b]]`.
    pub fn select_rows(&mut self, choices: &[Var], idx: &[usize]) -> Var {
        let shape = self.shape(choices[0]).to_vec();
        for &c in choices {
            assert_eq!(self.shape(c), shape.as_slice(), "select_rows: shapes differ");
        }
        assert_eq!(shape[0], idx.len(), "select_rows: index length");
        let inner: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(shape[0] * inner);
        for (b, &i) in idx.iter().enumerate() {
            data.extend_from_slice(&self.value(choices[i]).data()[b * inner..(b + 1) * inner]);
        }
        let value = Tensor::from_vec(&shape, data).unwrap();
        self.push(value, Op::SelectRows(choices.to_vec(), idx.to_vec()), choices)
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 2 && start + len <= s[1], "narrow: {s:?}");
        let data = self
            .value(x)
            .data()
            .chunks(s[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::from_vec(&[s[0], len], data).unwrap();
        self.push(value, Op::Narrow { x, start }, &[x])
    }

    /// Forward differences of an NCHW image, stacked as (∂x, ∂y) per channel.
    pub fn grad_image(&mut self, x: Var) -> Var {
        let (n, c, h, w) = nchw(self.shape(x)).expect("grad_image input");
        let out = grad_image_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::from_vec(&[n, 2 * c, h, w], out).unwrap();
        self.push(value, Op::GradImage(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape");
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).unwrap();
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).unwrap();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Abs(a) => {
                let ga = g
                    .zip_map(self.value(*a), |gv, x| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let two = cast::<T>(2.0);
                let ga = g.zip_map(self.value(*a), |gv, x| gv * two * x).unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |gv, y| gv * (T::one() - y * y)).unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g
                    .zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })
                    .unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let ga = g
                    .zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * slope })
                    .unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x)).unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let gv = g.item() / cast::<T>(n as f64);
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::SumPerSample(a) => {
                let shape = self.shape(*a);
                let inner = self.value(*a).numel() / shape[0].max(1);
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv, inner))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(shape, data).unwrap());
            }
            Op::MulPerSample(x, s) => {
                let xt = self.value(*x);
                let n = xt.shape()[0];
                let inner = xt.numel() / n.max(1);
                if self.wants(*x) {
                    let mut gx = g.clone();
                    let sv = self.value(*s).data();
                    for (chunk, &k) in gx.data_mut().chunks_mut(inner.max(1)).zip(sv) {
                        chunk.iter_mut().for_each(|v| *v *= k);
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*s) {
                    let data = g
                        .data()
                        .chunks(inner.max(1))
                        .zip(xt.data().chunks(inner.max(1)))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::from_vec(&[n], data).unwrap());
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let cg = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    g.data(),
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).unwrap());
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw).unwrap());
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (bsz, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); bsz * din];
                    T::gemm(
                        bsz,
                        dout,
                        din,
                        T::one(),
                        g.data(),
                        dout as isize,
                        1,
                        self.value(*w).data(),
                        din as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        din as isize,
                        1,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&[bsz, din], dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(
                        dout,
                        bsz,
                        din,
                        T::one(),
                        g.data(),
                        1,
                        dout as isize,
                        self.value(*x).data(),
                        din as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        din as isize,
                        1,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(&[dout, din], dw).unwrap());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.data().chunks(dout) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[dout], db).unwrap());
                    }
                }
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = nchw(self.shape(*x)).unwrap();
                let dx = kernels::avg_pool2_backward(g.data(), n * c, h, w);
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx).unwrap());
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = nchw(self.shape(*x)).unwrap();
                let dx = kernels::upsample2_backward(g.data(), n * c, h, w);
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx).unwrap());
            }
            Op::Concat(parts) => {
                let (n, _, h, w) = nchw(out.shape()).unwrap();
                let total = out.numel() / n.max(1);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    let per = pc * h * w;
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(n * per);
                        for s in 0..n {
                            let base = s * total + offset;
                            data.extend_from_slice(&g.data()[base..base + per]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(self.shape(p), data).unwrap());
                    }
                    offset += per;
                }
            }
            Op::InstanceNorm { x, invstd } => {
                let (_, _, h, w) = nchw(self.shape(*x)).unwrap();
                let dx = kernels::instance_norm_backward(out.data(), invstd, g.data(), h * w);
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).unwrap());
            }
            Op::Modulate { x, gamma, beta } => {
                let (n, c, h, w) = nchw(self.shape(*x)).unwrap();
                let hw = h * w;
                let gm = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for (p, plane) in gx.data_mut().chunks_mut(hw).enumerate() {
                        let s = T::one() + gm[p];
                        plane.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*gamma) {
                    let xv = self.value(*x).data();
                    let data = g
                        .data()
                        .chunks(hw)
                        .zip(xv.chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *gamma, Tensor::from_vec(&[n, c], data).unwrap());
                }
                if self.wants(*beta) {
                    let data = g.data().chunks(hw).map(|gp| gp.iter().copied().sum()).collect();
                    self.accumulate(grads, *beta, Tensor::from_vec(&[n, c], data).unwrap());
                }
            }
            Op::MeanSpatial(x) => {
                let (n, c, h, w) = nchw(self.shape(*x)).unwrap();
                let inv = cast::<T>(1.0 / (h * w) as f64);
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, h * w))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], data).unwrap());
            }
            Op::Gather(x, idx) => {
                let k = self.shape(*x)[1];
                let mut gx = Tensor::zeros(self.shape(*x));
                for (b, (&i, &gv)) in idx.iter().zip(g.data()).enumerate() {
                    gx.data_mut()[b * k + i] = gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SelectRows(choices, idx) => {
                let shape = out.shape();
                let inner: usize = shape[1..].iter().product();
                for (ci, &c) in choices.iter().enumerate() {
                    if !self.wants(c) || !idx.contains(&ci) {
                        continue;
                    }
                    let mut gc = Tensor::zeros(shape);
                    for (b, _) in idx.iter().enumerate().filter(|(_, &i)| i == ci) {
                        gc.data_mut()[b * inner..(b + 1) * inner]
                            .copy_from_slice(&g.data()[b * inner..(b + 1) * inner]);
                    }
                    self.accumulate(grads, c, gc);
                }
            }
            Op::Narrow { x, start } => {
                let xs = self.shape(*x);
                let len = out.shape()[1];
                let mut gx = Tensor::zeros(xs);
                for (row, grow) in gx.data_mut().chunks_mut(xs[1]).zip(g.data().chunks(len)) {
                    row[*start..start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GradImage(x) => {
                let (n, c, h, w) = nchw(self.shape(*x)).unwrap();
                let dx = grad_image_backward(g.data(), n * c, h, w);
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx).unwrap());
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x)).unwrap();
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

pub fn softplus<T: Element>(x: T) -> T {
    // max(x, 0) + ln(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Layout: for every input plane p, output planes 2p (horizontal) and 2p+1 (vertical).
/// The last column / row difference is zero (replicate boundary).
fn grad_image_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); 2 * planes * hw];
    for p in 0..planes {
        let src = &x[p * hw..(p + 1) * hw];
        let (dxp, dyp) = out[2 * p * hw..2 * (p + 1) * hw].split_at_mut(hw);
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                if xx + 1 < w {
                    dxp[i] = src[i + 1] - src[i];
                }
                if y + 1 < h {
                    dyp[i] = src[i + w] - src[i];
                }
            }
        }
    }
    out
}

fn grad_image_backward<T: Element>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut dx = vec![T::zero(); planes * hw];
    for p in 0..planes {
        let gx = &g[2 * p * hw..(2 * p + 1) * hw];
        let gy = &g[(2 * p + 1) * hw..2 * (p + 1) * hw];
        let d = &mut dx[p * hw..(p + 1) * hw];
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                if xx + 1 < w {
                    d[i + 1] += gx[i];
                    d[i] -= gx[i];
                }
                if y + 1 < h {
                    d[i + w] += gy[i];
                    d[i] -= gy[i];
                }
            }
        }
    }
    dx
}
