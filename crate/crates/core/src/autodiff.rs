//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever
//! it needs for the backward rule. [`Tape::backward`] walks the nodes in
//! reverse recording order, so a node's gradient is complete before it is
//! propagated to its inputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

// Similarity clamp before arccos, keeps the derivative finite.
const COS_CLAMP: f64 = 1.0 - 1e-7;
const NORM_FLOOR: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        // Empty for pointwise convolutions, whose columns are the input.
        cols: Vec<T>,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    LeakyRelu {
        input: Var,
        alpha: T,
    },
    Sigmoid {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    ChannelScale {
        input: Var,
        weights: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Narrow {
        input: Var,
        start: usize,
    },
    Softmax {
        input: Var,
    },
    Log {
        input: Var,
    },
    SoftIou {
        belief: Var,
        target: Var,
        inter: f64,
        union: f64,
    },
    CosineDistance {
        x: Var,
        y: Var,
        // d(distance)/d(x) and d(distance)/d(y), evaluated in f64.
        dx: Vec<f64>,
        dy: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation, owned by a single thread.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn chw<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected a [C, H, W] input, got rank {} shape {:?}", t.rank(), t.shape()),
        )),
    }
}

#[inline]
fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let mut value = t;
        value.clear_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, true)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, k, k]`
    /// kernels and an optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let x = self.value(input);
        let kt = self.value(kernel);
        let (c_in, h, w) = chw(OP, x)?;
        let [c_out, kc, kh, kw] = *kt.shape() else {
            return Err(Error::shape(
                OP,
                format!("kernel must be [C_out, C_in, k, k], got {:?}", kt.shape()),
            ));
        };
        if kc != c_in {
            return Err(Error::shape(
                OP,
                format!("kernel C_in is {kc} but the input has {c_in} channels"),
            ));
        }
        if kh != kw {
            return Err(Error::shape(OP, format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        let geom = ConvGeom::new(c_in, h, w, kh, stride, padding).ok_or_else(|| {
            Error::shape(
                OP,
                format!("input H x W = {h}x{w} with padding {padding} is smaller than kernel {kh}"),
            )
        })?;
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(
                    OP,
                    format!("bias must be [{c_out}], got {:?}", self.value(b).shape()),
                ));
            }
        }
        let (r, n) = (geom.col_rows(), geom.col_cols());
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            let mut cols = vec![T::zero(); r * n];
            kernels::im2col(x.data(), &geom, &mut cols);
            cols
        };
        let mut out = vec![T::zero(); c_out * n];
        {
            let colsref = if geom.is_pointwise() { x.data() } else { &cols };
            kernels::matmul(c_out, r, n, kt.data(), false, colsref, false, T::zero(), &mut out);
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (co, row) in out.chunks_exact_mut(n).enumerate() {
                let bv = bd[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::new(&[c_out, geom.out_h, geom.out_w], out)?;
        let mut ins = vec![input, kernel];
        ins.extend(bias);
        let rg = self.rg(&ins);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Transposed convolution of a `[C_in, H, W]` input with
    /// `[C_in, C_out, k, k]` kernels, producing `[C_out, H*stride, W*stride]`.
    ///
    /// This is the adjoint of [`Tape::conv2d`] with the same kernel, the
    /// same stride and padding `(k - 1) / 2`, taken from a
    /// `[C_out, H*stride, W*stride]` image down to `[C_in, H, W]`.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d_transpose";
        let x = self.value(input);
        let kt = self.value(kernel);
        let (c_in, h, w) = chw(OP, x)?;
        let [kc, c_out, kh, kw] = *kt.shape() else {
            return Err(Error::shape(
                OP,
                format!("kernel must be [C_in, C_out, k, k], got {:?}", kt.shape()),
            ));
        };
        if kc != c_in {
            return Err(Error::shape(
                OP,
                format!("kernel C_in is {kc} but the input has {c_in} channels"),
            ));
        }
        if kh != kw {
            return Err(Error::shape(OP, format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        let geom = ConvGeom::new(c_out, h * stride, w * stride, kh, stride, (kh - 1) / 2)
            .filter(|g| g.out_h == h && g.out_w == w)
            .ok_or_else(|| {
                Error::shape(
                    OP,
                    format!("kernel {kh} with stride {stride} cannot map {h}x{w} to {}x{}", h * stride, w * stride),
                )
            })?;
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(
                    OP,
                    format!("bias must be [{c_out}], got {:?}", self.value(b).shape()),
                ));
            }
        }
        let (r, n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); r * n];
        kernels::matmul(r, c_in, n, kt.data(), true, x.data(), false, T::zero(), &mut cols);
        let mut out = vec![T::zero(); c_out * geom.height * geom.width];
        kernels::col2im(&cols, &geom, &mut out);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            let plane = geom.height * geom.width;
            for (co, row) in out.chunks_exact_mut(plane).enumerate() {
                let bv = bd[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::new(&[c_out, geom.height, geom.width], out)?;
        let mut ins = vec![input, kernel];
        ins.extend(bias);
        let rg = self.rg(&ins);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "maxpool2x2";
        let x = self.value(input);
        let (c, h, w) = chw(OP, x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                OP,
                format!("spatial dims must be even, got H = {h}, W = {w}"),
            ));
        }
        let (out, argmax) = kernels::maxpool2x2(x.data(), c, h, w);
        let value = Tensor::new(&[c, h / 2, w / 2], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaxPool2x2 { input, argmax }, rg))
    }

    /// Per-channel maximum over all spatial positions: `[C, H, W] -> [C, 1, 1]`.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = chw("global_max_pool", x)?;
        let plane = h * w;
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for ch in 0..c {
            let row = &x.data()[ch * plane..(ch + 1) * plane];
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            out.push(row[best]);
            argmax.push(ch * plane + best);
        }
        let value = Tensor::new(&[c, 1, 1], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::GlobalMaxPool { input, argmax }, rg))
    }

    pub fn leaky_relu(&mut self, input: Var, alpha: T) -> Var {
        let value = self
            .value(input)
            .map(|v| if v >= T::zero() { v } else { alpha * v });
        let rg = self.rg(&[input]);
        self.push(value, Op::LeakyRelu { input, alpha }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self
            .value(input)
            .map(|v| T::lit(sigmoid_f64(v.as_f64())));
        let rg = self.rg(&[input]);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Outside training, or at rate 0, the input is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    /// Multiplies channel `c` of a `[C, H, W]` input by `weights[c]`.
    pub fn channel_scale(&mut self, input: Var, weights: Var) -> Result<Var> {
        const OP: &str = "channel_scale";
        let x = self.value(input);
        let (c, h, w) = chw(OP, x)?;
        let wt = self.value(weights);
        if wt.shape() != [c] {
            return Err(Error::shape(
                OP,
                format!("weights must have length C = {c}, got shape {:?}", wt.shape()),
            ));
        }
        let plane = h * w;
        let mut out = x.data().to_vec();
        for (ch, row) in out.chunks_exact_mut(plane).enumerate() {
            let s = wt.data()[ch];
            row.iter_mut().for_each(|v| *v = *v * s);
        }
        let value = Tensor::new(&[c, h, w], out)?;
        let rg = self.rg(&[input, weights]);
        Ok(self.push(value, Op::ChannelScale { input, weights }, rg))
    }

    /// Affine map `weight * input + bias` for a rank-1 input.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "dense";
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let [n] = *x.shape() else {
            return Err(Error::shape(OP, format!("input must be rank 1, got {:?}", x.shape())));
        };
        let [m, wn] = *wt.shape() else {
            return Err(Error::shape(OP, format!("weight must be [M, N], got {:?}", wt.shape())));
        };
        if wn != n {
            return Err(Error::shape(
                OP,
                format!("weight has N = {wn} columns but the input has length {n}"),
            ));
        }
        if b.shape() != [m] {
            return Err(Error::shape(OP, format!("bias must be [{m}], got {:?}", b.shape())));
        }
        let mut out = b.data().to_vec();
        kernels::matmul(m, n, 1, wt.data(), false, x.data(), false, T::one(), &mut out);
        let value = Tensor::new(&[m], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(op, x, y)?;
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.rg(&[a, b]);
        let node = match op {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(value, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.rg(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(T::lit(s)), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s: f64 = x.data().iter().map(|v| v.as_f64()).sum();
        let value = Tensor::scalar(T::lit(s / x.len() as f64));
        let rg = self.rg(&[input]);
        self.push(value, Op::Mean { input }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Contiguous slice `[start, start + len)` of a rank-1 tensor.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let [n] = *x.shape() else {
            return Err(Error::shape("narrow", format!("input must be rank 1, got {:?}", x.shape())));
        };
        if len == 0 || start + len > n {
            return Err(Error::shape(
                "narrow",
                format!("slice [{start}, {}) is outside a vector of length {n}", start + len),
            ));
        }
        let value = Tensor::new(&[len], x.data()[start..start + len].to_vec())?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Narrow { input, start }, rg))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 1 {
            return Err(Error::shape("softmax", format!("input must be rank 1, got {:?}", x.shape())));
        }
        let max = x.data().iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.data().iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let value = Tensor::new(x.shape(), e.iter().map(|v| T::lit(v / z)).collect())?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if let Some(v) = x.data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::invalid("log", format!("non-positive argument {v}")));
        }
        let value = x.map(|v| v.ln());
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Log { input }, rg))
    }

    /// `1 - sum(p*g) / sum(p + g - p*g)`; zero when both maps are empty.
    pub fn soft_iou_loss(&mut self, belief: Var, target: Var) -> Result<Var> {
        let (p, g) = (self.value(belief), self.value(target));
        same_shape("soft_iou_loss", p, g)?;
        let (mut inter, mut union) = (0.0f64, 0.0f64);
        for (&pv, &gv) in p.data().iter().zip(g.data()) {
            let (pv, gv) = (pv.as_f64(), gv.as_f64());
            inter += pv * gv;
            union += pv + gv - pv * gv;
        }
        let loss = if union > 0.0 { 1.0 - inter / union } else { 0.0 };
        let rg = self.rg(&[belief, target]);
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::SoftIou {
                belief,
                target,
                inter,
                union,
            },
            rg,
        ))
    }

    /// Angle between two vectors divided by pi, in `[0, 1]`.
    pub fn cosine_distance(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        if a.rank() != 1 {
            return Err(Error::shape(
                "cosine_distance",
                format!("operands must be vectors, got {:?}", a.shape()),
            ));
        }
        same_shape("cosine_distance", a, b)?;
        let av: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
        let bv: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
        let (d, dx, dy) = cosine_distance_with_grad(&av, &bv);
        let rg = self.rg(&[x, y]);
        Ok(self.push(Tensor::scalar(T::lit(d)), Op::CosineDistance { x, y, dx, dy }, rg))
    }

    /// Distance of the recorded forward pass from the nearest point where a
    /// piecewise op changes branch: leaky-ReLU inputs near zero, near-ties
    /// in max pooling, similarities near the arccos clamp. Finite
    /// differences with a step much smaller than this are reliable.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { input, .. } => {
                    for v in self.value(*input).data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::MaxPool2x2 { input, argmax } => {
                    let x = self.value(*input);
                    let (h, w) = (x.shape()[1], x.shape()[2]);
                    for &best in argmax {
                        let local = best % (h * w);
                        let plane = best - local;
                        let (y0, x0) = ((local / w) / 2 * 2, (local % w) / 2 * 2);
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = plane + (y0 + dy) * w + x0 + dx;
                            if idx != best {
                                let gap = (x.data()[best] - x.data()[idx]).as_f64();
                                margin = margin.min(gap);
                            }
                        }
                    }
                }
                Op::GlobalMaxPool { input, argmax } => {
                    let x = self.value(*input);
                    let plane = x.len() / argmax.len();
                    for (c, &best) in argmax.iter().enumerate() {
                        for idx in c * plane..(c + 1) * plane {
                            if idx != best {
                                let gap = (x.data()[best] - x.data()[idx]).as_f64();
                                margin = margin.min(gap);
                            }
                        }
                    }
                }
                Op::CosineDistance { .. } => {
                    let s = (node.value.data()[0].as_f64() * std::f64::consts::PI).cos();
                    margin = margin.min(COS_CLAMP - s.abs());
                }
                _ => {}
            }
        }
        margin
    }

    /// Gradients of a scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let l = self.value(loss);
        if l.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", l.shape()),
            ));
        }
        self.backward_seeded(vec![(loss, vec![T::one()])])
    }

    /// Backward sweep started from arbitrary upstream gradients; seeds for
    /// the same value are summed.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Vec<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            let n = &self.nodes[v.0];
            if g.len() != n.value.len() {
                return Err(Error::shape(
                    "backward",
                    format!("seed of length {} for a value with {} elements", g.len(), n.value.len()),
                ));
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                slot => *slot = Some(g),
            }
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let c_out = node.value.shape()[0];
                let (r, n) = (geom.col_rows(), geom.col_cols());
                let x = self.value(*input);
                let colsref: &[T] = if geom.is_pointwise() { x.data() } else { cols };
                self.accumulate(grads, *kernel, |dk| {
                    kernels::matmul(c_out, n, r, g, false, colsref, true, T::one(), dk);
                });
                if let Some(b) = bias {
                    self.accumulate(grads, *b, |db| {
                        for (co, row) in g.chunks_exact(n).enumerate() {
                            db[co] = db[co] + row.iter().copied().sum();
                        }
                    });
                }
                if self.nodes[input.0].requires_grad {
                    let kt = self.value(*kernel).data();
                    if geom.is_pointwise() {
                        self.accumulate(grads, *input, |dx| {
                            kernels::matmul(r, c_out, n, kt, true, g, false, T::one(), dx);
                        });
                    } else {
                        let mut dcols = vec![T::zero(); r * n];
                        kernels::matmul(r, c_out, n, kt, true, g, false, T::zero(), &mut dcols);
                        self.accumulate(grads, *input, |dx| kernels::col2im(&dcols, geom, dx));
                    }
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let c_in = self.value(*input).shape()[0];
                let (r, n) = (geom.col_rows(), geom.col_cols());
                let mut dcols = vec![T::zero(); r * n];
                kernels::im2col(g, geom, &mut dcols);
                let x = self.value(*input).data();
                self.accumulate(grads, *kernel, |dk| {
                    kernels::matmul(c_in, n, r, x, false, &dcols, true, T::one(), dk);
                });
                let kt = self.value(*kernel).data();
                self.accumulate(grads, *input, |dx| {
                    kernels::matmul(c_in, r, n, kt, false, &dcols, false, T::one(), dx);
                });
                if let Some(b) = bias {
                    let plane = geom.height * geom.width;
                    self.accumulate(grads, *b, |db| {
                        for (co, row) in g.chunks_exact(plane).enumerate() {
                            db[co] = db[co] + row.iter().copied().sum();
                        }
                    });
                }
            }
            Op::MaxPool2x2 { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                self.accumulate(grads, *input, |dx| {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        dx[i] = dx[i] + gv;
                    }
                });
            }
            Op::LeakyRelu { input, alpha } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                        *d = *d + if xv >= T::zero() { gv } else { *alpha * gv };
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                self.accumulate(grads, *input, |dx| {
                    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, |dx| {
                    for ((d, &m), &gv) in dx.iter_mut().zip(mask).zip(g) {
                        *d = *d + gv * m;
                    }
                });
            }
            Op::ChannelScale { input, weights } => {
                let wt = self.value(*weights).data();
                let x = self.value(*input).data();
                let plane = x.len() / wt.len();
                self.accumulate(grads, *input, |dx| {
                    for (c, (drow, grow)) in dx.chunks_exact_mut(plane).zip(g.chunks_exact(plane)).enumerate() {
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + gv * wt[c];
                        }
                    }
                });
                self.accumulate(grads, *weights, |dw| {
                    for (c, (xrow, grow)) in x.chunks_exact(plane).zip(g.chunks_exact(plane)).enumerate() {
                        let s: T = xrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        dw[c] = dw[c] + s;
                    }
                });
            }
            Op::Dense { input, weight, bias } => {
                let wt = self.value(*weight);
                let (m, n) = (wt.shape()[0], wt.shape()[1]);
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |dx| {
                    kernels::matmul(n, m, 1, wt.data(), true, g, false, T::one(), dx);
                });
                self.accumulate(grads, *weight, |dw| {
                    kernels::matmul(m, 1, n, g, false, x, false, T::one(), dw);
                });
                self.accumulate(grads, *bias, |db| {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv);
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d - gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * o;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * o;
                    }
                });
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, |d| {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * *factor)
                });
            }
            Op::Sum { input } => {
                self.accumulate(grads, *input, |d| d.iter_mut().for_each(|d| *d = *d + g[0]));
            }
            Op::Mean { input } => {
                let s = g[0] / T::lit(self.value(*input).len() as f64);
                self.accumulate(grads, *input, |d| d.iter_mut().for_each(|d| *d = *d + s));
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv));
            }
            Op::Narrow { input, start } => {
                self.accumulate(grads, *input, |d| {
                    d[*start..*start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &gv)| *d = *d + gv)
                });
            }
            Op::Softmax { input } => {
                let y = node.value.data();
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                self.accumulate(grads, *input, |d| {
                    for ((d, &yv), &gv) in d.iter_mut().zip(y).zip(g) {
                        *d = *d + yv * (gv - dot);
                    }
                });
            }
            Op::Log { input } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |d| {
                    for ((d, &xv), &gv) in d.iter_mut().zip(x).zip(g) {
                        *d = *d + gv / xv;
                    }
                });
            }
            Op::SoftIou {
                belief,
                target,
                inter,
                union,
            } => {
                if *union <= 0.0 {
                    return;
                }
                let (i, u) = (*inter, *union);
                let up = g[0].as_f64();
                let pv = self.value(*belief).data();
                let gv = self.value(*target).data();
                // dL/dp = -(g U - I (1 - g)) / U^2, symmetric in (p, g).
                self.accumulate(grads, *belief, |d| {
                    for (d, &t) in d.iter_mut().zip(gv) {
                        let t = t.as_f64();
                        *d = *d + T::lit(-up * (t * u - i * (1.0 - t)) / (u * u));
                    }
                });
                self.accumulate(grads, *target, |d| {
                    for (d, &p) in d.iter_mut().zip(pv) {
                        let p = p.as_f64();
                        *d = *d + T::lit(-up * (p * u - i * (1.0 - p)) / (u * u));
                    }
                });
            }
            Op::CosineDistance { x, y, dx, dy } => {
                let up = g[0].as_f64();
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(dx).for_each(|(d, &v)| *d = *d + T::lit(up * v))
                });
                self.accumulate(grads, *y, |d| {
                    d.iter_mut().zip(dy).for_each(|(d, &v)| *d = *d + T::lit(up * v))
                });
            }
        }
    }
}

/// Cosine distance and its partial derivatives, in f64. Norms are floored
/// at 1e-12. The value uses the similarity clamped to `[-1, 1]`, so parallel
/// and antiparallel pairs give exactly 0 and 1; once the similarity leaves
/// `[-1 + 1e-7, 1 - 1e-7]` the derivative is taken as zero.
pub(crate) fn cosine_distance_with_grad(x: &[f64], y: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let sx = x.iter().map(|v| v * v).sum::<f64>();
    let sy = y.iter().map(|v| v * v).sum::<f64>();
    let (nx_raw, ny_raw) = (sx.sqrt(), sy.sqrt());
    let (nx, ny) = (nx_raw.max(NORM_FLOOR), ny_raw.max(NORM_FLOOR));
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    // sqrt of the product keeps s exactly +-1 for (anti)parallel pairs.
    let floor = NORM_FLOOR * NORM_FLOOR;
    let s_raw = dot / (sx.max(floor) * sy.max(floor)).sqrt();
    let s = s_raw.clamp(-1.0, 1.0);
    let d = s.acos() / std::f64::consts::PI;
    if s.abs() > COS_CLAMP {
        return (d, vec![0.0; x.len()], vec![0.0; y.len()]);
    }
    let dd_ds = -1.0 / (std::f64::consts::PI * (1.0 - s * s).sqrt());
    let gx = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let own = if nx_raw > NORM_FLOOR { s * a / (nx * nx) } else { 0.0 };
            dd_ds * (b / (nx * ny) - own)
        })
        .collect();
    let gy = y
        .iter()
        .zip(x)
        .map(|(&b, &a)| {
            let own = if ny_raw > NORM_FLOOR { s * b / (ny * ny) } else { 0.0 };
            dd_ds * (a / (nx * ny) - own)
        })
        .collect();
    (d, gx, gy)
}
