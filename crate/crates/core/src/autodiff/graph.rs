use std::collections::HashMap;

use super::conv::{self, ConvGeom};
use super::{AutodiffError, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Global reductions to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: S,
    },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Pow {
        x: Var,
        exponent: S,
    },
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
    Upsample2x(Var),
    Concat(Vec<Var>),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<S>,
    },
    Reduce(Var, Reduce),
    MaxOverAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    GradReverse {
        x: Var,
        lambda: S,
    },
    NarrowBatch {
        x: Var,
        start: usize,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Pow { .. } => "pow",
            Op::Clamp { .. } => "clamp",
            Op::Upsample2x(_) => "upsample2x",
            Op::Concat(_) => "concat",
            Op::GroupNorm { .. } => "group_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Reduce(..) => "reduce",
            Op::MaxOverAxis { .. } => "max_over_axis",
            Op::GradReverse { .. } => "grad_reverse",
            Op::NarrowBatch { .. } => "narrow_batch",
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to leaves and parameters.
#[derive(Debug, Default)]
pub struct Gradients<S> {
    leaves: HashMap<usize, Vec<S>>,
    params: HashMap<ParamId, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a leaf created by [`Graph::input`]. `None`
    /// when the loss does not depend on the leaf.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[S]> {
        self.params.get(&id).map(Vec::as_slice)
    }
}

/// Tape of primitive operations in topological (creation) order.
///
/// Every node is immutable once pushed; the tape is single-use for
/// [`Graph::backward`].
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    param_nodes: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var, AutodiffError> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<S>) -> Result<Var, AutodiffError> {
        self.push(value, Op::Leaf, true)
    }

    /// Node for a stored parameter. Repeated calls return the same node so
    /// that shared weights accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var, AutodiffError> {
        let id = store.id(name)?;
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable)?;
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var, AutodiffError> {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var, AutodiffError> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// 2-D convolution with zero padding. `w` is O x C x KH x KW, `b` has O entries.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let dims = self.value(x).dims4("conv2d")?;
        let [o, c, kh, kw] = self.value(w).dims4("conv2d")?;
        if c != dims[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels, kernel expects {c} ({:?} vs {:?})", dims[1], dims, self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("conv2d", format!("bias {:?} for {o} outputs", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(dims, kh, kw, stride, pad)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {kh}x{kw} stride {stride} pad {pad} on {dims:?}")))?;
        let out = conv::conv2d_forward(
            &geom,
            o,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![dims[0], o, geom.ho, geom.wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch: o,
            },
            rg,
        )
    }

    /// Per-channel convolution. `w` is C x 1 x KH x KW.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let dims = self.value(x).dims4("depthwise_conv2d")?;
        let [c, one, kh, kw] = self.value(w).dims4("depthwise_conv2d")?;
        if c != dims[1] || one != 1 {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("kernel {:?} for input {dims:?}", self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(shape_err("depthwise_conv2d", format!("bias {:?} for {c} channels", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(dims, kh, kw, stride, pad)
            .ok_or_else(|| shape_err("depthwise_conv2d", format!("kernel {kh}x{kw} on {dims:?}")))?;
        let out = conv::depthwise_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![dims[0], c, geom.ho, geom.wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Depthwise { x, w, b, geom }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `scale * x + shift` with scalar constants.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Relu(x), |v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn pow(&mut self, x: Var, exponent: S) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Pow { x, exponent }, |v| v.powf(exponent))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var, AutodiffError> {
        if lo > hi {
            return Err(AutodiffError::InvalidArg {
                op: "clamp",
                detail: format!("lo {lo} > hi {hi}"),
            });
        }
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// Nearest-neighbour upsampling by a factor of two in both spatial axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.value(x).dims4("upsample2x")?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![S::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    d[y * w2 + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h2, w2], out)?;
        let rg = self.rg(x);
        self.push(value, Op::Upsample2x(x), rg)
    }

    /// Concatenation along the channel axis of N x C_i x H x W tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let [n, _, h, w] = self.value(first).dims4("concat")?;
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4("concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?}", self.shape(p), self.shape(first)),
                ));
            }
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let sz = v.shape()[1] * h * w;
                out.extend_from_slice(&v.data()[b * sz..(b + 1) * sz]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    /// Group normalization with a per-channel affine transform.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.value(x).dims4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err("group_norm", format!("{c} channels into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "group_norm",
                format!("affine {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (xs, gs, bs) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let cpg = c / groups;
        let m = cpg * h * w;
        let eps = S::of(eps);
        let mut xhat = vec![S::zero(); xs.len()];
        let mut rstd = vec![S::zero(); n * groups];
        let mut out = vec![S::zero(); xs.len()];
        for b in 0..n {
            for g in 0..groups {
                let start = (b * c + g * cpg) * h * w;
                let seg = &xs[start..start + m];
                let mean = seg.iter().copied().sum::<S>() / S::of(m as f64);
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / S::of(m as f64);
                let r = S::one() / (var + eps).sqrt();
                rstd[b * groups + g] = r;
                for i in 0..m {
                    let ch = g * cpg + i / (h * w);
                    let xh = (seg[i] - mean) * r;
                    xhat[start + i] = xh;
                    out[start + i] = xh * gs[ch] + bs[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Batch normalization with batch statistics. Returns the output node and
    /// the per-channel batch mean and (biased) variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<S>, Vec<S>), AutodiffError> {
        let [n, c, h, w] = self.value(x).dims4("batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", format!("affine for {c} channels")));
        }
        let (xs, gs, bs) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let hw = h * w;
        let m = S::of((n * hw) as f64);
        let eps = S::of(eps);
        let mut means = vec![S::zero(); c];
        let mut vars = vec![S::zero(); c];
        let mut rstd = vec![S::zero(); c];
        let mut xhat = vec![S::zero(); xs.len()];
        let mut out = vec![S::zero(); xs.len()];
        for ch in 0..c {
            let mut sum = S::zero();
            for b in 0..n {
                sum += xs[(b * c + ch) * hw..][..hw].iter().copied().sum::<S>();
            }
            let mean = sum / m;
            let mut sq = S::zero();
            for b in 0..n {
                sq += xs[(b * c + ch) * hw..][..hw]
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<S>();
            }
            let var = sq / m;
            let r = S::one() / (var + eps).sqrt();
            means[ch] = mean;
            vars[ch] = var;
            rstd[ch] = r;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xs[i] - mean) * r;
                    out[i] = xhat[i] * gs[ch] + bs[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )?;
        Ok((v, means, vars))
    }

    /// `y[:, c] = scale[c] * x[:, c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<S>, shift: Vec<S>) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.value(x).dims4("channel_affine")?;
        if scale.len() != c || shift.len() != c {
            return Err(shape_err("channel_affine", format!("{} coefficients for {c} channels", scale.len())));
        }
        let xs = self.value(x).data();
        let hw = h * w;
        let out = xs
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                scale[ch] * v + shift[ch]
            })
            .collect();
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(x);
        self.push(value, Op::ChannelAffine { x, scale }, rg)
    }

    pub fn reduce(&mut self, x: Var, kind: Reduce) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let s: S = v.data().iter().copied().sum();
        let s = match kind {
            Reduce::Sum => s,
            Reduce::Mean => {
                if v.numel() == 0 {
                    return Err(shape_err("reduce", "mean of an empty tensor".into()));
                }
                s / S::of(v.numel() as f64)
            }
        };
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Reduce(x, kind), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.reduce(x, Reduce::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.reduce(x, Reduce::Mean)
    }

    /// Maximum along `axis`; the axis is removed from the output shape. Ties
    /// route the gradient to the first maximal element.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("max_over_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for k in 1..len {
                    let idx = (o * len + k) * inner + i;
                    if v.data()[idx] > v.data()[best] {
                        best = idx;
                    }
                }
                out.push(v.data()[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        self.push(value, Op::MaxOverAxis { x, argmax }, rg)
    }

    /// Gradient reversal: identity forward, gradient multiplied by `-lambda`
    /// on the way back.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var, AutodiffError> {
        if !(lambda >= 0.0) {
            return Err(AutodiffError::InvalidArg {
                op: "grad_reverse",
                detail: format!("lambda must be >= 0, got {lambda}"),
            });
        }
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.push(
            value,
            Op::GradReverse {
                x,
                lambda: S::of(lambda),
            },
            rg,
        )
    }

    /// Rows `start..start + len` of the leading (batch) axis.
    pub fn narrow_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let shape = v.shape();
        if shape.is_empty() || start + len > shape[0] {
            return Err(shape_err("narrow_batch", format!("{start}..{} of {shape:?}", start + len)));
        }
        let row: usize = shape[1..].iter().product();
        let data = v.data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        self.push(value, Op::NarrowBatch { x, start }, rg)
    }

    /// Reverse-mode accumulation from a scalar `loss`. A graph supports one
    /// backward pass; build a new graph for the next step.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>, AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: HashMap::new(),
        };
        if !self.rg(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                op => self.backprop_op(op, &node.value, g, &mut grads),
            }
        }
        Ok(out)
    }

    fn backprop_op(&self, op: &Op<S>, out: &Tensor<S>, g: Vec<S>, grads: &mut [Option<Vec<S>>]) {
        let mut acc = |v: Var, contrib: Vec<S>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += *c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.value(v).data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("handled by backward"),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch,
            } => {
                let r = conv::conv2d_backward(
                    geom,
                    *out_ch,
                    val(*x),
                    val(*w),
                    &g,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = r.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = r.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(*b, db);
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let r = conv::depthwise_backward(
                    geom,
                    val(*x),
                    val(*w),
                    &g,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = r.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = r.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*b, g.clone());
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.iter().map(|&v| -v).collect());
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect());
                }
            }
            Op::Affine { x, scale } => acc(*x, g.iter().map(|&v| v * *scale).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (S::one() - y))
                    .collect(),
            ),
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(&gv, &xv)| gv / xv).collect()),
            Op::Exp(x) => acc(*x, g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect()),
            Op::Abs(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| {
                        if xv > S::zero() {
                            gv
                        } else if xv < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    })
                    .collect(),
            ),
            Op::Square(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| gv * (xv + xv))
                    .collect(),
            ),
            Op::Pow { x, exponent } => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| gv * *exponent * xv.powf(*exponent - S::one()))
                    .collect(),
            ),
            Op::Clamp { x, lo, hi } => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { S::zero() })
                    .collect(),
            ),
            Op::Upsample2x(x) => {
                let [n, c, h, w] = self.value(*x).dims4("upsample2x").expect("checked in forward");
                let w2 = 2 * w;
                let mut dx = vec![S::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let [n, total_c, h, w] = out.dims4("concat").expect("checked in forward");
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(n * pc * h * w);
                        for b in 0..n {
                            let start = (b * total_c + offset) * h * w;
                            dp.extend_from_slice(&g[start..start + pc * h * w]);
                        }
                        acc(p, dp);
                    }
                    offset += pc;
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let [n, c, h, w] = self.value(*x).dims4("group_norm").expect("checked in forward");
                let hw = h * w;
                let cpg = c / groups;
                let m = cpg * hw;
                let gs = val(*gamma);
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for (i, (&gv, &xh)) in g.iter().zip(xhat.iter()).enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                }
                if self.rg(*x) {
                    let mut dx = vec![S::zero(); g.len()];
                    let mf = S::of(m as f64);
                    for b in 0..n {
                        for grp in 0..*groups {
                            let start = (b * c + grp * cpg) * hw;
                            let mut sum_d = S::zero();
                            let mut sum_dx = S::zero();
                            for i in 0..m {
                                let ch = grp * cpg + i / hw;
                                let d = g[start + i] * gs[ch];
                                sum_d += d;
                                sum_dx += d * xhat[start + i];
                            }
                            let r = rstd[b * groups + grp];
                            for i in 0..m {
                                let ch = grp * cpg + i / hw;
                                let d = g[start + i] * gs[ch];
                                dx[start + i] = r / mf * (mf * d - sum_d - xhat[start + i] * sum_dx);
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let [n, c, h, w] = self.value(*x).dims4("batch_norm").expect("checked in forward");
                let hw = h * w;
                let gs = val(*gamma);
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for (i, (&gv, &xh)) in g.iter().zip(xhat.iter()).enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                }
                if self.rg(*x) {
                    let mf = S::of((n * hw) as f64);
                    let mut dx = vec![S::zero(); g.len()];
                    for ch in 0..c {
                        let sum_d = dbeta[ch] * gs[ch];
                        let sum_dx = dgamma[ch] * gs[ch];
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                let d = g[i] * gs[ch];
                                dx[i] = rstd[ch] / mf * (mf * d - sum_d - xhat[i] * sum_dx);
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::ChannelAffine { x, scale } => {
                let [_, c, h, w] = out.dims4("channel_affine").expect("checked in forward");
                let hw = h * w;
                acc(
                    *x,
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * scale[(i / hw) % c])
                        .collect(),
                );
            }
            Op::Reduce(x, kind) => {
                let n = self.value(*x).numel();
                let v = match kind {
                    Reduce::Sum => g[0],
                    Reduce::Mean => g[0] / S::of(n as f64),
                };
                acc(*x, vec![v; n]);
            }
            Op::MaxOverAxis { x, argmax } => {
                let mut dx = vec![S::zero(); self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(&g) {
                    dx[src] += gv;
                }
                acc(*x, dx);
            }
            Op::GradReverse { x, lambda } => acc(*x, g.iter().map(|&v| -(*lambda) * v).collect()),
            Op::NarrowBatch { x, start } => {
                let xv = self.value(*x);
                let row: usize = xv.shape()[1..].iter().product();
                let mut dx = vec![S::zero(); xv.numel()];
                dx[start * row..start * row + g.len()].copy_from_slice(&g);
                acc(*x, dx);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}
