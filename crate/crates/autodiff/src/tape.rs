use std::rc::Rc;

use crate::kernels::{self, Conv2dConfig};
use crate::{Error, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map between spatial grids, applied identically to
/// every channel; one map per batch sample.
///
/// Each entry is `(output index, input index, weight)` on a flattened
/// `height * width` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampler {
    pub input_hw: (usize, usize),
    pub output_hw: (usize, usize),
    pub samples: Vec<Vec<(usize, usize, f64)>>,
}

impl Resampler {
    fn apply<T: Scalar>(&self, x: &Tensor<T>, transpose: bool) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.dims4("resample")?;
        let (from, to) = if transpose {
            (self.output_hw, self.input_hw)
        } else {
            (self.input_hw, self.output_hw)
        };
        if (h, w) != from || n != self.samples.len() {
            return Err(Error::shape(
                "resample",
                format!("input {:?} vs map {from:?} over {} samples", x.shape(), self.samples.len()),
            ));
        }
        let (in_len, out_len) = (from.0 * from.1, to.0 * to.1);
        let mut out = vec![T::zero(); n * c * out_len];
        for (ni, entries) in self.samples.iter().enumerate() {
            for ci in 0..c {
                let p = ni * c + ci;
                let src = &x.data()[p * in_len..(p + 1) * in_len];
                let dst = &mut out[p * out_len..(p + 1) * out_len];
                for &(o, i, wgt) in entries {
                    let (o, i) = if transpose { (i, o) } else { (o, i) };
                    dst[o] += T::from_f64(wgt) * src[i];
                }
            }
        }
        Tensor::new(&[n, c, to.0, to.1], out)
    }
}

// Some payload fields are only informative (Debug output).
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op<T> {
    Add,
    Sub,
    Mul,
    Div,
    Affine { scale: T, shift: T },
    Abs,
    Sqrt,
    LeakyRelu { slope: T },
    MaskScale { mask: Rc<Tensor<T>> },
    Elu { alpha: T },
    EluGrad { alpha: T },
    Tanh,
    TanhGrad,
    Sum,
    Expand { shape: Vec<usize> },
    SumPerSample,
    ExpandPerSample { shape: Vec<usize> },
    Conv2d { cfg: Conv2dConfig },
    ConvInputGrad { cfg: Conv2dConfig, input_hw: (usize, usize) },
    ConvWeightGrad { cfg: Conv2dConfig, kernel_hw: (usize, usize) },
    BiasAdd,
    ChannelSum,
    ChannelBroadcast { shape: Vec<usize> },
    MatMul,
    Transpose,
    Reshape { shape: Vec<usize> },
    Upsample2,
    SumPool2,
    Concat { sizes: Vec<usize> },
    SliceChannels { start: usize, len: usize },
    PadChannels { start: usize, total: usize },
    Crop { top: usize, left: usize, height: usize, width: usize },
    PadSpatial { top: usize, left: usize, height: usize, width: usize },
    Resample { map: Rc<Resampler> },
    ResampleT { map: Rc<Resampler> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Affine { .. } => "affine",
            Op::Abs => "abs",
            Op::Sqrt => "sqrt",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::MaskScale { .. } => "mask_scale",
            Op::Elu { .. } => "elu",
            Op::EluGrad { .. } => "elu_grad",
            Op::Tanh => "tanh",
            Op::TanhGrad => "tanh_grad",
            Op::Sum => "sum",
            Op::Expand { .. } => "expand",
            Op::SumPerSample => "sum_per_sample",
            Op::ExpandPerSample { .. } => "expand_per_sample",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::BiasAdd => "bias_add",
            Op::ChannelSum => "channel_sum",
            Op::ChannelBroadcast { .. } => "channel_broadcast",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Upsample2 => "upsample2",
            Op::SumPool2 => "sum_pool2",
            Op::Concat { .. } => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::PadChannels { .. } => "pad_channels",
            Op::Crop { .. } => "crop",
            Op::PadSpatial { .. } => "pad_spatial",
            Op::Resample { .. } => "resample",
            Op::ResampleT { .. } => "resample_transpose",
        }
    }

    /// Whether this op's backward rule is itself built from differentiable ops.
    fn double_backward_capable(&self) -> bool {
        !matches!(
            self,
            Op::Elu { .. } | Op::EluGrad { .. } | Op::Tanh | Op::TanhGrad
        )
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<(Op<T>, Vec<Var>)>,
}

/// Append-only record of values and the operations that produced them.
///
/// Nodes are stored in creation order, which is a topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Runs `f` with recording switched off: every value it creates is a
    /// constant that no gradient flows through.
    pub fn detached<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = std::mem::replace(&mut self.recording, false);
        let out = f(self);
        self.recording = saved;
        out
    }

    /// Inserts an input or parameter value.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>) -> Var {
        let op = self.recording.then_some((op, inputs));
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, op: Op<T>, x: Var, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Var> {
        let value = f(self.value(x))?;
        Ok(self.push(op, vec![x], value))
    }

    fn binary(
        &mut self,
        op: Op<T>,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Var> {
        let value = f(self.value(a), self.value(b))?;
        Ok(self.push(op, vec![a, b], value))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x.zip_map(y, "add", |p, q| p + q))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x.zip_map(y, "sub", |p, q| p - q))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x.zip_map(y, "mul", |p, q| p * q))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b, |x, y| x.zip_map(y, "div", |p, q| p / q))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        self.unary(Op::Affine { scale, shift }, x, |v| Ok(v.map(|e| scale * e + shift)))
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Result<Var> {
        self.affine(x, scale, T::zero())
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Abs, x, |v| Ok(v.map(|e| e.abs())))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sqrt, x, |v| Ok(v.map(|e| e.sqrt())))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.unary(Op::LeakyRelu { slope }, x, |v| {
            Ok(v.map(|e| if e > T::zero() { e } else { slope * e }))
        })
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mask_scale(&mut self, x: Var, mask: Rc<Tensor<T>>) -> Result<Var> {
        let m = mask.clone();
        self.unary(Op::MaskScale { mask }, x, move |v| v.zip_map(&m, "mask_scale", |p, q| p * q))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let alpha = T::one();
        self.unary(Op::Elu { alpha }, x, |v| {
            Ok(v.map(|e| if e > T::zero() { e } else { alpha * (e.exp() - T::one()) }))
        })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Tanh, x, |v| Ok(v.map(|e| e.tanh())))
    }

    // ---- reductions ----

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sum, x, |v| Ok(Tensor::scalar(v.sum())))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Sum of absolute values.
    pub fn abs_sum(&mut self, x: Var) -> Result<Var> {
        let a = self.abs(x)?;
        self.sum(a)
    }

    /// Sums everything but the leading batch axis: `[N, ...] -> [N, 1]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::SumPerSample, x, |v| {
            let n = v.shape()[0];
            let inner = v.numel() / n;
            let out = v.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
            Tensor::new(&[n, 1], out)
        })
    }

    fn expand(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let s = shape.clone();
        self.unary(Op::Expand { shape }, x, move |v| {
            if v.numel() != 1 {
                return Err(Error::shape("expand", format!("{:?}", v.shape())));
            }
            Ok(Tensor::full(&s, v.item()))
        })
    }

    fn expand_per_sample(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let s = shape.clone();
        self.unary(Op::ExpandPerSample { shape }, x, move |v| {
            let n = s[0];
            if v.shape() != [n, 1] {
                return Err(Error::shape("expand_per_sample", format!("{:?}", v.shape())));
            }
            let inner: usize = s[1..].iter().product();
            Tensor::new(&s, v.data().iter().flat_map(|&e| std::iter::repeat_n(e, inner)).collect())
        })
    }

    // ---- convolution and linear layers ----

    pub fn conv2d(&mut self, x: Var, w: Var, cfg: Conv2dConfig) -> Result<Var> {
        self.binary(Op::Conv2d { cfg }, x, w, |a, b| kernels::conv2d(a, b, cfg))
    }

    fn conv_input_grad(&mut self, gy: Var, w: Var, cfg: Conv2dConfig, input_hw: (usize, usize)) -> Result<Var> {
        self.binary(Op::ConvInputGrad { cfg, input_hw }, gy, w, |a, b| {
            kernels::conv2d_input_grad(a, b, cfg, input_hw)
        })
    }

    fn conv_weight_grad(&mut self, x: Var, gy: Var, cfg: Conv2dConfig, kernel_hw: (usize, usize)) -> Result<Var> {
        self.binary(Op::ConvWeightGrad { cfg, kernel_hw }, x, gy, |a, b| {
            kernels::conv2d_weight_grad(a, b, cfg, kernel_hw)
        })
    }

    /// Adds a per-channel bias `b[C]` along axis 1.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.binary(Op::BiasAdd, x, b, kernels::bias_add)
    }

    fn channel_sum(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::ChannelSum, x, kernels::channel_sum)
    }

    fn channel_broadcast(&mut self, b: Var, shape: Vec<usize>) -> Result<Var> {
        let s = shape.clone();
        self.unary(Op::ChannelBroadcast { shape }, b, move |v| {
            kernels::bias_add(&Tensor::zeros(&s), v)
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::MatMul, a, b, kernels::matmul)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Transpose, x, |v| {
            let &[r, c] = v.shape() else {
                return Err(Error::shape("transpose", format!("{:?}", v.shape())));
            };
            Ok(Tensor::from_fn(&[c, r], |i| v.data()[(i % r) * c + i / r]))
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = shape.to_vec();
        self.unary(Op::Reshape { shape: s.clone() }, x, move |v| v.clone().reshaped(&s))
    }

    /// Fully connected layer: `x [N, K]`, `w [M, K]`, `b [M]` -> `[N, M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        self.bias_add(y, b)
    }

    // ---- spatial rearrangement ----

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Upsample2, x, kernels::upsample2)
    }

    fn sum_pool2(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::SumPool2, x, kernels::sum_pool2)
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).dims4("concat")?;
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let [n, c, h, w] = self.value(x).dims4("concat")?;
            if (n, h, w) != (first[0], first[2], first[3]) {
                return Err(Error::shape("concat", format!("{:?} vs {first:?}", self.shape(x))));
            }
            sizes.push(c);
        }
        let total: usize = sizes.iter().sum();
        let [n, _, h, w] = first;
        let plane = h * w;
        let mut out = vec![T::zero(); n * total * plane];
        for ni in 0..n {
            let mut offset = 0;
            for (&x, &c) in xs.iter().zip(&sizes) {
                let src = &self.value(x).data()[ni * c * plane..(ni + 1) * c * plane];
                let start = (ni * total + offset) * plane;
                out[start..start + c * plane].copy_from_slice(src);
                offset += c;
            }
        }
        let value = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.push(Op::Concat { sizes }, xs.to_vec(), value))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.unary(Op::SliceChannels { start, len }, x, |v| {
            let [n, c, h, w] = v.dims4("slice_channels")?;
            if start + len > c {
                return Err(Error::shape("slice_channels", format!("{start}+{len} > {c}")));
            }
            let plane = h * w;
            let mut out = Vec::with_capacity(n * len * plane);
            for ni in 0..n {
                let base = (ni * c + start) * plane;
                out.extend_from_slice(&v.data()[base..base + len * plane]);
            }
            Tensor::new(&[n, len, h, w], out)
        })
    }

    fn pad_channels(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        self.unary(Op::PadChannels { start, total }, x, |v| {
            let [n, c, h, w] = v.dims4("pad_channels")?;
            let plane = h * w;
            let mut out = vec![T::zero(); n * total * plane];
            for ni in 0..n {
                let dst = (ni * total + start) * plane;
                out[dst..dst + c * plane].copy_from_slice(&v.data()[ni * c * plane..(ni + 1) * c * plane]);
            }
            Tensor::new(&[n, total, h, w], out)
        })
    }

    /// Spatial window `[top, top + height) x [left, left + width)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        self.unary(Op::Crop { top, left, height, width }, x, |v| {
            let [n, c, h, w] = v.dims4("crop")?;
            if top + height > h || left + width > w {
                return Err(Error::shape("crop", format!("window exceeds {h}x{w}")));
            }
            let mut out = Vec::with_capacity(n * c * height * width);
            for p in 0..n * c {
                for y in top..top + height {
                    let row = (p * h + y) * w;
                    out.extend_from_slice(&v.data()[row + left..row + left + width]);
                }
            }
            Tensor::new(&[n, c, height, width], out)
        })
    }

    fn pad_spatial(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        self.unary(Op::PadSpatial { top, left, height, width }, x, |v| {
            let [n, c, h, w] = v.dims4("pad_spatial")?;
            let mut out = vec![T::zero(); n * c * height * width];
            for p in 0..n * c {
                for y in 0..h {
                    let dst = (p * height + top + y) * width + left;
                    out[dst..dst + w].copy_from_slice(&v.data()[(p * h + y) * w..(p * h + y + 1) * w]);
                }
            }
            Tensor::new(&[n, c, height, width], out)
        })
    }

    /// Applies a fixed per-sample sparse spatial map (crop-and-resize etc.).
    pub fn resample(&mut self, x: Var, map: Rc<Resampler>) -> Result<Var> {
        let m = map.clone();
        self.unary(Op::Resample { map }, x, move |v| m.apply(v, false))
    }

    fn resample_t(&mut self, x: Var, map: Rc<Resampler>) -> Result<Var> {
        let m = map.clone();
        self.unary(Op::ResampleT { map }, x, move |v| m.apply(v, true))
    }

    // ---- differentiation ----

    /// Gradient of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph`, the backward pass is recorded as tape operations,
    /// so the returned gradients can be used in further differentiable
    /// expressions. Every op on the traversed path must then support a
    /// differentiable backward. Inputs that do not influence `output` get a
    /// zero gradient.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if self.value(output).numel() != 1 {
            return Err(Error::NonScalar(self.shape(output).to_vec()));
        }
        let end = output.0 + 1;

        // Nodes that depend on some `wrt` ...
        let mut depends = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                depends[w.0] = true;
            }
        }
        for i in 0..end {
            if let Some((_, inputs)) = &self.nodes[i].op {
                if inputs.iter().any(|v| depends[v.0]) {
                    depends[i] = true;
                }
            }
        }
        // ... and that `output` depends on.
        let mut relevant = vec![false; end];
        relevant[output.0] = depends[output.0];
        for i in (0..end).rev() {
            if !relevant[i] {
                continue;
            }
            if let Some((op, inputs)) = &self.nodes[i].op {
                if create_graph && !op.double_backward_capable() {
                    return Err(Error::Capability { op: op.name() });
                }
                for v in inputs {
                    if depends[v.0] {
                        relevant[v.0] = true;
                    }
                }
            }
        }

        let saved = std::mem::replace(&mut self.recording, create_graph);
        let result = self.backward(output, end, &relevant);
        self.recording = saved;
        let mut grads = result?;

        Ok(wrt
            .iter()
            .map(|&w| match grads.get_mut(w.0).and_then(Option::take) {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.shape(w));
                    self.leaf(zeros)
                }
            })
            .collect())
    }

    fn backward(&mut self, output: Var, end: usize, relevant: &[bool]) -> Result<Vec<Option<Var>>> {
        let mut grads: Vec<Option<Var>> = vec![None; end];
        if relevant[output.0] {
            let seed = Tensor::full(self.shape(output), T::one());
            grads[output.0] = Some(self.leaf(seed));
        }
        for i in (0..end).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let Some((op, inputs)) = self.nodes[i].op.clone() else {
                continue;
            };
            let needed: Vec<bool> = inputs.iter().map(|v| relevant[v.0]).collect();
            let input_grads = self.vjp(&op, &inputs, Var(i), g, &needed)?;
            for ((v, ig), need) in inputs.iter().zip(input_grads).zip(needed) {
                let (Some(ig), true) = (ig, need) else { continue };
                grads[v.0] = Some(match grads[v.0] {
                    Some(existing) => self.add(existing, ig)?,
                    None => ig,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products for each input of one node.
    fn vjp(&mut self, op: &Op<T>, inputs: &[Var], out: Var, g: Var, needed: &[bool]) -> Result<Vec<Option<Var>>> {
        let need = |k: usize| needed.get(k).copied().unwrap_or(false);
        let x = inputs[0];
        Ok(match op {
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => vec![Some(g), need(1).then(|| self.neg(g)).transpose()?],
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                vec![
                    need(0).then(|| self.mul(g, b)).transpose()?,
                    need(1).then(|| self.mul(g, a)).transpose()?,
                ]
            }
            Op::Div => {
                let b = inputs[1];
                let ga = need(0).then(|| self.div(g, b)).transpose()?;
                let gb = if need(1) {
                    let gz = self.mul(g, out)?;
                    let q = self.div(gz, b)?;
                    Some(self.neg(q)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Affine { scale, .. } => vec![Some(self.scale(g, *scale)?)],
            Op::Abs => {
                let sign = self.value(x).map(|e| {
                    if e > T::zero() {
                        T::one()
                    } else if e < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                vec![Some(self.mask_scale(g, Rc::new(sign))?)]
            }
            Op::Sqrt => {
                let half = self.scale(g, T::from_f64(0.5))?;
                vec![Some(self.div(half, out)?)]
            }
            Op::LeakyRelu { slope } => {
                let s = *slope;
                let mask = self.value(x).map(|e| if e > T::zero() { T::one() } else { s });
                vec![Some(self.mask_scale(g, Rc::new(mask))?)]
            }
            Op::MaskScale { mask } => vec![Some(self.mask_scale(g, mask.clone())?)],
            Op::Elu { alpha } => {
                let alpha = *alpha;
                let value = self.value(g).zip_map(self.value(x), "elu_grad", |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        gv * alpha * xv.exp()
                    }
                })?;
                vec![Some(self.push(Op::EluGrad { alpha }, vec![g, x], value))]
            }
            Op::Tanh => {
                let value = self
                    .value(g)
                    .zip_map(self.value(out), "tanh_grad", |gv, yv| gv * (T::one() - yv * yv))?;
                vec![Some(self.push(Op::TanhGrad, vec![g, out], value))]
            }
            Op::EluGrad { .. } | Op::TanhGrad => return Err(Error::Capability { op: op.name() }),
            Op::Sum => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.expand(g, shape)?)]
            }
            Op::Expand { .. } => vec![Some(self.sum(g)?)],
            Op::SumPerSample => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.expand_per_sample(g, shape)?)]
            }
            Op::ExpandPerSample { .. } => vec![Some(self.sum_per_sample(g)?)],
            Op::Conv2d { cfg } => {
                let w = inputs[1];
                let [_, _, h, wd] = self.value(x).dims4("conv2d")?;
                let [_, _, kh, kw] = self.value(w).dims4("conv2d")?;
                vec![
                    need(0).then(|| self.conv_input_grad(g, w, *cfg, (h, wd))).transpose()?,
                    need(1).then(|| self.conv_weight_grad(x, g, *cfg, (kh, kw))).transpose()?,
                ]
            }
            Op::ConvInputGrad { cfg, .. } => {
                // out = A(w)^T gy; <h, out> = <conv(h, w), gy>.
                let (gy, w) = (inputs[0], inputs[1]);
                let [_, _, kh, kw] = self.value(w).dims4("conv2d_input_grad")?;
                vec![
                    need(0).then(|| self.conv2d(g, w, *cfg)).transpose()?,
                    need(1).then(|| self.conv_weight_grad(g, gy, *cfg, (kh, kw))).transpose()?,
                ]
            }
            Op::ConvWeightGrad { cfg, .. } => {
                // <H, out> = <conv(x, H), gy>.
                let (xin, gy) = (inputs[0], inputs[1]);
                let [_, _, h, wd] = self.value(xin).dims4("conv2d_weight_grad")?;
                vec![
                    need(0).then(|| self.conv_input_grad(gy, g, *cfg, (h, wd))).transpose()?,
                    need(1).then(|| self.conv2d(xin, g, *cfg)).transpose()?,
                ]
            }
            Op::BiasAdd => vec![Some(g), need(1).then(|| self.channel_sum(g)).transpose()?],
            Op::ChannelSum => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.channel_broadcast(g, shape)?)]
            }
            Op::ChannelBroadcast { .. } => vec![Some(self.channel_sum(g)?)],
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = if need(0) {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                };
                let gb = if need(1) {
                    let at = self.transpose(a)?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Transpose => vec![Some(self.transpose(g)?)],
            Op::Reshape { .. } => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.reshape(g, &shape)?)]
            }
            Op::Upsample2 => vec![Some(self.sum_pool2(g)?)],
            Op::SumPool2 => vec![Some(self.upsample2(g)?)],
            Op::Concat { sizes } => {
                let mut start = 0;
                let mut out_grads = Vec::with_capacity(sizes.len());
                for (k, &c) in sizes.iter().enumerate() {
                    out_grads.push(need(k).then(|| self.slice_channels(g, start, c)).transpose()?);
                    start += c;
                }
                out_grads
            }
            Op::SliceChannels { start, .. } => {
                let total = self.shape(x)[1];
                vec![Some(self.pad_channels(g, *start, total)?)]
            }
            Op::PadChannels { start, .. } => {
                let len = self.shape(x)[1];
                vec![Some(self.slice_channels(g, *start, len)?)]
            }
            Op::Crop { top, left, .. } => {
                let [_, _, h, w] = self.value(x).dims4("crop")?;
                vec![Some(self.pad_spatial(g, *top, *left, h, w)?)]
            }
            Op::PadSpatial { top, left, .. } => {
                let [_, _, h, w] = self.value(x).dims4("pad_spatial")?;
                vec![Some(self.crop(g, *top, *left, h, w)?)]
            }
            Op::Resample { map } => vec![Some(self.resample_t(g, map.clone())?)],
            Op::ResampleT { map } => vec![Some(self.resample(g, map.clone())?)],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn gradient_of_sum_of_squares_is_twice_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let [g] = tape.grad(s, &[x], false).unwrap()[..] else { panic!() };
        assert_eq!(tape.value(g).data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn second_gradient_of_sum_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.grad(s, &[x], true).unwrap()[0];
        assert_eq!(tape.value(g).data(), &[1.0, 1.0, 1.0]);
        let gs = tape.sum(g).unwrap();
        let gg = tape.grad(gs, &[x], false).unwrap()[0];
        assert_eq!(tape.value(gg).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.grad(x, &[x], false), Err(Error::NonScalar(_))));
    }

    #[test]
    fn recorded_backward_through_tanh_is_a_capability_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.1, 0.2]));
        let y = tape.tanh(x).unwrap();
        let s = tape.sum(y).unwrap();
        assert!(matches!(
            tape.grad(s, &[x], true),
            Err(Error::Capability { op: "tanh" })
        ));
        // plain first-order gradients are fine
        assert!(tape.grad(s, &[x], false).is_ok());
    }

    #[test]
    fn recorded_backward_through_elu_is_a_capability_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[-0.5, 0.5]));
        let y = tape.elu(x).unwrap();
        let s = tape.sum(y).unwrap();
        assert!(matches!(tape.grad(s, &[x], true), Err(Error::Capability { op: "elu" })));
    }

    #[test]
    fn detached_values_carry_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.detached(|tp| tp.scale(x, 3.0).unwrap());
        let s = tape.sum(y).unwrap();
        let g = tape.grad(s, &[x], false).unwrap()[0];
        assert_eq!(tape.value(g).data(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[2, 2, 2, 2], |i| 100.0 + i as f64));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2, 2]);
        let back = tape.slice_channels(c, 1, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
    }
}
