use super::kernels::{col2im, gemm, im2col, Layout, Window};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the differentiable primitives, used for gradcheck reporting and
/// fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    TransposedConv2d,
    LeakyRelu,
    InstanceNorm,
    MinPool2d,
    ConcatChannels,
    SliceChannels,
    MeanL1,
    MeanSq,
    Add,
    Scale,
    Sum,
    WeightedSum,
    Tanh01,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Conv2d,
        OpKind::TransposedConv2d,
        OpKind::LeakyRelu,
        OpKind::InstanceNorm,
        OpKind::MinPool2d,
        OpKind::ConcatChannels,
        OpKind::SliceChannels,
        OpKind::MeanL1,
        OpKind::MeanSq,
        OpKind::Add,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::WeightedSum,
        OpKind::Tanh01,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::TransposedConv2d => "transposed_conv2d",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::InstanceNorm => "instance_norm",
            OpKind::MinPool2d => "min_pool2d",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::SliceChannels => "slice_channels",
            OpKind::MeanL1 => "mean_l1",
            OpKind::MeanSq => "mean_sq",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::Tanh01 => "tanh01",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        win: Window,
        cols: Option<Vec<f64>>,
    },
    TransposedConv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        // Geometry of the *output* viewed as the input of the adjoint conv.
        win: Window,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    InstanceNorm {
        input: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MinPool2d {
        input: Var,
        argmin: Vec<usize>,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    SliceChannels {
        input: Var,
        offset: usize,
    },
    MeanL1 {
        a: Var,
        b: Var,
    },
    MeanSq {
        input: Var,
        target: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    Tanh01 {
        input: Var,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::TransposedConv2d { .. } => OpKind::TransposedConv2d,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::MinPool2d { .. } => OpKind::MinPool2d,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::MeanL1 { .. } => OpKind::MeanL1,
            Op::MeanSq { .. } => OpKind::MeanSq,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Tanh01 { .. } => OpKind::Tanh01,
        })
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode recording of one forward computation.
///
/// Values are appended in execution order, so replaying backward rules in
/// reverse index order visits every node after all of its consumers. Leaf
/// gradients accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grads`] or [`Tape::clear`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

fn dim_err(op: &'static str, axis: &'static str, expected: usize, got: usize) -> Error {
    Error::Dimension {
        op,
        axis,
        expected,
        got,
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the backward rule of `kind` deliberately wrong (gradients scaled
    /// by 1.5). Only for exercising the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a fresh constant; no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (c, h, w) = self.value(input).dims3(OP)?;
        let (f, kc, kh, kw) = match self.value(kernel).shape() {
            &[f, kc, kh, kw] => (f, kc, kh, kw),
            s => return Err(dim_err(OP, "kernel rank", 4, s.len())),
        };
        if kc != c {
            return Err(dim_err(OP, "channels", c, kc));
        }
        if self.value(bias).numel() != f {
            return Err(dim_err(OP, "bias", f, self.value(bias).numel()));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * pad {
            return Err(dim_err(OP, "height", kh, h + 2 * pad));
        }
        if kw > w + 2 * pad {
            return Err(dim_err(OP, "width", kw, w + 2 * pad));
        }
        let win = Window {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(self.value(input).data(), &win);
        let n = win.col_cols();
        let mut out = vec![0.0; f * n];
        for (row, b) in out.chunks_mut(n).zip(self.value(bias).data()) {
            row.fill(*b);
        }
        gemm(
            f,
            win.col_rows(),
            n,
            self.value(kernel).data(),
            Layout::Normal,
            &cols,
            Layout::Normal,
            1.0,
            &mut out,
        );
        let requires_grad = self.rg(&[input, kernel, bias]);
        let cols = self.requires_grad(kernel).then_some(cols);
        let value = Tensor::new(vec![f, win.out_h, win.out_w], out)?;
        Ok(self.push(
            value,
            requires_grad,
            Op::Conv2d {
                input,
                kernel,
                bias,
                win,
                cols,
            },
        ))
    }

    pub fn transposed_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        const OP: &str = "transposed_conv2d";
        let (c, h, w) = self.value(input).dims3(OP)?;
        let (kc, f, kh, kw) = match self.value(kernel).shape() {
            &[kc, f, kh, kw] => (kc, f, kh, kw),
            s => return Err(dim_err(OP, "kernel rank", 4, s.len())),
        };
        if kc != c {
            return Err(dim_err(OP, "channels", c, kc));
        }
        if self.value(bias).numel() != f {
            return Err(dim_err(OP, "bias", f, self.value(bias).numel()));
        }
        if stride == 0 {
            return Err(Error::Contract("transposed_conv2d: stride must be >= 1".into()));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * pad {
            return Err(dim_err(OP, "height", 2 * pad + 1, full_h));
        }
        if full_w <= 2 * pad {
            return Err(dim_err(OP, "width", 2 * pad + 1, full_w));
        }
        let win = Window {
            channels: f,
            height: full_h - 2 * pad,
            width: full_w - 2 * pad,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: w,
        };
        let n = h * w;
        let mut cols = vec![0.0; win.col_rows() * n];
        gemm(
            win.col_rows(),
            c,
            n,
            self.value(kernel).data(),
            Layout::Transposed,
            self.value(input).data(),
            Layout::Normal,
            0.0,
            &mut cols,
        );
        let plane = win.height * win.width;
        let mut out = vec![0.0; f * plane];
        col2im(&cols, &win, &mut out);
        for (chan, b) in out.chunks_mut(plane).zip(self.value(bias).data()) {
            chan.iter_mut().for_each(|v| *v += b);
        }
        let requires_grad = self.rg(&[input, kernel, bias]);
        let value = Tensor::new(vec![f, win.height, win.width], out)?;
        Ok(self.push(
            value,
            requires_grad,
            Op::TransposedConv2d {
                input,
                kernel,
                bias,
                win,
            },
        ))
    }

    /// `max(v, slope * v)`; slope 0 gives ReLU.
    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Contract(format!("leaky_relu: slope {slope} outside [0, 1)")));
        }
        let value = self.value(input).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::LeakyRelu { input, slope }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.leaky_relu(input, 0.0)
    }

    /// Per-channel standardization over `H x W` followed by a per-channel affine map.
    pub fn instance_norm(&mut self, input: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        const OP: &str = "instance_norm";
        let (c, h, w) = self.value(input).dims3(OP)?;
        if h * w < 2 {
            return Err(dim_err(OP, "spatial", 2, h * w));
        }
        if self.value(gain).numel() != c {
            return Err(dim_err(OP, "gain", c, self.value(gain).numel()));
        }
        if self.value(shift).numel() != c {
            return Err(dim_err(OP, "shift", c, self.value(shift).numel()));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("instance_norm: eps must be positive".into()));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let mut xhat = vec![0.0; c * plane];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            let xs = &x[ch * plane..(ch + 1) * plane];
            let mean = xs.iter().sum::<f64>() / plane as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in 0..plane {
                let xh = (xs[i] - mean) * is;
                xhat[ch * plane + i] = xh;
                out[ch * plane + i] = g[ch] * xh + s[ch];
            }
        }
        let rg = self.rg(&[input, gain, shift]);
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(
            value,
            rg,
            Op::InstanceNorm {
                input,
                gain,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    /// Non-overlapping `k x k` minimum pooling. The gradient goes to the first
    /// minimum of each window in row-major order.
    pub fn min_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        const OP: &str = "min_pool2d";
        let (c, h, w) = self.value(input).dims3(OP)?;
        if k == 0 {
            return Err(Error::Contract("min_pool2d: window must be >= 1".into()));
        }
        if h % k != 0 {
            return Err(dim_err(OP, "height", (h / k).max(1) * k, h));
        }
        if w % k != 0 {
            return Err(dim_err(OP, "width", (w / k).max(1) * k, w));
        }
        let (oh, ow) = (h / k, w / k);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmin = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f64::INFINITY;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = (ch * h + oi * k + di) * w + oj * k + dj;
                            if best == usize::MAX || x[idx] < best_v {
                                best = idx;
                                best_v = x[idx];
                            }
                        }
                    }
                    out.push(best_v);
                    argmin.push(best);
                }
            }
        }
        let rg = self.rg(&[input]);
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, rg, Op::MinPool2d { input, argmin }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (ca, ha, wa) = self.value(a).dims3(OP)?;
        let (cb, hb, wb) = self.value(b).dims3(OP)?;
        if ha != hb {
            return Err(dim_err(OP, "height", ha, hb));
        }
        if wa != wb {
            return Err(dim_err(OP, "width", wa, wb));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        let value = Tensor::new(vec![ca + cb, ha, wa], data)?;
        Ok(self.push(value, rg, Op::ConcatChannels { a, b }))
    }

    /// Channels `start .. start + len` of a `C x H x W` value.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice_channels";
        let (c, h, w) = self.value(input).dims3(OP)?;
        if len == 0 || start + len > c {
            return Err(dim_err(OP, "channels", c, start + len));
        }
        let plane = h * w;
        let data = self.value(input).data()[start * plane..(start + len) * plane].to_vec();
        let rg = self.rg(&[input]);
        let value = Tensor::new(vec![len, h, w], data)?;
        Ok(self.push(
            value,
            rg,
            Op::SliceChannels {
                input,
                offset: start * plane,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() {
            return Err(dim_err(op, "rank", sa.len(), sb.len()));
        }
        const AXES: [&str; 4] = ["axis 0", "axis 1", "axis 2", "axis 3"];
        for (i, (x, y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(dim_err(op, AXES.get(i).copied().unwrap_or("axis"), *x, *y));
            }
        }
        Ok(())
    }

    /// Mean absolute difference, a scalar.
    pub fn mean_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_l1", a, b)?;
        let m = self.value(a).mean_abs_diff(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(m), rg, Op::MeanL1 { a, b }))
    }

    /// Mean of `(v - target)^2`, a scalar.
    pub fn mean_sq(&mut self, input: Var, target: f64) -> Result<Var> {
        let x = self.value(input).data();
        let m = x.iter().map(|v| (v - target) * (v - target)).sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(m), rg, Op::MeanSq { input, target }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::Scale { input, factor }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { input }))
    }

    /// Inner product with a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.numel() != weights.numel() {
            return Err(dim_err("weighted_sum", "weights", x.numel(), weights.numel()));
        }
        let s = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[input]);
        let weights = weights.data().to_vec();
        Ok(self.push(Tensor::scalar(s), rg, Op::WeightedSum { input, weights }))
    }

    /// `(tanh(v) + 1) / 2`, squashing into `[0, 1]`.
    pub fn tanh01(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| 0.5 * (v.tanh() + 1.0));
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::Tanh01 { input }))
    }

    /// Populates gradients of every reachable leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        for i in (0..n).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.op.kind().is_some() && node.op.kind() == self.fault {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {
                add_into(&mut self.leaf_grads[i], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, x)| *b += x)
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                win,
                cols,
            } => {
                let f = nodes[kernel.0].value.shape()[0];
                let n = win.col_cols();
                let k = win.col_rows();
                if needs(*bias) {
                    add_into(&mut grads[bias.0], f, |buf| {
                        for (b, row) in buf.iter_mut().zip(g.chunks(n)) {
                            *b += row.iter().sum::<f64>();
                        }
                    });
                }
                if needs(*kernel) {
                    let cols = cols.as_ref().expect("cols cached when kernel requires grad");
                    add_into(&mut grads[kernel.0], f * k, |buf| {
                        gemm(f, n, k, g, Layout::Normal, cols, Layout::Transposed, 1.0, buf)
                    });
                }
                if needs(*input) {
                    let mut dcols = vec![0.0; k * n];
                    gemm(k, f, n, val(*kernel), Layout::Transposed, g, Layout::Normal, 0.0, &mut dcols);
                    let len = nodes[input.0].value.numel();
                    add_into(&mut grads[input.0], len, |buf| col2im(&dcols, win, buf));
                }
            }
            Op::TransposedConv2d {
                input,
                kernel,
                bias,
                win,
            } => {
                let c = nodes[input.0].value.shape()[0];
                let f = win.channels;
                let plane = win.height * win.width;
                let n = win.col_cols();
                let k = win.col_rows();
                if needs(*bias) {
                    add_into(&mut grads[bias.0], f, |buf| {
                        for (b, chan) in buf.iter_mut().zip(g.chunks(plane)) {
                            *b += chan.iter().sum::<f64>();
                        }
                    });
                }
                if needs(*kernel) || needs(*input) {
                    let dcols = im2col(g, win);
                    if needs(*kernel) {
                        add_into(&mut grads[kernel.0], c * k, |buf| {
                            gemm(c, n, k, val(*input), Layout::Normal, &dcols, Layout::Transposed, 1.0, buf)
                        });
                    }
                    if needs(*input) {
                        add_into(&mut grads[input.0], c * n, |buf| {
                            gemm(c, k, n, val(*kernel), Layout::Normal, &dcols, Layout::Normal, 1.0, buf)
                        });
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = val(*input);
                add_into(&mut grads[input.0], x.len(), |buf| {
                    for ((b, xv), gv) in buf.iter_mut().zip(x).zip(g) {
                        *b += if *xv > 0.0 { *gv } else { slope * gv };
                    }
                });
            }
            Op::InstanceNorm {
                input,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let plane = xhat.len() / c;
                let gn = val(*gain);
                if needs(*shift) {
                    add_into(&mut grads[shift.0], c, |buf| {
                        for (b, gc) in buf.iter_mut().zip(g.chunks(plane)) {
                            *b += gc.iter().sum::<f64>();
                        }
                    });
                }
                if needs(*gain) {
                    add_into(&mut grads[gain.0], c, |buf| {
                        for (ch, b) in buf.iter_mut().enumerate() {
                            let gc = &g[ch * plane..(ch + 1) * plane];
                            let xc = &xhat[ch * plane..(ch + 1) * plane];
                            *b += gc.iter().zip(xc).map(|(a, x)| a * x).sum::<f64>();
                        }
                    });
                }
                if needs(*input) {
                    add_into(&mut grads[input.0], c * plane, |buf| {
                        let np = plane as f64;
                        for ch in 0..c {
                            let gc = &g[ch * plane..(ch + 1) * plane];
                            let xc = &xhat[ch * plane..(ch + 1) * plane];
                            let sum_d: f64 = gc.iter().sum::<f64>() * gn[ch];
                            let sum_dx: f64 = gc.iter().zip(xc).map(|(a, x)| a * x).sum::<f64>() * gn[ch];
                            let scale = inv_std[ch] / np;
                            for j in 0..plane {
                                let dxhat = gc[j] * gn[ch];
                                buf[ch * plane + j] += scale * (np * dxhat - sum_d - xc[j] * sum_dx);
                            }
                        }
                    });
                }
            }
            Op::MinPool2d { input, argmin } => {
                let len = nodes[input.0].value.numel();
                add_into(&mut grads[input.0], len, |buf| {
                    for (idx, gv) in argmin.iter().zip(g) {
                        buf[*idx] += gv;
                    }
                });
            }
            Op::ConcatChannels { a, b } => {
                let la = nodes[a.0].value.numel();
                if needs(*a) {
                    add_into(&mut grads[a.0], la, |buf| {
                        buf.iter_mut().zip(&g[..la]).for_each(|(x, y)| *x += y)
                    });
                }
                if needs(*b) {
                    let lb = g.len() - la;
                    add_into(&mut grads[b.0], lb, |buf| {
                        buf.iter_mut().zip(&g[la..]).for_each(|(x, y)| *x += y)
                    });
                }
            }
            Op::SliceChannels { input, offset } => {
                let len = nodes[input.0].value.numel();
                add_into(&mut grads[input.0], len, |buf| {
                    buf[*offset..offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y)
                });
            }
            Op::MeanL1 { a, b } => {
                let (xa, xb) = (val(*a), val(*b));
                let scale = g[0] / xa.len() as f64;
                let sign = |d: f64| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if needs(*a) {
                    add_into(&mut grads[a.0], xa.len(), |buf| {
                        for ((o, p), q) in buf.iter_mut().zip(xa).zip(xb) {
                            *o += scale * sign(p - q);
                        }
                    });
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], xb.len(), |buf| {
                        for ((o, p), q) in buf.iter_mut().zip(xa).zip(xb) {
                            *o -= scale * sign(p - q);
                        }
                    });
                }
            }
            Op::MeanSq { input, target } => {
                let x = val(*input);
                let scale = 2.0 * g[0] / x.len() as f64;
                add_into(&mut grads[input.0], x.len(), |buf| {
                    for (o, v) in buf.iter_mut().zip(x) {
                        *o += scale * (v - target);
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_into(&mut grads[v.0], g.len(), |buf| {
                            buf.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                        });
                    }
                }
            }
            Op::Scale { input, factor } => {
                add_into(&mut grads[input.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y)
                });
            }
            Op::Sum { input } => {
                let len = nodes[input.0].value.numel();
                add_into(&mut grads[input.0], len, |buf| buf.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::WeightedSum { input, weights } => {
                add_into(&mut grads[input.0], weights.len(), |buf| {
                    buf.iter_mut().zip(weights).for_each(|(x, w)| *x += g[0] * w)
                });
            }
            Op::Tanh01 { input } => {
                let out = nodes[i].value.data();
                add_into(&mut grads[input.0], out.len(), |buf| {
                    for ((o, y), gv) in buf.iter_mut().zip(out).zip(g) {
                        // y = (t + 1) / 2, dy/dv = (1 - t^2) / 2 = 2 y (1 - y)
                        *o += gv * 2.0 * y * (1.0 - y);
                    }
                });
            }
        }
        Ok(())
    }
}
