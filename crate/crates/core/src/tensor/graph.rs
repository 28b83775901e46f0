//! Reverse-mode differentiation over a tape of recorded operations.
//!
//! A [`Graph`] owns every intermediate tensor produced during a forward pass.
//! Operations append nodes and return [`Var`] handles; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! requires them. Nodes are only ever appended, so tape order is a valid
//! topological order and backward is deterministic.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Sum(Var),
    /// Elementwise product with a constant coefficient vector (e.g. a validity mask).
    MulConst(Var, Vec<f64>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        /// im2col buffer in `[K, P]` layout, saved for the backward pass.
        col: Vec<f64>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Upsample2(Var),
    Reshape(Var),
    ConcatCh(Var, Var),
    SliceCh {
        input: Var,
        from: usize,
        to: usize,
    },
    /// Mask-renormalized 2x2 average pooling over a rank-2 tensor.
    /// `coeff` holds, per input element, its weight into the pooled cell.
    MaskedPool2 {
        input: Var,
        coeff: Vec<f64>,
    },
    /// Gated forward difference along x: `out[y][x] = gate * (in[y][x+1] - in[y][x])`.
    DiffX {
        input: Var,
        gate: Vec<f64>,
    },
    /// Gated forward difference along y.
    DiffY {
        input: Var,
        gate: Vec<f64>,
    },
}

/// Recorded computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The tensor value held by `v`.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target w.r.t. `v`, if one was accumulated.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!(
                "{what}: operand shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.requires(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.requires(a);
        self.push(value, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        let rg = self.requires(a);
        self.push(value, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.requires(a);
        self.push(value, rg, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.requires(a);
        self.push(value, rg, Op::Abs(a))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(total), rg, Op::Sum(a))
    }

    /// Elementwise product with a constant coefficient vector of matching length.
    pub fn mul_const(&mut self, a: Var, coeff: &[f64]) -> Result<Var> {
        if coeff.len() != self.value(a).numel() {
            return Err(Error::Shape(format!(
                "mul_const: coefficient length {} does not match tensor of {} elements",
                coeff.len(),
                self.value(a).numel()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(coeff)
            .map(|(x, c)| x * c)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::MulConst(a, coeff.to_vec())))
    }

    /// 2D cross-correlation of `input [Cin,H,W]` with `weight [Cout,Cin,k,k]`
    /// plus `bias [Cout]`.
    ///
    /// Each output element accumulates `bias + sum over (cin, ky, kx)` in that
    /// exact order, so results are bit-reproducible regardless of internal
    /// parallelism.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::resolve(
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
            stride,
            padding,
        )?;
        let col = im2col(self.value(input).data(), &geom);
        let out = conv_forward(self.value(weight).data(), self.value(bias).data(), &col, &geom);
        let value = Tensor::new(vec![geom.c_out, geom.out_h, geom.out_w], out)?;
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                col,
            },
        ))
    }

    /// Batch normalization over the spatial extent of each channel, using batch
    /// statistics. Returns the normalized output together with the per-channel
    /// batch mean and (biased) variance so the caller can update running stats.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "batch_norm expects rank-3 input, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        check_len(self.value(gamma), c, "batch_norm gamma")?;
        check_len(self.value(beta), c, "batch_norm beta")?;

        let x = self.value(input).data();
        let n = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let s: f64 = x[ch * n..(ch + 1) * n].iter().sum();
            mean[ch] = s / n as f64;
            let ss: f64 = x[ch * n..(ch + 1) * n]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum();
            var[ch] = ss / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        for ch in 0..c {
            for i in 0..n {
                let xh = (x[ch * n + i] - mean[ch]) * inv_std[ch];
                xhat[ch * n + i] = xh;
                out[ch * n + i] = g[ch] * xh + b[ch];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.requires(input) || self.requires(gamma) || self.requires(beta);
        let v = self.push(
            value,
            rg,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, mean, var))
    }

    /// Batch normalization using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "batch_norm expects rank-3 input, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        check_len(self.value(gamma), c, "batch_norm gamma")?;
        check_len(self.value(beta), c, "batch_norm beta")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm running stats length mismatch (channels {c})"
            )));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let n = h * w;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            for i in 0..n {
                out[ch * n + i] = g[ch] * (x[ch * n + i] - running_mean[ch]) * inv_std[ch] + b[ch];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.requires(input) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            value,
            rg,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                running_mean: running_mean.to_vec(),
                inv_std,
            },
        ))
    }

    /// Bilinear x2 upsampling (align-corners=false, edge clamped) of `[C,H,W]`.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "upsample2 expects rank-3 input, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let taps_y = bilinear_taps(h);
        let taps_x = bilinear_taps(w);
        let x = self.value(input).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1, wy) = taps_y[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = taps_x[ox];
                    let v = (1.0 - wy) * ((1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1])
                        + wy * ((1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
                    dst[oy * ow + ox] = v;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        let rg = self.requires(input);
        Ok(self.push(value, rg, Op::Upsample2(input)))
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).numel() {
            return Err(Error::Shape(format!(
                "reshape to {:?} changes element count from {}",
                shape,
                self.value(input).numel()
            )));
        }
        let value = Tensor::new(shape.to_vec(), self.value(input).data().to_vec())?;
        let rg = self.requires(input);
        Ok(self.push(value, rg, Op::Reshape(input)))
    }

    /// Channel concatenation of two `[C,H,W]` tensors with equal spatial dims.
    pub fn concat_ch(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::Shape(format!(
                "concat_ch: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        let mut data = Vec::with_capacity(shape.iter().product());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(shape, data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::ConcatCh(a, b)))
    }

    /// Channel slice `[from, to)` of a `[C,H,W]` tensor.
    pub fn slice_ch(&mut self, input: Var, from: usize, to: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 || from >= to || to > shape[0] {
            return Err(Error::Shape(format!(
                "slice_ch: invalid channel range {from}..{to} for shape {shape:?}"
            )));
        }
        let n = shape[1] * shape[2];
        let data = self.value(input).data()[from * n..to * n].to_vec();
        let value = Tensor::new(vec![to - from, shape[1], shape[2]], data)?;
        let rg = self.requires(input);
        Ok(self.push(value, rg, Op::SliceCh { input, from, to }))
    }

    /// Mask-renormalized 2x2 average pooling over a rank-2 tensor.
    ///
    /// A pooled cell is valid when at least one of its (in-bounds) contributors
    /// is valid; its value is the mean of the valid contributors. Returns the
    /// pooled tensor and the pooled validity mask.
    pub fn masked_pool2(&mut self, input: Var, mask: &[bool]) -> Result<(Var, Vec<bool>)> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "masked_pool2 expects rank-2 input, got {shape:?}"
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        if mask.len() != h * w {
            return Err(Error::Shape(format!(
                "masked_pool2 mask length {} does not match {}x{}",
                mask.len(),
                h,
                w
            )));
        }
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let x = self.value(input).data();
        let mut coeff = vec![0.0; h * w];
        let mut out = vec![0.0; oh * ow];
        let mut out_mask = vec![false; oh * ow];
        for cy in 0..oh {
            for cx in 0..ow {
                let mut count = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, x_) = (2 * cy + dy, 2 * cx + dx);
                        if y < h && x_ < w && mask[y * w + x_] {
                            count += 1;
                        }
                    }
                }
                if count == 0 {
                    continue;
                }
                out_mask[cy * ow + cx] = true;
                let c = 1.0 / count as f64;
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, x_) = (2 * cy + dy, 2 * cx + dx);
                        if y < h && x_ < w && mask[y * w + x_] {
                            coeff[y * w + x_] = c;
                            acc += x[y * w + x_] * c;
                        }
                    }
                }
                out[cy * ow + cx] = acc;
            }
        }
        let value = Tensor::new(vec![oh, ow], out)?;
        let rg = self.requires(input);
        let v = self.push(value, rg, Op::MaskedPool2 { input, coeff });
        Ok((v, out_mask))
    }

    /// Gated forward difference along x of a rank-2 tensor. A difference is
    /// taken only where both pixels of the pair are valid; the last column is
    /// zero.
    pub fn diff_x(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "diff_x expects rank-2 input, got {shape:?}"
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        if mask.len() != h * w {
            return Err(Error::Shape("diff_x mask length mismatch".into()));
        }
        let x = self.value(input).data();
        let mut gate = vec![0.0; h * w];
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w.saturating_sub(1) {
                if mask[y * w + xx] && mask[y * w + xx + 1] {
                    gate[y * w + xx] = 1.0;
                    out[y * w + xx] = x[y * w + xx + 1] - x[y * w + xx];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.requires(input);
        Ok(self.push(value, rg, Op::DiffX { input, gate }))
    }

    /// Gated forward difference along y of a rank-2 tensor.
    pub fn diff_y(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "diff_y expects rank-2 input, got {shape:?}"
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        if mask.len() != h * w {
            return Err(Error::Shape("diff_y mask length mismatch".into()));
        }
        let x = self.value(input).data();
        let mut gate = vec![0.0; h * w];
        let mut out = vec![0.0; h * w];
        for y in 0..h.saturating_sub(1) {
            for xx in 0..w {
                if mask[y * w + xx] && mask[(y + 1) * w + xx] {
                    gate[y * w + xx] = 1.0;
                    out[y * w + xx] = x[(y + 1) * w + xx] - x[y * w + xx];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.requires(input);
        Ok(self.push(value, rg, Op::DiffY { input, gate }))
    }

    /// Reverse-mode accumulation of gradients from a scalar loss.
    ///
    /// Gradients accumulate additively across repeated calls, matching the
    /// convention that the caller zeroes parameter gradients explicitly.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if self.grads.len() != self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local)?;
            let entry = &mut self.grads[i];
            match entry {
                Some(t) => {
                    for (dst, src) in t.data_mut().iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                None => {
                    let shape = self.nodes[i].value.shape().to_vec();
                    *entry = Some(Tensor::new(shape, g)?);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) -> Result<()> {
        let accum = |local: &mut [Option<Vec<f64>>], v: Var, this: &Graph, f: &mut dyn FnMut(&mut [f64])| {
            if !this.requires(v) {
                return;
            }
            let slot = &mut local[v.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; this.value(v).numel()]);
            }
            f(slot.as_mut().unwrap());
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(local, *a, self, &mut |dst| {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                accum(local, *b, self, &mut |dst| {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::Sub(a, b) => {
                accum(local, *a, self, &mut |dst| {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                accum(local, *b, self, &mut |dst| {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                accum(local, *a, self, &mut |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * bv[i];
                    }
                });
                accum(local, *b, self, &mut |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                accum(local, *a, self, &mut |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * c;
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                accum(local, *a, self, &mut |dst| {
                    for i in 0..dst.len() {
                        if av[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[idx].value.data();
                accum(local, *a, self, &mut |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let out = self.nodes[idx].value.data();
                accum(local, *a, self, &mut |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                accum(local, *a, self, &mut |dst| {
                    for i in 0..dst.len() {
                        // subgradient 0 at the kink
                        dst[i] += g[i] * if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g[0];
                accum(local, *a, self, &mut |dst| {
                    for d in dst.iter_mut() {
                        *d += gs;
                    }
                });
            }
            Op::MulConst(a, coeff) => {
                accum(local, *a, self, &mut |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * coeff[i];
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                col,
            } => {
                let geom = ConvGeometry::resolve(
                    self.value(*input).shape(),
                    self.value(*weight).shape(),
                    self.value(*bias).shape(),
                    *stride,
                    *padding,
                )?;
                if self.requires(*bias) {
                    accum(local, *bias, self, &mut |dst| {
                        let p = geom.out_h * geom.out_w;
                        for co in 0..geom.c_out {
                            let s: f64 = g[co * p..(co + 1) * p].iter().sum();
                            dst[co] += s;
                        }
                    });
                }
                if self.requires(*weight) {
                    let gw = conv_grad_weight(g, col, &geom);
                    accum(local, *weight, self, &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(&gw) {
                            *d += s;
                        }
                    });
                }
                if self.requires(*input) {
                    let gi = conv_grad_input(g, self.value(*weight).data(), &geom);
                    accum(local, *input, self, &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(&gi) {
                            *d += s;
                        }
                    });
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = self.value(*input).shape();
                let (c, n) = (shape[0], shape[1] * shape[2]);
                let gm = self.value(*gamma).data();
                accum(local, *beta, self, &mut |dst| {
                    for ch in 0..c {
                        let s: f64 = g[ch * n..(ch + 1) * n].iter().sum();
                        dst[ch] += s;
                    }
                });
                accum(local, *gamma, self, &mut |dst| {
                    for ch in 0..c {
                        let s: f64 = g[ch * n..(ch + 1) * n]
                            .iter()
                            .zip(&xhat[ch * n..(ch + 1) * n])
                            .map(|(gi, xh)| gi * xh)
                            .sum();
                        dst[ch] += s;
                    }
                });
                accum(local, *input, self, &mut |dst| {
                    let nf = n as f64;
                    for ch in 0..c {
                        let gs = &g[ch * n..(ch + 1) * n];
                        let xh = &xhat[ch * n..(ch + 1) * n];
                        let sum_g: f64 = gs.iter().sum();
                        let sum_gx: f64 = gs.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let k = gm[ch] * inv_std[ch];
                        for i in 0..n {
                            dst[ch * n + i] +=
                                k * (gs[i] - sum_g / nf - xh[i] * sum_gx / nf);
                        }
                    }
                });
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                running_mean,
                inv_std,
            } => {
                let shape = self.value(*input).shape();
                let (c, n) = (shape[0], shape[1] * shape[2]);
                let gm = self.value(*gamma).data();
                let xv = self.value(*input).data();
                accum(local, *beta, self, &mut |dst| {
                    for ch in 0..c {
                        let s: f64 = g[ch * n..(ch + 1) * n].iter().sum();
                        dst[ch] += s;
                    }
                });
                accum(local, *gamma, self, &mut |dst| {
                    for ch in 0..c {
                        let s: f64 = g[ch * n..(ch + 1) * n]
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| {
                                gi * (xv[ch * n + i] - running_mean[ch]) * inv_std[ch]
                            })
                            .sum();
                        dst[ch] += s;
                    }
                });
                accum(local, *input, self, &mut |dst| {
                    for ch in 0..c {
                        let k = gm[ch] * inv_std[ch];
                        for i in 0..n {
                            dst[ch * n + i] += g[ch * n + i] * k;
                        }
                    }
                });
            }
            Op::Upsample2(input) => {
                let shape = self.value(*input).shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let taps_y = bilinear_taps(h);
                let taps_x = bilinear_taps(w);
                accum(local, *input, self, &mut |dst| {
                    for ch in 0..c {
                        let gsrc = &g[ch * oh * ow..(ch + 1) * oh * ow];
                        let d = &mut dst[ch * h * w..(ch + 1) * h * w];
                        for oy in 0..oh {
                            let (y0, y1, wy) = taps_y[oy];
                            for ox in 0..ow {
                                let (x0, x1, wx) = taps_x[ox];
                                let gv = gsrc[oy * ow + ox];
                                d[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * gv;
                                d[y0 * w + x1] += (1.0 - wy) * wx * gv;
                                d[y1 * w + x0] += wy * (1.0 - wx) * gv;
                                d[y1 * w + x1] += wy * wx * gv;
                            }
                        }
                    }
                });
            }
            Op::Reshape(input) => {
                accum(local, *input, self, &mut |dst| {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::ConcatCh(a, b) => {
                let na = self.value(*a).numel();
                accum(local, *a, self, &mut |dst| {
                    for (d, s) in dst.iter_mut().zip(&g[..na]) {
                        *d += s;
                    }
                });
                accum(local, *b, self, &mut |dst| {
                    for (d, s) in dst.iter_mut().zip(&g[na..]) {
                        *d += s;
                    }
                });
            }
            Op::SliceCh { input, from, to } => {
                let shape = self.value(*input).shape();
                let n = shape[1] * shape[2];
                let offset = from * n;
                let len = (to - from) * n;
                accum(local, *input, self, &mut |dst| {
                    for (i, s) in g.iter().take(len).enumerate() {
                        dst[offset + i] += s;
                    }
                });
            }
            Op::MaskedPool2 { input, coeff } => {
                let shape = self.value(*input).shape();
                let (h, w) = (shape[0], shape[1]);
                let ow = w.div_ceil(2);
                accum(local, *input, self, &mut |dst| {
                    for y in 0..h {
                        for x in 0..w {
                            let c = coeff[y * w + x];
                            if c != 0.0 {
                                dst[y * w + x] += c * g[(y / 2) * ow + x / 2];
                            }
                        }
                    }
                });
            }
            Op::DiffX { input, gate } => {
                let shape = self.value(*input).shape();
                let (h, w) = (shape[0], shape[1]);
                accum(local, *input, self, &mut |dst| {
                    for y in 0..h {
                        for x in 0..w.saturating_sub(1) {
                            let gv = g[y * w + x] * gate[y * w + x];
                            if gv != 0.0 {
                                dst[y * w + x + 1] += gv;
                                dst[y * w + x] -= gv;
                            }
                        }
                    }
                });
            }
            Op::DiffY { input, gate } => {
                let shape = self.value(*input).shape();
                let (h, w) = (shape[0], shape[1]);
                accum(local, *input, self, &mut |dst| {
                    for y in 0..h.saturating_sub(1) {
                        for x in 0..w {
                            let gv = g[y * w + x] * gate[y * w + x];
                            if gv != 0.0 {
                                dst[(y + 1) * w + x] += gv;
                                dst[y * w + x] -= gv;
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of the logistic function on (0, 1).
pub fn logit_scalar(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn resolve(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::Shape(format!(
                "conv2d input must be [Cin,H,W], got {input:?}"
            )));
        }
        if weight.len() != 4 || weight[2] != weight[3] {
            return Err(Error::Shape(format!(
                "conv2d weight must be [Cout,Cin,k,k], got {weight:?}"
            )));
        }
        if weight[2].is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "conv2d kernel size must be odd, got {}",
                weight[2]
            )));
        }
        if input[0] != weight[1] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {}, weight expects {}",
                input[0], weight[1]
            )));
        }
        if bias.len() != 1 || bias[0] != weight[0] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [Cout={}], got {bias:?}",
                weight[0]
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be >= 1".into()));
        }
        let (h, w, k) = (input[1], input[2], weight[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Shape(format!(
                "conv2d input {h}x{w} too small for kernel {k} with padding {padding}"
            )));
        }
        Ok(ConvGeometry {
            c_in: input[0],
            c_out: weight[0],
            h,
            w,
            k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds the padded input into a `[K, P]` buffer: row `kk = (ci, ky, kx)`
/// holds the input value each output pixel sees through that kernel tap.
fn im2col(x: &[f64], geom: &ConvGeometry) -> Vec<f64> {
    let (k, p) = (geom.patch_len(), geom.out_pixels());
    let mut col = vec![0.0; k * p];
    for ci in 0..geom.c_in {
        let plane = &x[ci * geom.h * geom.w..(ci + 1) * geom.h * geom.w];
        for ky in 0..geom.k {
            for kx in 0..geom.k {
                let kk = (ci * geom.k + ky) * geom.k + kx;
                let row = &mut col[kk * p..(kk + 1) * p];
                for oy in 0..geom.out_h {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..geom.out_w {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= geom.w as isize {
                            continue;
                        }
                        row[oy * geom.out_w + ox] = plane[iy * geom.w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

fn conv_forward(weight: &[f64], bias: &[f64], col: &[f64], geom: &ConvGeometry) -> Vec<f64> {
    let (k, p) = (geom.patch_len(), geom.out_pixels());
    let mut out = vec![0.0; geom.c_out * p];
    out.par_chunks_mut(p).enumerate().for_each(|(co, dst)| {
        dst.fill(bias[co]);
        let wrow = &weight[co * k..(co + 1) * k];
        for (kk, &wv) in wrow.iter().enumerate() {
            let src = &col[kk * p..(kk + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
    });
    out
}

fn conv_grad_weight(grad_out: &[f64], col: &[f64], geom: &ConvGeometry) -> Vec<f64> {
    let (k, p) = (geom.patch_len(), geom.out_pixels());
    let mut gw = vec![0.0; geom.c_out * k];
    gw.par_chunks_mut(k).enumerate().for_each(|(co, dst)| {
        let grow = &grad_out[co * p..(co + 1) * p];
        for (kk, d) in dst.iter_mut().enumerate() {
            *d = dot_unrolled(grow, &col[kk * p..(kk + 1) * p]);
        }
    });
    gw
}

fn conv_grad_input(grad_out: &[f64], weight: &[f64], geom: &ConvGeometry) -> Vec<f64> {
    let (k, p) = (geom.patch_len(), geom.out_pixels());
    // gcol[kk][p] = sum_co weight[co][kk] * grad_out[co][p]
    let mut gcol = vec![0.0; k * p];
    gcol.par_chunks_mut(p).enumerate().for_each(|(kk, dst)| {
        for co in 0..geom.c_out {
            let wv = weight[co * k + kk];
            if wv == 0.0 {
                continue;
            }
            let src = &grad_out[co * p..(co + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
    });
    // col2im scatter; channels are independent, so parallelize over them.
    let mut gi = vec![0.0; geom.c_in * geom.h * geom.w];
    let plane = geom.h * geom.w;
    gi.par_chunks_mut(plane).enumerate().for_each(|(ci, dst)| {
        for ky in 0..geom.k {
            for kx in 0..geom.k {
                let kk = (ci * geom.k + ky) * geom.k + kx;
                let src = &gcol[kk * p..(kk + 1) * p];
                for oy in 0..geom.out_h {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..geom.out_w {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= geom.w as isize {
                            continue;
                        }
                        dst[iy * geom.w + ix as usize] += src[oy * geom.out_w + ox];
                    }
                }
            }
        }
    });
    gi
}

/// Four-way unrolled dot product. The split accumulation order is fixed, so
/// results are deterministic.
fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// Sampling taps for x2 bilinear interpolation without corner alignment:
/// output pixel `o` reads source coordinate `(o + 0.5)/2 - 0.5`, edge clamped.
fn bilinear_taps(src_len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * src_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let x0 = src.floor();
            let wfrac = src - x0;
            let i0 = (x0 as isize).clamp(0, src_len as isize - 1) as usize;
            let i1 = (x0 as isize + 1).clamp(0, src_len as isize - 1) as usize;
            (i0, i1, wfrac)
        })
        .collect()
}

fn check_len(t: &Tensor, len: usize, what: &str) -> Result<()> {
    if t.numel() != len {
        return Err(Error::Shape(format!(
            "{what}: expected {len} elements, got {}",
            t.numel()
        )));
    }
    Ok(())
}
