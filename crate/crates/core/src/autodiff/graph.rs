use super::kernels::{axis_extents, gelu, gelu_grad, gemm, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Result, SoaError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, zero padding and channel grouping of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        ConvOptions { stride: 1, padding: 0, groups: 1 }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GroupNorm { input: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    MaskRows { input: Var, fill: Var, mask: Vec<bool> },
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    NormalizeRows(Var, Vec<f64>),
    StraightThrough(Var),
    ScalarFn(Var, Vec<f64>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv1d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            LayerNorm { input, gamma, beta, .. } | GroupNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            MaskRows { input, fill, .. } => vec![*input, *fill],
            ConcatCols(vs) => vs.clone(),
            Scale(a, _)
            | AddScalar(a)
            | Gelu(a)
            | Exp(a)
            | Log(a)
            | Softmax(a, _)
            | LogSoftmax(a, _)
            | GatherRows(a, _)
            | GatherCols(a, _)
            | Transpose(a)
            | Reshape(a)
            | SliceCols(a, _)
            | Sum(a)
            | Mean(a)
            | SumAxis(a, _)
            | NormalizeRows(a, _)
            | StraightThrough(a)
            | ScalarFn(a, _) => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations supporting one reverse pass.
///
/// Nodes are stored in creation order, so every input precedes its consumer
/// and the reverse of the node list is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`] for the trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; zeros when the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib.to_vec()),
    }
}

fn add_owned(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient is tracked).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| SoaError::contract(format!("{what}: expected 2-D input, got {:?}", self.shape(v))))
    }

    /// Cross-correlation of a `C_in × L` input with `C_out × C_in × K` kernels.
    pub fn conv1d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        self.conv1d_ext(input, kernel, None, ConvOptions { stride, ..ConvOptions::default() })
    }

    pub fn conv1d_ext(&mut self, input: Var, kernel: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let (c_in, len) = self.dims2(input, "conv1d")?;
        let (c_out, c_in_g, k_w) = match self.shape(kernel) {
            [a, b, c] => (*a, *b, *c),
            s => return Err(SoaError::contract(format!("conv1d: kernel must be 3-D, got {s:?}"))),
        };
        if opts.stride == 0 || opts.groups == 0 || k_w == 0 {
            return Err(SoaError::contract("conv1d: stride, groups and width must be positive"));
        }
        if c_in % opts.groups != 0 || c_out % opts.groups != 0 || c_in / opts.groups != c_in_g {
            return Err(SoaError::contract(format!(
                "conv1d: channels {c_in}->{c_out} incompatible with kernel {:?} and {} groups",
                self.shape(kernel),
                opts.groups
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != c_out {
                return Err(SoaError::contract("conv1d: bias length must equal output channels"));
            }
        }
        let padded = len + 2 * opts.padding;
        if padded < k_w {
            return Err(SoaError::InputTooShort { what: "conv1d input", len: padded, min: k_w });
        }
        let geom = ConvGeometry {
            in_channels: c_in,
            out_channels: c_out,
            kernel: k_w,
            stride: opts.stride,
            padding: opts.padding,
            groups: opts.groups,
            in_len: len,
            out_len: (padded - k_w) / opts.stride + 1,
        };
        let out = geom.forward(self.value(input).data(), self.value(kernel).data(), bias.map(|b| self.value(b).data()));
        let value = Tensor::from_parts(vec![c_out, geom.out_len], out);
        Ok(self.push(value, Op::Conv1d { input, kernel, bias, geom }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(SoaError::contract(format!("matmul: {m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(SoaError::contract(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "add_row")?;
        if self.value(row).numel() != n {
            return Err(SoaError::contract("add_row: row length must equal column count"));
        }
        let r = self.value(row).data();
        let t = self.value(a);
        let data = t.data().chunks(n).flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y)).collect();
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.map(a, |x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a, gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::ln);
        self.push(v, Op::Log(a))
    }

    /// Normalizes each row of an `m × n` matrix, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(input, "layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(SoaError::contract("layer_norm: affine length must equal row width"));
        }
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let v = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(v, Op::LayerNorm { input, gamma, beta, xhat, rstd }))
    }

    /// Group normalization of a `C × L` input: each group of `C / groups`
    /// channels is normalized over all of its values, then a per-channel
    /// affine is applied.
    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (c, l) = self.dims2(input, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(SoaError::contract("group_norm: groups must divide channels"));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(SoaError::contract("group_norm: affine length must equal channels"));
        }
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let span = (c / groups) * l;
        let mut xhat = vec![0.0; c * l];
        let mut rstd = vec![0.0; groups];
        let mut out = vec![0.0; c * l];
        for grp in 0..groups {
            let vals = &x[grp * span..(grp + 1) * span];
            let mean = vals.iter().sum::<f64>() / span as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[grp] = rs;
            for (i, v) in vals.iter().enumerate() {
                let idx = grp * span + i;
                let ch = idx / l;
                xhat[idx] = (v - mean) * rs;
                out[idx] = xhat[idx] * g[ch] + b[ch];
            }
        }
        let v = Tensor::from_parts(vec![c, l], out);
        Ok(self.push(v, Op::GroupNorm { input, gamma, beta, groups, xhat, rstd }))
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(SoaError::contract(format!("axis {axis} out of range for shape {:?}", self.shape(a))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let out = softmax_values(self.value(a), axis, false);
        Ok(self.push(out, Op::Softmax(a, axis)))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let out = softmax_values(self.value(a), axis, true);
        Ok(self.push(out, Op::LogSoftmax(a, axis)))
    }

    /// Selects rows of a 2-D tensor (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "gather_rows")?;
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(SoaError::contract(format!("gather_rows: index {bad} >= {m}")));
        }
        let t = self.value(a);
        let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let v = Tensor::from_parts(vec![idx.len(), n], data);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    /// Per-row column selection: `out[i][j] = a[i][idx[i·k + j]]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "gather_cols")?;
        if idx.len() != m * k {
            return Err(SoaError::contract("gather_cols: index table must be rows × k"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(SoaError::contract(format!("gather_cols: index {bad} >= {n}")));
        }
        let t = self.value(a);
        let data = idx.iter().enumerate().map(|(p, &c)| t.at2(p / k, c)).collect();
        let v = Tensor::from_parts(vec![m, k], data);
        Ok(self.push(v, Op::GatherCols(a, idx.to_vec())))
    }

    /// Replaces the rows where `mask` is set with the vector `fill`.
    pub fn mask_rows(&mut self, input: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2(input, "mask_rows")?;
        if mask.len() != m {
            return Err(SoaError::contract(format!("mask length {} does not match {} rows", mask.len(), m)));
        }
        if self.value(fill).numel() != n {
            return Err(SoaError::contract("mask_rows: fill length must equal row width"));
        }
        let f = self.value(fill).data().to_vec();
        let t = self.value(input);
        let mut data = t.data().to_vec();
        for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            data[r * n..(r + 1) * n].copy_from_slice(&f);
        }
        let v = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(v, Op::MaskRows { input, fill, mask: mask.to_vec() }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let v = Tensor::from_parts(vec![n, m], transpose_data(self.value(a).data(), m, n));
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start > end || end > n {
            return Err(SoaError::contract(format!("slice_cols: {start}..{end} of {n}")));
        }
        let t = self.value(a);
        let data = (0..m).flat_map(|r| t.row(r)[start..end].iter().copied()).collect();
        let v = Tensor::from_parts(vec![m, end - start], data);
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| SoaError::contract("concat_cols: nothing to concatenate"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(SoaError::contract("concat_cols: row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::from_parts(vec![m, total], data);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sums a 2-D tensor along `axis`, producing a `1 × n` or `m × 1` result.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "sum_axis")?;
        let t = self.value(a);
        let v = match axis {
            0 => {
                let mut acc = vec![0.0; n];
                for r in 0..m {
                    acc.iter_mut().zip(t.row(r)).for_each(|(s, x)| *s += x);
                }
                Tensor::from_parts(vec![1, n], acc)
            }
            1 => Tensor::from_parts(vec![m, 1], (0..m).map(|r| t.row(r).iter().sum()).collect()),
            _ => return Err(SoaError::contract("sum_axis: axis must be 0 or 1")),
        };
        Ok(self.push(v, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_axis")?;
        let s = self.sum_axis(a, axis)?;
        let count = if axis == 0 { m } else { n };
        Ok(self.scale(s, 1.0 / count.max(1) as f64))
    }

    /// Scales each row to unit Euclidean norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "normalize_rows")?;
        let t = self.value(a);
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = t.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(SoaError::DegenerateInput(format!("row {r} has norm {norm}; cosine similarity undefined")));
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let v = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(v, Op::NormalizeRows(a, norms)))
    }

    /// Hard one-hot of the row-wise argmax within each block of `width`
    /// columns; the backward pass hands the gradient straight to `soft`.
    pub fn straight_through(&mut self, soft: Var, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(soft, "straight_through")?;
        if width == 0 || n % width != 0 {
            return Err(SoaError::contract("straight_through: width must divide columns"));
        }
        let t = self.value(soft);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for (b, block) in t.row(r).chunks(width).enumerate() {
                let best = argmax(block);
                data[r * n + b * width + best] = 1.0;
            }
        }
        let v = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(v, Op::StraightThrough(soft)))
    }

    /// Scalar node whose gradient with respect to `input` was computed
    /// together with its value.
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(SoaError::contract("scalar_fn: gradient shape mismatch"));
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn(input, grad)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(SoaError::contract(format!("backward requires a scalar loss, got shape {:?}", lt.shape())));
        }
        let n_nodes = loss.0 + 1;
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            acc[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n_nodes).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = acc[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), dy));
                continue;
            }
            self.backward_node(node, &dy, &mut acc);
        }
        Ok(Gradients { grads: leaf_grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, dy: &[f64], acc: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { input, kernel, bias, geom } => {
                let x = self.value(*input).data();
                let w = self.value(*kernel).data();
                let mut dx = self.wants(*input).then(|| vec![0.0; x.len()]);
                let mut dw = self.wants(*kernel).then(|| vec![0.0; w.len()]);
                geom.backward(x, w, dy, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    add_owned(&mut acc[input.0], dx);
                }
                if let Some(dw) = dw {
                    add_owned(&mut acc[kernel.0], dw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let db = dy.chunks(geom.out_len).map(|c| c.iter().sum()).collect();
                    add_owned(&mut acc[b.0], db);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy, false, self.value(*b).data(), true, &mut da, false);
                    add_owned(&mut acc[a.0], da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, dy, false, &mut db, false);
                    add_owned(&mut acc[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut acc[a.0], dy);
                }
                if self.wants(*b) {
                    add_into(&mut acc[b.0], dy);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut acc[a.0], dy);
                }
                if self.wants(*b) {
                    add_owned(&mut acc[b.0], dy.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    add_owned(&mut acc[a.0], dy.iter().zip(vb).map(|(g, x)| g * x).collect());
                }
                if self.wants(*b) {
                    add_owned(&mut acc[b.0], dy.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    add_into(&mut acc[a.0], dy);
                }
                if self.wants(*row) {
                    let n = self.value(*row).numel();
                    let mut dr = vec![0.0; n];
                    for chunk in dy.chunks(n) {
                        dr.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                    }
                    add_owned(&mut acc[row.0], dr);
                }
            }
            Op::Scale(a, f) => add_owned(&mut acc[a.0], dy.iter().map(|g| g * f).collect()),
            Op::AddScalar(a) => add_into(&mut acc[a.0], dy),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                add_owned(&mut acc[a.0], dy.iter().zip(x).map(|(g, v)| g * gelu_grad(*v)).collect());
            }
            Op::Exp(a) => add_owned(&mut acc[a.0], dy.iter().zip(y.data()).map(|(g, e)| g * e).collect()),
            Op::Log(a) => {
                let x = self.value(*a).data();
                add_owned(&mut acc[a.0], dy.iter().zip(x).map(|(g, v)| g / v).collect());
            }
            Op::LayerNorm { input, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).numel();
                let g = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (dr, hr) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += dr[c] * hr[c];
                        }
                    }
                    add_owned(&mut acc[gamma.0], dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; n];
                    for dr in dy.chunks(n) {
                        db.iter_mut().zip(dr).for_each(|(s, v)| *s += v);
                    }
                    add_owned(&mut acc[beta.0], db);
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; dy.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let dr = &dy[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..n {
                            let dh = dr[c] * g[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for c in 0..n {
                            dx[r * n + c] = rs * (dr[c] * g[c] - m1 - hr[c] * m2);
                        }
                    }
                    add_owned(&mut acc[input.0], dx);
                }
            }
            Op::GroupNorm { input, gamma, beta, groups, xhat, rstd } => {
                let c = self.value(*gamma).numel();
                let l = dy.len() / c;
                let g = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let dg = (0..c).map(|ch| (0..l).map(|t| dy[ch * l + t] * xhat[ch * l + t]).sum()).collect();
                    add_owned(&mut acc[gamma.0], dg);
                }
                if self.wants(*beta) {
                    let db = dy.chunks(l).map(|r| r.iter().sum()).collect();
                    add_owned(&mut acc[beta.0], db);
                }
                if self.wants(*input) {
                    let span = (c / groups) * l;
                    let mut dx = vec![0.0; dy.len()];
                    for (grp, rs) in rstd.iter().enumerate() {
                        let base = grp * span;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in base..base + span {
                            let dh = dy[i] * g[i / l];
                            m1 += dh;
                            m2 += dh * xhat[i];
                        }
                        m1 /= span as f64;
                        m2 /= span as f64;
                        for i in base..base + span {
                            dx[i] = rs * (dy[i] * g[i / l] - m1 - xhat[i] * m2);
                        }
                    }
                    add_owned(&mut acc[input.0], dx);
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_extents(y.shape(), *axis);
                let p = y.data();
                let mut dx = vec![0.0; dy.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| dy[idx(i)] * p[idx(i)]).sum();
                        for i in 0..len {
                            dx[idx(i)] = p[idx(i)] * (dy[idx(i)] - dot);
                        }
                    }
                }
                add_owned(&mut acc[a.0], dx);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_extents(y.shape(), *axis);
                let lp = y.data();
                let mut dx = vec![0.0; dy.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let total: f64 = (0..len).map(|i| dy[idx(i)]).sum();
                        for i in 0..len {
                            dx[idx(i)] = dy[idx(i)] - lp[idx(i)].exp() * total;
                        }
                    }
                }
                add_owned(&mut acc[a.0], dx);
            }
            Op::GatherRows(a, idx) => {
                let n = y.shape()[1];
                let mut dx = vec![0.0; self.value(*a).numel()];
                for (p, &r) in idx.iter().enumerate() {
                    dx[r * n..(r + 1) * n].iter_mut().zip(&dy[p * n..(p + 1) * n]).for_each(|(s, g)| *s += g);
                }
                add_owned(&mut acc[a.0], dx);
            }
            Op::GatherCols(a, idx) => {
                let n = self.shape(*a)[1];
                let k = y.shape()[1];
                let mut dx = vec![0.0; self.value(*a).numel()];
                for (p, &c) in idx.iter().enumerate() {
                    dx[(p / k) * n + c] += dy[p];
                }
                add_owned(&mut acc[a.0], dx);
            }
            Op::MaskRows { input, fill, mask } => {
                let n = y.shape()[1];
                if self.wants(*input) {
                    let mut dx = dy.to_vec();
                    for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                        dx[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    add_owned(&mut acc[input.0], dx);
                }
                if self.wants(*fill) {
                    let mut df = vec![0.0; n];
                    for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                        df.iter_mut().zip(&dy[r * n..(r + 1) * n]).for_each(|(s, g)| *s += g);
                    }
                    add_owned(&mut acc[fill.0], df);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (y.shape()[0], y.shape()[1]);
                add_owned(&mut acc[a.0], transpose_data(dy, n, m));
            }
            Op::Reshape(a) => add_into(&mut acc[a.0], dy),
            Op::SliceCols(a, start) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let w = y.shape()[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&dy[r * w..(r + 1) * w]);
                }
                add_owned(&mut acc[a.0], dx);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (y.shape()[0], y.shape()[1]);
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                        }
                        add_owned(&mut acc[p.0], dp);
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                add_owned(&mut acc[a.0], vec![dy[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                add_owned(&mut acc[a.0], vec![dy[0] / n.max(1) as f64; n]);
            }
            Op::SumAxis(a, axis) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let dx = (0..m * n).map(|i| if *axis == 0 { dy[i % n] } else { dy[i / n] }).collect();
                add_owned(&mut acc[a.0], dx);
            }
            Op::NormalizeRows(a, norms) => {
                let n = y.shape()[1];
                let mut dx = vec![0.0; dy.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let dr = &dy[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = (dr[c] - yr[c] * dot) / norm;
                    }
                }
                add_owned(&mut acc[a.0], dx);
            }
            Op::StraightThrough(a) => add_into(&mut acc[a.0], dy),
            Op::ScalarFn(a, grad) => {
                add_owned(&mut acc[a.0], grad.iter().map(|g| g * dy[0]).collect());
            }
        }
    }
}

fn transpose_data(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = src[r * n + c];
        }
    }
    out
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted (log-)softmax along `axis`.
pub(crate) fn softmax_values(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = axis_extents(t.shape(), axis);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..len).map(|i| (x[idx(i)] - max).exp()).sum();
            let lse = max + sum.ln();
            for i in 0..len {
                out[idx(i)] = if log { x[idx(i)] - lse } else { (x[idx(i)] - lse).exp() };
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}
