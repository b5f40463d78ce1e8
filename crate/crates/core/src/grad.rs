//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Every differentiable value lives on a [`Tape`] as a node. Ops append nodes
//! in creation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Constants are nodes that never
//! receive gradients.
//!
//! Convolutions are expressed as [`Tape::im2col`] followed by [`Tape::matmul`];
//! the patch extraction is linear, so its backward pass is the matching
//! scatter-add (col2im).

use crate::error::{Error, Result};

/// Guard used by normalization and `log`.
pub const EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    /// Builds a tensor by evaluating `f` at each flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: (0..numel).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers and EMA updates; the shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Memory layout of the image fed to [`Tape::im2col`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageLayout {
    /// `[C, H, W]` or `[B, C, H, W]`.
    Planar,
    /// `[B*H*W, C]`: one row per pixel, as produced by a previous conv layer.
    Rows { batch: usize, height: usize, width: usize },
}

#[derive(Clone, Copy, Debug)]
struct PatchGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    planar: bool,
}

impl PatchGeometry {
    fn cols(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    fn src_index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        if self.planar {
            ((b * self.channels + c) * self.height + y) * self.width + x
        } else {
            ((b * self.height + y) * self.width + x) * self.channels + c
        }
    }

    /// Calls `f(dst, src)` for every in-bounds (output, input) index pair.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        let (h, w, k) = (self.height as isize, self.width as isize, self.kernel);
        let pad = (k / 2) as isize;
        let cols = self.cols();
        for b in 0..self.batch {
            for y in 0..h {
                for x in 0..w {
                    let row = (b * self.height + y as usize) * self.width + x as usize;
                    let base = row * cols;
                    for ky in 0..k {
                        let sy = y + ky as isize - pad;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = x + kx as isize - pad;
                            if sx < 0 || sx >= w {
                                continue;
                            }
                            for c in 0..self.channels {
                                let dst = base + c * k * k + ky * k + kx;
                                f(dst, self.src_index(b, c, sy as usize, sx as usize));
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { a: NodeId, rows: usize, cols: usize },
    Reshape { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    Relu { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    LogSoftmax { a: NodeId, axis: usize },
    L2Normalize { a: NodeId, axis: usize },
    Reduce { a: NodeId, axis: Option<usize>, kind: Reduction },
    Im2col { a: NodeId, geom: PatchGeometry },
    GatherRows { a: NodeId, index: Vec<usize> },
    Pick { a: NodeId, index: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamped_norms: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Row-major GEMM: `c = a' * b' (+ c if accumulate)`, with `'` an optional transpose.
/// `m x k` times `k x n` after transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices have exactly the extents implied by (m, k, n) and the
    // strides above, which the debug assertions check.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `l2_normalize` slices whose norm fell below [`EPS`].
    pub fn clamped_norms(&self) -> usize {
        self.clamped_norms
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn matrix_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape_of(id) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, Tensor { shape: vec![m, n], data: out }, &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.push(Op::Transpose { a, rows, cols }, Tensor { shape: vec![cols, rows], data: out }, &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { a }, value, &[a]))
    }

    fn broadcast_check(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<usize> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if !is_suffix(sb, sa) {
            return Err(Error::shape(op, format!("{sb:?} does not broadcast onto {sa:?}")));
        }
        Ok(self.value(b).len())
    }

    /// Elementwise `a + b`; `b`'s shape must be a suffix of `a`'s.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let period = self.broadcast_check(a, b, "add")?;
        let bv = self.value(b).data();
        let av = self.value(a);
        let data = av.data().iter().enumerate().map(|(i, x)| x + bv[i % period]).collect();
        let value = Tensor { shape: av.shape.clone(), data };
        Ok(self.push(Op::Add { a, b }, value, &[a, b]))
    }

    /// Elementwise `a * b`; `b`'s shape must be a suffix of `a`'s.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let period = self.broadcast_check(a, b, "mul")?;
        let bv = self.value(b).data();
        let av = self.value(a);
        let data = av.data().iter().enumerate().map(|(i, x)| x * bv[i % period]).collect();
        let value = Tensor { shape: av.shape.clone(), data };
        Ok(self.push(Op::Mul { a, b }, value, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let av = self.value(a);
        let value = Tensor { shape: av.shape.clone(), data: av.data().iter().map(|x| x * factor).collect() };
        self.push(Op::Scale { a, factor }, value, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let value = Tensor { shape: av.shape.clone(), data: av.data().iter().map(|x| x.max(0.0)).collect() };
        self.push(Op::Relu { a }, value, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let value = Tensor { shape: av.shape.clone(), data: av.data().iter().map(|x| x.exp()).collect() };
        self.push(Op::Exp { a }, value, &[a])
    }

    /// Natural log of `max(x, EPS)`.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let value = Tensor { shape: av.shape.clone(), data: av.data().iter().map(|x| x.max(EPS).ln()).collect() };
        self.push(Op::Log { a }, value, &[a])
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (outer, len, inner) = split_axis(av.shape(), axis, "softmax")?;
        let mut out = av.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor { shape: av.shape.clone(), data: out };
        Ok(self.push(Op::Softmax { a, axis }, value, &[a]))
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (outer, len, inner) = split_axis(av.shape(), axis, "log_softmax")?;
        let mut out = av.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (out[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] -= lse;
                }
            }
        }
        let value = Tensor { shape: av.shape.clone(), data: out };
        Ok(self.push(Op::LogSoftmax { a, axis }, value, &[a]))
    }

    /// Scales every slice along `axis` to unit Euclidean norm. Norms below
    /// [`EPS`] are clamped to it and counted in [`Tape::clamped_norms`].
    pub fn l2_normalize(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (outer, len, inner) = split_axis(av.shape(), axis, "l2_normalize")?;
        let mut out = av.data().to_vec();
        let mut clamped = 0;
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let norm = (0..len).map(|j| out[at(j)] * out[at(j)]).sum::<f64>().sqrt();
                if norm < EPS {
                    clamped += 1;
                }
                let denom = norm.max(EPS);
                for j in 0..len {
                    out[at(j)] /= denom;
                }
            }
        }
        let value = Tensor { shape: av.shape.clone(), data: out };
        self.clamped_norms += clamped;
        Ok(self.push(Op::L2Normalize { a, axis }, value, &[a]))
    }

    /// Sum or mean over one axis (removed from the shape), or over everything
    /// when `axis` is `None` (scalar result).
    pub fn reduce(&mut self, a: NodeId, kind: Reduction, axis: Option<usize>) -> Result<NodeId> {
        let av = self.value(a);
        let value = match axis {
            None => {
                let total: f64 = av.data().iter().sum();
                let v = match kind {
                    Reduction::Sum => total,
                    Reduction::Mean => total / av.len().max(1) as f64,
                };
                Tensor::scalar(v)
            }
            Some(axis) => {
                let (outer, len, inner) = split_axis(av.shape(), axis, "reduce")?;
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += av.data()[(o * len + j) * inner + i];
                        }
                    }
                }
                if kind == Reduction::Mean && len > 0 {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut shape = av.shape().to_vec();
                shape.remove(axis);
                Tensor { shape, data: out }
            }
        };
        Ok(self.push(Op::Reduce { a, axis, kind }, value, &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.reduce(a, Reduction::Sum, None).expect("full reduction has no axis to validate")
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.reduce(a, Reduction::Mean, None).expect("full reduction has no axis to validate")
    }

    /// Extracts zero-padded `kernel x kernel` neighborhoods, one row per pixel
    /// (`[B*H*W, C*kernel^2]`, channel-major columns). Spatial size is preserved.
    pub fn im2col(&mut self, a: NodeId, kernel: usize, layout: ImageLayout) -> Result<NodeId> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("im2col kernel must be odd, got {kernel}")));
        }
        let shape = self.shape_of(a).to_vec();
        let geom = match (layout, shape.as_slice()) {
            (ImageLayout::Planar, &[c, h, w]) => PatchGeometry { batch: 1, channels: c, height: h, width: w, kernel, planar: true },
            (ImageLayout::Planar, &[b, c, h, w]) => PatchGeometry { batch: b, channels: c, height: h, width: w, kernel, planar: true },
            (ImageLayout::Rows { batch, height, width }, &[rows, c]) if rows == batch * height * width => {
                PatchGeometry { batch, channels: c, height, width, kernel, planar: false }
            }
            _ => return Err(Error::shape("im2col", format!("{shape:?} does not match {layout:?}"))),
        };
        let src = self.value(a).data();
        let mut out = vec![0.0; geom.rows() * geom.cols()];
        geom.for_each_pair(|dst, s| out[dst] = src[s]);
        let value = Tensor { shape: vec![geom.rows(), geom.cols()], data: out };
        Ok(self.push(Op::Im2col { a, geom }, value, &[a]))
    }

    /// Selects rows of a matrix (repetition allowed).
    pub fn gather_rows(&mut self, a: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims(a, "gather_rows")?;
        if let Some(bad) = index.iter().find(|&&r| r >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {rows}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &r in &index {
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let value = Tensor { shape: vec![index.len(), cols], data: out };
        Ok(self.push(Op::GatherRows { a, index }, value, &[a]))
    }

    /// `out[i] = a[i, index[i]]` for a matrix `a`.
    pub fn pick(&mut self, a: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims(a, "pick")?;
        if index.len() != rows {
            return Err(Error::shape("pick", format!("{} indices for {rows} rows", index.len())));
        }
        if let Some(bad) = index.iter().find(|&&c| c >= cols) {
            return Err(Error::shape("pick", format!("column {bad} out of {cols}")));
        }
        let src = self.value(a).data();
        let data = index.iter().enumerate().map(|(r, &c)| src[r * cols + c]).collect();
        let value = Tensor { shape: vec![rows], data };
        Ok(self.push(Op::Pick { a, index }, value, &[a]))
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need at least one part and axis 0 or 1"));
        }
        let dims = parts
            .iter()
            .map(|&p| self.matrix_dims(p, "concat"))
            .collect::<Result<Vec<_>>>()?;
        let value = if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(Error::shape("concat", format!("column counts differ: {dims:?}")));
            }
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            let rows = dims.iter().map(|d| d.0).sum();
            Tensor { shape: vec![rows, cols], data }
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(Error::shape("concat", format!("row counts differ: {dims:?}")));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
                }
            }
            Tensor { shape: vec![rows, cols], data }
        };
        let parts = parts.to_vec();
        let inputs = parts.clone();
        Ok(self.push(Op::Concat { parts, axis }, value, &inputs))
    }

    /// Reverse sweep from a scalar `loss`. Every gradient-requiring leaf gets
    /// an entry, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape_of(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), _) => Some(Tensor { shape: node.value.shape.clone(), data: g }),
                (None, Op::Leaf) if node.requires_grad => Some(Tensor::zeros(node.value.shape.clone())),
                (None, _) => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |da| gemm(m, n, k, g, false, bv, true, da, true));
                self.accumulate(grads, b, |db| gemm(k, m, n, av, true, g, false, db, true));
            }
            &Op::Transpose { a, rows, cols } => self.accumulate(grads, a, |da| {
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            &Op::Reshape { a } => self.accumulate(grads, a, |da| add_into(da, g)),
            &Op::Add { a, b } => {
                self.accumulate(grads, a, |da| add_into(da, g));
                self.accumulate(grads, b, |db| {
                    let p = db.len();
                    g.iter().enumerate().for_each(|(i, v)| db[i % p] += v);
                });
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let p = bv.len();
                self.accumulate(grads, a, |da| g.iter().enumerate().for_each(|(i, v)| da[i] += v * bv[i % p]));
                self.accumulate(grads, b, |db| g.iter().enumerate().for_each(|(i, v)| db[i % p] += v * av[i]));
            }
            &Op::Scale { a, factor } => {
                self.accumulate(grads, a, |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += v * factor))
            }
            &Op::Relu { a } => {
                let av = self.value(a).data();
                self.accumulate(grads, a, |da| {
                    for i in 0..da.len() {
                        if av[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                })
            }
            &Op::Exp { a } => self.accumulate(grads, a, |da| {
                da.iter_mut().zip(g).zip(out.data()).for_each(|((d, v), y)| *d += v * y)
            }),
            &Op::Log { a } => {
                let av = self.value(a).data();
                self.accumulate(grads, a, |da| {
                    for i in 0..da.len() {
                        if av[i] > EPS {
                            da[i] += g[i] / av[i];
                        }
                    }
                })
            }
            &Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), axis, "softmax").expect("validated in forward");
                let y = out.data();
                self.accumulate(grads, a, |da| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                da[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                })
            }
            &Op::LogSoftmax { a, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), axis, "log_softmax").expect("validated in forward");
                let y = out.data();
                self.accumulate(grads, a, |da| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                da[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                })
            }
            &Op::L2Normalize { a, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), axis, "l2_normalize").expect("validated in forward");
                let (x, y) = (self.value(a).data(), out.data());
                self.accumulate(grads, a, |da| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let norm = (0..len).map(|j| x[at(j)] * x[at(j)]).sum::<f64>().sqrt();
                            if norm < EPS {
                                (0..len).for_each(|j| da[at(j)] += g[at(j)] / EPS);
                                continue;
                            }
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                da[at(j)] += (g[at(j)] - y[at(j)] * dot) / norm;
                            }
                        }
                    }
                })
            }
            &Op::Reduce { a, axis, kind } => {
                let shape = self.shape_of(a);
                match axis {
                    None => {
                        let scale = match kind {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / self.value(a).len().max(1) as f64,
                        };
                        self.accumulate(grads, a, |da| da.iter_mut().for_each(|d| *d += g[0] * scale));
                    }
                    Some(axis) => {
                        let (outer, len, inner) = split_axis(shape, axis, "reduce").expect("validated in forward");
                        let scale = match kind {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / len.max(1) as f64,
                        };
                        self.accumulate(grads, a, |da| {
                            for o in 0..outer {
                                for j in 0..len {
                                    for i in 0..inner {
                                        da[(o * len + j) * inner + i] += g[o * inner + i] * scale;
                                    }
                                }
                            }
                        })
                    }
                }
            }
            &Op::Im2col { a, geom } => {
                self.accumulate(grads, a, |da| geom.for_each_pair(|dst, src| da[src] += g[dst]))
            }
            Op::GatherRows { a, index } => {
                let cols = out.shape()[1];
                self.accumulate(grads, *a, |da| {
                    for (r, &src) in index.iter().enumerate() {
                        for c in 0..cols {
                            da[src * cols + c] += g[r * cols + c];
                        }
                    }
                })
            }
            Op::Pick { a, index } => {
                let cols = self.shape_of(*a)[1];
                self.accumulate(grads, *a, |da| {
                    for (r, &c) in index.iter().enumerate() {
                        da[r * cols + c] += g[r];
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let total_cols = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape_of(p);
                    let (rows, cols) = (shape[0], shape[1]);
                    if *axis == 0 {
                        self.accumulate(grads, p, |dp| add_into(dp, &g[offset * cols..(offset + rows) * cols]));
                        offset += rows;
                    } else {
                        self.accumulate(grads, p, |dp| {
                            for r in 0..rows {
                                for c in 0..cols {
                                    dp[r * cols + c] += g[r * total_cols + offset + c];
                                }
                            }
                        });
                        offset += cols;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Plain (untracked) matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(a, b)?;
    Ok(tape.value(out).clone())
}

/// Untracked patch extraction for a `[C, H, W]` image. `pad` must equal
/// `(kernel - 1) / 2`.
pub fn im2col(image: &Tensor, kernel: usize, pad: usize) -> Result<Tensor> {
    if kernel.is_multiple_of(2) {
        return Err(Error::Config(format!("im2col kernel must be odd, got {kernel}")));
    }
    if pad != (kernel - 1) / 2 {
        return Err(Error::Config(format!("pad {pad} does not preserve size for kernel {kernel}")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let out = tape.im2col(x, kernel, ImageLayout::Planar)?;
    Ok(tape.value(out).clone())
}

/// `p <- p - lr * g` for each parameter, reading `g` at the matching node.
pub fn sgd_step(params: &mut [Tensor], nodes: &[NodeId], grads: &Gradients, lr: f64) -> Result<()> {
    if params.len() != nodes.len() {
        return Err(Error::Contract(format!("{} parameters but {} nodes", params.len(), nodes.len())));
    }
    for (p, &id) in params.iter_mut().zip(nodes) {
        let g = grads
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter node {}", id.0)))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("sgd_step", format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
        p.data_mut().iter_mut().zip(g.data()).for_each(|(v, d)| *v -= lr * d);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(matmul(&id, &v).unwrap().data(), &[5.0, 6.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
        let z = Tensor::zeros([2, 3]);
        let any = t(&[3, 1], &[0.3, -2.0, 9.0]);
        assert_eq!(matmul(&z, &any).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-3.0, 3.0]));
        let y = tape.relu(x);
        let w = tape.constant(t(&[2], &[7.0, 7.0]));
        let y = tape.mul(y, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 7.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([4], 0.3));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = tape.constant(t(&[3], &[2.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let e2 = 2f64.exp();
        assert!((tape.value(y).data()[0] - e2 / (e2 + 2.0)).abs() < 1e-15);
        assert!((tape.value(y).data()[0] - 0.787).abs() < 1e-3);
        let x2 = tape.constant(t(&[3], &[102.0, 100.0, 100.0]));
        let y2 = tape.softmax(x2, 0).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(y2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_middle_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 2], |i| (i as f64).sin()));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).data();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| v[(o * 3 + j) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 0.6).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 0.8).abs() < 1e-15);
        let u = tape.constant(t(&[2], &[0.6, 0.8]));
        let y = tape.l2_normalize(u, 0).unwrap();
        assert!((tape.value(y).data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(tape.clamped_norms(), 0);
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.l2_normalize(z, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
        assert_eq!(tape.clamped_norms(), 1);
    }

    #[test]
    fn im2col_examples() {
        let one = t(&[1, 1, 1], &[4.0]);
        let cols = im2col(&one, 3, 1).unwrap();
        assert_eq!(cols.shape(), &[1, 9]);
        assert_eq!(cols.data().iter().filter(|v| **v == 0.0).count(), 8);
        assert_eq!(cols.data()[4], 4.0);

        let img = Tensor::from_fn([1, 3, 3], |i| i as f64);
        assert_eq!(im2col(&img, 3, 1).unwrap().shape(), &[9, 9]);

        let big = Tensor::full([1, 7, 7], 1.0);
        let cols = im2col(&big, 3, 1).unwrap();
        let center = 3 * 7 + 3;
        let row_sum: f64 = cols.data()[center * 9..(center + 1) * 9].iter().sum();
        assert_eq!(row_sum, 9.0);
    }

    #[test]
    fn im2col_rejects_even_kernel_and_bad_pad() {
        let img = Tensor::zeros([1, 4, 4]);
        assert!(matches!(im2col(&img, 2, 0), Err(Error::Config(_))));
        assert!(matches!(im2col(&img, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn reductions_and_pointwise() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        assert_eq!(tape.value(s).item().unwrap(), 6.0);
        let c = tape.constant(Tensor::full([2, 2], 1.5));
        let m = tape.mean(c);
        assert_eq!(tape.value(m).item().unwrap(), 1.5);
        let z = tape.constant(Tensor::scalar(0.0));
        let e = tape.exp(z);
        assert_eq!(tape.value(e).item().unwrap(), 1.0);
        let lz = tape.log(z);
        assert!(tape.value(lz).item().unwrap().is_finite());
    }

    #[test]
    fn backward_linear_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.7));
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        assert!((g.get(x).unwrap().data()[0] - 3.4).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([2], 1.0));
        let unused = tape.leaf(Tensor::full([3], 1.0));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn sgd_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(1.0));
        let two = tape.constant(Tensor::scalar(2.0));
        let loss = tape.mul(p, two).unwrap();
        let g = tape.backward(loss).unwrap();

        let mut params = vec![Tensor::scalar(1.0)];
        sgd_step(&mut params, &[p], &g, 0.0).unwrap();
        assert_eq!(params[0].data(), &[1.0]);
        sgd_step(&mut params, &[p], &g, 0.1).unwrap();
        assert!((params[0].data()[0] - 0.8).abs() < 1e-15);

        // loss = x^2 from x = 1 with lr = 0.5 lands on 0 after the first step
        let mut params = vec![Tensor::scalar(1.0)];
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(params[0].clone());
            let sq = tape.mul(x, x).unwrap();
            let g = tape.backward(sq).unwrap();
            sgd_step(&mut params, &[x], &g, 0.5).unwrap();
        }
        assert_eq!(params[0].data(), &[0.0]);
    }

    #[test]
    fn sgd_missing_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(1.0));
        let c = tape.constant(Tensor::scalar(1.0));
        let loss = tape.mul(p, p).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut params = vec![Tensor::scalar(1.0)];
        assert!(matches!(sgd_step(&mut params, &[c], &g, 0.1), Err(Error::Contract(_))));
    }
}
