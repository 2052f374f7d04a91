//! Dense f64 tensors with a dynamic reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are registered
//! with [`Tape::param`] (gradient tracked) or [`Tape::constant`]; every
//! operation on a [`Var`] appends a node whose inputs precede it, so the
//! node list is already in topological order and `backward` is a single
//! reverse sweep.
//!
//! Every operation checks its output for NaN/Inf and fails with
//! [`TensorError::NonFinite`] instead of propagating it.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call zero_grad or enable accumulation")]
    BackwardTwice,
    #[error("{op}: slice {start}..{end} out of range for last dimension {dim}")]
    SliceRange {
        op: &'static str,
        start: usize,
        end: usize,
        dim: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major n-dimensional array of f64.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        check_finite("tensor", &data)?;
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Builds a matrix from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::DataLength {
                    shape: vec![rows.len(), cols],
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place parameter updates. Callers must keep
    /// entries finite.
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

// ---------------------------------------------------------------------------
// Kernels shared by forward and backward passes.

const MR: usize = 4;
const NR: usize = 4;

/// out[m,n] += a[m,k] * b[k,n], accumulated in register tiles of
/// `MR x NR` outputs.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + MR <= m {
        let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let bt: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
                for r in 0..MR {
                    let av = rows[r][p];
                    for c in 0..NR {
                        acc[r][c] += av * bt[c];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                o.iter_mut().zip(acc_row).for_each(|(o, v)| *o += v);
            }
            j += NR;
        }
        if j < n {
            for (r, row) in rows.iter().enumerate() {
                for jj in j..n {
                    let s: f64 = row.iter().enumerate().map(|(p, av)| av * b[p * n + jj]).sum();
                    out[(i + r) * n + jj] += s;
                }
            }
        }
        i += MR;
    }
    for i in i..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-major transpose of an `r x c` matrix.
fn transposed(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(g, &transposed(b, k, n), out, m, n, k);
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(&transposed(a, m, k), g, out, k, m, n);
}

/// Geometry of a (possibly batched) matrix product.
#[derive(Debug, Clone, Copy)]
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is a single matrix shared across the batch.
    shared_b: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(mismatch());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_b = b_batch.is_empty();
    if !shared_b && a_batch != b_batch {
        return Err(mismatch());
    }
    let batch: usize = a_batch.iter().product();
    let mut out_shape = a_batch.to_vec();
    out_shape.extend([m, n]);
    // A shared right operand lets the batch collapse into one tall product.
    let dims = if shared_b {
        MatmulDims {
            batch: 1,
            m: batch * m,
            k,
            n,
            shared_b,
        }
    } else {
        MatmulDims {
            batch,
            m,
            k,
            n,
            shared_b,
        }
    };
    Ok((dims, out_shape))
}

fn matmul_forward(a: &[f64], b: &[f64], d: MatmulDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let a_off = bi * d.m * d.k;
        let b_off = if d.shared_b { 0 } else { bi * d.k * d.n };
        let o_off = bi * d.m * d.n;
        gemm_acc(
            &a[a_off..a_off + d.m * d.k],
            &b[b_off..b_off + d.k * d.n],
            &mut out[o_off..o_off + d.m * d.n],
            d.m,
            d.k,
            d.n,
        );
    }
    out
}

/// (outer, axis, inner) extents for a reduction along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] /= sum;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tape

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize, dims: MatmulDims },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Transpose { a: usize },
    Reshape { a: usize },
    ConcatLast { inputs: Vec<usize> },
    SliceLast { a: usize, start: usize },
    Relu { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation for one forward pass.
///
/// Gradients from a second `backward` on the same tape are rejected unless
/// the tape was built with [`Tape::accumulating`].
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    accumulate: bool,
    backward_done: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            accumulate: false,
            backward_done: Cell::new(false),
        }
    }

    /// A tape whose repeated `backward` calls add into existing gradients.
    pub fn accumulating() -> Self {
        Tape {
            accumulate: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        value.requires_grad = requires_grad;
        value.grad = None;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a gradient-tracked leaf.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf honouring the tensor's own `requires_grad` flag.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].value.requires_grad
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Clears every stored gradient and re-arms `backward`.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.value.grad = None;
        }
        self.backward_done.set(false);
    }

    /// Reverse sweep from a scalar `loss`, populating `grad` on every
    /// gradient-tracked node that the loss depends on.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        {
            let l = self.value(loss.id);
            if l.len() != 1 {
                return Err(TensorError::NonScalarLoss(l.shape.clone()));
            }
        }
        if self.backward_done.get() && !self.accumulate {
            return Err(TensorError::BackwardTwice);
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].value.requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads)?;
            check_finite("backward", &g)?;
            let slot = &mut nodes[id].value.grad;
            match slot {
                Some(existing) if self.accumulate => {
                    existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v)
                }
                _ => *slot = Some(g),
            }
        }
        self.backward_done.set(true);
        Ok(())
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Pushes the gradient `g` of node `id` onto its inputs.
fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let rg = |i: usize| nodes[i].value.requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Matmul { a, b, dims } => {
            let d = *dims;
            let (av, bv) = (&val(*a).data, &val(*b).data);
            if rg(*a) {
                add_into(grads, *a, av.len(), |ga| {
                    for bi in 0..d.batch {
                        let b_off = if d.shared_b { 0 } else { bi * d.k * d.n };
                        gemm_nt_acc(
                            &g[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                            &bv[b_off..b_off + d.k * d.n],
                            &mut ga[bi * d.m * d.k..(bi + 1) * d.m * d.k],
                            d.m,
                            d.k,
                            d.n,
                        );
                    }
                });
            }
            if rg(*b) {
                add_into(grads, *b, bv.len(), |gb| {
                    for bi in 0..d.batch {
                        let b_off = if d.shared_b { 0 } else { bi * d.k * d.n };
                        gemm_tn_acc(
                            &av[bi * d.m * d.k..(bi + 1) * d.m * d.k],
                            &g[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                            &mut gb[b_off..b_off + d.k * d.n],
                            d.m,
                            d.k,
                            d.n,
                        );
                    }
                });
            }
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(nodes[id].op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            if rg(*a) {
                add_into(grads, *a, g.len(), |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            if rg(*b) {
                let nb = val(*b).len();
                add_into(grads, *b, nb, |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % nb] += sign * gv;
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            let nb = bv.len();
            if rg(*a) {
                add_into(grads, *a, av.len(), |ga| {
                    for (i, gv) in g.iter().enumerate() {
                        ga[i] += gv * bv[i % nb];
                    }
                });
            }
            if rg(*b) {
                add_into(grads, *b, nb, |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % nb] += gv * av[i];
                    }
                });
            }
        }
        Op::Scale { a, factor } => {
            if rg(*a) {
                add_into(grads, *a, g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y)
                });
            }
        }
        Op::Transpose { a } => {
            if rg(*a) {
                let shape = &val(*a).shape;
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                add_into(grads, *a, g.len(), |ga| {
                    for (bi, blk) in ga.chunks_mut(r * c).enumerate() {
                        let gb = &g[bi * r * c..(bi + 1) * r * c];
                        for i in 0..r {
                            for j in 0..c {
                                blk[i * c + j] += gb[j * r + i];
                            }
                        }
                    }
                });
            }
        }
        Op::Reshape { a } => {
            if rg(*a) {
                add_into(grads, *a, g.len(), |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
        }
        Op::ConcatLast { inputs } => {
            let out_w = nodes[id].value.last_dim();
            let mut col = 0;
            for &inp in inputs {
                let w = val(inp).last_dim();
                if rg(inp) {
                    add_into(grads, inp, val(inp).len(), |gi| {
                        for (r, row) in gi.chunks_mut(w).enumerate() {
                            let src = &g[r * out_w + col..r * out_w + col + w];
                            row.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                col += w;
            }
        }
        Op::SliceLast { a, start } => {
            if rg(*a) {
                let in_w = val(*a).last_dim();
                let w = nodes[id].value.last_dim();
                add_into(grads, *a, val(*a).len(), |ga| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        let dst = &mut ga[r * in_w + start..r * in_w + start + w];
                        dst.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                });
            }
        }
        Op::Relu { a } => {
            if rg(*a) {
                let av = &val(*a).data;
                add_into(grads, *a, av.len(), |ga| {
                    for i in 0..av.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
        }
        Op::Sum { a } | Op::Mean { a } => {
            if rg(*a) {
                let n = val(*a).len();
                let s = if matches!(nodes[id].op, Op::Mean { .. }) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                add_into(grads, *a, n, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
        }
        Op::Softmax { a, axis } => {
            if rg(*a) {
                let y = &nodes[id].value;
                let (outer, len, inner) = axis_split(&y.shape, *axis);
                add_into(grads, *a, y.len(), |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y.data[idx(j)]).sum();
                            for j in 0..len {
                                ga[idx(j)] += y.data[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = &val(*gain).data;
            let d = gv.len();
            if rg(*x) {
                add_into(grads, *x, xhat.len(), |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let xh = &xhat[row.clone()];
                        let go = &g[row.clone()];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = go[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        let out = &mut gx[row];
                        for j in 0..d {
                            let dxh = go[j] * gv[j];
                            out[j] += is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
            }
            if rg(*gain) {
                add_into(grads, *gain, d, |gg| {
                    for (i, gv) in g.iter().enumerate() {
                        gg[i % d] += gv * xhat[i];
                    }
                });
            }
            if rg(*bias) {
                add_into(grads, *bias, d, |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                });
            }
        }
    }
    Ok(())
}

/// `b` broadcasts against `a` when its shape is a suffix of `a`'s.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape.clone()
    }

    /// Snapshot of the current value (gradient included once populated).
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.value(self.id).data.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.value(self.id).grad.clone()
    }

    fn emit(&self, op: &'static str, t: Tensor, node: Op, rg: bool) -> Result<Var<'t>> {
        check_finite(op, &t.data)?;
        Ok(self.tape.push(t, node, rg))
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`; a 2-D right operand
    /// is shared across the batch.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (out, dims, shape) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let (dims, shape) = matmul_dims(&a.shape, &b.shape)?;
            (matmul_forward(&a.data, &b.data, dims), dims, shape)
        };
        let rg = self.tape.rg(self.id) || self.tape.rg(other.id);
        self.emit(
            "matmul",
            Self::raw(shape, out),
            Op::Matmul {
                a: self.id,
                b: other.id,
                dims,
            },
            rg,
        )
    }

    fn binary(&self, other: &Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let a = self.tape.value(self.id);
        let b = self.tape.value(other.id);
        if !broadcast_ok(&a.shape, &b.shape) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let nb = b.data.len();
        let data = a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % nb])).collect();
        let rg = a.requires_grad || b.requires_grad;
        Ok((Self::raw(a.shape.clone(), data), rg))
    }

    /// Element-wise sum; `other` may broadcast over leading axes.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (t, rg) = self.binary(other, "add", |x, y| x + y)?;
        self.emit("add", t, Op::Add { a: self.id, b: other.id }, rg)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (t, rg) = self.binary(other, "sub", |x, y| x - y)?;
        self.emit("sub", t, Op::Sub { a: self.id, b: other.id }, rg)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (t, rg) = self.binary(other, "mul", |x, y| x * y)?;
        self.emit("mul", t, Op::Mul { a: self.id, b: other.id }, rg)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        let t = {
            let a = self.tape.value(self.id);
            Self::raw(a.shape.clone(), a.data.iter().map(|x| x * factor).collect())
        };
        let rg = self.tape.rg(self.id);
        self.emit("scale", t, Op::Scale { a: self.id, factor }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let t = {
            let a = self.tape.value(self.id);
            let nd = a.shape.len();
            if nd < 2 {
                return Err(TensorError::InvalidAxis {
                    op: "transpose",
                    axis: 1,
                    shape: a.shape.clone(),
                });
            }
            let (r, c) = (a.shape[nd - 2], a.shape[nd - 1]);
            let mut out = vec![0.0; a.data.len()];
            for (bi, blk) in a.data.chunks(r * c.max(1)).enumerate() {
                let ob = &mut out[bi * r * c..(bi + 1) * r * c];
                for i in 0..r {
                    for j in 0..c {
                        ob[j * r + i] = blk[i * c + j];
                    }
                }
            }
            let mut shape = a.shape.clone();
            shape.swap(nd - 2, nd - 1);
            Self::raw(shape, out)
        };
        let rg = self.tape.rg(self.id);
        self.emit("transpose", t, Op::Transpose { a: self.id }, rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let t = {
            let a = self.tape.value(self.id);
            let n: usize = shape.iter().product();
            if n != a.data.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    lhs: a.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            Self::raw(shape.to_vec(), a.data.clone())
        };
        let rg = self.tape.rg(self.id);
        self.emit("reshape", t, Op::Reshape { a: self.id }, rg)
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::EmptyAxis { op: "concat" })?;
        let tape = first.tape;
        let (t, rg) = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| tape.value(p.id)).collect();
            let lead = &vals[0].shape[..vals[0].shape.len().saturating_sub(1)];
            for v in &vals[1..] {
                if v.shape.is_empty() || v.shape[..v.shape.len() - 1] != *lead {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: vals[0].shape.clone(),
                        rhs: v.shape.clone(),
                    });
                }
            }
            let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
            let out_w: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut data = Vec::with_capacity(rows * out_w);
            for r in 0..rows {
                for (v, &w) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&v.data[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(out_w);
            let rg = vals.iter().any(|v| v.requires_grad);
            (Self::raw(shape, data), rg)
        };
        first.emit(
            "concat",
            t,
            Op::ConcatLast {
                inputs: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let t = {
            let a = self.tape.value(self.id);
            let w = a.last_dim();
            if a.shape.is_empty() || start + len > w {
                return Err(TensorError::SliceRange {
                    op: "slice",
                    start,
                    end: start + len,
                    dim: w,
                });
            }
            let mut data = Vec::with_capacity(a.data.len() / w.max(1) * len);
            for row in a.data.chunks(w) {
                data.extend_from_slice(&row[start..start + len]);
            }
            let mut shape = a.shape.clone();
            *shape.last_mut().unwrap() = len;
            Self::raw(shape, data)
        };
        let rg = self.tape.rg(self.id);
        self.emit("slice", t, Op::SliceLast { a: self.id, start }, rg)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let t = {
            let a = self.tape.value(self.id);
            Self::raw(a.shape.clone(), a.data.iter().map(|&x| x.max(0.0)).collect())
        };
        let rg = self.tape.rg(self.id);
        self.emit("relu", t, Op::Relu { a: self.id }, rg)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s: f64 = self.tape.value(self.id).data.iter().sum();
        let rg = self.tape.rg(self.id);
        self.emit("sum", Self::raw(vec![], vec![s]), Op::Sum { a: self.id }, rg)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let (s, n) = {
            let a = self.tape.value(self.id);
            (a.data.iter().sum::<f64>(), a.data.len())
        };
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let rg = self.tape.rg(self.id);
        self.emit("mean", Self::raw(vec![], vec![s / n as f64]), Op::Mean { a: self.id }, rg)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let t = {
            let a = self.tape.value(self.id);
            if axis >= a.shape.len() {
                return Err(TensorError::InvalidAxis {
                    op: "softmax",
                    axis,
                    shape: a.shape.clone(),
                });
            }
            if a.shape[axis] == 0 {
                return Err(TensorError::EmptyAxis { op: "softmax" });
            }
            Self::raw(a.shape.clone(), softmax_forward(&a.data, &a.shape, axis))
        };
        let rg = self.tape.rg(self.id);
        self.emit("softmax", t, Op::Softmax { a: self.id, axis }, rg)
    }

    /// Normalises each row of the last axis to zero mean and unit
    /// (population) variance, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (t, xhat, inv_std, rg) = {
            let x = self.tape.value(self.id);
            let g = self.tape.value(gain.id);
            let b = self.tape.value(bias.id);
            let d = x.last_dim();
            if x.shape.is_empty() || d == 0 {
                return Err(TensorError::EmptyAxis { op: "layer_norm" });
            }
            if g.shape != [d] || b.shape != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            let rows = x.data.len() / d;
            let mut xhat = vec![0.0; x.data.len()];
            let mut out = vec![0.0; x.data.len()];
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &x.data[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    let xh = (row[j] - mean) * is;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * g.data[j] + b.data[j];
                }
                inv_std.push(is);
            }
            let rg = x.requires_grad || g.requires_grad || b.requires_grad;
            (Self::raw(x.shape.clone(), out), xhat, inv_std, rg)
        };
        self.emit(
            "layer_norm",
            t,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let b = tape.constant(Tensor::matrix(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap());
        assert_eq!(i.matmul(&b).unwrap().data(), vec![3.0, 4.0, 5.0, 6.0]);

        let r = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
        let c = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let p = r.matmul(&c).unwrap();
        assert_eq!(p.shape(), vec![1, 1]);
        assert_eq!(p.item(), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        assert!(close(&x.softmax(0).unwrap().data(), &[1.0 / 3.0; 3], 1e-15));

        let y = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let s = y.softmax(0).unwrap().data();
        assert!((s[0] - 1.0).abs() < 1e-12 && (0.0..1e-300).contains(&s[1]));
    }

    #[test]
    fn softmax_empty_axis_is_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 0]));
        assert_eq!(x.softmax(1).unwrap_err(), TensorError::EmptyAxis { op: "softmax" });
        assert!(matches!(x.softmax(2), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 3.0]).unwrap());
        let s = x.softmax(0).unwrap().data();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[2] - 0.5).abs() < 1e-15);
        assert!((s[1] + s[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_edge_rows() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::new(vec![1, 3], vec![5.0; 3]).unwrap());
        assert_eq!(x.layer_norm(&g, &b, 1e-5).unwrap().data(), vec![0.0; 3]);

        let g2 = tape.constant(Tensor::full(&[2], 1.0));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let y = tape.constant(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        assert!(close(&y.layer_norm(&g2, &b2, 1e-14).unwrap().data(), &[1.0, -1.0], 1e-12));

        let empty = tape.constant(Tensor::zeros(&[2, 0]));
        let g0 = tape.constant(Tensor::zeros(&[0]));
        assert!(matches!(empty.layer_norm(&g0, &g0, 1e-5), Err(TensorError::EmptyAxis { .. })));
    }

    #[test]
    fn backward_quadratic_and_softmax_sum() {
        let tape = Tape::new();
        let w = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = w.mul(&w).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);

        let tape = Tape::new();
        let w = tape.param(&Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap());
        let loss = w.softmax(0).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(w.grad().unwrap().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let tape = Tape::new();
        let w = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = w.mul(&w).unwrap();
        assert_eq!(tape.backward(sq), Err(TensorError::NonScalarLoss(vec![2])));
        let loss = sq.sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss), Err(TensorError::BackwardTwice));
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn accumulating_tape_adds_gradients() {
        let tape = Tape::accumulating();
        let w = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = w.mul(&w).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn non_finite_is_surfaced() {
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![1e200]).unwrap());
        assert_eq!(x.mul(&x).unwrap_err(), TensorError::NonFinite { op: "mul" });
    }

    #[test]
    fn data_length_checked() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2], |i| i as f64).unwrap());
        let b = tape.constant(Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64).unwrap());
        let c = Var::concat_last(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![2, 5]);
        assert_eq!(c.slice_last(0, 2).unwrap().data(), a.data());
        assert_eq!(c.slice_last(2, 3).unwrap().data(), b.data());
        assert!(c.slice_last(4, 2).is_err());
    }

    #[test]
    fn broadcast_add_bias() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2, 3, 2]));
        let bias = tape.param(&Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let y = x.add(&bias).unwrap();
        assert_eq!(y.data(), [1.0, -1.0].repeat(6));
        tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(bias.grad().unwrap(), vec![6.0, 6.0]);
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(x.add(&bad).is_err());
    }
}
