//! Dense row-major tensors with a Wengert-list tape for reverse-mode
//! differentiation.
//!
//! Tensors are immutable values. An operation records a node on the [`Tape`]
//! only when the tape is recording and at least one input carries a node, so
//! the same model code serves training (recording tape) and inference
//! ([`Tape::inference`]).
//!
//! Broadcasting follows a single rule: in [`Tape::broadcast_add`] the right
//! operand's shape must equal a trailing suffix of the left operand's shape.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{self, ChamferVariant, Point, Stencil};
use crate::scalar::Real;

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<NodeId>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            node: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![T::zero(); numel]),
            node: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    /// `N × 3` coordinate tensor.
    pub fn from_points(points: &[Point<T>]) -> Self {
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self {
            shape: vec![points.len(), 3],
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn to_points(&self) -> Result<Vec<Point<T>>> {
        if self.shape.len() != 2 || self.shape[1] != 3 {
            return Err(Error::shape("to_points", &self.shape, &[0, 3]));
        }
        Ok(self
            .data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the leading dimension (1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading-dimension row.
    pub fn row_width(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Same values, cut off from the tape.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    ConcatLast,
    BroadcastAdd,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Option<NodeId>, Option<NodeId>),
    Sub(Option<NodeId>, Option<NodeId>),
    Mul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        av: Arc<Vec<T>>,
        bv: Arc<Vec<T>>,
    },
    BroadcastAdd {
        a: Option<NodeId>,
        b: Option<NodeId>,
        b_len: usize,
    },
    Scale(Option<NodeId>, T),
    Relu(Option<NodeId>, Arc<Vec<T>>),
    Tanh(Option<NodeId>, Arc<Vec<T>>),
    MatMul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        av: Arc<Vec<T>>,
        bv: Arc<Vec<T>>,
        n: usize,
        k: usize,
        m: usize,
    },
    Concat {
        a: Option<NodeId>,
        b: Option<NodeId>,
        wa: usize,
        wb: usize,
    },
    ConcatRows {
        a: Option<NodeId>,
        b: Option<NodeId>,
        split: usize,
    },
    Gather {
        a: Option<NodeId>,
        idx: Arc<Vec<usize>>,
        width: usize,
    },
    Reshape(Option<NodeId>),
    Softmax {
        a: Option<NodeId>,
        out: Arc<Vec<T>>,
        k: usize,
        d: usize,
    },
    SumMid {
        a: Option<NodeId>,
        k: usize,
        d: usize,
    },
    MaxMid {
        a: Option<NodeId>,
        argmax: Vec<u32>,
        k: usize,
        d: usize,
    },
    Sum(Option<NodeId>),
    Chamfer {
        a: Option<NodeId>,
        b: Option<NodeId>,
        grad_a: Vec<T>,
        grad_b: Vec<T>,
    },
    Interpolate {
        src: Option<NodeId>,
        feats: Option<NodeId>,
        dst: Option<NodeId>,
        stencils: Vec<Stencil<T>>,
        src_pts: Vec<Point<T>>,
        dst_pts: Vec<Point<T>>,
        fv: Arc<Vec<T>>,
        out: Arc<Vec<T>>,
        d: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    numel: usize,
}

/// Append-only operation record.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    trace: Option<DefaultHasher>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf reachable from it.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `t`; all zeros when `t` is off the tape or unreachable.
    pub fn wrt(&self, t: &Tensor<T>) -> Tensor<T> {
        match t
            .node
            .and_then(|id| self.grads.get(id))
            .and_then(Option::as_ref)
        {
            Some(g) => Tensor::new(t.shape.clone(), g.clone()).expect("gradient matches shape"),
            None => Tensor::zeros(t.shape.clone()),
        }
    }

    pub fn wrt_slice(&self, t: &Tensor<T>) -> Option<&[T]> {
        t.node
            .and_then(|id| self.grads.get(id))
            .and_then(Option::as_ref)
            .map(Vec::as_slice)
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

fn matmul_kernel<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            trace: None,
        }
    }

    /// A tape that never records; operations only compute values.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
            trace: None,
        }
    }

    /// A recording tape that also hashes every discrete choice made during
    /// the forward pass (gather indices, rectifier masks, max positions,
    /// nearest neighbors, interpolation stencils).
    pub fn traced() -> Self {
        Self::new().with_trace()
    }

    /// Adds discrete-choice tracing to any tape.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(DefaultHasher::new());
        self
    }

    /// Hash of the discrete choices so far, for traced tapes. Two passes
    /// with equal traces took the same piecewise-smooth branch.
    pub fn trace(&self) -> Option<u64> {
        self.trace.as_ref().map(Hasher::finish)
    }

    fn note(&mut self, f: impl FnOnce(&mut DefaultHasher)) {
        if let Some(h) = self.trace.as_mut() {
            f(h);
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = t.detach();
        if self.recording {
            out.node = Some(self.push(Op::Leaf, t.numel()));
        }
        out
    }

    fn push(&mut self, op: Op<T>, numel: usize) -> NodeId {
        self.nodes.push(Node { op, numel });
        self.nodes.len() - 1
    }

    fn wants(&self, inputs: &[Option<NodeId>]) -> bool {
        self.recording && inputs.iter().any(Option::is_some)
    }

    fn finish(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[Option<NodeId>],
        op: impl FnOnce() -> Op<T>,
    ) -> Tensor<T> {
        let node = if self.wants(inputs) {
            Some(self.push(op(), data.len()))
        } else {
            None
        };
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }

    /// Dispatches one of the basic elementwise-family operations.
    pub fn elementwise(
        &mut self,
        op: Elementwise,
        a: &Tensor<T>,
        b: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let rhs = || b.ok_or_else(|| Error::contract(format!("{op:?} needs two operands")));
        match op {
            Elementwise::Add => self.add(a, rhs()?),
            Elementwise::Sub => self.sub(a, rhs()?),
            Elementwise::Mul => self.mul(a, rhs()?),
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::ConcatLast => self.concat(a, rhs()?),
            Elementwise::BroadcastAdd => self.broadcast_add(a, rhs()?),
        }
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", &a.shape, &b.shape)?;
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.finish(a.shape.clone(), data, &[a.node, b.node], || {
            Op::Add(a.node, b.node)
        }))
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", &a.shape, &b.shape)?;
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.finish(a.shape.clone(), data, &[a.node, b.node], || {
            Op::Sub(a.node, b.node)
        }))
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", &a.shape, &b.shape)?;
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(
            self.finish(a.shape.clone(), data, &[a.node, b.node], || Op::Mul {
                a: a.node,
                b: b.node,
                av: Arc::clone(&a.data),
                bv: Arc::clone(&b.data),
            }),
        )
    }

    /// `a + b` where `b.shape` is a trailing suffix of `a.shape`.
    pub fn broadcast_add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if b.shape.len() > a.shape.len() || a.shape[a.shape.len() - b.shape.len()..] != b.shape[..]
        {
            return Err(Error::shape("broadcast_add", &a.shape, &b.shape));
        }
        let b_len = b.numel();
        let mut data = a.data.to_vec();
        for chunk in data.chunks_mut(b_len.max(1)) {
            for (x, &y) in chunk.iter_mut().zip(b.data.iter()) {
                *x += y;
            }
        }
        Ok(self.finish(a.shape.clone(), data, &[a.node, b.node], || {
            Op::BroadcastAdd {
                a: a.node,
                b: b.node,
                b_len,
            }
        }))
    }

    pub fn scale(&mut self, a: &Tensor<T>, c: T) -> Tensor<T> {
        let data = a.data.iter().map(|&x| x * c).collect();
        self.finish(a.shape.clone(), data, &[a.node], || Op::Scale(a.node, c))
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, a: &Tensor<T>) -> Tensor<T> {
        let data = a
            .data
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.note(|h| {
            a.data
                .iter()
                .for_each(|&x| h.write_u8(u8::from(x > T::zero())))
        });
        self.finish(a.shape.clone(), data, &[a.node], || {
            Op::Relu(a.node, Arc::clone(&a.data))
        })
    }

    pub fn tanh(&mut self, a: &Tensor<T>) -> Tensor<T> {
        let data: Vec<T> = a.data.iter().map(|&x| x.tanh()).collect();
        let out = Arc::new(data);
        let node = if self.wants(&[a.node]) {
            Some(self.push(Op::Tanh(a.node, Arc::clone(&out)), out.len()))
        } else {
            None
        };
        Tensor {
            shape: a.shape.clone(),
            data: out,
            node,
        }
    }

    /// `[N×K] · [K×M] → [N×M]`.
    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::shape("matmul", &a.shape, &b.shape));
        }
        let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut data = vec![T::zero(); n * m];
        matmul_kernel(&a.data, &b.data, &mut data, n, k, m);
        Ok(
            self.finish(vec![n, m], data, &[a.node, b.node], || Op::MatMul {
                a: a.node,
                b: b.node,
                av: Arc::clone(&a.data),
                bv: Arc::clone(&b.data),
                n,
                k,
                m,
            }),
        )
    }

    /// Stacks `b` below `a` along the leading dimension.
    pub fn concat_rows(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape.is_empty() || b.shape.is_empty() || a.shape[1..] != b.shape[1..] {
            return Err(Error::shape("concat_rows", &a.shape, &b.shape));
        }
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        let mut shape = a.shape.clone();
        shape[0] += b.shape[0];
        let split = a.numel();
        Ok(
            self.finish(shape, data, &[a.node, b.node], || Op::ConcatRows {
                a: a.node,
                b: b.node,
                split,
            }),
        )
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (ra, rb) = (a.shape.len(), b.shape.len());
        if ra == 0 || ra != rb || a.shape[..ra - 1] != b.shape[..rb - 1] {
            return Err(Error::shape("concat", &a.shape, &b.shape));
        }
        let (wa, wb) = (a.shape[ra - 1], b.shape[rb - 1]);
        let rows = if wa + wb == 0 {
            0
        } else {
            (a.numel() + b.numel()) / (wa + wb)
        };
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for r in 0..rows {
            data.extend_from_slice(&a.data[r * wa..(r + 1) * wa]);
            data.extend_from_slice(&b.data[r * wb..(r + 1) * wb]);
        }
        let mut shape = a.shape.clone();
        shape[ra - 1] = wa + wb;
        Ok(self.finish(shape, data, &[a.node, b.node], || Op::Concat {
            a: a.node,
            b: b.node,
            wa,
            wb,
        }))
    }

    /// Selects leading-dimension rows by index; gradients scatter back
    /// additively, so repeated indices are allowed.
    pub fn gather_rows(&mut self, a: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
        if a.shape.is_empty() {
            return Err(Error::shape("gather_rows", &a.shape, &[idx.len()]));
        }
        let src_rows = a.shape[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= src_rows) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of {src_rows} rows"
            )));
        }
        let width = a.row_width();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&a.data[i * width..(i + 1) * width]);
        }
        let mut shape = a.shape.clone();
        shape[0] = idx.len();
        self.note(|h| idx.hash(h));
        Ok(self.finish(shape, data, &[a.node], || Op::Gather {
            a: a.node,
            idx: Arc::new(idx.to_vec()),
            width,
        }))
    }

    /// Row-major reinterpretation to a new shape with the same element count.
    pub fn reshape(&mut self, a: &Tensor<T>, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != a.numel() {
            return Err(Error::shape("reshape", &a.shape, &shape));
        }
        let node = if self.wants(&[a.node]) {
            Some(self.push(Op::Reshape(a.node), a.numel()))
        } else {
            None
        };
        Ok(Tensor {
            shape,
            data: Arc::clone(&a.data),
            node,
        })
    }

    fn dims3(op: &'static str, a: &Tensor<T>) -> Result<(usize, usize, usize)> {
        match a.shape[..] {
            [n, k, d] => Ok((n, k, d)),
            _ => Err(Error::shape(op, &a.shape, &[0, 0, 0])),
        }
    }

    /// For `[N×k×D]` logits, normalizes each `(i, ·, d)` fibre over the
    /// neighborhood axis `k`.
    pub fn softmax_channelwise(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k, d) = Self::dims3("softmax_channelwise", a)?;
        let mut out = vec![T::zero(); a.numel()];
        let mut maxes = vec![T::zero(); d];
        let mut sums = vec![T::zero(); d];
        for i in 0..n {
            let base = i * k * d;
            let block = &a.data[base..base + k * d];
            maxes.copy_from_slice(&block[..d]);
            for row in block.chunks(d).skip(1) {
                for (m, &x) in maxes.iter_mut().zip(row) {
                    if x > *m {
                        *m = x;
                    }
                }
            }
            sums.iter_mut().for_each(|s| *s = T::zero());
            let oblock = &mut out[base..base + k * d];
            for (orow, row) in oblock.chunks_mut(d).zip(block.chunks(d)) {
                for c in 0..d {
                    let e = (row[c] - maxes[c]).exp();
                    orow[c] = e;
                    sums[c] += e;
                }
            }
            for orow in oblock.chunks_mut(d) {
                for (o, &s) in orow.iter_mut().zip(&sums) {
                    *o /= s;
                }
            }
        }
        let out = Arc::new(out);
        let node = if self.wants(&[a.node]) {
            Some(self.push(
                Op::Softmax {
                    a: a.node,
                    out: Arc::clone(&out),
                    k,
                    d,
                },
                out.len(),
            ))
        } else {
            None
        };
        Ok(Tensor {
            shape: a.shape.clone(),
            data: out,
            node,
        })
    }

    /// `[N×k×D] → [N×D]`, summing over the middle axis.
    pub fn sum_neighbors(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k, d) = Self::dims3("sum_neighbors", a)?;
        let mut out = vec![T::zero(); n * d];
        for (orow, block) in out.chunks_mut(d.max(1)).zip(a.data.chunks(k * d.max(1))) {
            for row in block.chunks(d) {
                for (o, &x) in orow.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        Ok(self.finish(vec![n, d], out, &[a.node], || Op::SumMid {
            a: a.node,
            k,
            d,
        }))
    }

    /// `[N×k×D] → [N×D]`, max over the middle axis (first maximum wins).
    pub fn max_neighbors(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k, d) = Self::dims3("max_neighbors", a)?;
        if k == 0 {
            return Err(Error::contract("max_neighbors: empty neighborhood"));
        }
        let mut out = vec![T::zero(); n * d];
        let mut argmax = vec![0u32; n * d];
        for i in 0..n {
            let block = &a.data[i * k * d..(i + 1) * k * d];
            let orow = &mut out[i * d..(i + 1) * d];
            let arow = &mut argmax[i * d..(i + 1) * d];
            orow.copy_from_slice(&block[..d]);
            for (j, row) in block.chunks(d).enumerate().skip(1) {
                for c in 0..d {
                    if row[c] > orow[c] {
                        orow[c] = row[c];
                        arow[c] = j as u32;
                    }
                }
            }
        }
        self.note(|h| argmax.hash(h));
        let record = self.wants(&[a.node]);
        Ok(self.finish(vec![n, d], out, &[a.node], || Op::MaxMid {
            a: a.node,
            argmax: if record { argmax } else { Vec::new() },
            k,
            d,
        }))
    }

    /// `[N×D] → [1×D]` max over rows.
    pub fn max_rows(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape.len() != 2 {
            return Err(Error::shape("max_rows", &a.shape, &[0, 0]));
        }
        let r = self.reshape(a, vec![1, a.shape[0], a.shape[1]])?;
        self.max_neighbors(&r)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: &Tensor<T>) -> Tensor<T> {
        let s: T = a.data.iter().copied().sum();
        self.finish(Vec::new(), vec![s], &[a.node], || Op::Sum(a.node))
    }

    pub fn mean(&mut self, a: &Tensor<T>) -> Tensor<T> {
        let s = self.sum(a);
        let n = T::from_usize(a.numel().max(1)).unwrap();
        self.scale(&s, n.recip())
    }

    /// Chamfer distance between two `N×3` coordinate tensors. Nearest-neighbor
    /// assignments are held constant when differentiating.
    pub fn chamfer(
        &mut self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        variant: ChamferVariant,
    ) -> Result<Tensor<T>> {
        let pa = a.to_points()?;
        let pb = b.to_points()?;
        if pa.is_empty() || pb.is_empty() {
            return Err(Error::contract("chamfer: both clouds must be non-empty"));
        }
        let ab = geometry::nearest(&pa, &pb);
        let ba = geometry::nearest(&pb, &pa);
        let value = geometry::chamfer_matched(&ab, &ba, variant);
        self.note(|h| {
            ab.iter().for_each(|&(j, _)| h.write_usize(j));
            ba.iter().for_each(|&(j, _)| h.write_usize(j));
        });
        let record = self.wants(&[a.node, b.node]);
        let (grad_a, grad_b) = if record {
            chamfer_grads(&pa, &pb, &ab, &ba, variant)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(
            self.finish(Vec::new(), vec![value], &[a.node, b.node], || Op::Chamfer {
                a: a.node,
                b: b.node,
                grad_a,
                grad_b,
            }),
        )
    }

    /// Inverse-squared-distance interpolation of `feats` (aligned with
    /// `src`) onto `dst`, differentiable in all three inputs.
    pub fn interpolate(
        &mut self,
        src: &Tensor<T>,
        feats: &Tensor<T>,
        dst: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if feats.shape.len() != 2 || feats.shape[0] != src.rows() {
            return Err(Error::shape("interpolate", &src.shape, &feats.shape));
        }
        let src_pts = src.to_points()?;
        let dst_pts = dst.to_points()?;
        let d = feats.shape[1];
        let stencils = geometry::interpolation_stencils(&src_pts, &dst_pts)?;
        self.note(|h| {
            for st in &stencils {
                h.write_usize(st.len());
                st.iter().for_each(|&(j, _)| h.write_usize(j));
            }
        });
        let mut out = vec![T::zero(); dst_pts.len() * d];
        for (row, stencil) in out.chunks_mut(d.max(1)).zip(&stencils) {
            if let [(j, _)] = stencil.as_slice() {
                row.copy_from_slice(&feats.data[j * d..(j + 1) * d]);
                continue;
            }
            for &(j, w) in stencil {
                for (o, &f) in row.iter_mut().zip(&feats.data[j * d..(j + 1) * d]) {
                    *o += w * f;
                }
            }
        }
        let out = Arc::new(out);
        let node = if self.wants(&[src.node, feats.node, dst.node]) {
            Some(self.push(
                Op::Interpolate {
                    src: src.node,
                    feats: feats.node,
                    dst: dst.node,
                    stencils,
                    src_pts,
                    dst_pts,
                    fv: Arc::clone(&feats.data),
                    out: Arc::clone(&out),
                    d,
                },
                out.len(),
            ))
        } else {
            None
        };
        Ok(Tensor {
            shape: vec![dst.rows(), d],
            data: out,
            node,
        })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(vec![T::one()]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&node.op, &g, &self.nodes, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn chamfer_grads<T: Real>(
    pa: &[Point<T>],
    pb: &[Point<T>],
    ab: &[(usize, T)],
    ba: &[(usize, T)],
    variant: ChamferVariant,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); pa.len() * 3];
    let mut gb = vec![T::zero(); pb.len() * 3];
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    // Contribution of one directional term: moving `from[i]` toward/away
    // from its matched `to[j]`.
    let direction =
        |from: &[Point<T>], to: &[Point<T>], matches: &[(usize, T)], gf: &mut [T], gt: &mut [T]| {
            let inv_n = T::from_usize(from.len()).unwrap().recip();
            for (i, &(j, d2)) in matches.iter().enumerate() {
                let coeff = match variant {
                    ChamferVariant::L2 => two * inv_n,
                    ChamferVariant::L1 => {
                        let d = d2.sqrt();
                        if d == T::zero() {
                            continue;
                        }
                        half * inv_n / d
                    }
                };
                for c in 0..3 {
                    let v = coeff * (from[i][c] - to[j][c]);
                    gf[i * 3 + c] += v;
                    gt[j * 3 + c] -= v;
                }
            }
        };
    direction(pa, pb, ab, &mut ga, &mut gb);
    direction(pb, pa, ba, &mut gb, &mut ga);
    (ga, gb)
}

fn accumulate<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    target: Option<NodeId>,
    f: impl FnOnce(&mut [T]),
) {
    let Some(id) = target else { return };
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].numel]);
    f(slot);
}

fn backprop<T: Real>(op: &Op<T>, g: &[T], nodes: &[Node<T>], grads: &mut [Option<Vec<T>>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for t in [*a, *b] {
                accumulate(grads, nodes, t, |s| {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g)
                });
            }
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g)
            });
            accumulate(grads, nodes, *b, |s| {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g)
            });
        }
        Op::Mul { a, b, av, bv } => {
            accumulate(grads, nodes, *a, |s| {
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(bv.iter()) {
                    *s += g * y;
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for ((s, &g), &x) in s.iter_mut().zip(g).zip(av.iter()) {
                    *s += g * x;
                }
            });
        }
        Op::BroadcastAdd { a, b, b_len } => {
            accumulate(grads, nodes, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g)
            });
            accumulate(grads, nodes, *b, |s| {
                for chunk in g.chunks((*b_len).max(1)) {
                    for (s, &g) in s.iter_mut().zip(chunk) {
                        *s += g;
                    }
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c)
            });
        }
        Op::Relu(a, input) => {
            accumulate(grads, nodes, *a, |s| {
                for ((s, &g), &x) in s.iter_mut().zip(g).zip(input.iter()) {
                    if x > T::zero() {
                        *s += g;
                    }
                }
            });
        }
        Op::Tanh(a, out) => {
            accumulate(grads, nodes, *a, |s| {
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(out.iter()) {
                    *s += g * (T::one() - y * y);
                }
            });
        }
        Op::MatMul {
            a,
            b,
            av,
            bv,
            n,
            k,
            m,
        } => {
            let (n, k, m) = (*n, *k, *m);
            // dA = G · Bᵀ
            accumulate(grads, nodes, *a, |s| {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    let srow = &mut s[i * k..(i + 1) * k];
                    for (p, sv) in srow.iter_mut().enumerate() {
                        let brow = &bv[p * m..(p + 1) * m];
                        let mut acc = T::zero();
                        for (&x, &y) in grow.iter().zip(brow) {
                            acc += x * y;
                        }
                        *sv += acc;
                    }
                }
            });
            // dB = Aᵀ · G
            accumulate(grads, nodes, *b, |s| {
                for i in 0..n {
                    let arow = &av[i * k..(i + 1) * k];
                    let grow = &g[i * m..(i + 1) * m];
                    for (p, &x) in arow.iter().enumerate() {
                        if x == T::zero() {
                            continue;
                        }
                        for (sv, &y) in s[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *sv += x * y;
                        }
                    }
                }
            });
        }
        Op::Concat { a, b, wa, wb } => {
            let w = wa + wb;
            accumulate(grads, nodes, *a, |s| {
                for (srow, grow) in s.chunks_mut((*wa).max(1)).zip(g.chunks(w.max(1))) {
                    for (sv, &gv) in srow.iter_mut().zip(&grow[..*wa]) {
                        *sv += gv;
                    }
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for (srow, grow) in s.chunks_mut((*wb).max(1)).zip(g.chunks(w.max(1))) {
                    for (sv, &gv) in srow.iter_mut().zip(&grow[*wa..]) {
                        *sv += gv;
                    }
                }
            });
        }
        Op::ConcatRows { a, b, split } => {
            accumulate(grads, nodes, *a, |s| {
                s.iter_mut().zip(&g[..*split]).for_each(|(s, &g)| *s += g)
            });
            accumulate(grads, nodes, *b, |s| {
                s.iter_mut().zip(&g[*split..]).for_each(|(s, &g)| *s += g)
            });
        }
        Op::Gather { a, idx, width } => {
            let w = *width;
            accumulate(grads, nodes, *a, |s| {
                for (r, &i) in idx.iter().enumerate() {
                    for (sv, &gv) in s[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *sv += gv;
                    }
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(grads, nodes, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g)
            });
        }
        Op::Softmax { a, out, k, d } => {
            let (k, d) = (*k, *d);
            accumulate(grads, nodes, *a, |s| {
                let mut dots = vec![T::zero(); d];
                for ((sb, gb), ob) in s
                    .chunks_mut(k * d)
                    .zip(g.chunks(k * d))
                    .zip(out.chunks(k * d))
                {
                    dots.iter_mut().for_each(|x| *x = T::zero());
                    for (grow, orow) in gb.chunks(d).zip(ob.chunks(d)) {
                        for c in 0..d {
                            dots[c] += grow[c] * orow[c];
                        }
                    }
                    for ((srow, grow), orow) in sb.chunks_mut(d).zip(gb.chunks(d)).zip(ob.chunks(d))
                    {
                        for c in 0..d {
                            srow[c] += orow[c] * (grow[c] - dots[c]);
                        }
                    }
                }
            });
        }
        Op::SumMid { a, k, d } => {
            let (k, d) = (*k, *d);
            accumulate(grads, nodes, *a, |s| {
                for (sb, grow) in s.chunks_mut((k * d).max(1)).zip(g.chunks(d.max(1))) {
                    for srow in sb.chunks_mut(d) {
                        for (sv, &gv) in srow.iter_mut().zip(grow) {
                            *sv += gv;
                        }
                    }
                }
            });
        }
        Op::MaxMid { a, argmax, k, d } => {
            let (k, d) = (*k, *d);
            accumulate(grads, nodes, *a, |s| {
                for (pos, (&gv, &j)) in g.iter().zip(argmax).enumerate() {
                    let (i, c) = (pos / d, pos % d);
                    s[i * k * d + j as usize * d + c] += gv;
                }
            });
        }
        Op::Sum(a) => {
            let g0 = g[0];
            accumulate(grads, nodes, *a, |s| s.iter_mut().for_each(|s| *s += g0));
        }
        Op::Chamfer {
            a,
            b,
            grad_a,
            grad_b,
        } => {
            let g0 = g[0];
            accumulate(grads, nodes, *a, |s| {
                s.iter_mut().zip(grad_a).for_each(|(s, &v)| *s += g0 * v)
            });
            accumulate(grads, nodes, *b, |s| {
                s.iter_mut().zip(grad_b).for_each(|(s, &v)| *s += g0 * v)
            });
        }
        Op::Interpolate {
            src,
            feats,
            dst,
            stencils,
            src_pts,
            dst_pts,
            fv,
            out,
            d,
        } => {
            let d = *d;
            accumulate(grads, nodes, *feats, |s| {
                for (i, stencil) in stencils.iter().enumerate() {
                    let grow = &g[i * d..(i + 1) * d];
                    for &(j, w) in stencil {
                        for (sv, &gv) in s[j * d..(j + 1) * d].iter_mut().zip(grow) {
                            *sv += w * gv;
                        }
                    }
                }
            });
            if src.is_none() && dst.is_none() {
                return;
            }
            // Weight sensitivities: w_j = u_j / U with u_j = 1 / |x - s_j|².
            // dL/du_j = (g·f_j - g·out) / U and du_j/dx = -2 u_j² (x - s_j).
            let mut gsrc = vec![T::zero(); src_pts.len() * 3];
            let mut gdst = vec![T::zero(); dst_pts.len() * 3];
            let two = T::lit(2.0);
            for (i, stencil) in stencils.iter().enumerate() {
                if stencil.len() == 1 {
                    continue;
                }
                let grow = &g[i * d..(i + 1) * d];
                let g_out: T = grow
                    .iter()
                    .zip(&out[i * d..(i + 1) * d])
                    .map(|(&a, &b)| a * b)
                    .sum();
                let x = dst_pts[i];
                let u: Vec<T> = stencil
                    .iter()
                    .map(|&(j, _)| geometry::dist2(&x, &src_pts[j]).recip())
                    .collect();
                let total: T = u.iter().copied().sum();
                for (&(j, _), &uj) in stencil.iter().zip(&u) {
                    let g_f: T = grow
                        .iter()
                        .zip(&fv[j * d..(j + 1) * d])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    let dl_du = (g_f - g_out) / total;
                    let coeff = -two * uj * uj * dl_du;
                    for c in 0..3 {
                        let v = coeff * (x[c] - src_pts[j][c]);
                        gdst[i * 3 + c] += v;
                        gsrc[j * 3 + c] -= v;
                    }
                }
            }
            accumulate(grads, nodes, *src, |s| {
                s.iter_mut().zip(&gsrc).for_each(|(s, &v)| *s += v)
            });
            accumulate(grads, nodes, *dst, |s| {
                s.iter_mut().zip(&gdst).for_each(|(s, &v)| *s += v)
            });
        }
    }
}
