//! Reverse-mode automatic differentiation over small dense `f64` tensors.
//!
//! A [`Tape`] is an append-only list of operation records. Forward values are
//! computed eagerly when an operation is recorded and stored in a flat arena;
//! [`Tape::backward`] then sweeps the records once in reverse id order and
//! accumulates adjoints into a second arena of the same layout.
//!
//! A batch of `B` vectors of length `n` is a `Matrix(n, B)` with one column
//! per batch member. Most operations accept either a single vector or such a
//! batch; the only broadcasts are the explicit ones ([`Op::AddBroadcast`],
//! [`Op::MulBroadcast`], a `1 × B` factor in [`Op::ScalarMul`] and the
//! divisor of [`Op::FloorMod`]). A mismatch is reported by [`Tape::record`]
//! and turned into a panic by the convenience builders (`add`, `matvec`, ...),
//! since at those call sites it is always a programming error.

use thiserror::Error;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    /// Row-major `rows × cols`.
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

/// Operation kinds that can be recorded on a tape.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product.
    Mul(Var, Var),
    /// Scalar node times a tensor node, or a `1 × B` row scaling each column
    /// of an `n × B` batch.
    ScalarMul(Var, Var),
    /// Tensor times a constant factor.
    Scale(Var, f64),
    /// Matrix–vector product, or matrix product with an `n × B` batch.
    MatVec(Var, Var),
    Dot(Var, Var),
    /// Cross product of two 3-vectors or, columnwise, of two `3 × B` batches.
    Cross(Var, Var),
    /// `n × B` batch plus a length-`n` vector added to every column.
    AddBroadcast(Var, Var),
    /// `n × B` batch times a length-`n` vector, elementwise in every column.
    MulBroadcast(Var, Var),
    Softplus(Var),
    Logistic(Var),
    Sum(Var),
    Mean(Var),
    SquaredNorm(Var),
    /// Componentwise floor-mod of the first input by a constant divisor node
    /// (a vector, applied to every column of a batch). The derivative with
    /// respect to the dividend is taken as exactly 1; the divisor receives no
    /// gradient.
    FloorMod(Var, Var),
    Neg(Var),
    Concat(Vec<Var>),
    /// Contiguous run of `shape.len()` elements starting at `start`.
    Slice { input: Var, start: usize, shape: Shape },
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScalarMul(a, b)
            | Op::MatVec(a, b)
            | Op::Dot(a, b)
            | Op::Cross(a, b)
            | Op::AddBroadcast(a, b)
            | Op::MulBroadcast(a, b)
            | Op::FloorMod(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Scale(a, _)
            | Op::Softplus(a)
            | Op::Logistic(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SquaredNorm(a)
            | Op::Neg(a) => f(*a),
            Op::Concat(parts) => parts.iter().copied().for_each(f),
            Op::Slice { input, .. } => f(*input),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("node {0} does not exist on this tape")]
    UnknownNode(usize),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got {0:?}")]
    NonScalarRoot(Shape),
    #[error("leaf data has {got} elements but shape {shape:?} needs {expected}")]
    LeafSize { shape: Shape, expected: usize, got: usize },
}

#[derive(Clone, Debug)]
enum NodeOp {
    Leaf,
    Op(Op),
}

#[derive(Clone, Debug)]
struct Node {
    op: NodeOp,
    shape: Shape,
    offset: usize,
    needs_grad: bool,
}

/// Reverse-mode differentiation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<f64>,
    adjoints: Vec<f64>,
}

fn mismatch(op: &'static str, detail: String) -> TapeError {
    TapeError::ShapeMismatch { op, detail }
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Numerically stable `1 / (1 + e^-z)`.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    // four independent accumulators; fixed order keeps results reproducible
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `C ← A·B + beta·C` for a row-major `m × n` output `c`, with `A` (`m × k`)
/// and `B` (`k × n`) given as `(data, row stride, column stride)`.
fn gemm(m: usize, k: usize, n: usize, beta: f64, a: (&[f64], usize, usize), b: (&[f64], usize, usize), c: &mut [f64]) {
    assert!(c.len() == m * n && a.0.len() >= m * k && b.0.len() >= k * n);
    // SAFETY: the strides describe in-bounds m×k, k×n and m×n views of the
    // slices, checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node, keeping allocated capacity.
    pub fn clear(&mut self) {
        self.truncate(0);
    }

    /// Drops nodes with id `>= len`. Handles to dropped nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.nodes.len() {
            return;
        }
        let offset = self.nodes[len].offset;
        self.nodes.truncate(len);
        self.values.truncate(offset);
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.values[n.offset..n.offset + n.shape.len()]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Adjoint of `v` from the most recent [`Tape::backward`] call.
    ///
    /// Nodes that do not depend on any parameter leaf carry a zero adjoint.
    pub fn adjoint(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.adjoints[n.offset..n.offset + n.shape.len()]
    }

    fn push_leaf(&mut self, shape: Shape, data: &[f64], needs_grad: bool) -> Result<Var, TapeError> {
        if data.len() != shape.len() {
            return Err(TapeError::LeafSize { shape, expected: shape.len(), got: data.len() });
        }
        let offset = self.values.len();
        self.values.extend_from_slice(data);
        self.nodes.push(Node { op: NodeOp::Leaf, shape, offset, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf: never receives gradient.
    pub fn constant(&mut self, shape: Shape, data: &[f64]) -> Var {
        self.push_leaf(shape, data, false).expect("constant leaf")
    }

    /// Parameter leaf: its adjoint is populated by [`Tape::backward`].
    pub fn param(&mut self, shape: Shape, data: &[f64]) -> Var {
        self.push_leaf(shape, data, true).expect("parameter leaf")
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Shape::Scalar, &[x])
    }

    pub fn vector(&mut self, data: &[f64]) -> Var {
        self.constant(Shape::Vector(data.len()), data)
    }

    fn check(&self, v: Var) -> Result<&Node, TapeError> {
        self.nodes.get(v.0).ok_or(TapeError::UnknownNode(v.0))
    }

    fn output_shape(&self, op: &Op) -> Result<Shape, TapeError> {
        let mut unknown = None;
        op.for_each_input(|v| {
            if v.0 >= self.nodes.len() {
                unknown = Some(v.0);
            }
        });
        if let Some(id) = unknown {
            return Err(TapeError::UnknownNode(id));
        }
        let sh = |v: &Var| self.nodes[v.0].shape;
        let same = |name: &'static str, a: &Var, b: &Var| {
            if sh(a) == sh(b) {
                Ok(sh(a))
            } else {
                Err(mismatch(name, format!("{:?} vs {:?}", sh(a), sh(b))))
            }
        };
        match op {
            Op::Add(a, b) => same("add", a, b),
            Op::Sub(a, b) => same("sub", a, b),
            Op::Mul(a, b) => same("mul", a, b),
            Op::ScalarMul(s, t) => match (sh(s), sh(t)) {
                (Shape::Scalar, t) => Ok(t),
                (Shape::Matrix(1, b), Shape::Matrix(r, c)) if b == c => Ok(Shape::Matrix(r, c)),
                (s, t) => Err(mismatch("scalar_mul", format!("factor {s:?} for {t:?}"))),
            },
            Op::Scale(a, _) | Op::Neg(a) | Op::Softplus(a) | Op::Logistic(a) => Ok(sh(a)),
            Op::MatVec(w, x) => match (sh(w), sh(x)) {
                (Shape::Matrix(r, c), Shape::Vector(n)) if c == n => Ok(Shape::Vector(r)),
                (Shape::Matrix(r, c), Shape::Matrix(n, b)) if c == n => Ok(Shape::Matrix(r, b)),
                (a, b) => Err(mismatch("matvec", format!("{a:?} times {b:?}"))),
            },
            Op::Dot(a, b) => match (sh(a), sh(b)) {
                (Shape::Vector(n), Shape::Vector(m)) if n == m => Ok(Shape::Scalar),
                (a, b) => Err(mismatch("dot", format!("{a:?} vs {b:?}"))),
            },
            Op::Cross(a, b) => match (sh(a), sh(b)) {
                (Shape::Vector(3), Shape::Vector(3)) => Ok(Shape::Vector(3)),
                (Shape::Matrix(3, b), Shape::Matrix(3, c)) if b == c => Ok(Shape::Matrix(3, b)),
                (a, b) => Err(mismatch("cross", format!("{a:?} vs {b:?}"))),
            },
            Op::AddBroadcast(x, c) | Op::MulBroadcast(x, c) => match (sh(x), sh(c)) {
                (Shape::Matrix(r, b), Shape::Vector(n)) if r == n => Ok(Shape::Matrix(r, b)),
                (a, b) => Err(mismatch("broadcast", format!("{a:?} with {b:?}"))),
            },
            Op::Sum(_) | Op::Mean(_) | Op::SquaredNorm(_) => Ok(Shape::Scalar),
            Op::FloorMod(x, p) => {
                let s = match (sh(x), sh(p)) {
                    (Shape::Matrix(r, b), Shape::Vector(n)) if r == n => Shape::Matrix(r, b),
                    _ => same("floor_mod", x, p)?,
                };
                if self.value(*p).iter().any(|&d| !(d > 0.0)) {
                    return Err(mismatch("floor_mod", "divisor must be positive".into()));
                }
                Ok(s)
            }
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(mismatch("concat", "no inputs".into()));
                }
                if let Shape::Matrix(_, b) = sh(&parts[0]) {
                    // stacking rows of batches with equal column counts
                    let mut rows = 0;
                    for p in parts {
                        match sh(p) {
                            Shape::Matrix(r, c) if c == b => rows += r,
                            other => return Err(mismatch("concat", format!("cannot stack {other:?} on {b} columns"))),
                        }
                    }
                    return Ok(Shape::Matrix(rows, b));
                }
                let mut n = 0;
                for p in parts {
                    match sh(p) {
                        Shape::Scalar => n += 1,
                        Shape::Vector(k) => n += k,
                        other => return Err(mismatch("concat", format!("cannot concatenate {other:?}"))),
                    }
                }
                Ok(Shape::Vector(n))
            }
            Op::Slice { input, start, shape } => {
                let len = sh(input).len();
                if start + shape.len() > len {
                    Err(mismatch("slice", format!("{shape:?} at {start} from {len} elements")))
                } else {
                    Ok(*shape)
                }
            }
        }
    }

    /// Validates `op` against the shapes of its inputs, computes its forward
    /// value and appends it. Returns the new node's id.
    pub fn record(&mut self, op: Op) -> Result<Var, TapeError> {
        let shape = self.output_shape(&op)?;
        let mut needs_grad = false;
        op.for_each_input(|v| needs_grad |= self.nodes[v.0].needs_grad);
        let offset = self.values.len();
        self.values.resize(offset + shape.len(), 0.0);
        {
            let (inp, out) = self.values.split_at_mut(offset);
            let nodes = &self.nodes;
            let val = |v: &Var| {
                let n = &nodes[v.0];
                &inp[n.offset..n.offset + n.shape.len()]
            };
            match &op {
                Op::Add(a, b) => {
                    for ((o, x), y) in out.iter_mut().zip(val(a)).zip(val(b)) {
                        *o = x + y;
                    }
                }
                Op::Sub(a, b) => {
                    for ((o, x), y) in out.iter_mut().zip(val(a)).zip(val(b)) {
                        *o = x - y;
                    }
                }
                Op::Mul(a, b) => {
                    for ((o, x), y) in out.iter_mut().zip(val(a)).zip(val(b)) {
                        *o = x * y;
                    }
                }
                Op::ScalarMul(s, t) => {
                    let (s, t) = (val(s), val(t));
                    if s.len() == 1 {
                        for (o, x) in out.iter_mut().zip(t) {
                            *o = s[0] * x;
                        }
                    } else {
                        for (orow, trow) in out.chunks_exact_mut(s.len()).zip(t.chunks_exact(s.len())) {
                            for ((o, x), f) in orow.iter_mut().zip(trow).zip(s) {
                                *o = f * x;
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    for (o, x) in out.iter_mut().zip(val(a)) {
                        *o = c * x;
                    }
                }
                Op::MatVec(w, x) => {
                    let (wv, xv) = (val(w), val(x));
                    match (nodes[w.0].shape, nodes[x.0].shape) {
                        (Shape::Matrix(rows, cols), Shape::Matrix(_, b)) => {
                            gemm(rows, cols, b, 0.0, (wv, cols, 1), (xv, b, 1), out);
                        }
                        _ => {
                            let cols = xv.len();
                            for (i, o) in out.iter_mut().enumerate() {
                                *o = dot_slice(&wv[i * cols..(i + 1) * cols], xv);
                            }
                        }
                    }
                }
                Op::Dot(a, b) => out[0] = dot_slice(val(a), val(b)),
                Op::Cross(a, b) => {
                    let (a, b) = (val(a), val(b));
                    let n = a.len() / 3;
                    for j in 0..n {
                        let (a0, a1, a2) = (a[j], a[n + j], a[2 * n + j]);
                        let (b0, b1, b2) = (b[j], b[n + j], b[2 * n + j]);
                        out[j] = a1 * b2 - a2 * b1;
                        out[n + j] = a2 * b0 - a0 * b2;
                        out[2 * n + j] = a0 * b1 - a1 * b0;
                    }
                }
                Op::AddBroadcast(x, c) => {
                    let c = val(c);
                    let b = out.len() / c.len();
                    for ((orow, xrow), ci) in out.chunks_exact_mut(b).zip(val(x).chunks_exact(b)).zip(c) {
                        for (o, xi) in orow.iter_mut().zip(xrow) {
                            *o = xi + ci;
                        }
                    }
                }
                Op::MulBroadcast(x, c) => {
                    let c = val(c);
                    let b = out.len() / c.len();
                    for ((orow, xrow), ci) in out.chunks_exact_mut(b).zip(val(x).chunks_exact(b)).zip(c) {
                        for (o, xi) in orow.iter_mut().zip(xrow) {
                            *o = xi * ci;
                        }
                    }
                }
                Op::Softplus(a) => {
                    for (o, &x) in out.iter_mut().zip(val(a)) {
                        *o = softplus(x);
                    }
                }
                Op::Logistic(a) => {
                    for (o, &x) in out.iter_mut().zip(val(a)) {
                        *o = logistic(x);
                    }
                }
                Op::Sum(a) => out[0] = val(a).iter().sum(),
                Op::Mean(a) => {
                    let a = val(a);
                    out[0] = a.iter().sum::<f64>() / a.len() as f64;
                }
                Op::SquaredNorm(a) => out[0] = dot_slice(val(a), val(a)),
                Op::FloorMod(x, p) => {
                    let p = val(p);
                    let b = out.len() / p.len();
                    for ((orow, xrow), &pi) in out.chunks_exact_mut(b).zip(val(x).chunks_exact(b)).zip(p) {
                        for (o, &xi) in orow.iter_mut().zip(xrow) {
                            *o = xi.rem_euclid(pi);
                        }
                    }
                }
                Op::Neg(a) => {
                    for (o, x) in out.iter_mut().zip(val(a)) {
                        *o = -x;
                    }
                }
                Op::Concat(parts) => {
                    let mut k = 0;
                    for p in parts {
                        let v = val(p);
                        out[k..k + v.len()].copy_from_slice(v);
                        k += v.len();
                    }
                }
                Op::Slice { input, start, shape } => {
                    out.copy_from_slice(&val(input)[*start..*start + shape.len()]);
                }
            }
        }
        self.nodes.push(Node { op: NodeOp::Op(op), shape, offset, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rec(&mut self, op: Op) -> Var {
        match self.record(op) {
            Ok(v) => v,
            Err(e) => panic!("{e}"),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::Mul(a, b))
    }
    pub fn scalar_mul(&mut self, s: Var, t: Var) -> Var {
        self.rec(Op::ScalarMul(s, t))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.rec(Op::Scale(a, c))
    }
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        self.rec(Op::MatVec(w, x))
    }
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::Dot(a, b))
    }
    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        self.rec(Op::Cross(a, b))
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.rec(Op::Softplus(a))
    }
    pub fn logistic(&mut self, a: Var) -> Var {
        self.rec(Op::Logistic(a))
    }
    pub fn sum(&mut self, a: Var) -> Var {
        self.rec(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Var {
        self.rec(Op::Mean(a))
    }
    pub fn squared_norm(&mut self, a: Var) -> Var {
        self.rec(Op::SquaredNorm(a))
    }
    pub fn floor_mod(&mut self, x: Var, divisor: Var) -> Var {
        self.rec(Op::FloorMod(x, divisor))
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.rec(Op::Neg(a))
    }
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        self.rec(Op::Concat(parts.to_vec()))
    }
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Var {
        self.rec(Op::Slice { input, start, shape: Shape::Vector(len) })
    }
    /// Element `i` of `input` as a scalar node.
    pub fn index(&mut self, input: Var, i: usize) -> Var {
        self.rec(Op::Slice { input, start: i, shape: Shape::Scalar })
    }
    /// Component `i`: a scalar for a vector, the `1 × B` row `i` of a batch.
    pub fn row(&mut self, input: Var, i: usize) -> Var {
        match self.shape(input) {
            Shape::Matrix(_, b) => self.rec(Op::Slice { input, start: i * b, shape: Shape::Matrix(1, b) }),
            _ => self.index(input, i),
        }
    }
    pub fn add_broadcast(&mut self, x: Var, c: Var) -> Var {
        self.rec(Op::AddBroadcast(x, c))
    }
    pub fn mul_broadcast(&mut self, x: Var, c: Var) -> Var {
        self.rec(Op::MulBroadcast(x, c))
    }
    /// `x + c` when the shapes agree, otherwise `c` broadcast over the columns
    /// of the batch `x`.
    pub fn add_bias(&mut self, x: Var, c: Var) -> Var {
        if self.shape(x) == self.shape(c) {
            self.add(x, c)
        } else {
            self.add_broadcast(x, c)
        }
    }
    /// Elementwise `x ⊙ c`, broadcasting `c` over the columns of a batch `x`.
    pub fn mul_bias(&mut self, x: Var, c: Var) -> Var {
        if self.shape(x) == self.shape(c) {
            self.mul(x, c)
        } else {
            self.mul_broadcast(x, c)
        }
    }
    /// Constant `rows × cols` batch.
    pub fn matrix(&mut self, rows: usize, cols: usize, data: &[f64]) -> Var {
        self.constant(Shape::Matrix(rows, cols), data)
    }

    /// Sums a non-empty list of same-shaped nodes left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Reverse sweep from a scalar `root`. Afterwards [`Tape::adjoint`] gives
    /// `∂root/∂node` for every node that depends on a parameter leaf.
    pub fn backward(&mut self, root: Var) -> Result<(), TapeError> {
        let (root_shape, root_offset) = {
            let n = self.check(root)?;
            (n.shape, n.offset)
        };
        if root_shape != Shape::Scalar {
            return Err(TapeError::NonScalarRoot(root_shape));
        }
        self.adjoints.clear();
        self.adjoints.resize(self.values.len(), 0.0);
        self.adjoints[root_offset] = 1.0;

        let values = &self.values;
        let nodes = &self.nodes;
        let val = |v: &Var| {
            let n = &nodes[v.0];
            &values[n.offset..n.offset + n.shape.len()]
        };
        for k in (0..=root.0).rev() {
            let node = &nodes[k];
            if !node.needs_grad {
                continue;
            }
            let op = match &node.op {
                NodeOp::Leaf => continue,
                NodeOp::Op(op) => op,
            };
            let (before, after) = self.adjoints.split_at_mut(node.offset);
            let g = &after[..node.shape.len()];
            let wants = |v: &Var| nodes[v.0].needs_grad;
            let span = |v: &Var| {
                let n = &nodes[v.0];
                n.offset..n.offset + n.shape.len()
            };
            match op {
                Op::Add(a, b) => {
                    if wants(a) {
                        axpy(1.0, g, &mut before[span(a)]);
                    }
                    if wants(b) {
                        axpy(1.0, g, &mut before[span(b)]);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(a) {
                        axpy(1.0, g, &mut before[span(a)]);
                    }
                    if wants(b) {
                        axpy(-1.0, g, &mut before[span(b)]);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        let bv = val(b);
                        for ((d, gi), bi) in before[span(a)].iter_mut().zip(g).zip(bv) {
                            *d += gi * bi;
                        }
                    }
                    if wants(b) {
                        let av = val(a);
                        for ((d, gi), ai) in before[span(b)].iter_mut().zip(g).zip(av) {
                            *d += gi * ai;
                        }
                    }
                }
                Op::ScalarMul(s, t) => {
                    let (sv, tv) = (val(s), val(t));
                    let b = sv.len();
                    if b == 1 {
                        if wants(s) {
                            before[span(s).start] += dot_slice(g, tv);
                        }
                        if wants(t) {
                            axpy(sv[0], g, &mut before[span(t)]);
                        }
                    } else {
                        if wants(s) {
                            let gs = &mut before[span(s)];
                            for (grow, trow) in g.chunks_exact(b).zip(tv.chunks_exact(b)) {
                                for ((d, gi), ti) in gs.iter_mut().zip(grow).zip(trow) {
                                    *d += gi * ti;
                                }
                            }
                        }
                        if wants(t) {
                            let gt = &mut before[span(t)];
                            for (dst, grow) in gt.chunks_exact_mut(b).zip(g.chunks_exact(b)) {
                                for ((d, gi), f) in dst.iter_mut().zip(grow).zip(sv) {
                                    *d += gi * f;
                                }
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if wants(a) {
                        axpy(*c, g, &mut before[span(a)]);
                    }
                }
                Op::MatVec(w, x) if matches!(nodes[x.0].shape, Shape::Matrix(..)) => {
                    let (wv, xv) = (val(w), val(x));
                    let (Shape::Matrix(_, cols), Shape::Matrix(_, b)) = (nodes[w.0].shape, nodes[x.0].shape) else {
                        unreachable!("shapes validated when recorded")
                    };
                    let rows = g.len() / b;
                    if wants(w) {
                        // gW += G · Xᵀ
                        gemm(rows, b, cols, 1.0, (g, b, 1), (xv, 1, b), &mut before[span(w)]);
                    }
                    if wants(x) {
                        // gX += Wᵀ · G
                        gemm(cols, rows, b, 1.0, (wv, 1, cols), (g, b, 1), &mut before[span(x)]);
                    }
                }
                Op::MatVec(w, x) => {
                    let xv = val(x);
                    let cols = xv.len();
                    if wants(w) {
                        let gw = &mut before[span(w)];
                        for (i, &gi) in g.iter().enumerate() {
                            if gi != 0.0 {
                                axpy(gi, xv, &mut gw[i * cols..(i + 1) * cols]);
                            }
                        }
                    }
                    if wants(x) {
                        let wv = val(w);
                        let gx = &mut before[span(x)];
                        for (i, &gi) in g.iter().enumerate() {
                            if gi != 0.0 {
                                axpy(gi, &wv[i * cols..(i + 1) * cols], gx);
                            }
                        }
                    }
                }
                Op::Dot(a, b) => {
                    if wants(a) {
                        axpy(g[0], val(b), &mut before[span(a)]);
                    }
                    if wants(b) {
                        axpy(g[0], val(a), &mut before[span(b)]);
                    }
                }
                Op::Cross(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let n = av.len() / 3;
                    let (i0, i1, i2) = (0, n, 2 * n);
                    if wants(a) {
                        // ∂(a×b)/∂a applied to g is b × g
                        let d = &mut before[span(a)];
                        for j in 0..n {
                            d[i0 + j] += bv[i1 + j] * g[i2 + j] - bv[i2 + j] * g[i1 + j];
                            d[i1 + j] += bv[i2 + j] * g[i0 + j] - bv[i0 + j] * g[i2 + j];
                            d[i2 + j] += bv[i0 + j] * g[i1 + j] - bv[i1 + j] * g[i0 + j];
                        }
                    }
                    if wants(b) {
                        // g × a
                        let d = &mut before[span(b)];
                        for j in 0..n {
                            d[i0 + j] += g[i1 + j] * av[i2 + j] - g[i2 + j] * av[i1 + j];
                            d[i1 + j] += g[i2 + j] * av[i0 + j] - g[i0 + j] * av[i2 + j];
                            d[i2 + j] += g[i0 + j] * av[i1 + j] - g[i1 + j] * av[i0 + j];
                        }
                    }
                }
                Op::AddBroadcast(x, c) => {
                    if wants(x) {
                        axpy(1.0, g, &mut before[span(x)]);
                    }
                    if wants(c) {
                        let gc = &mut before[span(c)];
                        let b = g.len() / gc.len();
                        for (d, grow) in gc.iter_mut().zip(g.chunks_exact(b)) {
                            *d += grow.iter().sum::<f64>();
                        }
                    }
                }
                Op::MulBroadcast(x, c) => {
                    let (xv, cv) = (val(x), val(c));
                    let b = g.len() / cv.len();
                    if wants(x) {
                        let gx = &mut before[span(x)];
                        for ((dst, grow), ci) in gx.chunks_exact_mut(b).zip(g.chunks_exact(b)).zip(cv) {
                            axpy(*ci, grow, dst);
                        }
                    }
                    if wants(c) {
                        let gc = &mut before[span(c)];
                        for ((d, grow), xrow) in gc.iter_mut().zip(g.chunks_exact(b)).zip(xv.chunks_exact(b)) {
                            *d += dot_slice(grow, xrow);
                        }
                    }
                }
                Op::Softplus(a) => {
                    if wants(a) {
                        let z = val(a);
                        for ((d, gi), &zi) in before[span(a)].iter_mut().zip(g).zip(z) {
                            *d += gi * logistic(zi);
                        }
                    }
                }
                Op::Logistic(a) => {
                    if wants(a) {
                        let s = &values[node.offset..node.offset + node.shape.len()];
                        for ((d, gi), si) in before[span(a)].iter_mut().zip(g).zip(s) {
                            *d += gi * si * (1.0 - si);
                        }
                    }
                }
                Op::Sum(a) => {
                    if wants(a) {
                        for d in &mut before[span(a)] {
                            *d += g[0];
                        }
                    }
                }
                Op::Mean(a) => {
                    if wants(a) {
                        let r = span(a);
                        let scale = g[0] / r.len() as f64;
                        for d in &mut before[r] {
                            *d += scale;
                        }
                    }
                }
                Op::SquaredNorm(a) => {
                    if wants(a) {
                        axpy(2.0 * g[0], val(a), &mut before[span(a)]);
                    }
                }
                Op::FloorMod(x, _) => {
                    if wants(x) {
                        axpy(1.0, g, &mut before[span(x)]);
                    }
                }
                Op::Neg(a) => {
                    if wants(a) {
                        axpy(-1.0, g, &mut before[span(a)]);
                    }
                }
                Op::Concat(parts) => {
                    let mut k = 0;
                    for p in parts {
                        let r = span(p);
                        let n = r.len();
                        if wants(p) {
                            axpy(1.0, &g[k..k + n], &mut before[r]);
                        }
                        k += n;
                    }
                }
                Op::Slice { input, start, shape } => {
                    if wants(input) {
                        let r = span(input);
                        let dst = &mut before[r.start + start..r.start + start + shape.len()];
                        axpy(1.0, g, dst);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Largest relative error below which a gradient component is compared
/// absolutely: `|a − b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of a scalar function of one vector input with
/// central finite differences, returning the largest relative error over the
/// coordinates.
///
/// `f` receives a fresh tape and the input as a parameter leaf and must
/// return a scalar node.
pub fn grad_check<F>(f: F, point: &[f64], epsilon: f64) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TapeError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let shape = Shape::Vector(point.len());
    let mut tape = Tape::new();
    let x = tape.param(shape, point);
    let root = f(&mut tape, x)?;
    tape.backward(root)?;
    let analytic = tape.adjoint(x).to_vec();

    let eval = |p: &[f64]| -> Result<f64, TapeError> {
        let mut t = Tape::new();
        let x = t.param(shape, p);
        let r = f(&mut t, x)?;
        Ok(t.scalar_value(r))
    };
    let mut worst = 0.0f64;
    let mut p = point.to_vec();
    for i in 0..point.len() {
        p[i] = point[i] + epsilon;
        let fp = eval(&p)?;
        p[i] = point[i] - epsilon;
        let fm = eval(&p)?;
        p[i] = point[i];
        let fd = (fp - fm) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], fd));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_add_value() {
        let mut t = Tape::new();
        let a = t.scalar(2.0);
        let b = t.scalar(3.0);
        let c = t.record(Op::Add(a, b)).unwrap();
        assert_eq!(t.scalar_value(c), 5.0);
    }

    #[test]
    fn record_matvec_zero_matrix() {
        let mut t = Tape::new();
        let w = t.constant(Shape::Matrix(2, 3), &[0.0; 6]);
        let x = t.vector(&[1.0, -2.0, 3.0]);
        let y = t.record(Op::MatVec(w, x)).unwrap();
        assert_eq!(t.shape(y), Shape::Vector(2));
        assert_eq!(t.value(y), &[0.0, 0.0]);
    }

    #[test]
    fn record_softplus_at_zero() {
        let mut t = Tape::new();
        let z = t.scalar(0.0);
        let y = t.record(Op::Softplus(z)).unwrap();
        assert!((t.scalar_value(y) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn record_rejects_shape_mismatch() {
        let mut t = Tape::new();
        let w = t.constant(Shape::Matrix(2, 3), &[0.0; 6]);
        let x = t.vector(&[1.0, 2.0]);
        assert!(matches!(t.record(Op::MatVec(w, x)), Err(TapeError::ShapeMismatch { .. })));
        let a = t.vector(&[1.0, 2.0, 3.0]);
        assert!(t.record(Op::Add(a, x)).is_err());
        assert!(t.record(Op::Cross(x, x)).is_err());
        assert!(t.record(Op::ScalarMul(a, x)).is_err());
        assert_eq!(t.record(Op::Neg(Var(99))), Err(TapeError::UnknownNode(99)));
    }

    #[test]
    fn floor_mod_rejects_non_positive_divisor() {
        let mut t = Tape::new();
        let x = t.vector(&[1.0, 2.0]);
        let p = t.vector(&[2.0, 0.0]);
        assert!(t.record(Op::FloorMod(x, p)).is_err());
    }

    #[test]
    fn backward_square() {
        let mut t = Tape::new();
        let x = t.param(Shape::Scalar, &[3.0]);
        let y = t.mul(x, x);
        t.backward(y).unwrap();
        assert_eq!(t.adjoint(x), &[6.0]);
    }

    #[test]
    fn backward_softplus_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Shape::Scalar, &[0.0]);
        let y = t.softplus(x);
        t.backward(y).unwrap();
        assert_eq!(t.adjoint(x), &[0.5]);
    }

    #[test]
    fn backward_squared_norm() {
        let mut t = Tape::new();
        let v = t.param(Shape::Vector(3), &[1.0, 2.0, 3.0]);
        let y = t.squared_norm(v);
        t.backward(y).unwrap();
        assert_eq!(t.adjoint(v), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_vector_root() {
        let mut t = Tape::new();
        let v = t.param(Shape::Vector(3), &[1.0, 2.0, 3.0]);
        assert_eq!(t.backward(v), Err(TapeError::NonScalarRoot(Shape::Vector(3))));
    }

    #[test]
    fn constants_get_no_adjoint() {
        let mut t = Tape::new();
        let c = t.vector(&[1.0, 2.0]);
        let p = t.param(Shape::Vector(2), &[3.0, 4.0]);
        let d = t.dot(c, p);
        t.backward(d).unwrap();
        assert_eq!(t.adjoint(c), &[0.0, 0.0]);
        assert_eq!(t.adjoint(p), &[1.0, 2.0]);
    }

    #[test]
    fn truncate_discards_tail() {
        let mut t = Tape::new();
        let a = t.scalar(1.0);
        let mark = t.len();
        let b = t.neg(a);
        assert_eq!(b.id(), mark);
        t.truncate(mark);
        assert_eq!(t.len(), 1);
        let c = t.scale(a, 4.0);
        assert_eq!(t.scalar_value(c), 4.0);
    }

    #[test]
    fn floor_mod_values() {
        let mut t = Tape::new();
        let x = t.vector(&[-0.5, 3.1, 2.0]);
        let a = t.vector(&[2.0, 2.0, 2.0]);
        let w = t.floor_mod(x, a);
        let got = t.value(w);
        assert!((got[0] - 1.5).abs() < 1e-15);
        assert!((got[1] - 1.1).abs() < 1e-12);
        assert_eq!(got[2], 0.0);
    }

    #[test]
    fn grad_check_squared_norm() {
        let err = grad_check(|t, v| Ok(t.squared_norm(v)), &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_softplus_of_sum() {
        let p = [0.3, -1.2, 0.7, 2.1, -0.4];
        let err = grad_check(
            |t, v| {
                let s = t.sum(v);
                Ok(t.softplus(s))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let err = grad_check(|t, _| Ok(t.scalar(4.2)), &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softplus_and_logistic_are_stable() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(logistic(-800.0), 0.0);
        assert_eq!(logistic(800.0), 1.0);
    }

    fn as_matrix(t: &mut Tape, x: Var, start: usize, r: usize, c: usize) -> Var {
        t.record(Op::Slice { input: x, start, shape: Shape::Matrix(r, c) }).unwrap()
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn batched_matmul_matches_columnwise_matvec() {
        let (r, c, b) = (4, 3, 5);
        let w = pseudo(r * c, 1);
        let x = pseudo(c * b, 2);
        let mut t = Tape::new();
        let wv = t.constant(Shape::Matrix(r, c), &w);
        let xv = t.matrix(c, b, &x);
        let y = t.matvec(wv, xv);
        assert_eq!(t.shape(y), Shape::Matrix(r, b));
        for j in 0..b {
            let col: Vec<f64> = (0..c).map(|k| x[k * b + j]).collect();
            let cv = t.vector(&col);
            let yj = t.matvec(wv, cv);
            for i in 0..r {
                assert!((t.value(y)[i * b + j] - t.value(yj)[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn grad_check_batched_ops() {
        // one flat parameter vector carved into W (4×3), X (3×5), c (4) and s (1×5)
        let point = pseudo(12 + 15 + 4 + 5, 7);
        let f = |t: &mut Tape, p: Var| -> Result<Var, TapeError> {
            let w = as_matrix(t, p, 0, 4, 3);
            let x = as_matrix(t, p, 12, 3, 5);
            let c = t.slice(p, 27, 4);
            let s = as_matrix(t, p, 31, 1, 5);
            let y = t.matvec(w, x);
            let y = t.add_broadcast(y, c);
            let y = t.softplus(y);
            let y = t.mul_broadcast(y, c);
            let top = as_matrix(t, y, 0, 3, 5);
            let cr = t.cross(top, x);
            let sc = t.scalar_mul(s, cr);
            let r1 = t.row(sc, 1);
            let st = t.concat(&[sc, r1]);
            let per = t.vector(&[0.7, 0.9, 1.1, 1.3]);
            let wrapped = t.floor_mod(st, per);
            let m = t.mul(wrapped, st);
            Ok(t.squared_norm(m))
        };
        let worst = grad_check(f, &point, 1e-6).unwrap();
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn broadcast_shapes_are_checked() {
        let mut t = Tape::new();
        let m = t.matrix(3, 2, &[0.0; 6]);
        let v2 = t.vector(&[1.0, 2.0]);
        assert!(t.record(Op::AddBroadcast(m, v2)).is_err());
        let v3 = t.vector(&[1.0, 2.0, 3.0]);
        let sum = t.add_broadcast(m, v3);
        assert_eq!(t.shape(sum), Shape::Matrix(3, 2));
        let row3 = t.matrix(1, 3, &[1.0; 3]);
        assert!(t.record(Op::ScalarMul(row3, m)).is_err());
        let other = t.matrix(2, 3, &[0.0; 6]);
        assert!(t.record(Op::Concat(vec![m, other])).is_err());
        let stacked = t.concat(&[m, m]);
        assert_eq!(t.shape(stacked), Shape::Matrix(6, 2));
        let r = t.row(m, 2);
        assert_eq!(t.shape(r), Shape::Matrix(1, 2));
    }

    #[test]
    fn batched_cross_is_columnwise() {
        let mut t = Tape::new();
        // columns (1,0,0) × (0,1,0) and (0,1,0) × (0,0,1)
        let a = t.matrix(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = t.matrix(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let c = t.cross(a, b);
        assert_eq!(t.value(c), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
