//! Graph-recording tape with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Backward passes emit
//! their vector-Jacobian products as ordinary tape ops, so a gradient obtained
//! from [`Tape::grad`] is itself differentiable. That is what the projected
//! gradient penalty needs: it is a function of the input gradient and must be
//! differentiated again with respect to the parameters.
//!
//! Non-smooth primitives (`relu`, `leaky_relu`, `clamp`) use constant masks in
//! their backward rule, so their second derivative is zero.

use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    RecipSafe(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Clamp(usize, f64, f64),
    SmoothL1(usize),
    SumTo(usize),
    BroadcastTo(usize),
    NormRows(usize),
    Cdist(usize, usize),
}

impl Op {
    fn parents(self) -> [Option<usize>; 2] {
        use Op::*;
        match self {
            Leaf => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Cdist(a, b) => {
                [Some(a), Some(b)]
            }
            Transpose(a) | Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Sqrt(a)
            | RecipSafe(a) | Sigmoid(a) | Softplus(a) | Relu(a) | LeakyRelu(a, _)
            | Clamp(a, _, _) | SmoothL1(a) | SumTo(a) | BroadcastTo(a) | NormRows(a) => {
                [Some(a), None]
            }
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Replaces the adjoint arriving at `node` before it propagates further.
///
/// The transformed adjoint enters the graph as a constant, so nothing
/// upstream is differentiated through the transform itself.
pub struct GradHook<'a> {
    node: Var,
    transform: Box<dyn Fn(&Tensor) -> Tensor + 'a>,
}

impl<'a> GradHook<'a> {
    pub fn new(node: Var, transform: impl Fn(&Tensor) -> Tensor + 'a) -> Self {
        Self {
            node,
            transform: Box::new(transform),
        }
    }

    /// Hook that clamps each row of the adjoint to `[-bound[i], bound[i]]`.
    pub fn clip_rows(node: Var, bounds: Vec<f64>) -> Self {
        Self::new(node, move |adj: &Tensor| {
            let mut out = adj.clone();
            let cols = out.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let b = bounds[i / cols];
                *v = v.clamp(-b, b);
            }
            out
        })
    }

    pub fn node(&self) -> Var {
        self.node
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

type Res = Result<Var, AutodiffError>;

fn as_matrix(t: Tensor) -> Tensor {
    match t.rank() {
        2 => t,
        _ => {
            let (r, c) = t.dims2();
            Tensor::matrix(r, c, t.into_data())
        }
    }
}

fn broadcast_dim(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize), AutodiffError> {
    let pick = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (pick(a[0], b[0]), pick(a[1], b[1])) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }),
    }
}

fn broadcast_values(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    let (r, c) = t.dims2();
    if r == rows && c == cols {
        return t.clone();
    }
    let d = t.data();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let ri = if r == 1 { 0 } else { i };
        for j in 0..cols {
            let cj = if c == 1 { 0 } else { j };
            out.push(d[ri * c + cj]);
        }
    }
    Tensor::matrix(rows, cols, out)
}

fn sum_values(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    let (r, c) = t.dims2();
    if r == rows && c == cols {
        return t.clone();
    }
    let d = t.data();
    let mut out = vec![0.0; rows * cols];
    for i in 0..r {
        let oi = if rows == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if cols == 1 { 0 } else { j };
            out[oi * cols + oj] += d[i * c + j];
        }
    }
    Tensor::matrix(rows, cols, out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .flatten()
            .any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that gradients can be taken with respect to.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: as_matrix(value),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: as_matrix(value),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Res {
        let (r, c) = broadcast_dim(name, self.shape(a), self.shape(b))?;
        let av = broadcast_values(self.value(a), r, c);
        let bv = broadcast_values(self.value(b), r, c);
        let value = av.zip_map(&bv, f);
        Ok(self.push(op, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let value = self.value(a).matmul(self.value(b));
        Ok(self.push(Op::MatMul(a.0, b.0), value))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a.0), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.binary("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.binary("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.binary("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Res {
        self.binary("div", a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a.0), |x| -x)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a.0), |x| x + s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.0), f64::sqrt)
    }

    /// `1 / x`, with `0` mapped to `0`.
    pub fn recip_safe(&mut self, a: Var) -> Var {
        self.unary(a, Op::RecipSafe(a.0), |x| if x == 0.0 { 0.0 } else { 1.0 / x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), softplus)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a.0, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a.0, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Huber-style loss with transition point 1.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        self.unary(a, Op::SmoothL1(a.0), smooth_l1)
    }

    /// `elu(x) = relu(x) + exp(min(x, 0)) - 1`, built from primitives.
    pub fn elu(&mut self, a: Var) -> Var {
        let pos = self.relu(a);
        let na = self.neg(a);
        let rn = self.relu(na);
        let min0 = self.neg(rn);
        let e = self.exp(min0);
        let e1 = self.add_scalar(e, -1.0);
        self.add(pos, e1).expect("same shape")
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s).expect("same shape")
    }

    /// Sums over broadcast axes down to `(rows, cols)`.
    pub fn sum_to(&mut self, a: Var, rows: usize, cols: usize) -> Res {
        let s = self.shape(a).to_vec();
        if (rows != 1 && rows != s[0]) || (cols != 1 && cols != s[1]) {
            return Err(AutodiffError::ShapeMismatch {
                op: "sum_to",
                lhs: s,
                rhs: vec![rows, cols],
            });
        }
        if s[0] == rows && s[1] == cols {
            return Ok(a);
        }
        let value = sum_values(self.value(a), rows, cols);
        Ok(self.push(Op::SumTo(a.0), value))
    }

    pub fn broadcast_to(&mut self, a: Var, rows: usize, cols: usize) -> Res {
        let s = self.shape(a).to_vec();
        if (s[0] != 1 && s[0] != rows) || (s[1] != 1 && s[1] != cols) {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_to",
                lhs: s,
                rhs: vec![rows, cols],
            });
        }
        if s[0] == rows && s[1] == cols {
            return Ok(a);
        }
        let value = broadcast_values(self.value(a), rows, cols);
        Ok(self.push(Op::BroadcastTo(a.0), value))
    }

    /// Sum of all entries as a `[1, 1]` node.
    pub fn sum(&mut self, a: Var) -> Var {
        self.sum_to(a, 1, 1).expect("reduction to scalar")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis` (0 = down the rows, 1 = along each row).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Res {
        let s = self.shape(a).to_vec();
        match axis {
            0 => self.sum_to(a, 1, s[1]),
            1 => self.sum_to(a, s[0], 1),
            _ => Err(AutodiffError::AxisOutOfRange {
                op: "sum_axis",
                axis,
                rank: 2,
            }),
        }
    }

    /// Row-wise dot product of two `[m, n]` matrices, giving `[m, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Res {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "row_dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let p = self.mul(a, b)?;
        self.sum_axis(p, 1)
    }

    /// Euclidean norm along `axis`; the gradient at a zero vector is zero.
    pub fn norm(&mut self, a: Var, axis: usize) -> Res {
        match axis {
            1 => {
                let value = Tensor::column(&self.value(a).row_norms());
                Ok(self.push(Op::NormRows(a.0), value))
            }
            0 => {
                let t = self.transpose(a);
                let n = self.norm(t, 1)?;
                Ok(self.transpose(n))
            }
            _ => Err(AutodiffError::AxisOutOfRange {
                op: "norm",
                axis,
                rank: 2,
            }),
        }
    }

    /// Pairwise Euclidean distances between rows: `[B, D] x [R, D] -> [B, R]`.
    pub fn cdist(&mut self, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa[1] != sb[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "cdist",
                lhs: sa,
                rhs: sb,
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(sa[0] * sb[0]);
        for i in 0..sa[0] {
            let x = av.row_slice(i);
            for j in 0..sb[0] {
                let y = bv.row_slice(j);
                let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
                out.push(d2.sqrt());
            }
        }
        let value = Tensor::matrix(sa[0], sb[0], out);
        Ok(self.push(Op::Cdist(a.0, b.0), value))
    }

    /// Softmax along `axis`, shifted by the (detached) maximum for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Res {
        match axis {
            1 => {
                let v = self.value(a);
                let maxes: Vec<f64> = (0..v.rows())
                    .map(|r| v.row_slice(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                    .collect();
                let m = self.constant(Tensor::column(&maxes));
                let shifted = self.sub(a, m)?;
                let e = self.exp(shifted);
                let s = self.sum_axis(e, 1)?;
                self.div(e, s)
            }
            0 => {
                let t = self.transpose(a);
                let s = self.softmax(t, 1)?;
                Ok(self.transpose(s))
            }
            _ => Err(AutodiffError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: 2,
            }),
        }
    }

    /// Batch normalization over the rows using the batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Res {
        let n = self.shape(x)[0] as f64;
        let s = self.sum_axis(x, 0)?;
        let mean = self.scale(s, 1.0 / n);
        let centered = self.sub(x, mean)?;
        let sq = self.mul(centered, centered)?;
        let ss = self.sum_axis(sq, 0)?;
        let var = self.scale(ss, 1.0 / n);
        let ve = self.add_scalar(var, eps);
        let std = self.sqrt(ve);
        let normed = self.div(centered, std)?;
        let scaled = self.mul(normed, gamma)?;
        self.add(scaled, beta)
    }

    fn mask(&mut self, a: usize, f: impl Fn(f64) -> f64) -> Var {
        let m = self.nodes[a].value.map(f);
        self.constant(m)
    }

    /// Adjoint contributions of node `i` to its parents, given its adjoint `g`.
    fn vjp(&mut self, i: usize, g: Var, need: &[bool]) -> Result<Vec<(usize, Var)>, AutodiffError> {
        use Op::*;
        let op = self.nodes[i].op;
        let y = Var(i);
        let mut out = Vec::with_capacity(2);
        let shape_of = |t: &Tape, n: usize| {
            let s = t.nodes[n].value.shape();
            (s[0], s[1])
        };
        match op {
            Leaf => {}
            MatMul(a, b) => {
                if need[a] {
                    let bt = self.transpose(Var(b));
                    out.push((a, self.matmul(g, bt)?));
                }
                if need[b] {
                    let at = self.transpose(Var(a));
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Transpose(a) => out.push((a, self.transpose(g))),
            Add(a, b) | Sub(a, b) => {
                if need[a] {
                    let (r, c) = shape_of(self, a);
                    out.push((a, self.sum_to(g, r, c)?));
                }
                if need[b] {
                    let (r, c) = shape_of(self, b);
                    let gb = if matches!(op, Sub(..)) { self.neg(g) } else { g };
                    out.push((b, self.sum_to(gb, r, c)?));
                }
            }
            Mul(a, b) => {
                if need[a] {
                    let (r, c) = shape_of(self, a);
                    let p = self.mul(g, Var(b))?;
                    out.push((a, self.sum_to(p, r, c)?));
                }
                if need[b] {
                    let (r, c) = shape_of(self, b);
                    let p = self.mul(g, Var(a))?;
                    out.push((b, self.sum_to(p, r, c)?));
                }
            }
            Div(a, b) => {
                if need[a] {
                    let (r, c) = shape_of(self, a);
                    let q = self.div(g, Var(b))?;
                    out.push((a, self.sum_to(q, r, c)?));
                }
                if need[b] {
                    let (r, c) = shape_of(self, b);
                    let gy = self.mul(g, y)?;
                    let q = self.div(gy, Var(b))?;
                    let nq = self.neg(q);
                    out.push((b, self.sum_to(nq, r, c)?));
                }
            }
            Neg(a) => out.push((a, self.neg(g))),
            Scale(a, s) => out.push((a, self.scale(g, s))),
            AddScalar(a) => out.push((a, g)),
            Exp(a) => out.push((a, self.mul(g, y)?)),
            Log(a) => out.push((a, self.div(g, Var(a))?)),
            Sqrt(a) => {
                let h = self.scale(g, 0.5);
                out.push((a, self.div(h, y)?));
            }
            RecipSafe(a) => {
                let yy = self.mul(y, y)?;
                let p = self.mul(g, yy)?;
                out.push((a, self.neg(p)));
            }
            Sigmoid(a) => {
                let ny = self.neg(y);
                let one_minus = self.add_scalar(ny, 1.0);
                let d = self.mul(y, one_minus)?;
                out.push((a, self.mul(g, d)?));
            }
            Softplus(a) => {
                let s = self.sigmoid(Var(a));
                out.push((a, self.mul(g, s)?));
            }
            Relu(a) => {
                let m = self.mask(a, |x| if x > 0.0 { 1.0 } else { 0.0 });
                out.push((a, self.mul(g, m)?));
            }
            LeakyRelu(a, slope) => {
                let m = self.mask(a, |x| if x > 0.0 { 1.0 } else { slope });
                out.push((a, self.mul(g, m)?));
            }
            Clamp(a, lo, hi) => {
                let m = self.mask(a, |x| if x > lo && x < hi { 1.0 } else { 0.0 });
                out.push((a, self.mul(g, m)?));
            }
            SmoothL1(a) => {
                let d = self.clamp(Var(a), -1.0, 1.0);
                out.push((a, self.mul(g, d)?));
            }
            SumTo(a) => {
                let (r, c) = shape_of(self, a);
                out.push((a, self.broadcast_to(g, r, c)?));
            }
            BroadcastTo(a) => {
                let (r, c) = shape_of(self, a);
                out.push((a, self.sum_to(g, r, c)?));
            }
            NormRows(a) => {
                let (r, c) = shape_of(self, a);
                let inv = self.recip_safe(y);
                let w = self.mul(g, inv)?;
                let wb = self.broadcast_to(w, r, c)?;
                out.push((a, self.mul(Var(a), wb)?));
            }
            Cdist(a, b) => {
                let (ra, ca) = shape_of(self, a);
                let (rb, _) = shape_of(self, b);
                let inv = self.recip_safe(y);
                let w = self.mul(g, inv)?;
                if need[a] {
                    let ws = self.sum_to(w, ra, 1)?;
                    let wsb = self.broadcast_to(ws, ra, ca)?;
                    let t1 = self.mul(Var(a), wsb)?;
                    let t2 = self.matmul(w, Var(b))?;
                    out.push((a, self.sub(t1, t2)?));
                }
                if need[b] {
                    let ws = self.sum_to(w, 1, rb)?;
                    let wst = self.transpose(ws);
                    let wsb = self.broadcast_to(wst, rb, ca)?;
                    let t1 = self.mul(Var(b), wsb)?;
                    let wt = self.transpose(w);
                    let t2 = self.matmul(wt, Var(a))?;
                    out.push((b, self.sub(t1, t2)?));
                }
            }
        }
        Ok(out)
    }

    /// Reverse sweep from `output`; returns the (graph) adjoint of each `wrt`.
    ///
    /// A non-scalar output is seeded with ones, i.e. the sum is differentiated.
    /// Each node is visited once, in reverse creation (topological) order.
    fn reverse(&mut self, output: Var, wrt: &[Var], hooks: &[GradHook<'_>]) -> Result<Vec<Option<Var>>, AutodiffError> {
        let n = output.0 + 1;
        if output.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(output.0));
        }
        let mut need = vec![false; n];
        for w in wrt {
            if w.0 >= self.nodes.len() {
                return Err(AutodiffError::UnknownNode(w.0));
            }
            if w.0 < n {
                need[w.0] = true;
            }
        }
        for i in 0..n {
            if !need[i] {
                need[i] = self.nodes[i].op.parents().iter().flatten().any(|&p| need[p]);
            }
        }
        let mut ancestor = vec![false; n];
        ancestor[output.0] = true;
        for i in (0..n).rev() {
            if ancestor[i] {
                for &p in self.nodes[i].op.parents().iter().flatten() {
                    ancestor[p] = true;
                }
            }
        }
        for (i, flag) in need.iter_mut().enumerate() {
            *flag = *flag && ancestor[i] && self.nodes[i].requires_grad;
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        if need[output.0] {
            let (r, c) = self.value(output).dims2();
            adjoint[output.0] = Some(self.constant(Tensor::ones(r, c)));
        }
        for i in (0..n).rev() {
            if !need[i] {
                continue;
            }
            let Some(mut g) = adjoint[i] else { continue };
            if let Some(hook) = hooks.iter().find(|h| h.node.0 == i) {
                let before = self.value(g).clone();
                let after = (hook.transform)(&before);
                if after.shape() != before.shape() {
                    return Err(AutodiffError::HookShape { node: i });
                }
                g = self.constant(after);
                adjoint[i] = Some(g);
            }
            for (p, contrib) in self.vjp(i, g, &need)? {
                adjoint[p] = Some(match adjoint[p] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| if w.0 < n { adjoint[w.0] } else { None })
            .collect())
    }

    /// Differentiable gradient of `output` with respect to each of `wrt`.
    ///
    /// The returned nodes live on this tape and can be used in further
    /// computations, including another call to `grad` or [`Tape::backward`].
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        let adj = self.reverse(output, wrt, &[])?;
        wrt.iter()
            .zip(adj)
            .map(|(w, a)| {
                a.ok_or(AutodiffError::NotReachable {
                    node: w.0,
                    output: output.0,
                })
            })
            .collect()
    }

    /// Numeric gradients of `output` with respect to `wrt`, applying `hooks`.
    ///
    /// Targets that `output` does not depend on receive zeros. Nodes created by
    /// the sweep are discarded afterwards.
    pub fn backward(&mut self, output: Var, wrt: &[Var], hooks: &[GradHook<'_>]) -> Result<Vec<Tensor>, AutodiffError> {
        let mark = self.nodes.len();
        let adj = self.reverse(output, wrt, hooks);
        let result = adj.map(|adj| {
            wrt.iter()
                .zip(adj)
                .map(|(w, a)| match a {
                    Some(a) => self.value(a).clone(),
                    None => {
                        let (r, c) = self.value(*w).dims2();
                        Tensor::zeros(r, c)
                    }
                })
                .collect()
        });
        self.nodes.truncate(mark);
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.var(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y, &[x], &[]).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut t = Tape::new();
        let x = t.var(Tensor::scalar(2.0));
        let x2 = t.mul(x, x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let d1 = t.grad(x3, &[x]).unwrap()[0];
        assert_eq!(t.value(d1).item(), 12.0);
        let d2 = t.grad(d1, &[x]).unwrap()[0];
        assert_eq!(t.value(d2).item(), 12.0);
    }

    #[test]
    fn unreachable_target_is_an_error_for_grad_and_zero_for_backward() {
        let mut t = Tape::new();
        let x = t.var(Tensor::scalar(1.0));
        let z = t.var(Tensor::row(&[1.0, 2.0]));
        let y = t.exp(x);
        assert!(matches!(
            t.grad(y, &[z]),
            Err(AutodiffError::NotReachable { .. })
        ));
        let g = t.backward(y, &[z], &[]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_discards_sweep_nodes() {
        let mut t = Tape::new();
        let x = t.var(Tensor::scalar(1.5));
        let y = t.sigmoid(x);
        let before = t.len();
        t.backward(y, &[x], &[]).unwrap();
        assert_eq!(t.len(), before);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut t = Tape::new();
        let x = t.var(Tensor::matrix(3, 2, vec![1.0; 6]));
        let b = t.var(Tensor::row(&[0.5, -0.5]));
        let y = t.add(x, b).unwrap();
        let g = t.backward(y, &[b], &[]).unwrap();
        assert_eq!(g[0].data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        let c = t.constant(Tensor::zeros(3, 2));
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn axis_out_of_range() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        assert!(matches!(
            t.softmax(a, 2),
            Err(AutodiffError::AxisOutOfRange { .. })
        ));
        assert!(t.norm(a, 5).is_err());
        assert!(t.sum_axis(a, 2).is_err());
    }

    #[test]
    fn zero_clip_hook_blocks_everything_upstream() {
        let mut t = Tape::new();
        let w = t.var(Tensor::row(&[0.3, -1.2]));
        let x = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let wt = t.transpose(w);
        let y = t.matmul(x, wt).unwrap();
        let act = t.softplus(y);
        let loss = t.mean(act);
        let hook = GradHook::clip_rows(y, vec![0.0, 0.0]);
        let g = t.backward(loss, &[w], &[hook]).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }
}
