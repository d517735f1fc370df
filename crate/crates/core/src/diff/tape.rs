use std::borrow::Cow;

use super::{all_finite, Gradients, ParamArray, ParamKey, Real};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    /// Exact form `x·Φ(x)`.
    Gelu,
    Sigmoid,
    /// `exp(clamp(x, lo, hi))`; zero derivative outside the clamp.
    TruncExp {
        lo: f64,
        hi: f64,
    },
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1/√(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let half = T::lit(0.5);
                x * half * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::TruncExp { lo, hi } => x.max(T::lit(lo)).min(T::lit(hi)).exp(),
        }
    }

    /// Derivative given the input `x` and the forward output `y`.
    #[inline]
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let cdf = T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
                let pdf = T::lit(INV_SQRT_2PI) * (T::lit(-0.5) * x * x).exp();
                cdf + x * pdf
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::TruncExp { lo, hi } => {
                if x < T::lit(lo) || x > T::lit(hi) {
                    T::zero()
                } else {
                    y
                }
            }
        }
    }
}

/// An operation whose forward value is computed by the caller and whose
/// adjoint is supplied here. `grad_inputs[i]` is `None` for inputs that do
/// not need gradients; otherwise it is a zeroed buffer of the input's size
/// to accumulate into.
pub trait CustomOp<T>: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_out: &[T], grad_inputs: &mut [Option<Vec<T>>]);
}

enum Op<'p, T> {
    Const,
    Param(ParamKey),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Act(usize, Activation),
    Add(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Vec<T>),
    Scale(usize, T),
    Concat(usize, usize),
    Slice {
        src: usize,
        start: usize,
    },
    Sum(usize),
    Mse {
        pred: usize,
        target: Vec<T>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<T> + 'p>,
    },
}

struct Node<'p, T: Clone> {
    value: Cow<'p, [T]>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op<'p, T>,
}

/// Ordered record of forward operations.
///
/// Borrowed parameters must outlive the tape. A tape is single-threaded;
/// independent tapes may run in parallel.
pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.idx].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    fn push(&mut self, value: Cow<'p, [T]>, rows: usize, cols: usize, needs_grad: bool, op: Op<'p, T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            rows,
            cols,
            needs_grad,
            op,
        });
        Var { idx, rows, cols }
    }

    fn grad_any(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, values: Vec<T>, rows: usize, cols: usize) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "constant of {} values cannot be {rows}×{cols}",
                values.len()
            )));
        }
        Ok(self.push(Cow::Owned(values), rows, cols, false, Op::Const))
    }

    /// A differentiable leaf that borrows a parameter's values.
    pub fn param(&mut self, p: &'p ParamArray<T>) -> Var {
        let (rows, cols) = p.dims();
        self.push(Cow::Borrowed(&p.values), rows, cols, true, Op::Param(p.key))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::Shape(format!(
                "matmul {}×{} by {}×{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        if !all_finite(self.value(a)) || !all_finite(self.value(b)) {
            return Err(Error::Numeric("non-finite matmul input".into()));
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let g = self.grad_any(&[a.idx, b.idx]);
        Ok(self.push(Cow::Owned(out), m, n, g, Op::MatMul(a.idx, b.idx)))
    }

    /// Adds a `1×n` row to every row of an `m×n` value.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(Error::Shape(format!(
                "row broadcast of {}×{} onto {}×{}",
                row.rows, row.cols, a.rows, a.cols
            )));
        }
        let r = self.value(row);
        let out: Vec<T> = self
            .value(a)
            .chunks_exact(a.cols.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, b)| *x + *b))
            .collect();
        let g = self.grad_any(&[a.idx, row.idx]);
        Ok(self.push(Cow::Owned(out), a.rows, a.cols, g, Op::AddRow(a.idx, row.idx)))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|&x| act.apply(x)).collect();
        let g = self.nodes[a.idx].needs_grad;
        self.push(Cow::Owned(out), a.rows, a.cols, g, Op::Act(a.idx, act))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Sigmoid)
    }

    fn same_shape(a: Var, b: Var, what: &str) -> Result<()> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(Error::Shape(format!(
                "{what} of {}×{} and {}×{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let g = self.grad_any(&[a.idx, b.idx]);
        Ok(self.push(Cow::Owned(out), a.rows, a.cols, g, Op::Add(a.idx, b.idx)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let g = self.grad_any(&[a.idx, b.idx]);
        Ok(self.push(Cow::Owned(out), a.rows, a.cols, g, Op::Mul(a.idx, b.idx)))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != a.len() {
            return Err(Error::Shape(format!(
                "constant factor of {} values for {}×{}",
                c.len(),
                a.rows,
                a.cols
            )));
        }
        let out = self.value(a).iter().zip(&c).map(|(x, y)| *x * *y).collect();
        let g = self.nodes[a.idx].needs_grad;
        Ok(self.push(Cow::Owned(out), a.rows, a.cols, g, Op::MulConst(a.idx, c)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|x| *x * s).collect();
        let g = self.nodes[a.idx].needs_grad;
        self.push(Cow::Owned(out), a.rows, a.cols, g, Op::Scale(a.idx, s))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.rows != b.rows {
            return Err(Error::Shape(format!("concat of {} and {} rows", a.rows, b.rows)));
        }
        let cols = a.cols + b.cols;
        let mut out = Vec::with_capacity(a.rows * cols);
        let (va, vb) = (self.value(a), self.value(b));
        for r in 0..a.rows {
            out.extend_from_slice(&va[r * a.cols..(r + 1) * a.cols]);
            out.extend_from_slice(&vb[r * b.cols..(r + 1) * b.cols]);
        }
        let g = self.grad_any(&[a.idx, b.idx]);
        Ok(self.push(Cow::Owned(out), a.rows, cols, g, Op::Concat(a.idx, b.idx)))
    }

    /// Columns `start..start+len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > a.cols {
            return Err(Error::Shape(format!(
                "column slice {start}..{} of {} columns",
                start + len,
                a.cols
            )));
        }
        let va = self.value(a);
        let mut out = Vec::with_capacity(a.rows * len);
        for r in 0..a.rows {
            out.extend_from_slice(&va[r * a.cols + start..r * a.cols + start + len]);
        }
        let g = self.nodes[a.idx].needs_grad;
        Ok(self.push(Cow::Owned(out), a.rows, len, g, Op::Slice { src: a.idx, start }))
    }

    /// Sum of all entries as a `1×1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, v| acc + *v);
        let g = self.nodes[a.idx].needs_grad;
        self.push(Cow::Owned(vec![s]), 1, 1, g, Op::Sum(a.idx))
    }

    /// Mean squared error against a constant target, as a `1×1` value.
    pub fn mse(&mut self, pred: Var, target: Vec<T>) -> Result<Var> {
        if target.len() != pred.len() {
            return Err(Error::Shape(format!(
                "mse of {} predictions against {} targets",
                pred.len(),
                target.len()
            )));
        }
        let n = T::lit(pred.len().max(1) as f64);
        let s = self
            .value(pred)
            .iter()
            .zip(&target)
            .fold(T::zero(), |acc, (p, t)| acc + (*p - *t) * (*p - *t));
        let g = self.nodes[pred.idx].needs_grad;
        Ok(self.push(Cow::Owned(vec![s / n]), 1, 1, g, Op::Mse { pred: pred.idx, target }))
    }

    /// Records a caller-evaluated operation with a custom adjoint.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Vec<T>,
        rows: usize,
        cols: usize,
        op: Box<dyn CustomOp<T> + 'p>,
    ) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} output values for {rows}×{cols} in {}",
                value.len(),
                op.name()
            )));
        }
        let idx: Vec<usize> = inputs.iter().map(|v| v.idx).collect();
        let g = self.grad_any(&idx);
        Ok(self.push(Cow::Owned(value), rows, cols, g, Op::Custom { inputs: idx, op }))
    }

    /// Replays adjoints from `output` (seeded with `seed`) back to the
    /// leaves and returns the parameter gradients. The tape is cleared.
    pub fn backward(&mut self, output: Var, seed: &[T]) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty or already-consumed tape".into()));
        }
        if output.idx >= self.nodes.len() {
            return Err(Error::Usage("output does not belong to this tape".into()));
        }
        if seed.len() != output.len() {
            return Err(Error::Shape(format!(
                "seed of {} values for output {}×{}",
                seed.len(),
                output.rows,
                output.cols
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        adj.resize_with(nodes.len(), || None);
        adj[output.idx] = Some(seed.to_vec());
        let mut grads = Gradients::new();

        for i in (0..=output.idx).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(key) => grads.accumulate(*key, &g),
                Op::MatMul(a, b) => {
                    let (na, nb) = (&nodes[*a], &nodes[*b]);
                    let (m, k, n) = (na.rows, na.cols, nb.cols);
                    if na.needs_grad {
                        // dA = dC · Bᵀ
                        let da = slot(&mut adj, &nodes, *a);
                        T::gemm(m, n, k, &g, false, &nb.value, true, da, true);
                    }
                    if nb.needs_grad {
                        // dB = Aᵀ · dC
                        let db = slot(&mut adj, &nodes, *b);
                        T::gemm(k, m, n, &na.value, true, &g, false, db, true);
                    }
                }
                Op::AddRow(a, row) => {
                    let cols = node.cols;
                    if nodes[*a].needs_grad {
                        add_into(slot(&mut adj, &nodes, *a), &g);
                    }
                    if nodes[*row].needs_grad && cols > 0 {
                        let dr = slot(&mut adj, &nodes, *row);
                        for chunk in g.chunks_exact(cols) {
                            dr.iter_mut().zip(chunk).for_each(|(d, v)| *d += *v);
                        }
                    }
                }
                Op::Act(a, act) => {
                    let x = &nodes[*a].value;
                    let y = &node.value;
                    let da = slot(&mut adj, &nodes, *a);
                    for j in 0..g.len() {
                        da[j] += g[j] * act.derivative(x[j], y[j]);
                    }
                }
                Op::Add(a, b) => {
                    for s in [*a, *b] {
                        if nodes[s].needs_grad {
                            add_into(slot(&mut adj, &nodes, s), &g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        let da = slot(&mut adj, &nodes, *a);
                        for j in 0..g.len() {
                            da[j] += g[j] * vb[j];
                        }
                    }
                    if nodes[*b].needs_grad {
                        let db = slot(&mut adj, &nodes, *b);
                        for j in 0..g.len() {
                            db[j] += g[j] * va[j];
                        }
                    }
                }
                Op::MulConst(a, c) => {
                    let da = slot(&mut adj, &nodes, *a);
                    for j in 0..g.len() {
                        da[j] += g[j] * c[j];
                    }
                }
                Op::Scale(a, s) => {
                    let da = slot(&mut adj, &nodes, *a);
                    for j in 0..g.len() {
                        da[j] += g[j] * *s;
                    }
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (nodes[*a].cols, nodes[*b].cols);
                    let cols = ca + cb;
                    if nodes[*a].needs_grad {
                        let da = slot(&mut adj, &nodes, *a);
                        for r in 0..node.rows {
                            add_into(&mut da[r * ca..(r + 1) * ca], &g[r * cols..r * cols + ca]);
                        }
                    }
                    if nodes[*b].needs_grad {
                        let db = slot(&mut adj, &nodes, *b);
                        for r in 0..node.rows {
                            add_into(&mut db[r * cb..(r + 1) * cb], &g[r * cols + ca..(r + 1) * cols]);
                        }
                    }
                }
                Op::Slice { src, start } => {
                    let src_cols = nodes[*src].cols;
                    let len = node.cols;
                    let ds = slot(&mut adj, &nodes, *src);
                    for r in 0..node.rows {
                        let off = r * src_cols + start;
                        add_into(&mut ds[off..off + len], &g[r * len..(r + 1) * len]);
                    }
                }
                Op::Sum(a) => {
                    let da = slot(&mut adj, &nodes, *a);
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Mse { pred, target } => {
                    let n = T::lit(target.len().max(1) as f64);
                    let p = &nodes[*pred].value;
                    let dp = slot(&mut adj, &nodes, *pred);
                    let two = T::lit(2.0);
                    for j in 0..target.len() {
                        dp[j] += g[0] * two * (p[j] - target[j]) / n;
                    }
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&[T]> = inputs.iter().map(|&s| &*nodes[s].value).collect();
                    let mut gin: Vec<Option<Vec<T>>> = inputs
                        .iter()
                        .map(|&s| nodes[s].needs_grad.then(|| vec![T::zero(); nodes[s].value.len()]))
                        .collect();
                    op.backward(&values, &node.value, &g, &mut gin);
                    for (&s, gi) in inputs.iter().zip(gin) {
                        if let Some(gi) = gi {
                            add_into(slot(&mut adj, &nodes, s), &gi);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn slot<'a, T: Real>(adj: &'a mut [Option<Vec<T>>], nodes: &[Node<'_, T>], idx: usize) -> &'a mut [T] {
    adj[idx].get_or_insert_with(|| vec![T::zero(); nodes[idx].value.len()])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}
