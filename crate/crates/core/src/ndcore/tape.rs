use crate::error::{DmmError, Result};

use super::tensor::Tensor;

/// Lower/upper bound applied to every sigmoid output.
pub const SIGMOID_CLAMP: f32 = 1e-7;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    Reduce(Reduce, Var, Option<usize>),
    Transpose(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    StraightThrough(Var),
    LogSoftmaxRows(Var),
    NormalizeCols(Var),
    Clamp(Var, f32, f32),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert list of primitive operations. Nodes are appended in evaluation
/// order, so operands always precede their results.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records `t` as-is, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a copy of `t` that will receive gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone().with_requires_grad(true);
        t.zero_grad();
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    pub fn scalar(&mut self, value: f32) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Detached copy of `v`: same value, no gradient path.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn result(&self, shape: &[usize], data: Vec<f32>, operands: &[Var]) -> Result<Tensor> {
        let rg = operands.iter().any(|&v| self.needs_grad(v));
        Ok(Tensor::new(shape, data)?.with_requires_grad(rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.value(a).dims2()?;
        let (q2, r) = self.value(b).dims2()?;
        if q != q2 {
            return Err(DmmError::dim(
                "matmul",
                format!("[{p}x{q}] x [{q2}x{r}]"),
            ));
        }
        let mut out = vec![0.0; p * r];
        gemm(
            p,
            q,
            r,
            self.value(a).data(),
            (q, 1),
            self.value(b).data(),
            (r, 1),
            &mut out,
            0.0,
        );
        let t = self.result(&[p, r], out, &[a, b])?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Applies a primitive elementwise op. Binary ops take `Some(rhs)`; the
    /// operands must have equal shapes or one of them must be a single value.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        use Elementwise::*;
        match (op, b) {
            (Add | Sub | Mul, Some(b)) => self.binary(op, a, b),
            (Relu | Sigmoid | Log | Square, None) => self.unary(op, a),
            _ => Err(DmmError::Contract(format!("{op:?}: wrong operand count"))),
        }
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta, tb)?;
        let f: fn(f32, f32) -> f32 = match op {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
            _ => unreachable!(),
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let out = (0..n)
            .map(|i| f(da[i % da.len()], db[i % db.len()]))
            .collect();
        let t = self.result(&shape, out, &[a, b])?;
        Ok(self.push(t, Op::Binary(op, a, b)))
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let f: fn(f32) -> f32 = match op {
            Elementwise::Relu => |x| x.max(0.0),
            Elementwise::Sigmoid => |x| {
                (1.0 / (1.0 + (-x).exp())).clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
            },
            Elementwise::Log => f32::ln,
            Elementwise::Square => |x| x * x,
            _ => unreachable!(),
        };
        let out = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        let t = self.result(&shape, out, &[a])?;
        Ok(self.push(t, Op::Unary(op, a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Relu, a).expect("unary op")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Sigmoid, a).expect("unary op")
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Log, a).expect("unary op")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Square, a).expect("unary op")
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let s = self.scalar(factor);
        self.mul(a, s).expect("scalar broadcast")
    }

    pub fn reduce(&mut self, op: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let ta = self.value(a);
        let (shape, out) = match axis {
            None => {
                let s: f64 = ta.data().iter().map(|&v| v as f64).sum();
                let v = match op {
                    Reduce::Sum => s,
                    Reduce::Mean => s / ta.numel() as f64,
                };
                (vec![1], vec![v as f32])
            }
            Some(ax) => {
                if ax >= ta.rank() {
                    return Err(DmmError::dim(
                        "reduce",
                        format!("axis {ax} out of range for shape {:?}", ta.shape()),
                    ));
                }
                let (outer, len, inner) = split_axis(ta.shape(), ax);
                let mut acc = vec![0.0f64; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        for i in 0..inner {
                            acc[o * inner + i] += ta.data()[base + i] as f64;
                        }
                    }
                }
                let div = if op == Reduce::Mean { len as f64 } else { 1.0 };
                let mut shape: Vec<usize> = ta.shape().to_vec();
                shape.remove(ax);
                if shape.is_empty() {
                    shape.push(1);
                }
                (shape, acc.into_iter().map(|v| (v / div) as f32).collect())
            }
        };
        let t = self.result(&shape, out, &[a])?;
        Ok(self.push(t, Op::Reduce(op, a, axis)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Sum, a, None).expect("full reduction")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Mean, a, None).expect("full reduction")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let shape = t.shape().to_vec();
        let t = self.result(&shape, t.into_data(), &[a])?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(DmmError::dim("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        let t = self.result(&[ra, ca + cb], out, &[a, b])?;
        Ok(self.push(t, Op::ConcatCols(a, b)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if start >= end || end > cols {
            return Err(DmmError::dim(
                "slice_cols",
                format!("{start}..{end} of {cols} columns"),
            ));
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&self.value(a).row(r)[start..end]);
        }
        let t = self.result(&[rows, end - start], out, &[a])?;
        Ok(self.push(t, Op::SliceCols(a, start)))
    }

    /// Forward value is `replacement`; the backward pass copies the incoming
    /// gradient into `source` unchanged. `replacement` itself is not on the
    /// tape, so nothing flows back to whatever produced it.
    pub fn straight_through(&mut self, source: Var, replacement: Tensor) -> Result<Var> {
        if replacement.shape() != self.value(source).shape() {
            return Err(DmmError::dim(
                "straight_through",
                format!("{:?} vs {:?}", replacement.shape(), self.value(source).shape()),
            ));
        }
        let shape = replacement.shape().to_vec();
        let t = self.result(&shape, replacement.into_data(), &[source])?;
        Ok(self.push(t, Op::StraightThrough(source)))
    }

    /// Elementwise clamp to `[lo, hi]`; no gradient flows where the bound
    /// is active.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = ta.shape().to_vec();
        let t = self.result(&shape, out, &[a]).expect("same shape");
        self.push(t, Op::Clamp(a, lo, hi))
    }

    /// Row-wise `x - logsumexp(x)`, computed with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = self.value(a).row(r);
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&x| (x as f64 - lse) as f32));
        }
        let t = self.result(&[rows, cols], out, &[a])?;
        Ok(self.push(t, Op::LogSoftmaxRows(a)))
    }

    /// Divides every column by its Euclidean norm.
    pub fn normalize_cols(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        let norms = column_norms(self.value(a));
        if let Some(j) = norms.iter().position(|&n| n == 0.0) {
            return Err(DmmError::DegenerateCode(j));
        }
        let src = self.value(a).data();
        let out = (0..rows * cols)
            .map(|i| (src[i] as f64 / norms[i % cols]) as f32)
            .collect();
        let t = self.result(&[rows, cols], out, &[a])?;
        Ok(self.push(t, Op::NormalizeCols(a)))
    }

    /// Reverse pass from a single-element `root`. Gradients are added into
    /// every reachable tensor that requires them; calling this twice without
    /// [`Tape::zero_grads`] doubles them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rt = self.value(root);
        if rt.numel() != 1 {
            return Err(DmmError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rt.shape()
            )));
        }
        if !rt.requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let op = self.nodes[idx].op;
            self.propagate(idx, op, &g, &mut grads);
            self.nodes[idx].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, op: Op, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = &self.nodes[idx].value;
        let mut send = |v: Var, contribution: Vec<f32>| {
            if !self.needs_grad(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (p, q) = ta.dims2().unwrap();
                let r = tb.shape()[1];
                if self.needs_grad(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; p * q];
                    gemm(p, r, q, g, (r, 1), tb.data(), (1, r), &mut da, 0.0);
                    send(a, da);
                }
                if self.needs_grad(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; q * r];
                    gemm(q, p, r, ta.data(), (1, q), g, (r, 1), &mut db, 0.0);
                    send(b, db);
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (da, db) = (ta.data(), tb.data());
                let (ga, gb): (Vec<f32>, Vec<f32>) = match kind {
                    Elementwise::Add => (g.to_vec(), g.to_vec()),
                    Elementwise::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Elementwise::Mul => (
                        (0..g.len()).map(|i| g[i] * db[i % db.len()]).collect(),
                        (0..g.len()).map(|i| g[i] * da[i % da.len()]).collect(),
                    ),
                    _ => unreachable!(),
                };
                send(a, unbroadcast(ga, ta.numel()));
                send(b, unbroadcast(gb, tb.numel()));
            }
            Op::Unary(kind, a) => {
                let x = self.value(a).data();
                let y = out.data();
                let ga = match kind {
                    Elementwise::Relu => (0..g.len())
                        .map(|i| if x[i] > 0.0 { g[i] } else { 0.0 })
                        .collect(),
                    // Uses the clamped output, so log(sigmoid) keeps a useful
                    // gradient on saturated units.
                    Elementwise::Sigmoid => (0..g.len()).map(|i| g[i] * y[i] * (1.0 - y[i])).collect(),
                    Elementwise::Log => (0..g.len()).map(|i| g[i] / x[i]).collect(),
                    Elementwise::Square => (0..g.len()).map(|i| 2.0 * x[i] * g[i]).collect(),
                    _ => unreachable!(),
                };
                send(a, ga);
            }
            Op::Reduce(kind, a, axis) => {
                let ta = self.value(a);
                let ga = match axis {
                    None => {
                        let v = match kind {
                            Reduce::Sum => g[0],
                            Reduce::Mean => g[0] / ta.numel() as f32,
                        };
                        vec![v; ta.numel()]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(ta.shape(), ax);
                        let div = if kind == Reduce::Mean { len as f32 } else { 1.0 };
                        let mut ga = vec![0.0; ta.numel()];
                        for o in 0..outer {
                            for k in 0..len {
                                let base = (o * len + k) * inner;
                                for i in 0..inner {
                                    ga[base + i] = g[o * inner + i] / div;
                                }
                            }
                        }
                        ga
                    }
                };
                send(a, ga);
            }
            Op::Transpose(a) => {
                let (r, c) = out.dims2().unwrap();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                send(a, ga);
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = self.value(a).dims2().unwrap();
                let cb = self.value(b).shape()[1];
                let width = ca + cb;
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    ga.extend_from_slice(&g[r * width..r * width + ca]);
                    gb.extend_from_slice(&g[r * width + ca..(r + 1) * width]);
                }
                send(a, ga);
                send(b, gb);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(a).dims2().unwrap();
                let w = out.shape()[1];
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    ga[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(a, ga);
            }
            Op::StraightThrough(src) => send(src, g.to_vec()),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(a).data();
                let ga = (0..g.len())
                    .map(|i| if x[i] >= lo && x[i] <= hi { g[i] } else { 0.0 })
                    .collect();
                send(a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let (rows, cols) = out.dims2().unwrap();
                let y = out.data();
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = r * cols..(r + 1) * cols;
                    let gsum: f64 = g[row.clone()].iter().map(|&v| v as f64).sum();
                    for i in row {
                        ga[i] = (g[i] as f64 - (y[i] as f64).exp() * gsum) as f32;
                    }
                }
                send(a, ga);
            }
            Op::NormalizeCols(a) => {
                let ta = self.value(a);
                let (rows, cols) = ta.dims2().unwrap();
                let norms = column_norms(ta);
                let y = out.data();
                let mut ga = vec![0.0; rows * cols];
                for j in 0..cols {
                    let dot: f64 = (0..rows).map(|i| y[i * cols + j] as f64 * g[i * cols + j] as f64).sum();
                    for i in 0..rows {
                        let k = i * cols + j;
                        ga[k] = ((g[k] as f64 - y[k] as f64 * dot) / norms[j]) as f32;
                    }
                }
                send(a, ga);
            }
        }
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(DmmError::dim(
            "elementwise",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

fn unbroadcast(g: Vec<f32>, numel: usize) -> Vec<f32> {
    if numel == g.len() {
        g
    } else {
        vec![g.iter().map(|&v| v as f64).sum::<f64>() as f32]
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln()
}

pub(crate) fn column_norms(t: &Tensor) -> Vec<f64> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    (0..cols)
        .map(|j| (0..rows).map(|i| (d[i * cols + j] as f64).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// `c = a·b + beta·c` with explicit (row, col) strides for `a` and `b`;
/// `c` is dense row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every index sgemm touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
