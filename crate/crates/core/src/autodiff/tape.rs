use std::collections::HashMap;

use super::tensor::gemm;
use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Sin,
    Cos,
    Sigmoid,
    Softplus,
    Relu,
    Abs,
    Powf(f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
            Unary::Abs => "abs",
            Unary::Powf(_) => "pow",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::Abs => x.abs(),
            Unary::Powf(p) => x.powf(p),
        }
    }

    /// dy/dx given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Powf(p) => p * x.powf(p - 1.0),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Backward rule for an operation implemented outside this module.
///
/// `grad` is the adjoint of the op's output. The result holds one optional
/// adjoint per input, in input order; `None` means no contribution.
pub trait CustomBackward {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Sum(Var),
    Mean(Var),
    RowNorm(Var),
    NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    Reshape(Var),
    RowsMulCol(Var, Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(_, u) => u.name(),
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowNorm(..) => "row_norm",
            Op::NormalizeRows(..) => "normalize",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::RowsMulCol(..) => "rows_mul_col",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are created in evaluation order, so every input precedes its
/// consumers and the reverse sweep visits nodes in exact reverse creation
/// order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: HashMap<ParamId, Var>,
    first_nonfinite: Option<usize>,
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some(self.nodes.len());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Fails with the first node whose forward value contained NaN or ±∞.
    pub fn check_finite(&self) -> Result<(), AutodiffError> {
        match self.first_nonfinite {
            None => Ok(()),
            Some(i) => Err(AutodiffError::NonFinite { node: i, op: self.nodes[i].op.name() }),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.leaves.insert(id, v);
        v
    }

    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        self.push(output, Op::Custom { inputs, rule })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch in {}", op.name());
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect());
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + s).collect());
        self.push(out, Op::AddScalar(a))
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| u.apply(x)).collect());
        self.push(out, Op::Unary(a, u))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Unary::Powf(p))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        assert_eq!(k, tb.rows(), "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        self.push(Tensor::new([m, n], out), Op::MatMul(a, b))
    }

    /// Adds a `[n]`/`[1, n]` row to every row of a `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        assert_eq!(tr.len(), n, "add_row width mismatch");
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row `i` of `a: [m, n]` by `col[i]` (`col: [m, 1]`).
    pub fn rows_mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        let n = ta.cols();
        assert_eq!(tc.len(), ta.rows(), "rows_mul_col height mismatch");
        let mut data = ta.data().to_vec();
        for (chunk, s) in data.chunks_mut(n).zip(tc.data()) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(out, Op::RowsMulCol(a, col))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Euclidean norm of every row: `[m, n] -> [m, 1]`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.rows();
        let data = (0..m).map(|i| t.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        self.push(Tensor::new([m, 1], data), Op::RowNorm(a))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut data = t.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)).take(m) {
            let norm = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
            chunk.iter_mut().for_each(|x| *x /= norm);
        }
        let out = Tensor::new(t.shape().to_vec(), data);
        self.push(out, Op::NormalizeRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                assert_eq!(t.rows(), m, "concat_cols row mismatch");
                t.cols()
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.push(Tensor::new([m, n], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let t = self.value(src);
        let (m, n) = (t.rows(), t.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        self.push(Tensor::new([m, len], data), Op::SliceCols { src, start })
    }

    pub fn reshape(&mut self, src: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(src).clone().reshaped(shape);
        self.push(out, Op::Reshape(src))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(AutodiffError::Usage("backward called before any forward computation".into()));
        }
        self.check_finite()?;
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NotScalar { shape: lt.shape().to_vec() });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adj, leaves: self.leaves.clone() })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, g);
                accumulate(adj, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(adj, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                accumulate(adj, *a, &ga);
                accumulate(adj, *b, &gb);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                accumulate(adj, *a, &ga);
            }
            Op::AddScalar(a) => accumulate(adj, *a, g),
            Op::Unary(a, u) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let ga: Vec<f64> =
                    g.iter().zip(x.iter().zip(y)).map(|(g, (&x, &y))| g * u.derivative(x, y)).collect();
                accumulate(adj, *a, &ga);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, tb.data(), true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g, false, &mut gb, false);
                accumulate(adj, *a, &ga);
                accumulate(adj, *b, &gb);
            }
            Op::AddRow(a, row) => {
                accumulate(adj, *a, g);
                let n = self.value(*row).len();
                let mut gr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (acc, v) in gr.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                accumulate(adj, *row, &gr);
            }
            Op::RowsMulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let n = ta.cols();
                let mut ga = g.to_vec();
                let mut gc = vec![0.0; tc.len()];
                for (r, (chunk, s)) in ga.chunks_mut(n).zip(tc.data()).enumerate() {
                    let xr = ta.row_slice(r);
                    gc[r] = chunk.iter().zip(xr).map(|(g, x)| g * x).sum();
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                accumulate(adj, *a, &ga);
                accumulate(adj, *col, &gc);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(adj, *a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(adj, *a, &vec![g[0] / n as f64; n]);
            }
            Op::RowNorm(a) => {
                let t = self.value(*a);
                let n = t.cols();
                let norms = node.value.data();
                let mut ga = vec![0.0; t.len()];
                for (r, chunk) in ga.chunks_mut(n).enumerate() {
                    // Subgradient 0 at the origin.
                    if norms[r] > 0.0 {
                        let s = g[r] / norms[r];
                        for (o, x) in chunk.iter_mut().zip(t.row_slice(r)) {
                            *o = s * x;
                        }
                    }
                }
                accumulate(adj, *a, &ga);
            }
            Op::NormalizeRows(a) => {
                let t = self.value(*a);
                let n = t.cols();
                let y = &node.value;
                let mut ga = vec![0.0; t.len()];
                for (r, chunk) in ga.chunks_mut(n).enumerate() {
                    let x = t.row_slice(r);
                    let yr = y.row_slice(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        chunk[j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                accumulate(adj, *a, &ga);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gp.extend_from_slice(&g[r * n + offset..r * n + offset + w]);
                    }
                    accumulate(adj, p, &gp);
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let t = self.value(*src);
                let (m, n) = (t.rows(), t.cols());
                let w = node.value.cols();
                let mut gs = vec![0.0; m * n];
                for r in 0..m {
                    gs[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                accumulate(adj, *src, &gs);
            }
            Op::Reshape(src) => accumulate(adj, *src, g),
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = rule.backward(&vals, &node.value, g);
                debug_assert_eq!(grads.len(), inputs.len());
                for (&v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        accumulate(adj, v, &gv);
                    }
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(existing) => {
            debug_assert_eq!(existing.len(), g.len());
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
    leaves: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adj.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, zero-filled to `len` when unreached.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.leaves.get(&id).and_then(|&v| self.get(v))
    }

    /// Adds the adjoints of all learnable parameter leaves into their `grad` slots.
    /// Non-learnable parameters are left untouched (zero gradient).
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let mut ids: Vec<_> = self.leaves.keys().copied().collect();
        ids.sort();
        for id in ids {
            let p = store.get_mut(id);
            if !p.learnable {
                continue;
            }
            if let Some(g) = self.param(id) {
                for (acc, v) in p.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}
