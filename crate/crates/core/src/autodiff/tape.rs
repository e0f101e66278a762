use std::sync::atomic::{AtomicU64, Ordering};

use super::array::{gemm, log_softmax_rows, sigmoid, softmax_rows, NumericArray};
use super::AutodiffError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Operation kinds. Matrix ops treat rank-1 arrays as a single row and
/// the "column" ops act along the last axis.
#[derive(Clone, Debug)]
pub enum Op {
    /// Input value; only created through [`Tape::leaf`].
    Leaf,
    MatMul { transpose_a: bool, transpose_b: bool },
    Add,
    Sub,
    Mul,
    /// `scale * x + shift`, elementwise.
    Affine { scale: f64, shift: f64 },
    /// Elementwise product with a constant (dropout masks, target masks).
    MulConst(NumericArray),
    /// `[m,n] + [n]` with the row broadcast over `m`.
    AddRow,
    /// `[m,n] -> [1,n]`
    SumRows,
    /// `[1,n] -> [m,n]`
    BroadcastRows(usize),
    /// `[m,n] -> [m,1]`
    SumCols,
    /// `[m,1] -> [m,n]`
    BroadcastCols(usize),
    /// Sum of every element to a scalar.
    Sum,
    /// Scalar broadcast to the given shape.
    Fill(Vec<usize>),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Recip,
    Softmax,
    LogSoftmax,
    /// Column-wise concatenation of 2-D inputs with equal row counts.
    Concat,
    /// Columns `start..start+len`.
    Slice { start: usize, len: usize },
    /// Places the input at columns `start..` of a zero array `total` wide.
    Pad { start: usize, total: usize },
    /// Rows of a table, `ids.len() x cols`. Embedding lookup.
    Gather(Vec<usize>),
    /// Adjoint of `Gather`: accumulates rows into a `rows x cols` zero table.
    ScatterAdd { ids: Vec<usize>, rows: usize },
    Reshape(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::MulConst(_) => "mul_const",
            Op::AddRow => "add_row",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::SumCols => "sum_cols",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Sum => "sum",
            Op::Fill(_) => "fill",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Recip => "recip",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Gather(_) => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: NumericArray,
}

/// Eager reverse-mode tape.
///
/// Every op computes its value immediately and records itself. Nodes only
/// reference earlier nodes, so the node list is already a topological order.
/// [`Tape::grad_graph`] builds the backward pass out of ordinary tape ops,
/// which is what makes a second differentiation possible; [`Tape::backward`]
/// is the plain numeric pass used for the outermost gradient.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg.into())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NumericArray {
        &self.nodes[v.index].value
    }

    pub fn op_of(&self, v: Var) -> &Op {
        &self.nodes[v.index].op
    }

    pub fn inputs_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.index].inputs
    }

    fn check(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignNode);
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: NumericArray) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(op.name()));
        }
        let index = self.nodes.len();
        self.nodes.push(Node { op, inputs, value });
        Ok(Var { tape: self.id, index })
    }

    /// Records an input value. Used for parameters and constants alike;
    /// whether gradients flow to it is decided by the `wrt` list at
    /// differentiation time.
    pub fn leaf(&mut self, value: NumericArray) -> Result<Var, AutodiffError> {
        self.push(Op::Leaf, Vec::new(), value)
    }

    pub fn constant(&mut self, value: NumericArray) -> Result<Var, AutodiffError> {
        self.leaf(value)
    }

    /// Applies `op` to `inputs`, computing and recording the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>, _>>()?;
        let value = self.eval(&op, &idx)?;
        self.push(op, idx, value)
    }

    fn arity(op: &Op, n: usize) -> Result<(), AutodiffError> {
        let want = match op {
            Op::Leaf => return Err(AutodiffError::UnsupportedOp("leaf")),
            Op::Concat => {
                return if n >= 1 {
                    Ok(())
                } else {
                    Err(shape_err("concat needs at least one input"))
                }
            }
            Op::MatMul { .. } | Op::Add | Op::Sub | Op::Mul | Op::AddRow => 2,
            _ => 1,
        };
        if n != want {
            return Err(shape_err(format!("{} takes {} inputs, got {}", op.name(), want, n)));
        }
        Ok(())
    }

    fn eval(&self, op: &Op, idx: &[usize]) -> Result<NumericArray, AutodiffError> {
        Self::arity(op, idx.len())?;
        let val = |i: usize| &self.nodes[idx[i]].value;
        let same_shape = |a: &NumericArray, b: &NumericArray| -> Result<(), AutodiffError> {
            if a.shape() != b.shape() {
                return Err(shape_err(format!(
                    "{}: operand shapes {:?} and {:?} differ",
                    op.name(),
                    a.shape(),
                    b.shape()
                )));
            }
            Ok(())
        };
        Ok(match op {
            Op::Leaf => unreachable!("rejected by arity"),
            Op::MatMul { transpose_a, transpose_b } => gemm(val(0), val(1), *transpose_a, *transpose_b)?,
            Op::Add => {
                same_shape(val(0), val(1))?;
                val(0).zip_map(val(1), |a, b| a + b)
            }
            Op::Sub => {
                same_shape(val(0), val(1))?;
                val(0).zip_map(val(1), |a, b| a - b)
            }
            Op::Mul => {
                same_shape(val(0), val(1))?;
                val(0).zip_map(val(1), |a, b| a * b)
            }
            Op::Affine { scale, shift } => val(0).map(|x| scale * x + shift),
            Op::MulConst(mask) => {
                same_shape(val(0), mask)?;
                val(0).zip_map(mask, |a, b| a * b)
            }
            Op::AddRow => {
                let (m, n) = val(0).dims2()?;
                let (r, c) = val(1).dims2()?;
                if r != 1 || c != n {
                    return Err(shape_err(format!(
                        "add_row: cannot broadcast {:?} over {:?}",
                        val(1).shape(),
                        val(0).shape()
                    )));
                }
                let b = val(1).data();
                let mut out = val(0).data().to_vec();
                for row in out.chunks_mut(n.max(1)).take(m) {
                    for (o, bb) in row.iter_mut().zip(b) {
                        *o += bb;
                    }
                }
                NumericArray::new(val(0).shape().to_vec(), out)?
            }
            Op::SumRows => {
                let (m, n) = val(0).dims2()?;
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for (o, v) in out.iter_mut().zip(&val(0).data()[r * n..(r + 1) * n]) {
                        *o += v;
                    }
                }
                NumericArray::matrix(1, n, out)?
            }
            Op::BroadcastRows(m) => {
                let (r, n) = val(0).dims2()?;
                if r != 1 {
                    return Err(shape_err("broadcast_rows expects a single row"));
                }
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..*m {
                    out.extend_from_slice(val(0).data());
                }
                NumericArray::matrix(*m, n, out)?
            }
            Op::SumCols => {
                let (m, n) = val(0).dims2()?;
                let out = if n == 0 {
                    vec![0.0; m]
                } else {
                    val(0).data().chunks(n).map(|r| r.iter().sum()).collect()
                };
                NumericArray::matrix(m, 1, out)?
            }
            Op::BroadcastCols(n) => {
                let (m, c) = val(0).dims2()?;
                if c != 1 {
                    return Err(shape_err("broadcast_cols expects a single column"));
                }
                let mut out = Vec::with_capacity(m * n);
                for &v in val(0).data() {
                    out.extend(std::iter::repeat(v).take(*n));
                }
                NumericArray::matrix(m, *n, out)?
            }
            Op::Sum => NumericArray::scalar(val(0).sum()),
            Op::Fill(shape) => {
                if !val(0).is_scalar() {
                    return Err(shape_err("fill expects a scalar"));
                }
                NumericArray::full(shape, val(0).item())
            }
            Op::Sigmoid => val(0).map(sigmoid),
            Op::Tanh => val(0).map(f64::tanh),
            Op::Exp => val(0).map(f64::exp),
            Op::Log => val(0).map(f64::ln),
            Op::Recip => val(0).map(|x| 1.0 / x),
            Op::Softmax => {
                let (_, n) = val(0).dims2()?;
                NumericArray::new(val(0).shape().to_vec(), softmax_rows(val(0).data(), n.max(1)))?
            }
            Op::LogSoftmax => {
                let (_, n) = val(0).dims2()?;
                NumericArray::new(val(0).shape().to_vec(), log_softmax_rows(val(0).data(), n.max(1)))?
            }
            Op::Concat => {
                let parts: Vec<&NumericArray> = (0..idx.len()).map(val).collect();
                let dims = parts.iter().map(|p| p.dims2()).collect::<Result<Vec<_>, _>>()?;
                let m = dims[0].0;
                if dims.iter().any(|d| d.0 != m) {
                    return Err(shape_err("concat: row counts differ"));
                }
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(m * total);
                for r in 0..m {
                    for (p, d) in parts.iter().zip(&dims) {
                        out.extend_from_slice(&p.data()[r * d.1..(r + 1) * d.1]);
                    }
                }
                NumericArray::matrix(m, total, out)?
            }
            Op::Slice { start, len } => {
                let (m, n) = val(0).dims2()?;
                if start + len > n {
                    return Err(shape_err(format!("slice {}..{} out of {} columns", start, start + len, n)));
                }
                let mut out = Vec::with_capacity(m * len);
                for r in 0..m {
                    out.extend_from_slice(&val(0).data()[r * n + start..r * n + start + len]);
                }
                NumericArray::matrix(m, *len, out)?
            }
            Op::Pad { start, total } => {
                let (m, n) = val(0).dims2()?;
                if start + n > *total {
                    return Err(shape_err("pad: input does not fit"));
                }
                let mut out = vec![0.0; m * total];
                for r in 0..m {
                    out[r * total + start..r * total + start + n]
                        .copy_from_slice(&val(0).data()[r * n..(r + 1) * n]);
                }
                NumericArray::matrix(m, *total, out)?
            }
            Op::Gather(ids) => {
                let (rows, cols) = val(0).dims2()?;
                let mut out = Vec::with_capacity(ids.len() * cols);
                for &i in ids {
                    if i >= rows {
                        return Err(shape_err(format!("gather: row {} out of {}", i, rows)));
                    }
                    out.extend_from_slice(&val(0).data()[i * cols..(i + 1) * cols]);
                }
                NumericArray::matrix(ids.len(), cols, out)?
            }
            Op::ScatterAdd { ids, rows } => {
                let (m, cols) = val(0).dims2()?;
                if m != ids.len() {
                    return Err(shape_err("scatter_add: id count differs from row count"));
                }
                let mut out = vec![0.0; rows * cols];
                for (r, &i) in ids.iter().enumerate() {
                    if i >= *rows {
                        return Err(shape_err(format!("scatter_add: row {} out of {}", i, rows)));
                    }
                    for (o, v) in out[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&val(0).data()[r * cols..(r + 1) * cols])
                    {
                        *o += v;
                    }
                }
                NumericArray::matrix(*rows, cols, out)?
            }
            Op::Reshape(shape) => val(0).clone().reshaped(shape)?,
        })
    }

    // Convenience constructors.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::MatMul { transpose_a: false, transpose_b: false }, &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, transpose_a: bool, transpose_b: bool) -> Result<Var, AutodiffError> {
        self.apply(Op::MatMul { transpose_a, transpose_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, AutodiffError> {
        self.apply(Op::Affine { scale, shift }, &[a])
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var, AutodiffError> {
        self.affine(a, scale, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.affine(a, -1.0, 0.0)
    }

    pub fn mul_const(&mut self, a: Var, mask: NumericArray) -> Result<Var, AutodiffError> {
        self.apply(Op::MulConst(mask), &[a])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::AddRow, &[a, row])
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::SumRows, &[a])
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var, AutodiffError> {
        self.apply(Op::BroadcastRows(rows), &[a])
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::SumCols, &[a])
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var, AutodiffError> {
        self.apply(Op::BroadcastCols(cols), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Sum, &[a])
    }

    pub fn fill(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Op::Fill(shape.to_vec()), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Log, &[a])
    }

    pub fn recip(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Recip, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(Op::LogSoftmax, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        self.apply(Op::Concat, parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        self.apply(Op::Slice { start, len }, &[a])
    }

    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var, AutodiffError> {
        self.apply(Op::Pad { start, total }, &[a])
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Op::Gather(ids.to_vec()), &[table])
    }

    pub fn scatter_add_rows(&mut self, a: Var, ids: &[usize], rows: usize) -> Result<Var, AutodiffError> {
        self.apply(Op::ScatterAdd { ids: ids.to_vec(), rows }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    /// Marks nodes at or before `loss` that depend on any of `wrt`.
    fn dependency_mask(&self, loss: usize, wrt: &[usize]) -> Vec<bool> {
        let mut needs = vec![false; loss + 1];
        for &w in wrt {
            if w <= loss {
                needs[w] = true;
            }
        }
        for i in 0..=loss {
            if !needs[i] && self.nodes[i].inputs.iter().any(|&j| needs[j]) {
                needs[i] = true;
            }
        }
        needs
    }

    fn check_loss(&self, loss: Var, wrt: &[Var]) -> Result<(usize, Vec<usize>), AutodiffError> {
        let l = self.check(loss)?;
        if !self.nodes[l].value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(self.nodes[l].value.shape().to_vec()));
        }
        let w = wrt.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>, _>>()?;
        Ok((l, w))
    }

    /// Numeric reverse pass: gradient of scalar `loss` with respect to each
    /// of `wrt`. Nodes that `loss` does not depend on get zeros.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<NumericArray>, AutodiffError> {
        let (l, w) = self.check_loss(loss, wrt)?;
        let needs = self.dependency_mask(l, &w);
        let mut adj: Vec<Option<NumericArray>> = vec![None; l + 1];
        adj[l] = Some(NumericArray::full(self.nodes[l].value.shape(), 1.0));
        for i in (0..=l).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.inputs.is_empty() {
                adj[i] = Some(g);
                continue;
            }
            for (slot, contrib) in self.vjp_numeric(i, &g, &needs)?.into_iter().enumerate() {
                let Some(c) = contrib else { continue };
                let j = node.inputs[slot];
                match &mut adj[j] {
                    Some(acc) => acc.add_assign(&c),
                    none => *none = Some(c),
                }
            }
            // Leaves listed in `wrt` keep their adjoint; others are dropped.
        }
        let out = w
            .iter()
            .map(|&j| {
                let g = if j <= l { adj[j].clone() } else { None };
                g.unwrap_or_else(|| NumericArray::zeros(self.nodes[j].value.shape()))
            })
            .collect::<Vec<_>>();
        if out.iter().any(|g| !g.is_finite()) {
            return Err(AutodiffError::NonFinite("backward"));
        }
        Ok(out)
    }

    fn vjp_numeric(
        &self,
        i: usize,
        g: &NumericArray,
        needs: &[bool],
    ) -> Result<Vec<Option<NumericArray>>, AutodiffError> {
        let node = &self.nodes[i];
        let inp = |k: usize| &self.nodes[node.inputs[k]].value;
        let want = |k: usize| needs[node.inputs[k]];
        let y = &node.value;
        let one = |v: NumericArray| -> Result<Vec<Option<NumericArray>>, AutodiffError> { Ok(vec![Some(v)]) };
        match &node.op {
            Op::Leaf => Ok(Vec::new()),
            Op::MatMul { transpose_a, transpose_b } => {
                let (a, b) = (inp(0), inp(1));
                let ga = if want(0) {
                    Some(match (transpose_a, transpose_b) {
                        (false, false) => gemm(g, b, false, true)?,
                        (true, false) => gemm(b, g, false, true)?,
                        (false, true) => gemm(g, b, false, false)?,
                        (true, true) => gemm(b, g, true, true)?,
                    }
                    .reshaped(a.shape())?)
                } else {
                    None
                };
                let gb = if want(1) {
                    Some(match (transpose_a, transpose_b) {
                        (false, false) => gemm(a, g, true, false)?,
                        (true, false) => gemm(a, g, false, false)?,
                        (false, true) => gemm(g, a, true, false)?,
                        (true, true) => gemm(g, a, true, true)?,
                    }
                    .reshaped(b.shape())?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }
            Op::Add => Ok(vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())]),
            Op::Sub => Ok(vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|v| -v))]),
            Op::Mul => Ok(vec![
                want(0).then(|| g.zip_map(inp(1), |a, b| a * b)),
                want(1).then(|| g.zip_map(inp(0), |a, b| a * b)),
            ]),
            Op::Affine { scale, .. } => one(g.map(|v| scale * v)),
            Op::MulConst(mask) => one(g.zip_map(mask, |a, b| a * b)),
            Op::AddRow => {
                let gb = if want(1) {
                    let (m, n) = g.dims2()?;
                    let mut s = vec![0.0; n];
                    for r in 0..m {
                        for (o, v) in s.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *o += v;
                        }
                    }
                    Some(NumericArray::new(inp(1).shape().to_vec(), s)?)
                } else {
                    None
                };
                Ok(vec![want(0).then(|| g.clone()), gb])
            }
            Op::SumRows => {
                let (m, _) = inp(0).dims2()?;
                let mut out = Vec::with_capacity(inp(0).len());
                for _ in 0..m {
                    out.extend_from_slice(g.data());
                }
                one(NumericArray::new(inp(0).shape().to_vec(), out)?)
            }
            Op::BroadcastRows(_) => {
                let (m, n) = g.dims2()?;
                let mut s = vec![0.0; n];
                for r in 0..m {
                    for (o, v) in s.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                        *o += v;
                    }
                }
                one(NumericArray::new(inp(0).shape().to_vec(), s)?)
            }
            Op::SumCols => {
                let (_, n) = inp(0).dims2()?;
                let mut out = Vec::with_capacity(inp(0).len());
                for &v in g.data() {
                    out.extend(std::iter::repeat(v).take(n));
                }
                one(NumericArray::new(inp(0).shape().to_vec(), out)?)
            }
            Op::BroadcastCols(n) => {
                let s: Vec<f64> = g.data().chunks((*n).max(1)).map(|r| r.iter().sum()).collect();
                one(NumericArray::new(inp(0).shape().to_vec(), s)?)
            }
            Op::Sum => one(NumericArray::full(inp(0).shape(), g.item())),
            Op::Fill(_) => one(NumericArray::full(inp(0).shape(), g.sum())),
            Op::Sigmoid => one(g.zip_map(y, |g, y| g * y * (1.0 - y))),
            Op::Tanh => one(g.zip_map(y, |g, y| g * (1.0 - y * y))),
            Op::Exp => one(g.zip_map(y, |g, y| g * y)),
            Op::Log => one(g.zip_map(inp(0), |g, x| g / x)),
            Op::Recip => one(g.zip_map(y, |g, y| -g * y * y)),
            Op::Softmax => {
                let (_, n) = y.dims2()?;
                let mut out = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    out.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                one(NumericArray::new(y.shape().to_vec(), out)?)
            }
            Op::LogSoftmax => {
                let (_, n) = y.dims2()?;
                let mut out = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    out.extend(gr.iter().zip(yr).map(|(g, y)| g - y.exp() * total));
                }
                one(NumericArray::new(y.shape().to_vec(), out)?)
            }
            Op::Concat => {
                let (m, total) = g.dims2()?;
                let mut start = 0;
                let mut res = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let (_, w) = inp(k).dims2()?;
                    if want(k) {
                        let mut out = Vec::with_capacity(m * w);
                        for r in 0..m {
                            out.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                        }
                        res.push(Some(NumericArray::new(inp(k).shape().to_vec(), out)?));
                    } else {
                        res.push(None);
                    }
                    start += w;
                }
                Ok(res)
            }
            Op::Slice { start, len } => {
                let (m, n) = inp(0).dims2()?;
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    out[r * n + start..r * n + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                one(NumericArray::new(inp(0).shape().to_vec(), out)?)
            }
            Op::Pad { start, total } => {
                let (m, n) = inp(0).dims2()?;
                let mut out = Vec::with_capacity(m * n);
                for r in 0..m {
                    out.extend_from_slice(&g.data()[r * total + start..r * total + start + n]);
                }
                one(NumericArray::new(inp(0).shape().to_vec(), out)?)
            }
            Op::Gather(ids) => {
                let (rows, cols) = inp(0).dims2()?;
                let mut out = vec![0.0; rows * cols];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in out[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(&g.data()[r * cols..(r + 1) * cols])
                    {
                        *o += v;
                    }
                }
                one(NumericArray::new(inp(0).shape().to_vec(), out)?)
            }
            Op::ScatterAdd { ids, .. } => {
                let (_, cols) = g.dims2()?;
                let mut out = Vec::with_capacity(ids.len() * cols);
                for &id in ids {
                    out.extend_from_slice(&g.data()[id * cols..(id + 1) * cols]);
                }
                one(NumericArray::new(inp(0).shape().to_vec(), out)?)
            }
            Op::Reshape(_) => one(g.clone().reshaped(inp(0).shape())?),
        }
    }

    /// Differentiable reverse pass: records the backward computation on the
    /// tape and returns nodes holding `d loss / d wrt`. The returned nodes
    /// can themselves be differentiated.
    pub fn grad_graph(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        let (l, w) = self.check_loss(loss, wrt)?;
        let needs = self.dependency_mask(l, &w);
        let mut adj: Vec<Option<Var>> = vec![None; l + 1];
        let shape = self.nodes[l].value.shape().to_vec();
        adj[l] = Some(self.leaf(NumericArray::full(&shape, 1.0))?);
        for i in (0..=l).rev() {
            if !needs[i] || self.nodes[i].inputs.is_empty() {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let inputs = self.nodes[i].inputs.clone();
            let contribs = self.vjp_symbolic(i, g, &needs)?;
            for (slot, contrib) in contribs.into_iter().enumerate() {
                let Some(c) = contrib else { continue };
                let j = inputs[slot];
                adj[j] = Some(match adj[j] {
                    Some(acc) => self.add(acc, c)?,
                    None => c,
                });
            }
        }
        w.iter()
            .map(|&j| match adj.get(j).copied().flatten() {
                Some(v) => Ok(v),
                None => {
                    let shape = self.nodes[j].value.shape().to_vec();
                    self.leaf(NumericArray::zeros(&shape))
                }
            })
            .collect()
    }

    fn vjp_symbolic(&mut self, i: usize, g: Var, needs: &[bool]) -> Result<Vec<Option<Var>>, AutodiffError> {
        let node_inputs = self.nodes[i].inputs.clone();
        let op = self.nodes[i].op.clone();
        let tape_id = self.id;
        let var = move |index: usize| Var { tape: tape_id, index };
        let y = var(i);
        let x = |k: usize| var(node_inputs[k]);
        let want = |k: usize| needs[node_inputs[k]];
        let shape_of = |t: &Tape, k: usize| t.nodes[node_inputs[k]].value.shape().to_vec();
        let out = match op {
            Op::Leaf => Vec::new(),
            Op::MatMul { transpose_a, transpose_b } => {
                let (a, b) = (x(0), x(1));
                let ga = if want(0) {
                    let raw = match (transpose_a, transpose_b) {
                        (false, false) => self.matmul_t(g, b, false, true)?,
                        (true, false) => self.matmul_t(b, g, false, true)?,
                        (false, true) => self.matmul_t(g, b, false, false)?,
                        (true, true) => self.matmul_t(b, g, true, true)?,
                    };
                    Some(self.match_shape(raw, &shape_of(self, 0))?)
                } else {
                    None
                };
                let gb = if want(1) {
                    let raw = match (transpose_a, transpose_b) {
                        (false, false) => self.matmul_t(a, g, true, false)?,
                        (true, false) => self.matmul_t(a, g, false, false)?,
                        (false, true) => self.matmul_t(g, a, true, false)?,
                        (true, true) => self.matmul_t(g, a, true, true)?,
                    };
                    Some(self.match_shape(raw, &shape_of(self, 1))?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Add => vec![want(0).then_some(g), want(1).then_some(g)],
            Op::Sub => {
                let gb = if want(1) { Some(self.neg(g)?) } else { None };
                vec![want(0).then_some(g), gb]
            }
            Op::Mul => {
                let ga = if want(0) { Some(self.mul(g, x(1))?) } else { None };
                let gb = if want(1) { Some(self.mul(g, x(0))?) } else { None };
                vec![ga, gb]
            }
            Op::Affine { scale, .. } => vec![Some(self.scale(g, scale)?)],
            Op::MulConst(mask) => vec![Some(self.mul_const(g, mask)?)],
            Op::AddRow => {
                let gb = if want(1) {
                    let s = self.sum_rows(g)?;
                    Some(self.match_shape(s, &shape_of(self, 1))?)
                } else {
                    None
                };
                vec![want(0).then_some(g), gb]
            }
            Op::SumRows => {
                let shape = shape_of(self, 0);
                let (m, _) = self.nodes[node_inputs[0]].value.dims2()?;
                let b = self.broadcast_rows(g, m)?;
                vec![Some(self.match_shape(b, &shape)?)]
            }
            Op::BroadcastRows(_) => {
                let s = self.sum_rows(g)?;
                vec![Some(self.match_shape(s, &shape_of(self, 0))?)]
            }
            Op::SumCols => {
                let shape = shape_of(self, 0);
                let (_, n) = self.nodes[node_inputs[0]].value.dims2()?;
                let b = self.broadcast_cols(g, n)?;
                vec![Some(self.match_shape(b, &shape)?)]
            }
            Op::BroadcastCols(_) => {
                let s = self.sum_cols(g)?;
                vec![Some(self.match_shape(s, &shape_of(self, 0))?)]
            }
            Op::Sum => {
                let shape = shape_of(self, 0);
                vec![Some(self.fill(g, &shape)?)]
            }
            Op::Fill(_) => {
                let s = self.sum(g)?;
                vec![Some(self.match_shape(s, &shape_of(self, 0))?)]
            }
            Op::Sigmoid => {
                let one_minus = self.affine(y, -1.0, 1.0)?;
                let d = self.mul(y, one_minus)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Tanh => {
                let sq = self.mul(y, y)?;
                let d = self.affine(sq, -1.0, 1.0)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Exp => vec![Some(self.mul(g, y)?)],
            Op::Log => {
                let r = self.recip(x(0))?;
                vec![Some(self.mul(g, r)?)]
            }
            Op::Recip => {
                let sq = self.mul(y, y)?;
                let ng = self.neg(g)?;
                vec![Some(self.mul(ng, sq)?)]
            }
            Op::Softmax => {
                let (_, n) = self.nodes[i].value.dims2()?;
                let gy = self.mul(g, y)?;
                let dot = self.sum_cols(gy)?;
                let dot = self.broadcast_cols(dot, n)?;
                let dot = self.match_shape(dot, &shape_of(self, 0))?;
                let centered = self.sub(g, dot)?;
                vec![Some(self.mul(y, centered)?)]
            }
            Op::LogSoftmax => {
                let (_, n) = self.nodes[i].value.dims2()?;
                let p = self.exp(y)?;
                let total = self.sum_cols(g)?;
                let total = self.broadcast_cols(total, n)?;
                let total = self.match_shape(total, &shape_of(self, 0))?;
                let pt = self.mul(p, total)?;
                vec![Some(self.sub(g, pt)?)]
            }
            Op::Concat => {
                let mut start = 0;
                let mut res = Vec::with_capacity(node_inputs.len());
                for k in 0..node_inputs.len() {
                    let (_, w) = self.nodes[node_inputs[k]].value.dims2()?;
                    if want(k) {
                        let s = self.slice_cols(g, start, w)?;
                        res.push(Some(self.match_shape(s, &shape_of(self, k))?));
                    } else {
                        res.push(None);
                    }
                    start += w;
                }
                res
            }
            Op::Slice { start, .. } => {
                let (_, n) = self.nodes[node_inputs[0]].value.dims2()?;
                let p = self.pad_cols(g, start, n)?;
                vec![Some(self.match_shape(p, &shape_of(self, 0))?)]
            }
            Op::Pad { start, .. } => {
                let (_, n) = self.nodes[node_inputs[0]].value.dims2()?;
                let s = self.slice_cols(g, start, n)?;
                vec![Some(self.match_shape(s, &shape_of(self, 0))?)]
            }
            Op::Gather(ids) => {
                let (rows, _) = self.nodes[node_inputs[0]].value.dims2()?;
                let s = self.scatter_add_rows(g, &ids, rows)?;
                vec![Some(self.match_shape(s, &shape_of(self, 0))?)]
            }
            Op::ScatterAdd { ids, .. } => {
                let s = self.gather_rows(g, &ids)?;
                vec![Some(self.match_shape(s, &shape_of(self, 0))?)]
            }
            Op::Reshape(_) => {
                let shape = shape_of(self, 0);
                vec![Some(self.reshape(g, &shape)?)]
            }
        };
        Ok(out)
    }

    /// Reshapes `v` to `shape` if it differs (e.g. `[1,n]` versus `[n]`).
    fn match_shape(&mut self, v: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        if self.nodes[v.index].value.shape() == shape {
            Ok(v)
        } else {
            self.reshape(v, shape)
        }
    }
}
