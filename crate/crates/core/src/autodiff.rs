//! Reverse-mode automatic differentiation over a tape of tensor ops.
//!
//! Nodes are appended in construction order, so every node's inputs have
//! smaller ids and the tape itself is a topological order. Values are
//! evaluated lazily and cached; binding a leaf invalidates the cache.
//! `backward` never mutates graph state, so repeated calls on the same
//! bindings return identical gradients.

use crate::error::{Error, Result};
use crate::tensor::{inv_sqrt_psd, sym_eig, Tensor};

pub type NodeId = usize;

/// Similarity used by the hinge alignment: raw dot product or cosine.
/// Cosine is implemented by row-normalizing embeddings before the product,
/// so the op set only ever sees a plain similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimKind {
    Dot,
    Cosine,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddN(Vec<NodeId>),
    /// matrix [n,d] plus row vector [d] broadcast over rows
    AddRowBroadcast(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    ConcatCols(Vec<NodeId>),
    MeanAll(NodeId),
    SumAll(NodeId),
    SumSquares(NodeId),
    /// elementwise max over same-shaped inputs; ties route the gradient
    /// to the lowest input index
    MaxViews(Vec<NodeId>),
    /// [n, blocks*d] -> [n, d], summing the `blocks` contiguous column blocks
    BlockSum(NodeId, usize),
    /// rows scaled to unit L2 norm (norms floored at 1e-12)
    RowNormalize(NodeId),
    /// scalar hinge ranking loss over a square similarity matrix
    HingeFromSim(NodeId, f64),
    /// total canonical correlation (trace norm) between two embedding batches
    DccaCorr {
        a: NodeId,
        b: NodeId,
        reg: f64,
    },
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRowBroadcast(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Abs(a)
        | Op::MeanAll(a)
        | Op::SumAll(a)
        | Op::SumSquares(a)
        | Op::BlockSum(a, _)
        | Op::RowNormalize(a)
        | Op::HingeFromSim(a, _) => vec![*a],
        Op::AddN(xs) | Op::ConcatCols(xs) | Op::MaxViews(xs) => xs.clone(),
        Op::DccaCorr { a, b, .. } => vec![*a, *b],
    }
}

pub struct Graph {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    names: Vec<String>,
    bound: Vec<Option<Tensor>>,
    cache: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            shapes: Vec::new(),
            names: Vec::new(),
            bound: Vec::new(),
            cache: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, name: &str) -> NodeId {
        self.ops.push(op);
        self.shapes.push(shape);
        self.names.push(name.to_string());
        self.bound.push(None);
        self.cache.push(None);
        self.ops.len() - 1
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        match self.shapes[id].as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!(
                "{what}: expected a matrix, got {s:?}"
            ))),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        if self.shapes[a] != self.shapes[b] {
            return Err(Error::Shape(format!(
                "{what}: mismatched shapes {:?} vs {:?}",
                self.shapes[a], self.shapes[b]
            )));
        }
        Ok(self.shapes[a].clone())
    }

    /// Unbound placeholder. A value must be supplied with `bind` before
    /// any evaluation that reaches it.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Leaf, shape.to_vec(), name)
    }

    /// Leaf pre-bound to a value.
    pub fn constant(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value.shape().to_vec(), name);
        self.bound[id] = Some(value);
        id
    }

    /// Bind a leaf's value, invalidating all cached results.
    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        if !matches!(self.ops[id], Op::Leaf) {
            return Err(Error::Config(format!(
                "bind target '{}' is not a leaf",
                self.names[id]
            )));
        }
        if value.shape() != self.shapes[id].as_slice() {
            return Err(Error::Shape(format!(
                "bind '{}': leaf shape {:?}, value shape {:?}",
                self.names[id],
                self.shapes[id],
                value.shape()
            )));
        }
        self.bound[id] = Some(value);
        for c in &mut self.cache {
            *c = None;
        }
        Ok(())
    }

    /// Currently bound value of a leaf.
    pub fn bound_value(&self, id: NodeId) -> Option<&Tensor> {
        self.bound[id].as_ref()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree: {:?} x {:?}",
                self.shapes[a], self.shapes[b]
            )));
        }
        Ok(self.push(Op::Matmul(a, b), vec![m, n], ""))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "transpose")?;
        Ok(self.push(Op::Transpose(a), vec![n, m], ""))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s, ""))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s, ""))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s, ""))
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Arity("add_n: no inputs".into()));
        }
        for &x in &xs[1..] {
            self.same_shape(xs[0], x, "add_n")?;
        }
        let s = self.shapes[xs[0]].clone();
        Ok(self.push(Op::AddN(xs.to_vec()), s, ""))
    }

    pub fn add_row_broadcast(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, d) = self.dims2(m, "add_row_broadcast lhs")?;
        if self.shapes[row].as_slice() != [d] {
            return Err(Error::Shape(format!(
                "add_row_broadcast: matrix {:?} with row {:?}",
                self.shapes[m], self.shapes[row]
            )));
        }
        let s = self.shapes[m].clone();
        Ok(self.push(Op::AddRowBroadcast(m, row), s, ""))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shapes[a].clone();
        self.push(Op::Scale(a, c), s, "")
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a].clone();
        self.push(Op::Tanh(a), s, "")
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a].clone();
        self.push(Op::Relu(a), s, "")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a].clone();
        self.push(Op::Sigmoid(a), s, "")
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let s = self.shapes[a].clone();
        self.push(Op::Abs(a), s, "")
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Arity("concat_cols: no inputs".into()));
        }
        let (n, mut total) = self.dims2(xs[0], "concat_cols")?;
        for &x in &xs[1..] {
            let (ni, di) = self.dims2(x, "concat_cols")?;
            if ni != n {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts differ ({n} vs {ni})"
                )));
            }
            total += di;
        }
        Ok(self.push(Op::ConcatCols(xs.to_vec()), vec![n, total], ""))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanAll(a), vec![1], "")
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), vec![1], "")
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumSquares(a), vec![1], "")
    }

    pub fn max_views(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Arity("max_views: no inputs".into()));
        }
        for &x in &xs[1..] {
            self.same_shape(xs[0], x, "max_views")?;
        }
        let s = self.shapes[xs[0]].clone();
        Ok(self.push(Op::MaxViews(xs.to_vec()), s, ""))
    }

    pub fn block_sum(&mut self, a: NodeId, blocks: usize) -> Result<NodeId> {
        let (n, c) = self.dims2(a, "block_sum")?;
        if blocks == 0 || c % blocks != 0 {
            return Err(Error::Shape(format!(
                "block_sum: {c} columns not divisible into {blocks} blocks"
            )));
        }
        Ok(self.push(Op::BlockSum(a, blocks), vec![n, c / blocks], ""))
    }

    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.dims2(a, "row_normalize")?;
        Ok(self.push(Op::RowNormalize(a), vec![n, d], ""))
    }

    /// Hinge ranking loss over an [n, n] similarity matrix S:
    /// sum over a != b of max(0, margin - S[a,a] + S[a,b]).
    pub fn hinge_from_sim(&mut self, s: NodeId, margin: f64) -> Result<NodeId> {
        let (n, m) = self.dims2(s, "hinge_from_sim")?;
        if n != m {
            return Err(Error::Shape(format!(
                "hinge_from_sim: similarity matrix must be square, got {:?}",
                self.shapes[s]
            )));
        }
        if n < 2 {
            return Err(Error::BatchTooSmall(
                "hinge_from_sim needs at least 2 samples".into(),
            ));
        }
        Ok(self.push(Op::HingeFromSim(s, margin), vec![1], ""))
    }

    /// Sum of canonical correlations between two [n, d] embedding batches,
    /// with `reg` added to both autocovariance diagonals.
    pub fn dcca_corr(&mut self, a: NodeId, b: NodeId, reg: f64) -> Result<NodeId> {
        let (na, _) = self.dims2(a, "dcca_corr lhs")?;
        let (nb, _) = self.dims2(b, "dcca_corr rhs")?;
        if na != nb {
            return Err(Error::Shape(format!(
                "dcca_corr: batch sizes differ ({na} vs {nb})"
            )));
        }
        if na < 2 {
            return Err(Error::BatchTooSmall(
                "dcca_corr needs at least 2 samples".into(),
            ));
        }
        if reg <= 0.0 {
            return Err(Error::Config(
                "dcca_corr regularizer must be positive".into(),
            ));
        }
        Ok(self.push(Op::DccaCorr { a, b, reg }, vec![1], ""))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.cache[id].as_ref().expect("value evaluated before use")
    }

    fn compute(&self, id: NodeId) -> Result<Tensor> {
        match &self.ops[id] {
            Op::Leaf => self.bound[id]
                .clone()
                .ok_or_else(|| Error::MissingInput(format!("leaf '{}' unbound", self.names[id]))),
            Op::Matmul(a, b) => self.val(*a).matmul(self.val(*b)),
            Op::Transpose(a) => self.val(*a).transpose(),
            Op::Add(a, b) => self.val(*a).add(self.val(*b)),
            Op::Sub(a, b) => self.val(*a).sub(self.val(*b)),
            Op::Mul(a, b) => self.val(*a).zip(self.val(*b), |x, y| x * y),
            Op::AddN(xs) => {
                let mut acc = self.val(xs[0]).clone();
                for &x in &xs[1..] {
                    acc = acc.add(self.val(x))?;
                }
                Ok(acc)
            }
            Op::AddRowBroadcast(m, r) => {
                let mat = self.val(*m);
                let row = self.val(*r);
                let (n, d) = mat.dims2()?;
                let mut out = mat.data().to_vec();
                for i in 0..n {
                    for j in 0..d {
                        out[i * d + j] += row.data()[j];
                    }
                }
                Tensor::new(vec![n, d], out)
            }
            Op::Scale(a, c) => Ok(self.val(*a).scale(*c)),
            Op::Tanh(a) => Ok(self.val(*a).map(f64::tanh)),
            Op::Relu(a) => Ok(self.val(*a).map(|v| v.max(0.0))),
            Op::Sigmoid(a) => Ok(self.val(*a).map(|v| 1.0 / (1.0 + (-v).exp()))),
            Op::Abs(a) => Ok(self.val(*a).map(f64::abs)),
            Op::ConcatCols(xs) => {
                let n = self.val(xs[0]).shape()[0];
                let total: usize = xs.iter().map(|&x| self.val(x).shape()[1]).sum();
                let mut out = vec![0.0; n * total];
                let mut col0 = 0;
                for &x in xs {
                    let t = self.val(x);
                    let d = t.shape()[1];
                    for i in 0..n {
                        out[i * total + col0..i * total + col0 + d]
                            .copy_from_slice(&t.data()[i * d..(i + 1) * d]);
                    }
                    col0 += d;
                }
                Tensor::new(vec![n, total], out)
            }
            Op::MeanAll(a) => {
                let t = self.val(*a);
                Tensor::new(vec![1], vec![t.sum() / t.len() as f64])
            }
            Op::SumAll(a) => Tensor::new(vec![1], vec![self.val(*a).sum()]),
            Op::SumSquares(a) => Tensor::new(vec![1], vec![self.val(*a).sum_squares()]),
            Op::MaxViews(xs) => {
                let mut acc = self.val(xs[0]).clone();
                for &x in &xs[1..] {
                    acc = acc.zip(self.val(x), f64::max)?;
                }
                Ok(acc)
            }
            Op::BlockSum(a, blocks) => {
                let t = self.val(*a);
                let (n, c) = t.dims2()?;
                let d = c / blocks;
                let mut out = vec![0.0; n * d];
                for i in 0..n {
                    for r in 0..*blocks {
                        for k in 0..d {
                            out[i * d + k] += t.data()[i * c + r * d + k];
                        }
                    }
                }
                Tensor::new(vec![n, d], out)
            }
            Op::RowNormalize(a) => {
                let t = self.val(*a);
                let (n, d) = t.dims2()?;
                let mut out = t.data().to_vec();
                for i in 0..n {
                    let row = &mut out[i * d..(i + 1) * d];
                    let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    for v in row {
                        *v /= nrm;
                    }
                }
                Tensor::new(vec![n, d], out)
            }
            Op::HingeFromSim(s, margin) => {
                let sim = self.val(*s);
                let (n, _) = sim.dims2()?;
                let mut total = 0.0;
                for a in 0..n {
                    let saa = sim.get2(a, a);
                    for b in 0..n {
                        if b != a {
                            total += (margin - saa + sim.get2(a, b)).max(0.0);
                        }
                    }
                }
                Tensor::new(vec![1], vec![total])
            }
            Op::DccaCorr { a, b, reg } => {
                let (ha, hb) = order_by_width(self.val(*a), self.val(*b));
                let p = dcca_parts(ha, hb, *reg)?;
                Tensor::new(vec![1], vec![p.sigma.iter().sum()])
            }
        }
    }

    /// Evaluate a node, reusing all cached values.
    pub fn forward(&mut self, id: NodeId) -> Result<&Tensor> {
        self.ensure_value(id)?;
        Ok(self.cache[id].as_ref().unwrap())
    }

    fn ensure_value(&mut self, id: NodeId) -> Result<()> {
        if self.cache[id].is_some() {
            return Ok(());
        }
        let mut needed = Vec::new();
        let mut seen = vec![false; self.ops.len()];
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if seen[n] || self.cache[n].is_some() {
                continue;
            }
            seen[n] = true;
            needed.push(n);
            stack.extend(op_inputs(&self.ops[n]));
        }
        needed.sort_unstable();
        for n in needed {
            let v = self.compute(n)?;
            self.cache[n] = Some(v);
        }
        Ok(())
    }

    /// Gradient of a scalar node with respect to every node in the graph.
    /// Nodes the loss does not depend on get zero gradients of their shape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<Tensor>> {
        self.ensure_value(loss)?;
        if self.shapes[loss].iter().product::<usize>() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be scalar, got {:?}",
                self.shapes[loss]
            )));
        }
        let mut reach = vec![false; self.ops.len()];
        let mut stack = vec![loss];
        while let Some(n) = stack.pop() {
            if reach[n] {
                continue;
            }
            reach[n] = true;
            stack.extend(op_inputs(&self.ops[n]));
        }
        let mut grads: Vec<Tensor> = self.shapes.iter().map(|s| Tensor::zeros(s)).collect();
        grads[loss] = Tensor::new(self.shapes[loss].clone(), vec![1.0])?;

        for id in (0..=loss).rev() {
            if !reach[id] {
                continue;
            }
            let g = grads[id].clone();
            match &self.ops[id] {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let da = g.matmul(&self.val(*b).transpose()?)?;
                    let db = self.val(*a).transpose()?.matmul(&g)?;
                    grads[*a] = grads[*a].add(&da)?;
                    grads[*b] = grads[*b].add(&db)?;
                }
                Op::Transpose(a) => {
                    grads[*a] = grads[*a].add(&g.transpose()?)?;
                }
                Op::Add(a, b) => {
                    grads[*a] = grads[*a].add(&g)?;
                    grads[*b] = grads[*b].add(&g)?;
                }
                Op::Sub(a, b) => {
                    grads[*a] = grads[*a].add(&g)?;
                    grads[*b] = grads[*b].sub(&g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip(self.val(*b), |x, y| x * y)?;
                    let db = g.zip(self.val(*a), |x, y| x * y)?;
                    grads[*a] = grads[*a].add(&da)?;
                    grads[*b] = grads[*b].add(&db)?;
                }
                Op::AddN(xs) => {
                    for &x in xs {
                        grads[x] = grads[x].add(&g)?;
                    }
                }
                Op::AddRowBroadcast(m, r) => {
                    grads[*m] = grads[*m].add(&g)?;
                    let (n, d) = g.dims2()?;
                    let mut rowg = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            rowg[j] += g.get2(i, j);
                        }
                    }
                    grads[*r] = grads[*r].add(&Tensor::new(vec![d], rowg)?)?;
                }
                Op::Scale(a, c) => {
                    grads[*a] = grads[*a].add(&g.scale(*c))?;
                }
                Op::Tanh(a) => {
                    let y = self.val(id);
                    let da = g.zip(y, |gv, yv| gv * (1.0 - yv * yv))?;
                    grads[*a] = grads[*a].add(&da)?;
                }
                Op::Relu(a) => {
                    let x = self.val(*a);
                    let da = g.zip(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    grads[*a] = grads[*a].add(&da)?;
                }
                Op::Sigmoid(a) => {
                    let y = self.val(id);
                    let da = g.zip(y, |gv, yv| gv * yv * (1.0 - yv))?;
                    grads[*a] = grads[*a].add(&da)?;
                }
                Op::Abs(a) => {
                    let x = self.val(*a);
                    let da = g.zip(x, |gv, xv| gv * xv.signum() * (xv != 0.0) as u8 as f64)?;
                    grads[*a] = grads[*a].add(&da)?;
                }
                Op::ConcatCols(xs) => {
                    let (n, total) = g.dims2()?;
                    let mut col0 = 0;
                    for &x in xs {
                        let d = self.shapes[x][1];
                        let mut part = vec![0.0; n * d];
                        for i in 0..n {
                            part[i * d..(i + 1) * d]
                                .copy_from_slice(&g.data()[i * total + col0..i * total + col0 + d]);
                        }
                        grads[x] = grads[x].add(&Tensor::new(vec![n, d], part)?)?;
                        col0 += d;
                    }
                }
                Op::MeanAll(a) => {
                    let n = self.shapes[*a].iter().product::<usize>() as f64;
                    let da = Tensor::zeros(&self.shapes[*a]).map(|_| g.item() / n);
                    grads[*a] = grads[*a].add(&da)?;
                }
                Op::SumAll(a) => {
                    let da = Tensor::zeros(&self.shapes[*a]).map(|_| g.item());
                    grads[*a] = grads[*a].add(&da)?;
                }
                Op::SumSquares(a) => {
                    let da = self.val(*a).scale(2.0 * g.item());
                    grads[*a] = grads[*a].add(&da)?;
                }
                Op::MaxViews(xs) => {
                    let vals: Vec<&Tensor> = xs.iter().map(|&x| self.val(x)).collect();
                    let len = vals[0].len();
                    let mut parts: Vec<Vec<f64>> = vec![vec![0.0; len]; xs.len()];
                    for e in 0..len {
                        let mut best = 0usize;
                        for (v, t) in vals.iter().enumerate().skip(1) {
                            if t.data()[e] > vals[best].data()[e] {
                                best = v;
                            }
                        }
                        parts[best][e] = g.data()[e];
                    }
                    for (v, part) in parts.into_iter().enumerate() {
                        let da = Tensor::new(self.shapes[xs[v]].clone(), part)?;
                        grads[xs[v]] = grads[xs[v]].add(&da)?;
                    }
                }
                Op::BlockSum(a, blocks) => {
                    let (n, d) = g.dims2()?;
                    let c = d * blocks;
                    let mut da = vec![0.0; n * c];
                    for i in 0..n {
                        for r in 0..*blocks {
                            for k in 0..d {
                                da[i * c + r * d + k] = g.get2(i, k);
                            }
                        }
                    }
                    grads[*a] = grads[*a].add(&Tensor::new(vec![n, c], da)?)?;
                }
                Op::RowNormalize(a) => {
                    let x = self.val(*a);
                    let y = self.val(id);
                    let (n, d) = x.dims2()?;
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        let xr = x.row(i);
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let nrm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            da[i * d + k] = (gr[k] - yr[k] * dot) / nrm;
                        }
                    }
                    grads[*a] = grads[*a].add(&Tensor::new(vec![n, d], da)?)?;
                }
                Op::HingeFromSim(s, margin) => {
                    let sim = self.val(*s);
                    let (n, _) = sim.dims2()?;
                    let gv = g.item();
                    let mut ds = vec![0.0; n * n];
                    for a in 0..n {
                        let saa = sim.get2(a, a);
                        for b in 0..n {
                            if b != a && margin - saa + sim.get2(a, b) > 0.0 {
                                ds[a * n + b] += gv;
                                ds[a * n + a] -= gv;
                            }
                        }
                    }
                    grads[*s] = grads[*s].add(&Tensor::new(vec![n, n], ds)?)?;
                }
                Op::DccaCorr { a, b, reg } => {
                    let (da, db) = dcca_backward(self.val(*a), self.val(*b), *reg, g.item())?;
                    grads[*a] = grads[*a].add(&da)?;
                    grads[*b] = grads[*b].add(&db)?;
                }
            }
        }
        Ok(grads)
    }
}

struct DccaParts {
    hb_a: Tensor,
    hb_b: Tensor,
    inv_a: Tensor, // autocovariance of a to the power -1/2
    inv_b: Tensor,
    t: Tensor,
    u: Tensor,       // eigenvectors of T T'
    sigma: Vec<f64>, // singular values of T, descending
}

/// T T' must be formed on the narrower view: its eigenvalues are then all
/// structurally nonzero, keeping the trace-norm gradient well defined.
fn order_by_width<'a>(ha: &'a Tensor, hb: &'a Tensor) -> (&'a Tensor, &'a Tensor) {
    if ha.shape()[1] <= hb.shape()[1] {
        (ha, hb)
    } else {
        (hb, ha)
    }
}

fn center_rows(h: &Tensor) -> Result<Tensor> {
    let (n, d) = h.dims2()?;
    let mu = h.col_means()?;
    let mut out = h.data().to_vec();
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] -= mu.data()[j];
        }
    }
    Tensor::new(vec![n, d], out)
}

fn dcca_parts(ha: &Tensor, hb: &Tensor, reg: f64) -> Result<DccaParts> {
    let (n, _) = ha.dims2()?;
    let hb_a = center_rows(ha)?;
    let hb_b = center_rows(hb)?;
    let scale = 1.0 / (n as f64 - 1.0);
    let cov =
        |x: &Tensor, y: &Tensor| -> Result<Tensor> { Ok(x.transpose()?.matmul(y)?.scale(scale)) };
    let mut s_aa = cov(&hb_a, &hb_a)?;
    let mut s_bb = cov(&hb_b, &hb_b)?;
    let s_ab = cov(&hb_a, &hb_b)?;
    let da = s_aa.shape()[0];
    let db = s_bb.shape()[0];
    for i in 0..da {
        let v = s_aa.get2(i, i) + reg;
        s_aa.set2(i, i, v);
    }
    for i in 0..db {
        let v = s_bb.get2(i, i) + reg;
        s_bb.set2(i, i, v);
    }
    let inv_a = inv_sqrt_psd(&s_aa, 1e-12)?;
    let inv_b = inv_sqrt_psd(&s_bb, 1e-12)?;
    let t = inv_a.matmul(&s_ab)?.matmul(&inv_b)?;
    let k = t.matmul(&t.transpose()?)?;
    let (lam, u) = sym_eig(&k)?;
    let sigma: Vec<f64> = lam.data().iter().map(|&l| l.max(0.0).sqrt()).collect();
    Ok(DccaParts {
        hb_a,
        hb_b,
        inv_a,
        inv_b,
        t,
        u,
        sigma,
    })
}

/// diag-sandwich helper: U diag(d) U'
fn spectral(u: &Tensor, d: &[f64]) -> Result<Tensor> {
    let n = u.shape()[0];
    let mut scaled = u.clone();
    for i in 0..n {
        for j in 0..d.len() {
            scaled.data_mut()[i * d.len() + j] = u.get2(i, j) * d[j];
        }
    }
    scaled.matmul(&u.transpose()?)
}

fn dcca_backward(ha: &Tensor, hb: &Tensor, reg: f64, gscale: f64) -> Result<(Tensor, Tensor)> {
    if ha.shape()[1] > hb.shape()[1] {
        let (db, da) = dcca_backward(hb, ha, reg, gscale)?;
        return Ok((da, db));
    }
    let p = dcca_parts(ha, hb, reg)?;
    let n = ha.shape()[0] as f64;
    // Clamp tiny singular values: the trace norm is non-differentiable at
    // zero, so the subgradient there is damped instead of exploding.
    let inv_sigma: Vec<f64> = p.sigma.iter().map(|&s| 1.0 / s.max(1e-9)).collect();

    // d corr / d T = U diag(1/sigma) U' T
    let g_t = spectral(&p.u, &inv_sigma)?.matmul(&p.t)?;
    // d corr / d S_ab = A g_t B
    let d_ab = p.inv_a.matmul(&g_t)?.matmul(&p.inv_b)?;
    // d corr / d S_aa = -1/2 A U diag(sigma) U' A
    let d_aa = p
        .inv_a
        .matmul(&spectral(&p.u, &p.sigma)?)?
        .matmul(&p.inv_a)?
        .scale(-0.5);
    // d corr / d S_bb = -1/2 B T' U diag(1/sigma) U' T B
    let mid =
        p.t.transpose()?
            .matmul(&spectral(&p.u, &inv_sigma)?)?
            .matmul(&p.t)?;
    let d_bb = p.inv_b.matmul(&mid)?.matmul(&p.inv_b)?.scale(-0.5);

    let cscale = 1.0 / (n - 1.0);
    // d corr / d centered embeddings
    let dh_a = p
        .hb_a
        .matmul(&d_aa)?
        .scale(2.0)
        .add(&p.hb_b.matmul(&d_ab.transpose()?)?)?
        .scale(cscale);
    let dh_b = p
        .hb_b
        .matmul(&d_bb)?
        .scale(2.0)
        .add(&p.hb_a.matmul(&d_ab)?)?
        .scale(cscale);
    // Centering adjoint: subtract each column's mean.
    let adj = |dh: &Tensor| -> Result<Tensor> {
        let (rows, cols) = dh.dims2()?;
        let mu = dh.col_means()?;
        let mut out = dh.data().to_vec();
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] -= mu.data()[j];
            }
        }
        Tensor::new(vec![rows, cols], out)
    };
    Ok((adj(&dh_a)?.scale(gscale), adj(&dh_b)?.scale(gscale)))
}

/// Central-difference check: returns the worst relative error between
/// analytic and numeric gradients over the given leaves.
pub fn fd_max_rel_err(g: &mut Graph, loss: NodeId, wrt: &[NodeId], eps: f64) -> Result<f64> {
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for &id in wrt {
        let base = g
            .bound_value(id)
            .ok_or_else(|| Error::MissingInput("fd check on unbound leaf".into()))?
            .clone();
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[k] += eps;
            g.bind(id, plus)?;
            let lp = g.forward(loss)?.item();
            let mut minus = base.clone();
            minus.data_mut()[k] -= eps;
            g.bind(id, minus)?;
            let lm = g.forward(loss)?.item();
            let fd = (lp - lm) / (2.0 * eps);
            let ad = grads[id].data()[k];
            let denom = ad.abs().max(fd.abs()).max(1e-2);
            worst = worst.max((ad - fd).abs() / denom);
        }
        g.bind(id, base)?;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn rand_leaf(g: &mut Graph, rng: &mut Rng, name: &str, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        g.constant(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    /// Leaf whose entries stay away from zero, for kinked ops.
    fn rand_leaf_offzero(g: &mut Graph, rng: &mut Rng, name: &str, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v = rng.uniform(0.2, 1.0);
                if rng.next_f64() < 0.5 {
                    -v
                } else {
                    v
                }
            })
            .collect();
        g.constant(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    const FD_EPS: f64 = 1e-5;
    const FD_TOL: f64 = 1e-4;

    #[test]
    fn fd_matmul_transpose() {
        let mut g = Graph::new();
        let mut rng = Rng::new(1);
        let a = rand_leaf(&mut g, &mut rng, "a", &[3, 4]);
        let b = rand_leaf(&mut g, &mut rng, "b", &[4, 2]);
        let c = g.matmul(a, b).unwrap();
        let ct = g.transpose(c).unwrap();
        let loss = g.sum_squares(ct);
        assert!(fd_max_rel_err(&mut g, loss, &[a, b], FD_EPS).unwrap() < FD_TOL);
    }

    #[test]
    fn fd_elementwise_ops() {
        let mut g = Graph::new();
        let mut rng = Rng::new(2);
        let a = rand_leaf(&mut g, &mut rng, "a", &[3, 3]);
        let b = rand_leaf(&mut g, &mut rng, "b", &[3, 3]);
        let s = g.sub(a, b).unwrap();
        let m = g.mul(s, a).unwrap();
        let t = g.tanh(m);
        let sg = g.sigmoid(t);
        let sc = g.scale(sg, 2.5);
        let loss = g.mean_all(sc);
        assert!(fd_max_rel_err(&mut g, loss, &[a, b], FD_EPS).unwrap() < FD_TOL);
    }

    #[test]
    fn fd_relu_abs_off_kink() {
        let mut g = Graph::new();
        let mut rng = Rng::new(3);
        let a = rand_leaf_offzero(&mut g, &mut rng, "a", &[4, 3]);
        let r = g.relu(a);
        let ab = g.abs(a);
        let both = g.add(r, ab).unwrap();
        let loss = g.sum_all(both);
        assert!(fd_max_rel_err(&mut g, loss, &[a], FD_EPS).unwrap() < FD_TOL);
    }

    #[test]
    fn fd_addn_concat_broadcast() {
        let mut g = Graph::new();
        let mut rng = Rng::new(4);
        let a = rand_leaf(&mut g, &mut rng, "a", &[3, 2]);
        let b = rand_leaf(&mut g, &mut rng, "b", &[3, 2]);
        let c = rand_leaf(&mut g, &mut rng, "c", &[3, 3]);
        let bias = rand_leaf(&mut g, &mut rng, "bias", &[5]);
        let s = g.add_n(&[a, b]).unwrap();
        let cat = g.concat_cols(&[s, c]).unwrap();
        let shifted = g.add_row_broadcast(cat, bias).unwrap();
        let loss = g.sum_squares(shifted);
        assert!(fd_max_rel_err(&mut g, loss, &[a, b, c, bias], FD_EPS).unwrap() < FD_TOL);
    }

    #[test]
    fn fd_block_sum_row_normalize() {
        let mut g = Graph::new();
        let mut rng = Rng::new(5);
        let a = rand_leaf_offzero(&mut g, &mut rng, "a", &[3, 6]);
        let bs = g.block_sum(a, 3).unwrap();
        let rn = g.row_normalize(bs).unwrap();
        let loss = g.sum_squares(rn);
        assert!(fd_max_rel_err(&mut g, loss, &[a], FD_EPS).unwrap() < FD_TOL);
    }

    #[test]
    fn fd_max_views_off_ties() {
        let mut g = Graph::new();
        // Hand-picked values with elementwise gaps far above the FD step.
        let a = g.constant(
            "a",
            Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap(),
        );
        let b = g.constant(
            "b",
            Tensor::from_rows(&[vec![0.2, -1.0], vec![1.5, 1.0]]).unwrap(),
        );
        let m = g.max_views(&[a, b]).unwrap();
        let loss = g.sum_squares(m);
        assert!(fd_max_rel_err(&mut g, loss, &[a, b], FD_EPS).unwrap() < FD_TOL);
    }

    #[test]
    fn max_views_tie_goes_to_lowest_index() {
        let mut g = Graph::new();
        let a = g.constant("a", Tensor::from_rows(&[vec![2.0]]).unwrap());
        let b = g.constant("b", Tensor::from_rows(&[vec![2.0]]).unwrap());
        let m = g.max_views(&[a, b]).unwrap();
        let loss = g.sum_all(m);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[a].data(), &[1.0]);
        assert_eq!(grads[b].data(), &[0.0]);
    }

    #[test]
    fn fd_hinge_from_sim() {
        let mut g = Graph::new();
        let mut rng = Rng::new(6);
        // Random similarities keep hinge arguments away from exactly zero.
        let ha = rand_leaf(&mut g, &mut rng, "ha", &[5, 3]);
        let hbv = rand_leaf(&mut g, &mut rng, "hb", &[5, 3]);
        let hbt = g.transpose(hbv).unwrap();
        let s = g.matmul(ha, hbt).unwrap();
        let loss = g.hinge_from_sim(s, 1.0).unwrap();
        assert!(fd_max_rel_err(&mut g, loss, &[ha, hbv], FD_EPS).unwrap() < FD_TOL);
    }

    #[test]
    fn fd_hinge_cosine_path() {
        let mut g = Graph::new();
        let mut rng = Rng::new(7);
        let ha = rand_leaf_offzero(&mut g, &mut rng, "ha", &[4, 3]);
        let hbv = rand_leaf_offzero(&mut g, &mut rng, "hb", &[4, 3]);
        let na = g.row_normalize(ha).unwrap();
        let nb = g.row_normalize(hbv).unwrap();
        let nbt = g.transpose(nb).unwrap();
        let s = g.matmul(na, nbt).unwrap();
        let loss = g.hinge_from_sim(s, 0.5).unwrap();
        assert!(fd_max_rel_err(&mut g, loss, &[ha, hbv], FD_EPS).unwrap() < FD_TOL);
    }

    #[test]
    fn fd_dcca_corr() {
        let mut g = Graph::new();
        let mut rng = Rng::new(8);
        let ha = rand_leaf(&mut g, &mut rng, "ha", &[12, 3]);
        let hbv = rand_leaf(&mut g, &mut rng, "hb", &[12, 3]);
        let loss = g.dcca_corr(ha, hbv, 1e-3).unwrap();
        assert!(fd_max_rel_err(&mut g, loss, &[ha, hbv], FD_EPS).unwrap() < FD_TOL);
    }

    #[test]
    fn fd_dcca_through_linear_map() {
        let mut g = Graph::new();
        let mut rng = Rng::new(9);
        let x = rand_leaf(&mut g, &mut rng, "x", &[10, 4]);
        let w = rand_leaf(&mut g, &mut rng, "w", &[3, 4]);
        let wt = g.transpose(w).unwrap();
        let ha = g.matmul(x, wt).unwrap();
        let hbv = rand_leaf(&mut g, &mut rng, "hb", &[10, 2]);
        let corr = g.dcca_corr(ha, hbv, 1e-3).unwrap();
        let loss = g.scale(corr, -1.0);
        assert!(fd_max_rel_err(&mut g, loss, &[w, hbv], FD_EPS).unwrap() < FD_TOL);
    }

    #[test]
    fn dcca_self_correlation_is_full() {
        let mut g = Graph::new();
        let mut rng = Rng::new(10);
        let h = rand_leaf(&mut g, &mut rng, "h", &[40, 3]);
        let corr = g.dcca_corr(h, h, 1e-6).unwrap();
        let v = g.forward(corr).unwrap().item();
        assert!((v - 3.0).abs() < 1e-3, "self-corr {v}");
    }

    #[test]
    fn dcca_bounded_by_min_dim() {
        let mut g = Graph::new();
        let mut rng = Rng::new(11);
        let a = rand_leaf(&mut g, &mut rng, "a", &[30, 2]);
        let b = rand_leaf(&mut g, &mut rng, "b", &[30, 5]);
        let corr = g.dcca_corr(a, b, 1e-4).unwrap();
        let v = g.forward(corr).unwrap().item();
        assert!((0.0..=2.0 + 1e-9).contains(&v), "corr {v}");
    }

    #[test]
    fn dcca_small_batch_rejected() {
        let mut g = Graph::new();
        let a = g.leaf("a", &[1, 3]);
        let b = g.leaf("b", &[1, 3]);
        assert!(matches!(
            g.dcca_corr(a, b, 1e-4),
            Err(Error::BatchTooSmall(_))
        ));
    }

    #[test]
    fn unbound_leaf_errors_with_name() {
        let mut g = Graph::new();
        let x = g.leaf("input_x", &[2, 2]);
        let loss = g.sum_squares(x);
        match g.forward(loss) {
            Err(Error::MissingInput(msg)) => assert!(msg.contains("input_x")),
            other => panic!("expected MissingInput, got {other:?}"),
        }
    }

    #[test]
    fn unused_leaves_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.constant("x", Tensor::scalar(3.0));
        let unused = g.constant("unused", Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let loss = g.sum_squares(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[unused].data(), &[0.0, 0.0]);
        assert_eq!(grads[x].data(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut g = Graph::new();
        let mut rng = Rng::new(12);
        let a = rand_leaf(&mut g, &mut rng, "a", &[4, 3]);
        let b = rand_leaf(&mut g, &mut rng, "b", &[3, 2]);
        let c = g.matmul(a, b).unwrap();
        let t = g.tanh(c);
        let loss = g.sum_squares(t);
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn rebinding_invalidates_cache() {
        let mut g = Graph::new();
        let x = g.constant("x", Tensor::scalar(2.0));
        let loss = g.sum_squares(x);
        assert_eq!(g.forward(loss).unwrap().item(), 4.0);
        g.bind(x, Tensor::scalar(3.0)).unwrap();
        assert_eq!(g.forward(loss).unwrap().item(), 9.0);
    }

    #[test]
    fn bind_rejects_non_leaf_and_wrong_shape() {
        let mut g = Graph::new();
        let x = g.constant("x", Tensor::scalar(2.0));
        let y = g.scale(x, 2.0);
        assert!(matches!(
            g.bind(y, Tensor::scalar(1.0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            g.bind(x, Tensor::zeros(&[2, 2])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.constant("x", Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fd_composed_expression(seed in 0u64..1000, n in 2usize..5, d in 2usize..5) {
            let mut g = Graph::new();
            let mut rng = Rng::new(seed);
            let x = rand_leaf(&mut g, &mut rng, "x", &[n, d]);
            let w = rand_leaf(&mut g, &mut rng, "w", &[d, d]);
            let b = rand_leaf(&mut g, &mut rng, "b", &[d]);
            let xw = g.matmul(x, w).unwrap();
            let sh = g.add_row_broadcast(xw, b).unwrap();
            let t = g.tanh(sh);
            let diff = g.sub(t, x).unwrap();
            let loss = g.sum_squares(diff);
            prop_assert!(fd_max_rel_err(&mut g, loss, &[x, w, b], FD_EPS).unwrap() < FD_TOL);
        }
    }
}
