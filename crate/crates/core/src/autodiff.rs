//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so the tape is always topologically sorted
//! and [`Graph::backward`] is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Real, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a particular graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Concat(Vec<usize>),
    Stack(Vec<usize>),
    Slice {
        a: usize,
        start: usize,
    },
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Pick {
        a: usize,
        index: usize,
    },
    CrossEntropy {
        logits: usize,
        target: usize,
    },
    Sum(usize),
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// Computation tape. Confined to one thread while in use (it is `Send`, so
/// independent graphs can live on different threads).
#[derive(Debug)]
pub struct Graph<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Outstanding `Var`s become detached.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.id = NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(v.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        self.grads.push(None);
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn tracked(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].tracked)
    }

    // -- leaves ------------------------------------------------------------

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<T>, tracked: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape("leaf", &shape, &[values.len()]));
        }
        Ok(self.push(shape, values, Op::Leaf, tracked))
    }

    /// Tracked leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn vector(&mut self, values: Vec<T>) -> Var {
        let n = values.len();
        self.push(vec![n], values, Op::Leaf, false)
    }

    // -- accessors ---------------------------------------------------------

    pub fn value(&self, v: Var) -> Result<&[T]> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.nodes[self.idx(v)?].shape)
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        let node = &self.nodes[self.idx(v)?];
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    /// Gradient accumulated by the last backward pass, if the node was
    /// reached.
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        Ok(self.grads[self.idx(v)?].as_deref())
    }

    // -- operations --------------------------------------------------------

    /// Matrix product. A rank-1 left operand is a row vector, a rank-1 right
    /// operand a column vector; the corresponding output axis is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let sa = self.nodes[ia].shape.clone();
        let sb = self.nodes[ib].shape.clone();
        let (m, k, a_vec) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let (kb, n, b_vec) = match sb.as_slice() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let av = &self.nodes[ia].value;
        let bv = &self.nodes[ib].value;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let shape = match (a_vec, b_vec) {
            (false, false) => vec![m, n],
            (false, true) => vec![m],
            (true, false) => vec![n],
            (true, true) => vec![],
        };
        let tracked = self.tracked(&[ia, ib]);
        Ok(self.push(shape, out, Op::MatMul { a: ia, b: ib, m, k, n }, tracked))
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(Error::shape(op, &self.nodes[ia].shape, &self.nodes[ib].shape));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(op, ia, ib)?;
        let value = self.nodes[ia]
            .value
            .iter()
            .zip(&self.nodes[ib].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[ia].shape.clone();
        let tracked = self.tracked(&[ia, ib]);
        Ok(self.push(shape, value, mk(ia, ib), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a + bias` where `bias` matches the last axis of `a` and is repeated
    /// over the leading axis. The only broadcasting form supported.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let sa = &self.nodes[ia].shape;
        let sb = &self.nodes[ib].shape;
        let cols = *sa.last().unwrap_or(&1);
        if sb.len() != 1 || sb[0] != cols || sa.is_empty() {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let bv = &self.nodes[ib].value;
        let value = self.nodes[ia]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % cols])
            .collect();
        let shape = sa.clone();
        let tracked = self.tracked(&[ia, ib]);
        Ok(self.push(shape, value, Op::AddBias(ia, ib), tracked))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.iter().map(|&x| x * c).collect();
        let shape = self.nodes[ia].shape.clone();
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(shape, value, Op::Scale(ia, c), tracked))
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let ids = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let mut value = Vec::new();
        for &i in &ids {
            if self.nodes[i].shape.len() != 1 {
                return Err(Error::shape("concat", &self.nodes[ids[0]].shape, &self.nodes[i].shape));
            }
            value.extend_from_slice(&self.nodes[i].value);
        }
        let n = value.len();
        let tracked = self.tracked(&ids);
        Ok(self.push(vec![n], value, Op::Concat(ids), tracked))
    }

    /// Stacks equal-length rank-1 tensors as rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Empty("stack"));
        }
        let ids = rows.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[ids[0]].shape.clone();
        if first.len() != 1 {
            return Err(Error::shape("stack", &first, &first));
        }
        let mut value = Vec::with_capacity(first[0] * ids.len());
        for &i in &ids {
            if self.nodes[i].shape != first {
                return Err(Error::shape("stack", &first, &self.nodes[i].shape));
            }
            value.extend_from_slice(&self.nodes[i].value);
        }
        let tracked = self.tracked(&ids);
        Ok(self.push(vec![ids.len(), first[0]], value, Op::Stack(ids), tracked))
    }

    /// Contiguous sub-range `[start, start + len)` of a rank-1 tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let shape = &self.nodes[ia].shape;
        if shape.len() != 1 || len == 0 || start + len > shape[0] {
            return Err(Error::shape("slice", shape, &[start, len]));
        }
        let value = self.nodes[ia].value[start..start + len].to_vec();
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(vec![len], value, Op::Slice { a: ia, start }, tracked))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, mk: impl Fn(usize) -> Op<T>) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[ia].shape.clone();
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(shape, value, mk(ia), tracked))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, T::ln, Op::Log)
    }

    fn last_axis(&self, op: &'static str, ia: usize) -> Result<usize> {
        let shape = &self.nodes[ia].shape;
        match shape.last() {
            Some(&c) if c > 0 => Ok(c),
            _ => Err(Error::shape(op, shape, &[])),
        }
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let cols = self.last_axis("softmax", ia)?;
        let mut value = self.nodes[ia].value.clone();
        value.chunks_mut(cols).for_each(softmax_in_place);
        let shape = self.nodes[ia].shape.clone();
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(shape, value, Op::Softmax(ia), tracked))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let cols = self.last_axis("log_softmax", ia)?;
        let mut value = self.nodes[ia].value.clone();
        value.chunks_mut(cols).for_each(log_softmax_in_place);
        let shape = self.nodes[ia].shape.clone();
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(shape, value, Op::LogSoftmax(ia), tracked))
    }

    /// Rows `ids` of a `[vocab, dim]` table, as a `[ids.len(), dim]` matrix.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let shape = &self.nodes[it].shape;
        if shape.len() != 2 {
            return Err(Error::shape("embedding_lookup", shape, &[ids.len()]));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::Empty("embedding_lookup ids"));
        }
        let mut value = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary {
                    what: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            value.extend_from_slice(&self.nodes[it].value[id * dim..(id + 1) * dim]);
        }
        let tracked = self.nodes[it].tracked;
        Ok(self.push(
            vec![ids.len(), dim],
            value,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Single embedding row as a rank-1 tensor.
    pub fn embedding_row(&mut self, table: Var, id: usize) -> Result<Var> {
        let m = self.embedding_lookup(table, &[id])?;
        let n = self.nodes[m.index].shape[1];
        self.nodes[m.index].shape = vec![n];
        Ok(m)
    }

    /// Scalar element `index` of a rank-1 tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let shape = &self.nodes[ia].shape;
        if shape.len() != 1 || index >= shape[0] {
            return Err(Error::shape("pick", shape, &[index]));
        }
        let value = vec![self.nodes[ia].value[index]];
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(vec![], value, Op::Pick { a: ia, index }, tracked))
    }

    /// `-log softmax(logits)[target]` for rank-1 logits, via a fused
    /// log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let il = self.idx(logits)?;
        let shape = &self.nodes[il].shape;
        if shape.len() != 1 || shape[0] == 0 {
            return Err(Error::shape("cross_entropy", shape, &[target]));
        }
        if target >= shape[0] {
            return Err(Error::Vocabulary {
                what: "target",
                index: target,
                size: shape[0],
            });
        }
        let mut ls = self.nodes[il].value.clone();
        log_softmax_in_place(&mut ls);
        let tracked = self.nodes[il].tracked;
        Ok(self.push(
            vec![],
            vec![-ls[target]],
            Op::CrossEntropy { logits: il, target },
            tracked,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.iter().copied().sum();
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(vec![], vec![s], Op::Sum(ia), tracked))
    }

    // -- backward ----------------------------------------------------------

    /// Resets all gradients, then back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_accumulate(loss)
    }

    /// Back-propagates from `loss` adding into the gradients left on leaves
    /// by previous passes. Interior gradients are recomputed from scratch.
    pub fn backward_accumulate(&mut self, loss: Var) -> Result<()> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::NotScalar(self.nodes[il].shape.clone()));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[il].tracked {
            return Ok(());
        }
        self.grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].tracked {
                propagate(&self.nodes, &mut self.grads, i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn acc<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], i: usize) -> Option<&'g mut [T]> {
    if !nodes[i].tracked {
        return None;
    }
    let n = nodes[i].value.len();
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], a: usize, g: &[T]) {
    if let Some(ga) = acc(nodes, grads, a) {
        ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
    }
}

/// Elementwise backward; `d(y, x)` is the local derivative given the output
/// and input values.
fn unary_back<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    out: usize,
    a: usize,
    g: &[T],
    d: impl Fn(T, T) -> T,
) {
    let (y, x) = (&nodes[out].value, &nodes[a].value);
    if let Some(ga) = acc(nodes, grads, a) {
        for (((o, &gi), &yi), &xi) in ga.iter_mut().zip(g).zip(y).zip(x) {
            *o += gi * d(yi, xi);
        }
    }
}

/// Pushes the output gradient `g` of node `i` into its inputs. Inputs always
/// have smaller indices than `i`.
fn propagate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = acc(nodes, grads, a) {
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        ga[r * k + p] += s;
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let x = av[r * k + p];
                        if x == T::zero() {
                            continue;
                        }
                        for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += x * y;
                        }
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            add_into(nodes, grads, a, g);
            add_into(nodes, grads, b, g);
        }
        &Op::Sub(a, b) => {
            add_into(nodes, grads, a, g);
            if let Some(gb) = acc(nodes, grads, b) {
                gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x);
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = acc(nodes, grads, a) {
                for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *o += x * y;
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for ((o, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                    *o += x * y;
                }
            }
        }
        &Op::AddBias(a, b) => {
            add_into(nodes, grads, a, g);
            if let Some(gb) = acc(nodes, grads, b) {
                let cols = gb.len();
                for (j, &x) in g.iter().enumerate() {
                    gb[j % cols] += x;
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x * c);
            }
        }
        Op::Concat(ids) | Op::Stack(ids) => {
            let mut off = 0;
            for &id in ids {
                let n = nodes[id].value.len();
                add_into(nodes, grads, id, &g[off..off + n]);
                off += n;
            }
        }
        &Op::Slice { a, start } => {
            if let Some(ga) = acc(nodes, grads, a) {
                ga[start..start + g.len()].iter_mut().zip(g).for_each(|(o, &x)| *o += x);
            }
        }
        &Op::Tanh(a) => unary_back(nodes, grads, i, a, g, |y, _| T::one() - y * y),
        &Op::Sigmoid(a) => unary_back(nodes, grads, i, a, g, |y, _| y * (T::one() - y)),
        &Op::Exp(a) => unary_back(nodes, grads, i, a, g, |y, _| y),
        &Op::Log(a) => unary_back(nodes, grads, i, a, g, |_, x| T::one() / x),
        &Op::Softmax(a) => {
            let y = &nodes[i].value;
            let cols = *nodes[i].shape.last().unwrap();
            if let Some(ga) = acc(nodes, grads, a) {
                for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &s)| x * s).sum();
                    for ((o, &x), &s) in out.iter_mut().zip(gr).zip(yr) {
                        *o += s * (x - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax(a) => {
            let y = &nodes[i].value;
            let cols = *nodes[i].shape.last().unwrap();
            if let Some(ga) = acc(nodes, grads, a) {
                for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let total: T = gr.iter().copied().sum();
                    for ((o, &x), &ly) in out.iter_mut().zip(gr).zip(yr) {
                        *o += x - ly.exp() * total;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let dim = *nodes[*table].shape.last().unwrap();
            if let Some(gt) = acc(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(&g[r * dim..(r + 1) * dim])
                        .for_each(|(o, &x)| *o += x);
                }
            }
        }
        &Op::Pick { a, index } => {
            if let Some(ga) = acc(nodes, grads, a) {
                ga[index] += g[0];
            }
        }
        &Op::CrossEntropy { logits, target } => {
            let mut p = nodes[logits].value.clone();
            softmax_in_place(&mut p);
            p[target] -= T::one();
            if let Some(gl) = acc(nodes, grads, logits) {
                gl.iter_mut().zip(&p).for_each(|(o, &x)| *o += x * g[0]);
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn log_softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Rescales `grads` in place so that their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ParameterSet<T>, max_norm: T) -> T {
    debug_assert!(max_norm > T::zero());
    let norm = grads.l2_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
