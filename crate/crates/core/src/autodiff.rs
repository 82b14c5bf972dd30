//! Tape-based reverse-mode differentiation over scalars and flat vectors.
//!
//! A [`Tape`] records a computation as an append-only list of nodes, each
//! holding its operation, parent node ids, and forward value. Values live in a
//! single flat `f64` arena so a training step allocates O(1) buffers. The
//! backward pass sweeps the node list in reverse and accumulates adjoints into
//! a mirror arena, which makes gradients available for every reachable leaf.
//!
//! The engine deliberately supports only first-order reverse mode. A node can
//! be a scalar (length 1) or a flat vector; matrices appear only as the weight
//! operand of [`Tape::linear`] and are stored row-major.
//!
//! [`Tape::detach`] copies a value into a fresh node with no backward rule, so
//! downstream gradients treat it as a constant. This is the primitive the
//! data-free losses rely on to freeze importance weights and batch means.

use std::sync::Arc;

use thiserror::Error;

/// Index of a node on a tape.
pub type NodeId = u32;

/// Handle to a tape node. Only meaningful together with the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(NodeId);

impl Value {
    pub fn id(self) -> NodeId {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("log of non-positive input at node {node} (value {value})")]
    LogDomain { node: NodeId, value: f64 },
    #[error("division by zero at node {node}")]
    DivByZero { node: NodeId },
    #[error("non-finite result at node {node}")]
    NonFinite { node: NodeId },
    #[error("backward root must be a scalar, got length {len}")]
    NonScalarRoot { len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

// AddConst keeps its offset and Detach its parent for graph inspection even
// though the backward pass never reads them.
#[allow(dead_code)]
#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Celu { x: NodeId, alpha: f64 },
    Square(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    MaxReduce(NodeId),
    Scale { x: NodeId, c: f64 },
    AddConst { x: NodeId, c: f64 },
    MinConst { x: NodeId, c: f64 },
    MaxConst { x: NodeId, c: f64 },
    /// y = W x + b with W row-major (out × in).
    Linear { w: NodeId, b: NodeId, x: NodeId },
    /// out[i] = x[set[i]]
    Gather { x: NodeId, set: u32 },
    /// out[set_a[i]] = a[i], out[set_b[j]] = b[j]; the sets partition 0..len.
    Scatter2 { a: NodeId, b: NodeId, set_a: u32, set_b: u32 },
    /// Concatenation of `count` nodes listed in `concat_args[start..]`.
    Concat { start: u32, count: u32 },
    Detach(NodeId),
}

struct Node {
    op: Op,
    off: u32,
    len: u32,
}

/// Append-only computation graph. Rebuilt per training step; `clear` keeps
/// the allocations.
pub struct Tape {
    nodes: Vec<Node>,
    data: Vec<f64>,
    index_sets: Vec<Arc<Vec<usize>>>,
    concat_args: Vec<NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            data: Vec::new(),
            index_sets: Vec::new(),
            concat_args: Vec::new(),
        }
    }

    /// Drop all nodes but keep buffers for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.data.clear();
        self.index_sets.clear();
        self.concat_args.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn val(&self, v: Value) -> &[f64] {
        let n = &self.nodes[v.0 as usize];
        &self.data[n.off as usize..(n.off + n.len) as usize]
    }

    /// Forward value of a scalar node.
    pub fn scalar(&self, v: Value) -> f64 {
        let s = self.val(v);
        debug_assert_eq!(s.len(), 1, "scalar() on vector node");
        s[0]
    }

    fn node_len(&self, id: NodeId) -> usize {
        self.nodes[id as usize].len as usize
    }

    fn push(&mut self, op: Op, len: usize) -> (Value, u32) {
        let off = self.data.len() as u32;
        self.data.resize(self.data.len() + len, 0.0);
        let id = self.nodes.len() as NodeId;
        self.nodes.push(Node {
            op,
            off,
            len: len as u32,
        });
        (Value(id), off)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Vector leaf: a parameter or constant input.
    pub fn leaf(&mut self, vals: &[f64]) -> Value {
        let (v, off) = self.push(Op::Leaf, vals.len());
        self.data[off as usize..off as usize + vals.len()].copy_from_slice(vals);
        v
    }

    /// Scalar leaf.
    pub fn leaf_scalar(&mut self, x: f64) -> Value {
        self.leaf(&[x])
    }

    // ── Elementwise binary (equal length, or scalar broadcast) ───────

    fn binary_len(&self, a: Value, b: Value) -> usize {
        let (la, lb) = (self.node_len(a.0), self.node_len(b.0));
        debug_assert!(
            la == lb || la == 1 || lb == 1,
            "incompatible lengths {la} and {lb}"
        );
        la.max(lb)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let len = self.binary_len(a, b);
        let (v, off) = self.push(Op::Add(a.0, b.0), len);
        let off = off as usize;
        for i in 0..len {
            self.data[off + i] = self.read(a, i, len) + self.read(b, i, len);
        }
        v
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        let len = self.binary_len(a, b);
        let (v, off) = self.push(Op::Sub(a.0, b.0), len);
        let off = off as usize;
        for i in 0..len {
            self.data[off + i] = self.read(a, i, len) - self.read(b, i, len);
        }
        v
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        let len = self.binary_len(a, b);
        let (v, off) = self.push(Op::Mul(a.0, b.0), len);
        let off = off as usize;
        for i in 0..len {
            self.data[off + i] = self.read(a, i, len) * self.read(b, i, len);
        }
        v
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value, AutodiffError> {
        let len = self.binary_len(a, b);
        let next = self.nodes.len() as NodeId;
        for i in 0..len {
            if self.read(b, i, len) == 0.0 {
                return Err(AutodiffError::DivByZero { node: next });
            }
        }
        let (v, off) = self.push(Op::Div(a.0, b.0), len);
        let off = off as usize;
        for i in 0..len {
            self.data[off + i] = self.read(a, i, len) / self.read(b, i, len);
        }
        Ok(v)
    }

    /// Broadcast-aware element read used by binary ops.
    #[inline]
    fn read(&self, v: Value, i: usize, out_len: usize) -> f64 {
        let n = &self.nodes[v.0 as usize];
        let idx = if n.len as usize == out_len { i } else { 0 };
        self.data[n.off as usize + idx]
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, op: Op, x: Value, f: impl Fn(f64) -> f64) -> Value {
        let len = self.node_len(x.0);
        let (v, off) = self.push(op, len);
        let (off, xn) = (off as usize, self.nodes[x.0 as usize].off as usize);
        for i in 0..len {
            self.data[off + i] = f(self.data[xn + i]);
        }
        v
    }

    pub fn neg(&mut self, x: Value) -> Value {
        self.unary(Op::Neg(x.0), x, |a| -a)
    }

    pub fn exp(&mut self, x: Value) -> Result<Value, AutodiffError> {
        let v = self.unary(Op::Exp(x.0), x, f64::exp);
        if self.val(v).iter().any(|a| !a.is_finite()) {
            return Err(AutodiffError::NonFinite { node: v.0 });
        }
        Ok(v)
    }

    pub fn log(&mut self, x: Value) -> Result<Value, AutodiffError> {
        let next = self.nodes.len() as NodeId;
        if let Some(bad) = self.val(x).iter().find(|a| **a <= 0.0) {
            return Err(AutodiffError::LogDomain {
                node: next,
                value: *bad,
            });
        }
        Ok(self.unary(Op::Log(x.0), x, f64::ln))
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        self.unary(Op::Tanh(x.0), x, f64::tanh)
    }

    /// celu(x) = x for x ≥ 0, alpha (exp(x/alpha) − 1) for x < 0.
    pub fn celu(&mut self, x: Value, alpha: f64) -> Value {
        self.unary(Op::Celu { x: x.0, alpha }, x, |a| {
            if a >= 0.0 {
                a
            } else {
                alpha * ((a / alpha).exp() - 1.0)
            }
        })
    }

    pub fn square(&mut self, x: Value) -> Value {
        self.unary(Op::Square(x.0), x, |a| a * a)
    }

    /// Positive part (x)₊; the mask used by the masked L² loss.
    pub fn relu(&mut self, x: Value) -> Value {
        self.unary(Op::Relu(x.0), x, |a| a.max(0.0))
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Value {
        self.unary(Op::Scale { x: x.0, c }, x, |a| a * c)
    }

    pub fn add_const(&mut self, x: Value, c: f64) -> Value {
        self.unary(Op::AddConst { x: x.0, c }, x, |a| a + c)
    }

    pub fn min_const(&mut self, x: Value, c: f64) -> Value {
        self.unary(Op::MinConst { x: x.0, c }, x, |a| a.min(c))
    }

    pub fn max_const(&mut self, x: Value, c: f64) -> Value {
        self.unary(Op::MaxConst { x: x.0, c }, x, |a| a.max(c))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: Value) -> Value {
        let s: f64 = self.val(x).iter().sum();
        let (v, off) = self.push(Op::Sum(x.0), 1);
        self.data[off as usize] = s;
        v
    }

    pub fn mean(&mut self, x: Value) -> Value {
        let n = self.node_len(x.0) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Maximum element (subgradient goes to the first argmax).
    pub fn max_reduce(&mut self, x: Value) -> Value {
        let m = self.val(x).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (v, off) = self.push(Op::MaxReduce(x.0), 1);
        self.data[off as usize] = m;
        v
    }

    pub fn dot(&mut self, a: Value, b: Value) -> Value {
        let p = self.mul(a, b);
        self.sum(p)
    }

    // ── Structured ops ───────────────────────────────────────────────

    /// y = W x + b, with W a row-major (b.len × x.len) leaf.
    pub fn linear(&mut self, w: Value, b: Value, x: Value) -> Value {
        let inp = self.node_len(x.0);
        let out = self.node_len(b.0);
        debug_assert_eq!(self.node_len(w.0), inp * out, "linear weight shape");
        let (v, off) = self.push(Op::Linear { w: w.0, b: b.0, x: x.0 }, out);
        let off = off as usize;
        let wo = self.nodes[w.0 as usize].off as usize;
        let bo = self.nodes[b.0 as usize].off as usize;
        let xo = self.nodes[x.0 as usize].off as usize;
        for i in 0..out {
            let mut acc = self.data[bo + i];
            let row = wo + i * inp;
            for j in 0..inp {
                acc += self.data[row + j] * self.data[xo + j];
            }
            self.data[off + i] = acc;
        }
        v
    }

    fn intern_set(&mut self, set: &Arc<Vec<usize>>) -> u32 {
        let id = self.index_sets.len() as u32;
        self.index_sets.push(Arc::clone(set));
        id
    }

    /// out[i] = x[set[i]]
    pub fn gather(&mut self, x: Value, set: &Arc<Vec<usize>>) -> Value {
        let sid = self.intern_set(set);
        let (v, off) = self.push(Op::Gather { x: x.0, set: sid }, set.len());
        let off = off as usize;
        let xo = self.nodes[x.0 as usize].off as usize;
        for (i, &j) in set.iter().enumerate() {
            self.data[off + i] = self.data[xo + j];
        }
        v
    }

    /// Reassemble a vector from two disjoint index sets covering 0..len.
    pub fn scatter2(
        &mut self,
        a: Value,
        set_a: &Arc<Vec<usize>>,
        b: Value,
        set_b: &Arc<Vec<usize>>,
    ) -> Value {
        debug_assert_eq!(self.node_len(a.0), set_a.len());
        debug_assert_eq!(self.node_len(b.0), set_b.len());
        let len = set_a.len() + set_b.len();
        let ia = self.intern_set(set_a);
        let ib = self.intern_set(set_b);
        let (v, off) = self.push(
            Op::Scatter2 {
                a: a.0,
                b: b.0,
                set_a: ia,
                set_b: ib,
            },
            len,
        );
        let off = off as usize;
        let ao = self.nodes[a.0 as usize].off as usize;
        let bo = self.nodes[b.0 as usize].off as usize;
        for (i, &j) in set_a.iter().enumerate() {
            self.data[off + j] = self.data[ao + i];
        }
        for (i, &j) in set_b.iter().enumerate() {
            self.data[off + j] = self.data[bo + i];
        }
        v
    }

    /// Concatenate nodes into one vector (used to stack per-sample scalars).
    pub fn concat(&mut self, parts: &[Value]) -> Value {
        let start = self.concat_args.len() as u32;
        let mut len = 0usize;
        for p in parts {
            self.concat_args.push(p.0);
            len += self.node_len(p.0);
        }
        let (v, off) = self.push(
            Op::Concat {
                start,
                count: parts.len() as u32,
            },
            len,
        );
        let mut off = off as usize;
        for p in parts {
            let n = &self.nodes[p.0 as usize];
            let (po, pl) = (n.off as usize, n.len as usize);
            // copy_within needs a single borrow of data
            for i in 0..pl {
                self.data[off + i] = self.data[po + i];
            }
            off += pl;
        }
        v
    }

    /// Same value, no gradient: the backward pass treats the result as a
    /// constant.
    pub fn detach(&mut self, x: Value) -> Value {
        let len = self.node_len(x.0);
        let (v, off) = self.push(Op::Detach(x.0), len);
        let (off, xo) = (off as usize, self.nodes[x.0 as usize].off as usize);
        for i in 0..len {
            self.data[off + i] = self.data[xo + i];
        }
        v
    }

    /// Numerically stable log(Σ exp(x)) with exact gradients (the max shift
    /// is detached, which leaves the derivative unchanged).
    pub fn log_sum_exp(&mut self, x: Value) -> Result<Value, AutodiffError> {
        let m = self.max_reduce(x);
        let m = self.detach(m);
        let shifted = self.sub(x, m);
        let e = self.exp(shifted)?;
        let s = self.sum(e);
        let l = self.log(s)?;
        Ok(self.add(l, m))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns the adjoint arena.
    pub fn backward(&self, root: Value) -> Result<Adjoints, AutodiffError> {
        let rn = &self.nodes[root.0 as usize];
        if rn.len != 1 {
            return Err(AutodiffError::NonScalarRoot {
                len: rn.len as usize,
            });
        }
        if !self.data[rn.off as usize].is_finite() {
            return Err(AutodiffError::NonFinite { node: root.0 });
        }
        let mut grad = vec![0.0; self.data.len()];
        grad[rn.off as usize] = 1.0;
        self.sweep(root.0, &mut grad);
        Ok(Adjoints { grad })
    }

    /// Backward into a caller-provided buffer (zeroed here); used by
    /// [`Tape::per_sample_gradients`] to avoid reallocating the arena.
    fn backward_into(&self, root: NodeId, grad: &mut [f64]) {
        grad.fill(0.0);
        grad[self.nodes[root as usize].off as usize] = 1.0;
        self.sweep(root, grad);
    }

    fn sweep(&self, root: NodeId, grad: &mut [f64]) {
        for id in (0..=root as usize).rev() {
            let node = &self.nodes[id];
            let (off, len) = (node.off as usize, node.len as usize);
            match node.op {
                Op::Leaf | Op::Detach(_) => {}
                Op::Add(a, b) => {
                    for i in 0..len {
                        let g = grad[off + i];
                        self.acc(grad, a, i, len, g);
                        self.acc(grad, b, i, len, g);
                    }
                }
                Op::Sub(a, b) => {
                    for i in 0..len {
                        let g = grad[off + i];
                        self.acc(grad, a, i, len, g);
                        self.acc(grad, b, i, len, -g);
                    }
                }
                Op::Mul(a, b) => {
                    for i in 0..len {
                        let g = grad[off + i];
                        let (va, vb) = (self.read(Value(a), i, len), self.read(Value(b), i, len));
                        self.acc(grad, a, i, len, g * vb);
                        self.acc(grad, b, i, len, g * va);
                    }
                }
                Op::Div(a, b) => {
                    for i in 0..len {
                        let g = grad[off + i];
                        let vb = self.read(Value(b), i, len);
                        let y = self.data[off + i];
                        self.acc(grad, a, i, len, g / vb);
                        self.acc(grad, b, i, len, -g * y / vb);
                    }
                }
                Op::Neg(x) => self.unary_back(grad, x, off, len, |_, _, g| -g),
                Op::Exp(x) => {
                    let data = &self.data;
                    self.unary_back(grad, x, off, len, |i, _, g| g * data[off + i])
                }
                Op::Log(x) => self.unary_back(grad, x, off, len, |_, xv, g| g / xv),
                Op::Tanh(x) => {
                    let data = &self.data;
                    self.unary_back(grad, x, off, len, |i, _, g| {
                        let y = data[off + i];
                        g * (1.0 - y * y)
                    })
                }
                Op::Celu { x, alpha } => self.unary_back(grad, x, off, len, |_, xv, g| {
                    if xv >= 0.0 {
                        g
                    } else {
                        g * (xv / alpha).exp()
                    }
                }),
                Op::Square(x) => self.unary_back(grad, x, off, len, |_, xv, g| 2.0 * xv * g),
                Op::Relu(x) => {
                    self.unary_back(grad, x, off, len, |_, xv, g| if xv > 0.0 { g } else { 0.0 })
                }
                Op::Scale { x, c } => self.unary_back(grad, x, off, len, |_, _, g| g * c),
                Op::AddConst { x, .. } => self.unary_back(grad, x, off, len, |_, _, g| g),
                Op::MinConst { x, c } => {
                    self.unary_back(grad, x, off, len, |_, xv, g| if xv < c { g } else { 0.0 })
                }
                Op::MaxConst { x, c } => {
                    self.unary_back(grad, x, off, len, |_, xv, g| if xv > c { g } else { 0.0 })
                }
                Op::Sum(x) => {
                    let g = grad[off];
                    let xn = &self.nodes[x as usize];
                    let (xo, xl) = (xn.off as usize, xn.len as usize);
                    for i in 0..xl {
                        grad[xo + i] += g;
                    }
                }
                Op::MaxReduce(x) => {
                    let g = grad[off];
                    let xn = &self.nodes[x as usize];
                    let (xo, xl) = (xn.off as usize, xn.len as usize);
                    let mut best = 0usize;
                    for i in 1..xl {
                        if self.data[xo + i] > self.data[xo + best] {
                            best = i;
                        }
                    }
                    grad[xo + best] += g;
                }
                Op::Linear { w, b, x } => {
                    let wn = self.nodes[w as usize].off as usize;
                    let bn = self.nodes[b as usize].off as usize;
                    let xn = &self.nodes[x as usize];
                    let (xo, inp) = (xn.off as usize, xn.len as usize);
                    for i in 0..len {
                        let g = grad[off + i];
                        if g == 0.0 {
                            continue;
                        }
                        grad[bn + i] += g;
                        let row = wn + i * inp;
                        for j in 0..inp {
                            grad[row + j] += g * self.data[xo + j];
                            grad[xo + j] += g * self.data[row + j];
                        }
                    }
                }
                Op::Gather { x, set } => {
                    let xo = self.nodes[x as usize].off as usize;
                    let set = &self.index_sets[set as usize];
                    for (i, &j) in set.iter().enumerate() {
                        grad[xo + j] += grad[off + i];
                    }
                }
                Op::Scatter2 { a, b, set_a, set_b } => {
                    let ao = self.nodes[a as usize].off as usize;
                    let bo = self.nodes[b as usize].off as usize;
                    let sa = &self.index_sets[set_a as usize];
                    let sb = &self.index_sets[set_b as usize];
                    for (i, &j) in sa.iter().enumerate() {
                        grad[ao + i] += grad[off + j];
                    }
                    for (i, &j) in sb.iter().enumerate() {
                        grad[bo + i] += grad[off + j];
                    }
                }
                Op::Concat { start, count } => {
                    let mut cur = off;
                    for k in 0..count {
                        let p = self.concat_args[(start + k) as usize];
                        let pn = &self.nodes[p as usize];
                        let (po, pl) = (pn.off as usize, pn.len as usize);
                        for i in 0..pl {
                            grad[po + i] += grad[cur + i];
                        }
                        cur += pl;
                    }
                }
            }
        }
    }

    /// Accumulate into a binary-op parent, collapsing broadcasts.
    #[inline]
    fn acc(&self, grad: &mut [f64], parent: NodeId, i: usize, out_len: usize, g: f64) {
        let n = &self.nodes[parent as usize];
        let idx = if n.len as usize == out_len { i } else { 0 };
        grad[n.off as usize + idx] += g;
    }

    #[inline]
    fn unary_back(
        &self,
        grad: &mut [f64],
        x: NodeId,
        off: usize,
        len: usize,
        f: impl Fn(usize, f64, f64) -> f64,
    ) {
        let xn = &self.nodes[x as usize];
        let xo = xn.off as usize;
        for i in 0..len {
            let g = grad[off + i];
            if g != 0.0 {
                grad[xo + i] += f(i, self.data[xo + i], g);
            }
        }
    }

    /// Gradient of a scalar root with respect to the given leaves, flattened
    /// in argument order.
    pub fn gradient(&self, root: Value, params: &[Value]) -> Result<Vec<f64>, AutodiffError> {
        let adj = self.backward(root)?;
        let mut out = Vec::new();
        for p in params {
            out.extend_from_slice(adj.wrt(self, *p));
        }
        Ok(out)
    }

    /// Independent backward passes for n scalar roots sharing one tape.
    ///
    /// Costs O(n · |graph|); this is the price of per-sample gradients and is
    /// only paid when the variance-reduction machinery asks for them.
    pub fn per_sample_gradients(
        &self,
        roots: &[Value],
        params: &[Value],
    ) -> Result<Vec<Vec<f64>>, AutodiffError> {
        let mut grad = vec![0.0; self.data.len()];
        let mut out = Vec::with_capacity(roots.len());
        for root in roots {
            let rn = &self.nodes[root.0 as usize];
            if rn.len != 1 {
                return Err(AutodiffError::NonScalarRoot {
                    len: rn.len as usize,
                });
            }
            self.backward_into(root.0, &mut grad);
            let mut g = Vec::new();
            for p in params {
                let pn = &self.nodes[p.0 as usize];
                g.extend_from_slice(&grad[pn.off as usize..(pn.off + pn.len) as usize]);
            }
            out.push(g);
        }
        Ok(out)
    }
}

/// Adjoint arena produced by [`Tape::backward`].
pub struct Adjoints {
    grad: Vec<f64>,
}

impl Adjoints {
    /// Adjoint slice of a node (gradient of the root w.r.t. that node).
    pub fn wrt<'a>(&'a self, tape: &Tape, v: Value) -> &'a [f64] {
        let n = &tape.nodes[v.0 as usize];
        &self.grad[n.off as usize..(n.off + n.len) as usize]
    }

    pub fn wrt_scalar(&self, tape: &Tape, v: Value) -> f64 {
        self.wrt(tape, v)[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff;

    #[test]
    fn celu_values() {
        let mut t = Tape::new();
        let x = t.leaf(&[0.0, 2.0, -1.0]);
        let y = t.celu(x, 1.0);
        let v = t.val(y);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 2.0);
        // closed form: e^{-1} - 1
        let expect = (-1.0f64).exp() - 1.0;
        assert!((v[2] - expect).abs() < 1e-15, "celu(-1)={} vs {}", v[2], expect);
        assert!((v[2] + 0.6321).abs() < 1e-4);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf_scalar(2.0);
        let y = t.leaf_scalar(3.0);
        let p = t.mul(x, y);
        let adj = t.backward(p).unwrap();
        assert_eq!(adj.wrt_scalar(&t, x), 3.0);
        assert_eq!(adj.wrt_scalar(&t, y), 2.0);
    }

    #[test]
    fn log_exp_identity_gradient() {
        for x0 in [-2.0, 0.3, 5.0] {
            let mut t = Tape::new();
            let x = t.leaf_scalar(x0);
            let e = t.exp(x).unwrap();
            let l = t.log(e).unwrap();
            let adj = t.backward(l).unwrap();
            assert!((adj.wrt_scalar(&t, x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_is_constant() {
        // d/dx [detach(x) * x] at x=3 is 3
        let mut t = Tape::new();
        let x = t.leaf_scalar(3.0);
        let d = t.detach(x);
        let p = t.mul(d, x);
        let adj = t.backward(p).unwrap();
        assert_eq!(adj.wrt_scalar(&t, x), 3.0);

        // d/dx [detach(x^2)] at x=5 is 0
        let mut t = Tape::new();
        let x = t.leaf_scalar(5.0);
        let sq = t.square(x);
        let d = t.detach(sq);
        let adj = t.backward(d).unwrap();
        assert_eq!(adj.wrt_scalar(&t, x), 0.0);

        // d/dx [(x - detach(x))^2] at x=2: value 0, gradient 2(x-c) with c=x, so 0
        let mut t = Tape::new();
        let x = t.leaf_scalar(2.0);
        let d = t.detach(x);
        let diff = t.sub(x, d);
        let sq = t.square(diff);
        assert_eq!(t.scalar(sq), 0.0);
        let adj = t.backward(sq).unwrap();
        assert_eq!(adj.wrt_scalar(&t, x), 0.0);
    }

    #[test]
    fn detach_idempotent() {
        let mut t = Tape::new();
        let x = t.leaf_scalar(1.5);
        let d1 = t.detach(x);
        let d2 = t.detach(d1);
        let y = t.mul(d2, x);
        assert_eq!(t.scalar(d1), t.scalar(d2));
        let adj = t.backward(y).unwrap();
        assert_eq!(adj.wrt_scalar(&t, x), 1.5);
        assert_eq!(adj.wrt_scalar(&t, d1), 0.0); // nothing flows past d2 into d1
    }

    #[test]
    fn log_domain_error_carries_node_id() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, -0.5]);
        match t.log(x) {
            Err(AutodiffError::LogDomain { node, value }) => {
                assert_eq!(node, 1);
                assert_eq!(value, -0.5);
            }
            other => panic!("expected log domain error, got {other:?}"),
        }
    }

    #[test]
    fn div_by_zero_rejected() {
        let mut t = Tape::new();
        let a = t.leaf_scalar(1.0);
        let b = t.leaf_scalar(0.0);
        assert!(matches!(t.div(a, b), Err(AutodiffError::DivByZero { .. })));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0]);
        assert!(matches!(
            t.backward(x),
            Err(AutodiffError::NonScalarRoot { len: 2 })
        ));
    }

    /// Three-layer MLP scalar output vs central finite differences.
    #[test]
    fn mlp_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dims = [4usize, 5, 3, 1];
        let mut params = Vec::new();
        for k in 0..3 {
            for _ in 0..dims[k] * dims[k + 1] + dims[k + 1] {
                params.push(rng.random_range(-0.8..0.8));
            }
        }
        let x0 = [0.3, -0.7, 1.1, 0.4];

        let eval = |p: &[f64]| -> (Tape, Value, Vec<Value>) {
            let mut t = Tape::new();
            let mut leaves = Vec::new();
            let mut off = 0usize;
            let mut layer_vals = Vec::new();
            for k in 0..3 {
                let (ni, no) = (dims[k], dims[k + 1]);
                let w = t.leaf(&p[off..off + ni * no]);
                off += ni * no;
                let b = t.leaf(&p[off..off + no]);
                off += no;
                leaves.push(w);
                leaves.push(b);
                layer_vals.push((w, b));
            }
            let mut h = t.leaf(&x0);
            for (k, (w, b)) in layer_vals.iter().enumerate() {
                h = t.linear(*w, *b, h);
                if k < 2 {
                    h = t.celu(h, 1.0);
                }
            }
            let root = t.sum(h);
            (t, root, leaves)
        };

        let (t, root, leaves) = eval(&params);
        let grad = t.gradient(root, &leaves).unwrap();

        let f = |p: &[f64]| {
            let (t, root, _) = eval(p);
            t.scalar(root)
        };
        let fd = central_diff(&f, &params, 1e-5);
        for (i, (g, d)) in grad.iter().zip(fd.iter()).enumerate() {
            if g.abs() > 1e-8 {
                let rel = (g - d).abs() / g.abs().max(d.abs());
                assert!(rel <= 1e-6, "coord {i}: ad={g} fd={d} rel={rel}");
            }
        }
    }

    #[test]
    fn backward_linearity() {
        // backward(a r1 + b r2) = a backward(r1) + b backward(r2)
        let mut t = Tape::new();
        let x = t.leaf(&[0.4, -1.2, 2.0]);
        let sq = t.square(x);
        let r1 = t.sum(sq);
        let e = t.celu(x, 1.0);
        let r2 = t.sum(e);
        let (a, b) = (2.5, -0.75);
        let s1 = t.scale(r1, a);
        let s2 = t.scale(r2, b);
        let combo = t.add(s1, s2);

        let g1 = t.gradient(r1, &[x]).unwrap();
        let g2 = t.gradient(r2, &[x]).unwrap();
        let gc = t.gradient(combo, &[x]).unwrap();
        for i in 0..3 {
            let expect = a * g1[i] + b * g2[i];
            let rel = (gc[i] - expect).abs() / expect.abs().max(1e-300);
            assert!(rel <= 1e-12, "coord {i}: {} vs {}", gc[i], expect);
        }
    }

    #[test]
    fn per_sample_gradients_sum_to_batched() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, -0.5, 0.25]);
        let mut roots = Vec::new();
        for _ in 0..8 {
            // random quadratic a x.x + b 1.x
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let sq = t.square(x);
            let s1 = t.sum(sq);
            let s2 = t.sum(x);
            let t1 = t.scale(s1, a);
            let t2 = t.scale(s2, b);
            roots.push(t.add(t1, t2));
        }
        let per = t.per_sample_gradients(&roots, &[x]).unwrap();
        let total = t.concat(&roots);
        let total = t.sum(total);
        let batched = t.gradient(total, &[x]).unwrap();
        for i in 0..3 {
            let s: f64 = per.iter().map(|g| g[i]).sum();
            assert!((s - batched[i]).abs() <= 1e-12 * batched[i].abs().max(1.0));
        }
    }

    #[test]
    fn per_sample_single_root_equals_backward() {
        let mut t = Tape::new();
        let x = t.leaf_scalar(1.0);
        let sq = t.square(x);
        let cube = t.mul(sq, x);
        let per = t.per_sample_gradients(&[cube], &[x]).unwrap();
        let full = t.gradient(cube, &[x]).unwrap();
        assert_eq!(per[0], full);
    }

    #[test]
    fn two_quadratic_roots_example() {
        // roots x^2 and 3x at x=1: gradients 2 and 3; sum 5 = backward(x^2+3x)
        let mut t = Tape::new();
        let x = t.leaf_scalar(1.0);
        let r1 = t.square(x);
        let r2 = t.scale(x, 3.0);
        let per = t.per_sample_gradients(&[r1, r2], &[x]).unwrap();
        assert_eq!(per[0][0], 2.0);
        assert_eq!(per[1][0], 3.0);
        let s = t.add(r1, r2);
        let g = t.gradient(s, &[x]).unwrap();
        assert_eq!(g[0], 5.0);
    }

    #[test]
    fn log_sum_exp_stable_and_correct() {
        let mut t = Tape::new();
        let x = t.leaf(&[1000.0, 1000.0 + (2.0f64).ln()]);
        let l = t.log_sum_exp(x).unwrap();
        assert!((t.scalar(l) - (1000.0 + (3.0f64).ln())).abs() < 1e-9);
        let adj = t.backward(l).unwrap();
        let g = adj.wrt(&t, x);
        assert!((g[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g[1] - 2.0 / 3.0).abs() < 1e-12);
    }
}
