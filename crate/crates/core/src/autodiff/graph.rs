//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive executed during a forward pass, in
//! execution order. Parameters enter as borrowed leaves; `backward` replays
//! the recorded rules in reverse and accumulates into the gradient buffers
//! of every reachable leaf that requires a gradient.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;
use std::sync::MutexGuard;

use super::kernels::gemm;
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for error messages and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    OneMinus,
    Scale,
    Sigmoid,
    Tanh,
    LeakyRelu,
    Softmax,
    Concat,
    StackRows,
    SliceRows,
    GatherRows,
    MaxOverTime,
    Sum,
    Nll,
    EdgeScores,
    SegmentSoftmax,
    EdgeAggregate,
}

impl Primitive {
    pub const ALL: [Primitive; 21] = [
        Primitive::Leaf,
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::OneMinus,
        Primitive::Scale,
        Primitive::Sigmoid,
        Primitive::Tanh,
        Primitive::LeakyRelu,
        Primitive::Softmax,
        Primitive::Concat,
        Primitive::StackRows,
        Primitive::SliceRows,
        Primitive::GatherRows,
        Primitive::MaxOverTime,
        Primitive::Sum,
        Primitive::Nll,
        Primitive::EdgeScores,
        Primitive::SegmentSoftmax,
        Primitive::EdgeAggregate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::OneMinus => "one_minus",
            Primitive::Scale => "scale",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Softmax => "softmax",
            Primitive::Concat => "concat",
            Primitive::StackRows => "stack_rows",
            Primitive::SliceRows => "slice_rows",
            Primitive::GatherRows => "gather_rows",
            Primitive::MaxOverTime => "max_over_time",
            Primitive::Sum => "sum",
            Primitive::Nll => "nll",
            Primitive::EdgeScores => "edge_scores",
            Primitive::SegmentSoftmax => "segment_softmax",
            Primitive::EdgeAggregate => "edge_aggregate",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    OneMinus {
        a: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Sigmoid {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    LeakyRelu {
        a: Var,
        slope: f64,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    Concat {
        a: Var,
        b: Var,
        p: usize,
        q: usize,
    },
    StackRows {
        parts: Vec<(Var, usize)>,
        cols: usize,
    },
    SliceRows {
        a: Var,
        start: usize,
        cols: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
        cols: usize,
    },
    MaxOverTime {
        a: Var,
        argmax: Vec<usize>,
        cols: usize,
    },
    Sum {
        a: Var,
    },
    Nll {
        probs: Var,
        targets: Vec<usize>,
        cols: usize,
        clamped: Vec<bool>,
    },
    EdgeScores {
        target: Var,
        source: Var,
        edges: Vec<(usize, usize)>,
    },
    SegmentSoftmax {
        a: Var,
        offsets: Vec<usize>,
    },
    EdgeAggregate {
        weights: Var,
        values: Var,
        edges: Vec<(usize, usize)>,
        cols: usize,
    },
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::MatMul { .. } => Primitive::MatMul,
            Op::Add { .. } => Primitive::Add,
            Op::Sub { .. } => Primitive::Sub,
            Op::Mul { .. } => Primitive::Mul,
            Op::OneMinus { .. } => Primitive::OneMinus,
            Op::Scale { .. } => Primitive::Scale,
            Op::Sigmoid { .. } => Primitive::Sigmoid,
            Op::Tanh { .. } => Primitive::Tanh,
            Op::LeakyRelu { .. } => Primitive::LeakyRelu,
            Op::Softmax { .. } => Primitive::Softmax,
            Op::Concat { .. } => Primitive::Concat,
            Op::StackRows { .. } => Primitive::StackRows,
            Op::SliceRows { .. } => Primitive::SliceRows,
            Op::GatherRows { .. } => Primitive::GatherRows,
            Op::MaxOverTime { .. } => Primitive::MaxOverTime,
            Op::Sum { .. } => Primitive::Sum,
            Op::Nll { .. } => Primitive::Nll,
            Op::EdgeScores { .. } => Primitive::EdgeScores,
            Op::SegmentSoftmax { .. } => Primitive::SegmentSoftmax,
            Op::EdgeAggregate { .. } => Primitive::EdgeAggregate,
        }
    }
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    needs_grad: bool,
    source: Option<&'p Tensor>,
}

/// The computation record for one forward pass.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<*const Tensor, Var>,
    fault: Option<Primitive>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), c)
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    /// Scales the gradient emitted by every backward rule of `prim` by 1.01.
    /// Exists so gradient checks can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, prim: Primitive) {
        self.fault = Some(prim);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Owned copy of a recorded value.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("recorded shapes are consistent")
    }

    /// Number of clamped probabilities in an `nll` node.
    pub fn clamped_count(&self, v: Var) -> usize {
        match &self.nodes[v.0].op {
            Op::Nll { clamped, .. } => clamped.iter().filter(|c| **c).count(),
            _ => 0,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            needs_grad,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::Usage(format!(
                "variable {} is not recorded on this graph",
                v.0
            )))
        }
    }

    /// Registers a tensor as a leaf, borrowing its data. Registering the same
    /// tensor twice returns the same variable.
    pub fn leaf(&mut self, t: &'p Tensor) -> Var {
        let key = t as *const Tensor;
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
            source: Some(t),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    /// Records a constant (never receives gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.push(shape, vec![0.0; n], Op::Leaf, false)
    }

    /// Matrix product of `a: m×k` and `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(false, false, m, k, n, self.value(a), self.value(b), 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Elementwise sum. `b` may also be a vector matching the last dimension
    /// of a 2-D `a`, in which case it is added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        let broadcast = if sa.as_slice() == sb {
            false
        } else if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            true
        } else {
            return Err(TensorError::shape("add", &sa, sb));
        };
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = if broadcast {
            let cols = vb.len();
            va.iter().enumerate().map(|(i, x)| x + vb[i % cols]).collect()
        } else {
            va.iter().zip(vb).map(|(x, y)| x + y).collect()
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(sa, out, Op::Add { a, b, broadcast }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| 1.0 - x, |_| Op::OneMinus { a })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        self.unary(a, |x| x * factor, |_| Op::Scale { a, factor })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, sigmoid, |_| Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::tanh, |_| Op::Tanh { a })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            |_| Op::LeakyRelu { a, slope },
        )
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(Var) -> Op) -> Result<Var, TensorError> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, op(a), ng))
    }

    /// Softmax over the last dimension (every row of a matrix, or the whole
    /// vector), stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        let (_, cols) = rows_cols(&shape);
        if cols == 0 || self.value(a).is_empty() {
            return Err(TensorError::Domain("softmax of an empty vector".into()));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.needs(a);
        Ok(self.push(shape, out, Op::Softmax { a, cols }, ng))
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::shape("concat", sa, sb));
        }
        let p = *sa.last().unwrap();
        let q = *sb.last().unwrap();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let rows = rows_cols(sa).0;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&va[r * p..(r + 1) * p]);
            out.extend_from_slice(&vb[r * q..(r + 1) * q]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Concat { a, b, p, q }, ng))
    }

    /// Stacks vectors (one row each) and matrices along the first dimension.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("stack_rows needs at least one input".into()))?;
        self.check(*first)?;
        let cols = rows_cols(self.shape(*first)).1;
        let mut recorded = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        let mut ng = false;
        for &v in parts {
            self.check(v)?;
            let s = self.shape(v);
            let (r, c) = match s.len() {
                1 => (1, s[0]),
                2 => (s[0], s[1]),
                _ => return Err(TensorError::shape("stack_rows", self.shape(*first), s)),
            };
            if c != cols {
                return Err(TensorError::shape("stack_rows", self.shape(*first), s));
            }
            out.extend_from_slice(self.value(v));
            recorded.push((v, r));
            ng |= self.needs(v);
        }
        let rows = out.len() / cols.max(1);
        Ok(self.push(vec![rows, cols], out, Op::StackRows { parts: recorded, cols }, ng))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[0] {
            return Err(TensorError::Index(format!(
                "rows {}..{} of shape {:?}",
                start,
                start + len,
                s
            )));
        }
        let cols = s[1];
        let out = self.value(a)[start * cols..(start + len) * cols].to_vec();
        let ng = self.needs(a);
        Ok(self.push(vec![len, cols], out, Op::SliceRows { a, start, cols }, ng))
    }

    /// Row lookup: output row `t` is row `ids[t]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.check(table)?;
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::shape("gather_rows", s, &[ids.len()]));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index(format!("row {id} of a {rows}-row table")));
            }
            out.extend_from_slice(&self.value(table)[id * cols..(id + 1) * cols]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
                cols,
            },
            ng,
        ))
    }

    /// Columnwise maximum of a `T×d` matrix. Ties resolve to the lowest row.
    pub fn max_over_time(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::shape("max_over_time", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        if rows == 0 {
            return Err(TensorError::Domain("max over an empty sequence".into()));
        }
        let v = self.value(a);
        let mut out = v[..cols].to_vec();
        let mut argmax = vec![0; cols];
        for r in 1..rows {
            for c in 0..cols {
                let x = v[r * cols + c];
                if x > out[c] {
                    out[c] = x;
                    argmax[c] = r;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(vec![cols], out, Op::MaxOverTime { a, argmax, cols }, ng))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let total = self.value(a).iter().sum();
        let ng = self.needs(a);
        Ok(self.push(Vec::new(), vec![total], Op::Sum { a }, ng))
    }

    /// `-Σ_r log(max(probs[r, targets[r]], clamp))` over the rows of a
    /// probability matrix (a vector counts as one row).
    pub fn nll(&mut self, probs: Var, targets: &[usize], clamp: f64) -> Result<Var, TensorError> {
        self.check(probs)?;
        let (rows, cols) = rows_cols(self.shape(probs));
        if rows != targets.len() {
            return Err(TensorError::shape("nll", self.shape(probs), &[targets.len()]));
        }
        let v = self.value(probs);
        let mut total = 0.0;
        let mut clamped = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(TensorError::Index(format!("target {t} of {cols} classes")));
            }
            let p = v[r * cols + t];
            let c = p < clamp;
            clamped.push(c);
            total -= if c { clamp.ln() } else { p.ln() };
        }
        let ng = self.needs(probs);
        Ok(self.push(
            Vec::new(),
            vec![total],
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                cols,
                clamped,
            },
            ng,
        ))
    }

    /// Per-edge score `target[t] + source[s]` for each `(t, s)` edge, where
    /// both inputs hold one value per node.
    pub fn edge_scores(&mut self, target: Var, source: Var, edges: &[(usize, usize)]) -> Result<Var, TensorError> {
        self.check(target)?;
        self.check(source)?;
        let (nt, ns) = (self.value(target).len(), self.value(source).len());
        let mut out = Vec::with_capacity(edges.len());
        for &(t, s) in edges {
            if t >= nt || s >= ns {
                return Err(TensorError::Index(format!("edge ({t}, {s}) over {nt} nodes")));
            }
            out.push(self.value(target)[t] + self.value(source)[s]);
        }
        let ng = self.needs(target) || self.needs(source);
        Ok(self.push(
            vec![edges.len()],
            out,
            Op::EdgeScores {
                target,
                source,
                edges: edges.to_vec(),
            },
            ng,
        ))
    }

    /// Softmax over contiguous segments `offsets[i]..offsets[i + 1]`.
    pub fn segment_softmax(&mut self, a: Var, offsets: &[usize]) -> Result<Var, TensorError> {
        self.check(a)?;
        let len = self.value(a).len();
        if offsets.first() != Some(&0) || offsets.last() != Some(&len) {
            return Err(TensorError::Usage(format!("segment offsets must span 0..{len}")));
        }
        let mut out = self.value(a).to_vec();
        for (i, w) in offsets.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(TensorError::Domain(format!("segment {i} is empty")));
            }
            softmax_in_place(&mut out[w[0]..w[1]]);
        }
        let ng = self.needs(a);
        Ok(self.push(
            vec![len],
            out,
            Op::SegmentSoftmax {
                a,
                offsets: offsets.to_vec(),
            },
            ng,
        ))
    }

    /// `out[t] = Σ_{k: edge k = (t, s)} weights[k] · values[s]`, with one
    /// output row per node of `values`.
    pub fn edge_aggregate(&mut self, weights: Var, values: Var, edges: &[(usize, usize)]) -> Result<Var, TensorError> {
        self.check(weights)?;
        self.check(values)?;
        let s = self.shape(values);
        if s.len() != 2 || self.value(weights).len() != edges.len() {
            return Err(TensorError::shape("edge_aggregate", self.shape(weights), s));
        }
        let (n, cols) = (s[0], s[1]);
        let mut out = vec![0.0; n * cols];
        let (w, v) = (self.value(weights), self.value(values));
        for (k, &(t, src)) in edges.iter().enumerate() {
            if t >= n || src >= n {
                return Err(TensorError::Index(format!("edge ({t}, {src}) over {n} nodes")));
            }
            let row = &v[src * cols..(src + 1) * cols];
            for (o, x) in out[t * cols..(t + 1) * cols].iter_mut().zip(row) {
                *o += w[k] * x;
            }
        }
        let ng = self.needs(weights) || self.needs(values);
        Ok(self.push(
            vec![n, cols],
            out,
            Op::EdgeAggregate {
                weights,
                values,
                edges: edges.to_vec(),
                cols,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients are added to whatever the
    /// leaves already hold; call `Tensor::zero_grad` to reset them.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs(loss) {
            return Ok(());
        }
        let mut slots: Vec<Slot<'_>> = self
            .nodes
            .iter()
            .map(|n| match n.source {
                Some(t) if n.needs_grad => Slot::Param(t.lock_grad()),
                _ => Slot::Local(None),
            })
            .collect();
        slots[loss.0].add(&[1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(mut grad) = slots[i].take_local() else {
                continue;
            };
            if self.fault == Some(node.op.primitive()) {
                grad.iter_mut().for_each(|g| *g *= 1.01);
            }
            self.backward_rule(i, &grad, &mut slots);
        }
        Ok(())
    }

    fn backward_rule(&self, i: usize, grad: &[f64], slots: &mut [Slot<'_>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let dst = slots[a.0].get(m * k);
                    gemm(false, true, m, n, k, grad, self.value(b), 1.0, dst);
                }
                if self.needs(b) {
                    let dst = slots[b.0].get(k * n);
                    gemm(true, false, k, m, n, self.value(a), grad, 1.0, dst);
                }
            }
            &Op::Add { a, b, broadcast } => {
                if self.needs(a) {
                    slots[a.0].add(grad);
                }
                if self.needs(b) {
                    if broadcast {
                        let cols = self.value(b).len();
                        let dst = slots[b.0].get(cols);
                        for (idx, g) in grad.iter().enumerate() {
                            dst[idx % cols] += g;
                        }
                    } else {
                        slots[b.0].add(grad);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if self.needs(a) {
                    slots[a.0].add(grad);
                }
                if self.needs(b) {
                    let dst = slots[b.0].get(grad.len());
                    dst.iter_mut().zip(grad).for_each(|(d, g)| *d -= g);
                }
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    let vb = self.value(b);
                    let dst = slots[a.0].get(grad.len());
                    for ((d, g), y) in dst.iter_mut().zip(grad).zip(vb) {
                        *d += g * y;
                    }
                }
                if self.needs(b) {
                    let va = self.value(a);
                    let dst = slots[b.0].get(grad.len());
                    for ((d, g), x) in dst.iter_mut().zip(grad).zip(va) {
                        *d += g * x;
                    }
                }
            }
            &Op::OneMinus { a } => {
                let dst = slots[a.0].get(grad.len());
                dst.iter_mut().zip(grad).for_each(|(d, g)| *d -= g);
            }
            &Op::Scale { a, factor } => {
                let dst = slots[a.0].get(grad.len());
                dst.iter_mut().zip(grad).for_each(|(d, g)| *d += g * factor);
            }
            &Op::Sigmoid { a } => {
                let dst = slots[a.0].get(grad.len());
                for ((d, g), y) in dst.iter_mut().zip(grad).zip(out.iter()) {
                    *d += g * y * (1.0 - y);
                }
            }
            &Op::Tanh { a } => {
                let dst = slots[a.0].get(grad.len());
                for ((d, g), y) in dst.iter_mut().zip(grad).zip(out.iter()) {
                    *d += g * (1.0 - y * y);
                }
            }
            &Op::LeakyRelu { a, slope } => {
                let x = self.value(a);
                let dst = slots[a.0].get(grad.len());
                for ((d, g), x) in dst.iter_mut().zip(grad).zip(x) {
                    *d += if *x > 0.0 { *g } else { g * slope };
                }
            }
            &Op::Softmax { a, cols } => {
                let dst = slots[a.0].get(grad.len());
                for ((d, g), y) in dst.chunks_mut(cols).zip(grad.chunks(cols)).zip(out.chunks(cols)) {
                    softmax_backward(d, g, y);
                }
            }
            &Op::Concat { a, b, p, q } => {
                let rows = grad.len() / (p + q).max(1);
                if self.needs(a) {
                    let dst = slots[a.0].get(rows * p);
                    for r in 0..rows {
                        let src = &grad[r * (p + q)..r * (p + q) + p];
                        dst[r * p..(r + 1) * p].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
                if self.needs(b) {
                    let dst = slots[b.0].get(rows * q);
                    for r in 0..rows {
                        let src = &grad[r * (p + q) + p..(r + 1) * (p + q)];
                        dst[r * q..(r + 1) * q].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::StackRows { parts, cols } => {
                let mut offset = 0;
                for &(v, rows) in parts {
                    let len = rows * cols;
                    if self.needs(v) {
                        slots[v.0].add(&grad[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            &Op::SliceRows { a, start, cols } => {
                let total = self.value(a).len();
                let dst = slots[a.0].get(total);
                dst[start * cols..start * cols + grad.len()]
                    .iter_mut()
                    .zip(grad)
                    .for_each(|(d, g)| *d += g);
            }
            Op::GatherRows { table, ids, cols } => {
                let total = self.value(*table).len();
                let dst = slots[table.0].get(total);
                for (t, &id) in ids.iter().enumerate() {
                    dst[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(&grad[t * cols..(t + 1) * cols])
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::MaxOverTime { a, argmax, cols } => {
                let total = self.value(*a).len();
                let dst = slots[a.0].get(total);
                for (c, &r) in argmax.iter().enumerate() {
                    dst[r * cols + c] += grad[c];
                }
            }
            &Op::Sum { a } => {
                let total = self.value(a).len();
                let dst = slots[a.0].get(total);
                dst.iter_mut().for_each(|d| *d += grad[0]);
            }
            Op::Nll {
                probs,
                targets,
                cols,
                clamped,
            } => {
                let p = self.value(*probs);
                let total = p.len();
                let dst = slots[probs.0].get(total);
                for (r, &t) in targets.iter().enumerate() {
                    if !clamped[r] {
                        let idx = r * cols + t;
                        dst[idx] -= grad[0] / p[idx];
                    }
                }
            }
            Op::EdgeScores { target, source, edges } => {
                if self.needs(*target) {
                    let n = self.value(*target).len();
                    let dst = slots[target.0].get(n);
                    for (k, &(t, _)) in edges.iter().enumerate() {
                        dst[t] += grad[k];
                    }
                }
                if self.needs(*source) {
                    let n = self.value(*source).len();
                    let dst = slots[source.0].get(n);
                    for (k, &(_, s)) in edges.iter().enumerate() {
                        dst[s] += grad[k];
                    }
                }
            }
            Op::SegmentSoftmax { a, offsets } => {
                let dst = slots[a.0].get(grad.len());
                for w in offsets.windows(2) {
                    let r = w[0]..w[1];
                    softmax_backward(&mut dst[r.clone()], &grad[r.clone()], &out[r]);
                }
            }
            Op::EdgeAggregate {
                weights,
                values,
                edges,
                cols,
            } => {
                let cols = *cols;
                if self.needs(*weights) {
                    let v = self.value(*values);
                    let dst = slots[weights.0].get(edges.len());
                    for (k, &(t, s)) in edges.iter().enumerate() {
                        dst[k] += grad[t * cols..(t + 1) * cols]
                            .iter()
                            .zip(&v[s * cols..(s + 1) * cols])
                            .map(|(g, x)| g * x)
                            .sum::<f64>();
                    }
                }
                if self.needs(*values) {
                    let w = self.value(*weights);
                    let total = self.value(*values).len();
                    let dst = slots[values.0].get(total);
                    for (k, &(t, s)) in edges.iter().enumerate() {
                        let src = &grad[t * cols..(t + 1) * cols];
                        for (d, g) in dst[s * cols..(s + 1) * cols].iter_mut().zip(src) {
                            *d += w[k] * g;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint storage: a local buffer for intermediates, or the locked gradient
/// buffer of a parameter leaf.
enum Slot<'a> {
    Local(Option<Vec<f64>>),
    Param(MutexGuard<'a, Option<Vec<f64>>>),
}

impl Slot<'_> {
    fn get(&mut self, len: usize) -> &mut [f64] {
        let buf = match self {
            Slot::Local(b) => b,
            Slot::Param(g) => &mut **g,
        };
        buf.get_or_insert_with(|| vec![0.0; len])
    }

    fn add(&mut self, g: &[f64]) {
        let dst = self.get(g.len());
        dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
    }

    fn take_local(&mut self) -> Option<Vec<f64>> {
        match self {
            Slot::Local(b) => b.take(),
            Slot::Param(_) => None,
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

fn softmax_backward(dst: &mut [f64], grad: &[f64], y: &[f64]) {
    let dot: f64 = grad.iter().zip(y).map(|(g, y)| g * y).sum();
    for ((d, g), y) in dst.iter_mut().zip(grad).zip(y) {
        *d += y * (g - dot);
    }
}
