//! Reverse-mode autodiff on a flat tape.
//!
//! Ops append nodes to a `Tape`; `backward` walks the tape once in reverse
//! creation order and accumulates gradients.  Both the walk order and every
//! kernel reduction are fixed, so two identical builds produce bit-identical
//! gradients — reproducibility leans on that, and so do the optimizer
//! determinism tests.
//!
//! Tensors are at most rank 2 (`[m, n]` matrices and `[m]` vectors); that is
//! all a per-sequence transformer forward needs.  Batching is done by running
//! one tape per sequence and summing parameter gradients outside.

use std::sync::Arc;

use crate::error::Error;
use crate::kernels;
use crate::num::Num;
use crate::Result;

/// Handle into a `Tape`.  Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

enum Buffer<S> {
    Owned(Vec<S>),
    Shared(Arc<Vec<S>>),
}

impl<S> std::ops::Deref for Buffer<S> {
    type Target = [S];
    fn deref(&self) -> &[S] {
        match self {
            Buffer::Owned(v) => v,
            Buffer::Shared(v) => v,
        }
    }
}

enum Op<S> {
    Leaf,
    /// [m,k] @ [k,n]
    Matmul { a: usize, b: usize },
    /// [m,k] @ [n,k]^T
    MatmulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: S },
    /// [m,n] + bias[n] on every row
    AddRowBroadcast { a: usize, bias: usize },
    /// [m,n] + fixed matrix (additive attention mask); the constant is folded
    /// into the output at build time and gets no grad
    AddConstMat { a: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    IndexRows { a: usize, rows: Arc<Vec<usize>> },
    /// out[r] = a[r, cols[r]]
    TakePerRow { a: usize, cols: Arc<Vec<usize>> },
    /// out[j] = a[row, cols[j]]
    GatherRowCols { a: usize, row: usize, cols: Arc<Vec<usize>> },
    SoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    /// per-row entropy of softmax(a); masked (-inf) columns contribute 0
    EntropyRows { a: usize },
    Exp { a: usize },
    Ln { a: usize },
    Silu { a: usize },
    RmsNorm { a: usize, gain: usize, eps: S },
    Rope { a: usize, positions: Arc<Vec<usize>>, n_heads: usize, inv_freq: Arc<Vec<S>> },
    SumRows { a: usize },
    MeanRows { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Clamp { a: usize, lo: S, hi: S },
    MinEw { a: usize, b: usize },
    MaxEw { a: usize, b: usize },
}

impl<S> Op<S> {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Matmul { a, b } | MatmulNt { a, b } | Add { a, b } | Sub { a, b } | Mul { a, b }
            | MinEw { a, b } | MaxEw { a, b } => vec![*a, *b],
            AddRowBroadcast { a, bias } => vec![*a, *bias],
            RmsNorm { a, gain, .. } => vec![*a, *gain],
            ConcatCols { parts } => parts.clone(),
            Scale { a, .. } | AddConstMat { a, .. } | SliceCols { a, .. } | IndexRows { a, .. }
            | TakePerRow { a, .. } | GatherRowCols { a, .. } | SoftmaxRows { a }
            | LogSoftmaxRows { a } | EntropyRows { a } | Exp { a } | Ln { a } | Silu { a }
            | Rope { a, .. } | SumRows { a } | MeanRows { a } | SumAll { a } | MeanAll { a }
            | Clamp { a, .. } => vec![*a],
        }
    }
}

struct Node<S> {
    data: Buffer<S>,
    shape: Vec<usize>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Num> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, t: Tensor) -> &[S] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    /// Extract a scalar (shape [1] or [1,1]) value.
    pub fn item(&self, t: Tensor) -> Result<S> {
        let n = &self.nodes[t.0];
        if numel(&n.shape) != 1 {
            return Err(Error::NonScalarLoss { shape: n.shape.clone() });
        }
        Ok(n.data[0])
    }

    /// Gradient of the last `backward` call w.r.t. `t`, if it was computed.
    pub fn grad(&self, t: Tensor) -> Option<&[S]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, op: Op<S>) -> Tensor {
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node { data: Buffer::Owned(data), shape, op, requires_grad });
        Tensor(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<S>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::shape("leaf", format!("data len {} vs shape {:?}", data.len(), shape)));
        }
        self.nodes.push(Node {
            data: Buffer::Owned(data),
            shape: shape.to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    /// Leaf that borrows its storage (model parameters): no copy per tape.
    pub fn shared_leaf(&mut self, data: Arc<Vec<S>>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::shape("shared_leaf", format!("data len {} vs shape {:?}", data.len(), shape)));
        }
        self.nodes.push(Node {
            data: Buffer::Shared(data),
            shape: shape.to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    fn mat_shape(&self, t: Tensor, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[t.0].shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(op, format!("expected matrix, got {s:?}"))),
        }
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.mat_shape(a, "matmul")?;
        let (k2, n) = self.mat_shape(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] @ [{k2},{n}]")));
        }
        let data = kernels::matmul_nn(self.data(a), self.data(b), m, k, n);
        Ok(self.push(data, vec![m, n], Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.mat_shape(a, "matmul_nt")?;
        let (n, k2) = self.mat_shape(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m},{k}] @ [{n},{k2}]^T")));
        }
        let data = kernels::matmul_nt(self.data(a), self.data(b), m, k, n);
        Ok(self.push(data, vec![m, n], Op::MatmulNt { a: a.0, b: b.0 }))
    }

    fn same_shape(&self, a: Tensor, b: Tensor, op: &'static str) -> Result<Vec<usize>> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.same_shape(a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(data, shape, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.same_shape(a, b, "sub")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(data, shape, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.same_shape(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(data, shape, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Tensor, factor: S) -> Tensor {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.data(a).iter().map(|&x| x * factor).collect();
        self.push(data, shape, Op::Scale { a: a.0, factor })
    }

    pub fn add_row_broadcast(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        let (m, n) = self.mat_shape(a, "add_row_broadcast")?;
        let bs = &self.nodes[bias.0].shape;
        if bs.as_slice() != [n] {
            return Err(Error::shape("add_row_broadcast", format!("bias {bs:?} vs cols {n}")));
        }
        let mut data = self.data(a).to_vec();
        let bv = self.data(bias).to_vec();
        for r in 0..m {
            for (x, &b) in data[r * n..(r + 1) * n].iter_mut().zip(bv.iter()) {
                *x = *x + b;
            }
        }
        Ok(self.push(data, vec![m, n], Op::AddRowBroadcast { a: a.0, bias: bias.0 }))
    }

    /// Add a constant matrix (e.g. an additive attention mask).
    pub fn add_const_mat(&mut self, a: Tensor, c: Arc<Vec<S>>) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        if c.len() != numel(&shape) {
            return Err(Error::shape("add_const_mat", format!("const len {} vs {shape:?}", c.len())));
        }
        let data = self.data(a).iter().zip(c.iter()).map(|(&x, &y)| x + y).collect();
        Ok(self.push(data, shape, Op::AddConstMat { a: a.0 }))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts".to_string()));
        }
        let (m, _) = self.mat_shape(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (mp, np) = self.mat_shape(p, "concat_cols")?;
            if mp != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {mp}")));
            }
            widths.push(np);
            total += np;
        }
        let mut data = vec![S::zero(); m * total];
        let mut off = 0usize;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let src = self.data(p);
            for r in 0..m {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let op = Op::ConcatCols { parts: parts.iter().map(|t| t.0).collect() };
        Ok(self.push(data, vec![m, total], op))
    }

    pub fn slice_cols(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.mat_shape(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {n} cols", start + len)));
        }
        let src = self.data(a);
        let mut data = vec![S::zero(); m * len];
        for r in 0..m {
            data[r * len..(r + 1) * len].copy_from_slice(&src[r * n + start..r * n + start + len]);
        }
        Ok(self.push(data, vec![m, len], Op::SliceCols { a: a.0, start }))
    }

    /// Gather rows: out[r] = a[rows[r]].  Also serves as embedding lookup.
    pub fn index_rows(&mut self, a: Tensor, rows: &[usize]) -> Result<Tensor> {
        let (m, n) = self.mat_shape(a, "index_rows")?;
        for &r in rows {
            if r >= m {
                return Err(Error::shape("index_rows", format!("row {r} out of {m}")));
            }
        }
        let src = self.data(a);
        let mut data = vec![S::zero(); rows.len() * n];
        for (i, &r) in rows.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(&src[r * n..(r + 1) * n]);
        }
        let op = Op::IndexRows { a: a.0, rows: Arc::new(rows.to_vec()) };
        Ok(self.push(data, vec![rows.len(), n], op))
    }

    /// out[r] = a[r, cols[r]] — one element per row.
    pub fn take_per_row(&mut self, a: Tensor, cols: &[usize]) -> Result<Tensor> {
        let (m, n) = self.mat_shape(a, "take_per_row")?;
        if cols.len() != m {
            return Err(Error::shape("take_per_row", format!("{} cols for {m} rows", cols.len())));
        }
        for &c in cols {
            if c >= n {
                return Err(Error::shape("take_per_row", format!("col {c} out of {n}")));
            }
        }
        let src = self.data(a);
        let data: Vec<S> = cols.iter().enumerate().map(|(r, &c)| src[r * n + c]).collect();
        let op = Op::TakePerRow { a: a.0, cols: Arc::new(cols.to_vec()) };
        Ok(self.push(data, vec![m], op))
    }

    /// out[j] = a[row, cols[j]] — a subset of one row.
    pub fn gather_row_cols(&mut self, a: Tensor, row: usize, cols: &[usize]) -> Result<Tensor> {
        let (m, n) = self.mat_shape(a, "gather_row_cols")?;
        if row >= m {
            return Err(Error::shape("gather_row_cols", format!("row {row} out of {m}")));
        }
        for &c in cols {
            if c >= n {
                return Err(Error::shape("gather_row_cols", format!("col {c} out of {n}")));
            }
        }
        let src = self.data(a);
        let data: Vec<S> = cols.iter().map(|&c| src[row * n + c]).collect();
        let op = Op::GatherRowCols { a: a.0, row, cols: Arc::new(cols.to_vec()) };
        Ok(self.push(data, vec![cols.len()], op))
    }

    fn rows_view(&self, t: Tensor) -> (usize, usize) {
        // vectors are one row; matrices are row-wise
        match self.nodes[t.0].shape.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            _ => unreachable!("tensors are rank <= 2"),
        }
    }

    pub fn softmax_rows(&mut self, a: Tensor) -> Tensor {
        let (m, n) = self.rows_view(a);
        let mut data = self.data(a).to_vec();
        for r in 0..m {
            kernels::softmax_row(&mut data[r * n..(r + 1) * n]);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::SoftmaxRows { a: a.0 })
    }

    pub fn log_softmax_rows(&mut self, a: Tensor) -> Tensor {
        let (m, n) = self.rows_view(a);
        let mut data = self.data(a).to_vec();
        for r in 0..m {
            kernels::log_softmax_row(&mut data[r * n..(r + 1) * n]);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::LogSoftmaxRows { a: a.0 })
    }

    /// Shannon entropy of softmax(a) per row, in nats.  Masked columns
    /// (logit -inf) contribute exactly zero, no NaNs.
    pub fn entropy_rows(&mut self, a: Tensor) -> Tensor {
        let (m, n) = self.rows_view(a);
        let src = self.data(a);
        let mut data = vec![S::zero(); m];
        let mut probs = vec![S::zero(); n];
        for r in 0..m {
            probs.copy_from_slice(&src[r * n..(r + 1) * n]);
            kernels::softmax_row(&mut probs);
            let mut h = S::zero();
            for &p in probs.iter() {
                if p > S::zero() {
                    h = h - p * p.ln();
                }
            }
            data[r] = h;
        }
        self.push(data, vec![m], Op::EntropyRows { a: a.0 })
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.data(a).iter().map(|x| x.exp()).collect();
        self.push(data, shape, Op::Exp { a: a.0 })
    }

    pub fn ln(&mut self, a: Tensor) -> Tensor {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.data(a).iter().map(|x| x.ln()).collect();
        self.push(data, shape, Op::Ln { a: a.0 })
    }

    pub fn silu(&mut self, a: Tensor) -> Tensor {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.data(a).iter().map(|&x| kernels::silu(x)).collect();
        self.push(data, shape, Op::Silu { a: a.0 })
    }

    pub fn rms_norm(&mut self, a: Tensor, gain: Tensor, eps: S) -> Result<Tensor> {
        let (m, n) = self.mat_shape(a, "rms_norm")?;
        if self.nodes[gain.0].shape.as_slice() != [n] {
            return Err(Error::shape("rms_norm", format!("gain {:?} vs cols {n}", self.nodes[gain.0].shape)));
        }
        let src = self.data(a);
        let g = self.data(gain);
        let mut data = vec![S::zero(); m * n];
        for r in 0..m {
            // split borrow: read src row, write data row
            let mut out_row = vec![S::zero(); n];
            kernels::rms_norm_row(&src[r * n..(r + 1) * n], g, eps, &mut out_row);
            data[r * n..(r + 1) * n].copy_from_slice(&out_row);
        }
        Ok(self.push(data, vec![m, n], Op::RmsNorm { a: a.0, gain: gain.0, eps }))
    }

    /// Rotary position encoding applied per head; `positions[r]` is the
    /// absolute position of row r.
    pub fn rope(&mut self, a: Tensor, positions: &[usize], n_heads: usize, inv_freq: Arc<Vec<S>>) -> Result<Tensor> {
        let (m, n) = self.mat_shape(a, "rope")?;
        if positions.len() != m {
            return Err(Error::shape("rope", format!("{} positions for {m} rows", positions.len())));
        }
        if n != n_heads * 2 * inv_freq.len() {
            return Err(Error::shape("rope", format!("{n} cols vs {n_heads} heads x head_dim {}", 2 * inv_freq.len())));
        }
        let mut data = self.data(a).to_vec();
        for (r, &pos) in positions.iter().enumerate() {
            kernels::rope_rotate_row(&mut data[r * n..(r + 1) * n], pos, n_heads, &inv_freq, true);
        }
        let op = Op::Rope { a: a.0, positions: Arc::new(positions.to_vec()), n_heads, inv_freq };
        Ok(self.push(data, vec![m, n], op))
    }

    pub fn sum_rows(&mut self, a: Tensor) -> Tensor {
        let (m, n) = self.rows_view(a);
        let src = self.data(a);
        let data: Vec<S> = (0..m)
            .map(|r| {
                let mut acc = S::zero();
                for &x in &src[r * n..(r + 1) * n] {
                    acc = acc + x;
                }
                acc
            })
            .collect();
        self.push(data, vec![m], Op::SumRows { a: a.0 })
    }

    pub fn mean_rows(&mut self, a: Tensor) -> Tensor {
        let (m, n) = self.rows_view(a);
        let inv = S::one() / S::from_usize(n).unwrap();
        let src = self.data(a);
        let data: Vec<S> = (0..m)
            .map(|r| {
                let mut acc = S::zero();
                for &x in &src[r * n..(r + 1) * n] {
                    acc = acc + x;
                }
                acc * inv
            })
            .collect();
        self.push(data, vec![m], Op::MeanRows { a: a.0 })
    }

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let mut acc = S::zero();
        for &x in self.data(a).iter() {
            acc = acc + x;
        }
        self.push(vec![acc], vec![1], Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = self.data(a).len();
        let mut acc = S::zero();
        for &x in self.data(a).iter() {
            acc = acc + x;
        }
        let mean = acc / S::from_usize(n).unwrap();
        self.push(vec![mean], vec![1], Op::MeanAll { a: a.0 })
    }

    pub fn clamp(&mut self, a: Tensor, lo: S, hi: S) -> Tensor {
        let shape = self.nodes[a.0].shape.clone();
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
            .collect();
        self.push(data, shape, Op::Clamp { a: a.0, lo, hi })
    }

    pub fn min_ew(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.same_shape(a, b, "min_ew")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| if x <= y { x } else { y }).collect();
        Ok(self.push(data, shape, Op::MinEw { a: a.0, b: b.0 }))
    }

    pub fn max_ew(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.same_shape(a, b, "max_ew")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| if x >= y { x } else { y }).collect();
        Ok(self.push(data, shape, Op::MaxEw { a: a.0, b: b.0 }))
    }

    // ---- backward ----

    fn add_grad(&mut self, node: usize, delta: &[S]) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let slot = &mut self.grads[node];
        match slot {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                    *gi = *gi + d;
                }
            }
            None => {
                *slot = Some(delta.to_vec());
            }
        }
    }

    /// Reverse pass from a scalar loss.  Consumes the tape's one backward
    /// budget; gradients stay readable afterwards via `grad`.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        self.consumed = true;
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        self.grads = Vec::with_capacity(self.nodes.len());
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // loss doesn't depend on any grad leaf; nothing to do
        }
        self.grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            self.backprop_node(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, g: &[S]) {
        use Op::*;
        // Clone light op metadata; data reads borrow immutable, then add_grad
        // mutates. Keep them separate to satisfy the borrow checker.
        match &self.nodes[id].op {
            Leaf => {}
            &Matmul { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                let da = kernels::matmul_nt(g, &self.nodes[b].data, m, n, k);
                let db = kernels::matmul_tn(&self.nodes[a].data, g, m, k, n);
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            &MatmulNt { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[0];
                let da = kernels::matmul_nn(g, &self.nodes[b].data, m, n, k);
                let db = kernels::matmul_tn(g, &self.nodes[a].data, m, n, k);
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            &Add { a, b } => {
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            &Sub { a, b } => {
                self.add_grad(a, g);
                let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                self.add_grad(b, &neg);
            }
            &Mul { a, b } => {
                let da: Vec<S> = g.iter().zip(self.nodes[b].data.iter()).map(|(&gi, &bi)| gi * bi).collect();
                let db: Vec<S> = g.iter().zip(self.nodes[a].data.iter()).map(|(&gi, &ai)| gi * ai).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            &Scale { a, factor } => {
                let da: Vec<S> = g.iter().map(|&x| x * factor).collect();
                self.add_grad(a, &da);
            }
            &AddRowBroadcast { a, bias } => {
                self.add_grad(a, g);
                let n = self.nodes[bias].shape[0];
                let m = g.len() / n;
                let mut db = vec![S::zero(); n];
                for r in 0..m {
                    for (d, &gv) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *d = *d + gv;
                    }
                }
                self.add_grad(bias, &db);
            }
            &AddConstMat { a } => {
                self.add_grad(a, g);
            }
            ConcatCols { parts } => {
                let parts = parts.clone();
                let m = self.nodes[id].shape[0];
                let total = self.nodes[id].shape[1];
                let mut off = 0usize;
                for p in parts {
                    let w = self.nodes[p].shape[1];
                    let mut dp = vec![S::zero(); m * w];
                    for r in 0..m {
                        dp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    self.add_grad(p, &dp);
                    off += w;
                }
            }
            &SliceCols { a, start } => {
                let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let len = self.nodes[id].shape[1];
                let mut da = vec![S::zero(); m * n];
                for r in 0..m {
                    da[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.add_grad(a, &da);
            }
            IndexRows { a, rows } => {
                let a = *a;
                let rows = rows.clone();
                let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let mut da = vec![S::zero(); m * n];
                for (i, &r) in rows.iter().enumerate() {
                    for (d, &gv) in da[r * n..(r + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *d = *d + gv;
                    }
                }
                self.add_grad(a, &da);
            }
            TakePerRow { a, cols } => {
                let a = *a;
                let cols = cols.clone();
                let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let mut da = vec![S::zero(); m * n];
                for (r, &c) in cols.iter().enumerate() {
                    da[r * n + c] = da[r * n + c] + g[r];
                }
                self.add_grad(a, &da);
            }
            GatherRowCols { a, row, cols } => {
                let a = *a;
                let row = *row;
                let cols = cols.clone();
                let n = self.nodes[a].shape[1];
                let m = self.nodes[a].shape[0];
                let mut da = vec![S::zero(); m * n];
                for (j, &c) in cols.iter().enumerate() {
                    da[row * n + c] = da[row * n + c] + g[j];
                }
                self.add_grad(a, &da);
            }
            &SoftmaxRows { a } => {
                let (m, n) = {
                    let s = &self.nodes[id].shape;
                    if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) }
                };
                let y = &self.nodes[id].data;
                let mut da = vec![S::zero(); m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut s = S::zero();
                    for (yi, gi) in yr.iter().zip(gr.iter()) {
                        s = s + *yi * *gi;
                    }
                    for i in 0..n {
                        da[r * n + i] = yr[i] * (gr[i] - s);
                    }
                }
                self.add_grad(a, &da);
            }
            &LogSoftmaxRows { a } => {
                let (m, n) = {
                    let s = &self.nodes[id].shape;
                    if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) }
                };
                let y = &self.nodes[id].data;
                let mut da = vec![S::zero(); m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut sum_g = S::zero();
                    for &gi in gr.iter() {
                        sum_g = sum_g + gi;
                    }
                    for i in 0..n {
                        // p_i = exp(logsoftmax_i); for masked cols p = 0
                        let p = yr[i].exp();
                        da[r * n + i] = gr[i] - p * sum_g;
                    }
                }
                self.add_grad(a, &da);
            }
            &EntropyRows { a } => {
                let (m, n) = {
                    let s = &self.nodes[a].shape;
                    if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) }
                };
                let h = self.nodes[id].data.to_vec();
                let src = self.nodes[a].data.to_vec();
                let mut da = vec![S::zero(); m * n];
                let mut probs = vec![S::zero(); n];
                for r in 0..m {
                    probs.copy_from_slice(&src[r * n..(r + 1) * n]);
                    kernels::softmax_row(&mut probs);
                    for i in 0..n {
                        let p = probs[i];
                        if p > S::zero() {
                            // dH/dz_i = -p_i (ln p_i + H)
                            da[r * n + i] = g[r] * (-(p * (p.ln() + h[r])));
                        }
                    }
                }
                self.add_grad(a, &da);
            }
            &Exp { a } => {
                let da: Vec<S> = g.iter().zip(self.nodes[id].data.iter()).map(|(&gi, &yi)| gi * yi).collect();
                self.add_grad(a, &da);
            }
            &Ln { a } => {
                let da: Vec<S> = g.iter().zip(self.nodes[a].data.iter()).map(|(&gi, &xi)| gi / xi).collect();
                self.add_grad(a, &da);
            }
            &Silu { a } => {
                let da: Vec<S> = g
                    .iter()
                    .zip(self.nodes[a].data.iter())
                    .map(|(&gi, &xi)| gi * kernels::silu_prime(xi))
                    .collect();
                self.add_grad(a, &da);
            }
            &RmsNorm { a, gain, eps } => {
                let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let x = self.nodes[a].data.to_vec();
                let gn = self.nodes[gain].data.to_vec();
                let inv_n = S::one() / S::from_usize(n).unwrap();
                let mut da = vec![S::zero(); m * n];
                let mut dgain = vec![S::zero(); n];
                for r in 0..m {
                    let xr = &x[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut ss = S::zero();
                    for &v in xr.iter() {
                        ss = ss + v * v;
                    }
                    let ms = ss * inv_n;
                    let rinv = S::one() / (ms + eps).sqrt();
                    // ghat = dL/du where u = x * rinv
                    let mut ghat_dot_x = S::zero();
                    for i in 0..n {
                        ghat_dot_x = ghat_dot_x + gr[i] * gn[i] * xr[i];
                    }
                    let coef = rinv * rinv * rinv * inv_n * ghat_dot_x;
                    for i in 0..n {
                        let ghat = gr[i] * gn[i];
                        da[r * n + i] = rinv * ghat - coef * xr[i];
                        dgain[i] = dgain[i] + gr[i] * (xr[i] * rinv);
                    }
                }
                self.add_grad(a, &da);
                self.add_grad(gain, &dgain);
            }
            Rope { a, positions, n_heads, inv_freq } => {
                let a = *a;
                let positions = positions.clone();
                let n_heads = *n_heads;
                let inv_freq = inv_freq.clone();
                let n = self.nodes[id].shape[1];
                let mut da = g.to_vec();
                for (r, &pos) in positions.iter().enumerate() {
                    kernels::rope_rotate_row(&mut da[r * n..(r + 1) * n], pos, n_heads, &inv_freq, false);
                }
                self.add_grad(a, &da);
            }
            &SumRows { a } => {
                let (m, n) = {
                    let s = &self.nodes[a].shape;
                    if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) }
                };
                let mut da = vec![S::zero(); m * n];
                for r in 0..m {
                    for i in 0..n {
                        da[r * n + i] = g[r];
                    }
                }
                self.add_grad(a, &da);
            }
            &MeanRows { a } => {
                let (m, n) = {
                    let s = &self.nodes[a].shape;
                    if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) }
                };
                let inv = S::one() / S::from_usize(n).unwrap();
                let mut da = vec![S::zero(); m * n];
                for r in 0..m {
                    for i in 0..n {
                        da[r * n + i] = g[r] * inv;
                    }
                }
                self.add_grad(a, &da);
            }
            &SumAll { a } => {
                let da = vec![g[0]; self.nodes[a].data.len()];
                self.add_grad(a, &da);
            }
            &MeanAll { a } => {
                let n = self.nodes[a].data.len();
                let da = vec![g[0] / S::from_usize(n).unwrap(); n];
                self.add_grad(a, &da);
            }
            &Clamp { a, lo, hi } => {
                let da: Vec<S> = g
                    .iter()
                    .zip(self.nodes[a].data.iter())
                    .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { S::zero() })
                    .collect();
                self.add_grad(a, &da);
            }
            &MinEw { a, b } => {
                let av = &self.nodes[a].data;
                let bv = &self.nodes[b].data;
                let mut da = vec![S::zero(); g.len()];
                let mut db = vec![S::zero(); g.len()];
                for i in 0..g.len() {
                    if av[i] <= bv[i] {
                        da[i] = g[i];
                    } else {
                        db[i] = g[i];
                    }
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            &MaxEw { a, b } => {
                let av = &self.nodes[a].data;
                let bv = &self.nodes[b].data;
                let mut da = vec![S::zero(); g.len()];
                let mut db = vec![S::zero(); g.len()];
                for i in 0..g.len() {
                    if av[i] >= bv[i] {
                        da[i] = g[i];
                    } else {
                        db[i] = g[i];
                    }
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
        }
    }
}

impl<S: Num> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_grad_hand_case() {
        // loss = sum(A @ B), A = [[1,2]], B = [[3],[4]] -> loss = 11
        // dA = [[3,4]], dB = [[1],[2]]
        let mut t = scalar_tape();
        let a = t.leaf(vec![1.0, 2.0], &[1, 2], true).unwrap();
        let b = t.leaf(vec![3.0, 4.0], &[2, 1], true).unwrap();
        let c = t.matmul(a, b).unwrap();
        let loss = t.sum_all(c);
        assert_eq!(t.item(loss).unwrap(), 11.0);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn mul_same_parent_gives_two_x() {
        let mut t = scalar_tape();
        let x = t.leaf(vec![3.0], &[1], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = scalar_tape();
        let x = t.leaf(vec![1.0], &[1], true).unwrap();
        let loss = t.sum_all(x);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::BackwardConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = scalar_tape();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = scalar_tape();
        let a = t.leaf(vec![1.0, 2.0], &[1, 2], false).unwrap();
        let b = t.leaf(vec![1.0, 2.0], &[1, 2], false).unwrap();
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads_sum_to_zero() {
        let mut t = scalar_tape();
        let x = t.leaf(vec![0.1, -0.4, 2.0, 0.0, 0.0, 1.0], &[2, 3], true).unwrap();
        let sm = t.softmax_rows(x);
        for r in 0..2 {
            let row_sum: f64 = t.data(sm)[r * 3..(r + 1) * 3].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
        // weight the first element only, so the softmax grad is nontrivial
        let w = t.leaf(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[2, 3], false).unwrap();
        let picked = t.mul(sm, w).unwrap();
        let loss = t.sum_all(picked);
        t.backward(loss).unwrap();
        let gx = t.grad(x).unwrap();
        for r in 0..2 {
            let s: f64 = gx[r * 3..(r + 1) * 3].iter().sum();
            assert!(s.abs() < 1e-12, "softmax jacobian rows sum to zero, got {s}");
        }
    }

    #[test]
    fn entropy_matches_uniform_closed_form() {
        let mut t = scalar_tape();
        let x = t.leaf(vec![0.0; 4], &[1, 4], true).unwrap();
        let h = t.entropy_rows(x);
        assert!((t.data(h)[0] - (4.0f64).ln()).abs() < 1e-12);
        // gradient of entropy at the uniform point is zero
        let loss = t.sum_all(h);
        t.backward(loss).unwrap();
        for &g in t.grad(x).unwrap() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_ignores_masked_columns() {
        let mut t = scalar_tape();
        let x = t
            .leaf(vec![0.0, f64::NEG_INFINITY, 0.0], &[1, 3], true)
            .unwrap();
        let h = t.entropy_rows(x);
        assert!((t.data(h)[0] - (2.0f64).ln()).abs() < 1e-12);
        let loss = t.sum_all(h);
        t.backward(loss).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn gradient_accumulation_is_deterministic() {
        let run = || {
            let mut t = Tape::<f32>::new();
            let x = t.leaf((0..24).map(|i| (i as f32 * 0.37).sin()).collect(), &[4, 6], true).unwrap();
            let w = t.leaf((0..36).map(|i| (i as f32 * 0.11).cos()).collect(), &[6, 6], true).unwrap();
            let y = t.matmul(x, w).unwrap();
            let s = t.softmax_rows(y);
            let l = t.ln(s);
            let loss = t.mean_all(l);
            t.backward(loss).unwrap();
            (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut t = scalar_tape();
        let x = t.leaf(vec![-2.0, 0.5, 3.0], &[3], true).unwrap();
        let c = t.clamp(x, 0.0, 1.0);
        let loss = t.sum_all(c);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn index_rows_accumulates_repeated_rows() {
        let mut t = scalar_tape();
        let table = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true).unwrap();
        let picked = t.index_rows(table, &[1, 1, 0]).unwrap();
        let loss = t.sum_all(picked);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn shared_leaf_reads_parameter_storage() {
        let data = Arc::new(vec![1.0f64, 2.0, 3.0]);
        let mut t = scalar_tape();
        let p = t.shared_leaf(data.clone(), &[3], true).unwrap();
        let loss = t.sum_all(p);
        assert_eq!(t.item(loss).unwrap(), 6.0);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(p).unwrap(), &[1.0, 1.0, 1.0]);
        drop(t);
        assert_eq!(Arc::strong_count(&data), 1); // tape released its hold
    }
}
