use super::tensor::{matmul_into, Tensor};
use super::{scalar, NumericsError, Result, Scalar};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Val<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

enum Op<S> {
    Matmul { a: usize, b: usize, out: usize },
    Transpose { x: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { x: usize, c: S, out: usize },
    Exp { x: usize, out: usize },
    Gelu { x: usize, out: usize },
    Sum { x: usize, out: usize },
    Mean { x: usize, out: usize },
    SoftmaxRows { x: usize, out: usize },
    CausalSoftmaxRows { x: usize, out: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: S, out: usize },
    Embed { table: usize, ids: Vec<u32>, out: usize },
    SliceRows { x: usize, start: usize, out: usize },
    SliceCols { x: usize, start: usize, out: usize },
    ConcatRows { parts: Vec<usize>, out: usize },
    ConcatCols { parts: Vec<usize>, out: usize },
    CrossEntropyMasked { logits: usize, targets: Vec<u32>, mask: Vec<bool>, out: usize },
}

/// Record of one forward computation: values plus the operations needed to
/// replay it backward. Operations are appended in execution order, so the
/// record is topologically sorted by construction and a single reverse
/// traversal visits each exactly once.
pub struct Tape<S: Scalar> {
    vals: Vec<Val<S>>,
    ops: Vec<Op<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    /// Registers a leaf, honoring the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.push_leaf(t, t.requires_grad)
    }

    /// Registers a constant leaf (no gradient).
    pub fn input(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.push_leaf(t, false)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(NumericsError::NonFinite { op: "leaf" });
        }
        Ok(self.push_val(t.shape().to_vec(), t.data().to_vec(), requires_grad))
    }

    fn push_val(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Var {
        self.vals.push(Val { shape, data, requires_grad });
        self.grads.push(None);
        Var(self.vals.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.vals[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.vals[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.vals[v.0].requires_grad
    }

    /// Value of a scalar-shaped var.
    pub fn scalar_of(&self, v: Var) -> S {
        debug_assert_eq!(self.vals[v.0].data.len(), 1);
        self.vals[v.0].data[0]
    }

    /// Gradient accumulated by [`Tape::backward`], if any flowed to `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Copies the gradient of a leaf into its tensor's `grad` slot
    /// (zeros when no gradient flowed).
    pub fn write_grad(&self, v: Var, t: &mut Tensor<S>) {
        let g = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![S::zero(); t.numel()],
        };
        t.grad = Some(g);
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.vals[v.0].shape;
        match s.len() {
            2 => (s[0], s[1]),
            1 => (1, s[0]),
            _ => (1, s.iter().product()),
        }
    }

    fn finish(&mut self, op: &'static str, out: Var) -> Result<Var> {
        if !self.vals[out.0].data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { op });
        }
        Ok(out)
    }

    // ── Operations ──────────────────────────────────────────────────

    /// `a[m×k] · b[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} · {:?}", self.shape(a), self.shape(b)),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(&self.vals[a.0].data, &self.vals[b.0].data, &mut out, m, ka, n);
        let rg = self.vals[a.0].requires_grad || self.vals[b.0].requires_grad;
        let out = self.push_val(vec![m, n], out, rg);
        if rg {
            self.ops.push(Op::Matmul { a: a.0, b: b.0, out: out.0 });
        }
        self.finish("matmul", out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        let xd = &self.vals[x.0].data;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let rg = self.vals[x.0].requires_grad;
        let out = self.push_val(vec![n, m], out, rg);
        if rg {
            self.ops.push(Op::Transpose { x: x.0, out: out.0 });
        }
        self.finish("transpose", out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals[a.0].shape != self.vals[b.0].shape {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<S> = self.vals[a.0]
            .data
            .iter()
            .zip(&self.vals[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.vals[a.0].requires_grad || self.vals[b.0].requires_grad;
        let shape = self.vals[a.0].shape.clone();
        let out = self.push_val(shape, out, rg);
        if rg {
            self.ops.push(Op::Add { a: a.0, b: b.0, out: out.0 });
        }
        self.finish("add", out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals[a.0].shape != self.vals[b.0].shape {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<S> = self.vals[a.0]
            .data
            .iter()
            .zip(&self.vals[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.vals[a.0].requires_grad || self.vals[b.0].requires_grad;
        let shape = self.vals[a.0].shape.clone();
        let out = self.push_val(shape, out, rg);
        if rg {
            self.ops.push(Op::Mul { a: a.0, b: b.0, out: out.0 });
        }
        self.finish("mul", out)
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = scalar::<S>(c);
        let out: Vec<S> = self.vals[x.0].data.iter().map(|&v| v * c).collect();
        let rg = self.vals[x.0].requires_grad;
        let shape = self.vals[x.0].shape.clone();
        let out = self.push_val(shape, out, rg);
        if rg {
            self.ops.push(Op::Scale { x: x.0, c, out: out.0 });
        }
        self.finish("scale", out)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<S> = self.vals[x.0].data.iter().map(|v| v.exp()).collect();
        let rg = self.vals[x.0].requires_grad;
        let shape = self.vals[x.0].shape.clone();
        let out = self.push_val(shape, out, rg);
        if rg {
            self.ops.push(Op::Exp { x: x.0, out: out.0 });
        }
        self.finish("exp", out)
    }

    /// GELU (tanh approximation), applied elementwise.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<S> = self.vals[x.0].data.iter().map(|&v| gelu_fwd(v)).collect();
        let rg = self.vals[x.0].requires_grad;
        let shape = self.vals[x.0].shape.clone();
        let out = self.push_val(shape, out, rg);
        if rg {
            self.ops.push(Op::Gelu { x: x.0, out: out.0 });
        }
        self.finish("gelu", out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = S::zero();
        for &v in &self.vals[x.0].data {
            acc += v;
        }
        let rg = self.vals[x.0].requires_grad;
        let out = self.push_val(vec![1], vec![acc], rg);
        if rg {
            self.ops.push(Op::Sum { x: x.0, out: out.0 });
        }
        self.finish("sum", out)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.vals[x.0].data.len();
        let mut acc = S::zero();
        for &v in &self.vals[x.0].data {
            acc += v;
        }
        let m = acc / scalar::<S>(n as f64);
        let rg = self.vals[x.0].requires_grad;
        let out = self.push_val(vec![1], vec![m], rg);
        if rg {
            self.ops.push(Op::Mean { x: x.0, out: out.0 });
        }
        self.finish("mean", out)
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        let xd = &self.vals[x.0].data;
        if xd.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "softmax_rows(input)" });
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            softmax_row(&xd[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.vals[x.0].requires_grad;
        let out = self.push_val(vec![m, n], out, rg);
        if rg {
            self.ops.push(Op::SoftmaxRows { x: x.0, out: out.0 });
        }
        self.finish("softmax_rows", out)
    }

    /// Softmax over the causal prefix of each row of a square score matrix:
    /// row `i` normalizes columns `0..=i`, later columns are exactly zero.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        if m != n {
            return Err(NumericsError::ShapeMismatch {
                op: "causal_softmax_rows",
                detail: format!("expected square scores, got {:?}", self.shape(x)),
            });
        }
        let xd = &self.vals[x.0].data;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            softmax_row(&xd[i * n..i * n + i + 1], &mut out[i * n..i * n + i + 1]);
        }
        let rg = self.vals[x.0].requires_grad;
        let out = self.push_val(vec![m, n], out, rg);
        if rg {
            self.ops.push(Op::CausalSoftmaxRows { x: x.0, out: out.0 });
        }
        self.finish("causal_softmax_rows", out)
    }

    /// Per-row normalization to zero mean and unit variance, then an affine
    /// map by `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(NumericsError::InvalidArgument {
                op: "layer_norm",
                detail: "eps must be positive".into(),
            });
        }
        let (m, d) = self.rows_cols(x);
        if self.vals[gain.0].data.len() != d || self.vals[bias.0].data.len() != d {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x has {} columns, gain {} and bias {}",
                    d,
                    self.vals[gain.0].data.len(),
                    self.vals[bias.0].data.len()
                ),
            });
        }
        let eps = scalar::<S>(eps);
        let xd = &self.vals[x.0].data;
        let g = &self.vals[gain.0].data;
        let b = &self.vals[bias.0].data;
        let mut out = vec![S::zero(); m * d];
        for i in 0..m {
            let row = &xd[i * d..(i + 1) * d];
            let (mu, inv) = row_norm_stats(row, eps);
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mu) * inv * g[j] + b[j];
            }
        }
        let rg = self.vals[x.0].requires_grad
            || self.vals[gain.0].requires_grad
            || self.vals[bias.0].requires_grad;
        let out = self.push_val(vec![m, d], out, rg);
        if rg {
            self.ops.push(Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps, out: out.0 });
        }
        self.finish("layer_norm", out)
    }

    /// Row lookup: `out[t] = table[ids[t]]`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.rows_cols(table);
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(NumericsError::InvalidArgument {
                op: "embed",
                detail: format!("id {} out of table with {} rows", bad, v),
            });
        }
        let td = &self.vals[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.vals[table.0].requires_grad;
        let out = self.push_val(vec![ids.len(), d], out, rg);
        if rg {
            self.ops.push(Op::Embed { table: table.0, ids: ids.to_vec(), out: out.0 });
        }
        self.finish("embed", out)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        if start + len > m {
            return Err(NumericsError::InvalidArgument {
                op: "slice_rows",
                detail: format!("rows {}..{} of {}", start, start + len, m),
            });
        }
        let out = self.vals[x.0].data[start * n..(start + len) * n].to_vec();
        let rg = self.vals[x.0].requires_grad;
        let out = self.push_val(vec![len, n], out, rg);
        if rg {
            self.ops.push(Op::SliceRows { x: x.0, start, out: out.0 });
        }
        self.finish("slice_rows", out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        if start + len > n {
            return Err(NumericsError::InvalidArgument {
                op: "slice_cols",
                detail: format!("cols {}..{} of {}", start, start + len, n),
            });
        }
        let xd = &self.vals[x.0].data;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xd[i * n + start..i * n + start + len]);
        }
        let rg = self.vals[x.0].requires_grad;
        let out = self.push_val(vec![m, len], out, rg);
        if rg {
            self.ops.push(Op::SliceCols { x: x.0, start, out: out.0 });
        }
        self.finish("slice_cols", out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.rows_cols(parts[0]).1;
        let mut data = Vec::new();
        let mut m = 0;
        let mut rg = false;
        for &p in parts {
            let (pm, pn) = self.rows_cols(p);
            if pn != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {} vs {}", n, pn),
                });
            }
            m += pm;
            rg |= self.vals[p.0].requires_grad;
            data.extend_from_slice(&self.vals[p.0].data);
        }
        let out = self.push_val(vec![m, n], data, rg);
        if rg {
            self.ops.push(Op::ConcatRows { parts: parts.iter().map(|v| v.0).collect(), out: out.0 });
        }
        self.finish("concat_rows", out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.rows_cols(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut n = 0;
        let mut rg = false;
        for &p in parts {
            let (pm, pn) = self.rows_cols(p);
            if pm != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", m, pm),
                });
            }
            widths.push(pn);
            n += pn;
            rg |= self.vals[p.0].requires_grad;
        }
        let mut data = vec![S::zero(); m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = &self.vals[p.0].data;
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = self.push_val(vec![m, n], data, rg);
        if rg {
            self.ops.push(Op::ConcatCols { parts: parts.iter().map(|v| v.0).collect(), out: out.0 });
        }
        self.finish("concat_cols", out)
    }

    /// Mean over mask-selected positions of `-log softmax(logits)[target]`.
    /// Positions with `mask == false` contribute no loss and receive exactly
    /// zero gradient.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.rows_cols(logits);
        if targets.len() != t || mask.len() != t {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy_masked",
                detail: format!("logits rows {}, targets {}, mask {}", t, targets.len(), mask.len()),
            });
        }
        let m_count = mask.iter().filter(|&&b| b).count();
        if m_count == 0 {
            return Err(NumericsError::EmptyMask);
        }
        for (i, &tid) in targets.iter().enumerate() {
            if mask[i] && tid as usize >= v {
                return Err(NumericsError::TargetOutOfVocab { id: tid, vocab: v });
            }
        }
        let ld = &self.vals[logits.0].data;
        let mut acc = S::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            acc += -log_softmax_at(&ld[i * v..(i + 1) * v], targets[i] as usize);
        }
        let loss = acc / scalar::<S>(m_count as f64);
        let rg = self.vals[logits.0].requires_grad;
        let out = self.push_val(vec![1], vec![loss], rg);
        if rg {
            self.ops.push(Op::CrossEntropyMasked {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                out: out.0,
            });
        }
        self.finish("cross_entropy_masked", out)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Populates gradients for every
    /// recorded value that influenced the loss; read them via [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.vals[loss.0].data.len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.vals[loss.0].shape.clone()));
        }
        if !self.vals[loss.0].requires_grad {
            return Err(NumericsError::DetachedLoss);
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize) {
        // Split borrows: values are read-only during the backward sweep.
        let ops = std::mem::take(&mut self.ops);
        {
            let op = &ops[idx];
            let out_id = match op {
                Op::Matmul { out, .. }
                | Op::Transpose { out, .. }
                | Op::Add { out, .. }
                | Op::Mul { out, .. }
                | Op::Scale { out, .. }
                | Op::Exp { out, .. }
                | Op::Gelu { out, .. }
                | Op::Sum { out, .. }
                | Op::Mean { out, .. }
                | Op::SoftmaxRows { out, .. }
                | Op::CausalSoftmaxRows { out, .. }
                | Op::LayerNorm { out, .. }
                | Op::Embed { out, .. }
                | Op::SliceRows { out, .. }
                | Op::SliceCols { out, .. }
                | Op::ConcatRows { out, .. }
                | Op::ConcatCols { out, .. }
                | Op::CrossEntropyMasked { out, .. } => *out,
            };
            if let Some(g_out) = self.grads[out_id].take() {
                self.apply_backward(op, &g_out);
                self.grads[out_id] = Some(g_out);
            }
        }
        self.ops = ops;
    }

    fn wants(&self, id: usize) -> bool {
        self.vals[id].requires_grad
    }

    fn accumulate(&mut self, id: usize, g: Vec<S>) {
        match &mut self.grads[id] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += *v;
                }
            }
            None => self.grads[id] = Some(g),
        }
    }

    fn apply_backward(&mut self, op: &Op<S>, g_out: &[S]) {
        match op {
            Op::Matmul { a, b, out } => {
                let (m, k) = rc(&self.vals[*a].shape);
                let n = self.vals[*out].shape[1];
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let bd = &self.vals[*b].data;
                    let mut bt = vec![S::zero(); k * n];
                    for i in 0..k {
                        for j in 0..n {
                            bt[j * k + i] = bd[i * n + j];
                        }
                    }
                    let mut da = vec![S::zero(); m * k];
                    matmul_into(g_out, &bt, &mut da, m, n, k);
                    self.accumulate(*a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let ad = &self.vals[*a].data;
                    let mut at = vec![S::zero(); k * m];
                    for i in 0..m {
                        for j in 0..k {
                            at[j * m + i] = ad[i * k + j];
                        }
                    }
                    let mut db = vec![S::zero(); k * n];
                    matmul_into(&at, g_out, &mut db, k, m, n);
                    self.accumulate(*b, db);
                }
            }
            Op::Transpose { x, out } => {
                if self.wants(*x) {
                    let (n, m) = rc(&self.vals[*out].shape);
                    let mut dx = vec![S::zero(); m * n];
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] = g_out[i * m + j];
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::Add { a, b, .. } => {
                if self.wants(*a) {
                    self.accumulate(*a, g_out.to_vec());
                }
                if self.wants(*b) {
                    self.accumulate(*b, g_out.to_vec());
                }
            }
            Op::Mul { a, b, .. } => {
                if self.wants(*a) {
                    let da: Vec<S> =
                        g_out.iter().zip(&self.vals[*b].data).map(|(&g, &v)| g * v).collect();
                    self.accumulate(*a, da);
                }
                if self.wants(*b) {
                    let db: Vec<S> =
                        g_out.iter().zip(&self.vals[*a].data).map(|(&g, &v)| g * v).collect();
                    self.accumulate(*b, db);
                }
            }
            Op::Scale { x, c, .. } => {
                if self.wants(*x) {
                    self.accumulate(*x, g_out.iter().map(|&g| g * *c).collect());
                }
            }
            Op::Exp { x, out } => {
                if self.wants(*x) {
                    let dx: Vec<S> =
                        g_out.iter().zip(&self.vals[*out].data).map(|(&g, &y)| g * y).collect();
                    self.accumulate(*x, dx);
                }
            }
            Op::Gelu { x, .. } => {
                if self.wants(*x) {
                    let dx: Vec<S> =
                        g_out.iter().zip(&self.vals[*x].data).map(|(&g, &v)| g * gelu_bwd(v)).collect();
                    self.accumulate(*x, dx);
                }
            }
            Op::Sum { x, .. } => {
                if self.wants(*x) {
                    self.accumulate(*x, vec![g_out[0]; self.vals[*x].data.len()]);
                }
            }
            Op::Mean { x, .. } => {
                if self.wants(*x) {
                    let n = self.vals[*x].data.len();
                    let g = g_out[0] / scalar::<S>(n as f64);
                    self.accumulate(*x, vec![g; n]);
                }
            }
            Op::SoftmaxRows { x, out } => {
                if self.wants(*x) {
                    let (m, n) = rc(&self.vals[*out].shape);
                    let p = &self.vals[*out].data;
                    let mut dx = vec![S::zero(); m * n];
                    for i in 0..m {
                        softmax_row_bwd(
                            &p[i * n..(i + 1) * n],
                            &g_out[i * n..(i + 1) * n],
                            &mut dx[i * n..(i + 1) * n],
                        );
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::CausalSoftmaxRows { x, out } => {
                if self.wants(*x) {
                    let (m, n) = rc(&self.vals[*out].shape);
                    let p = &self.vals[*out].data;
                    let mut dx = vec![S::zero(); m * n];
                    for i in 0..m {
                        softmax_row_bwd(
                            &p[i * n..i * n + i + 1],
                            &g_out[i * n..i * n + i + 1],
                            &mut dx[i * n..i * n + i + 1],
                        );
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::LayerNorm { x, gain, bias, eps, .. } => {
                let (m, d) = rc(&self.vals[*x].shape);
                let xd = &self.vals[*x].data;
                let g = &self.vals[*gain].data;
                let inv_d = S::one() / scalar::<S>(d as f64);
                let mut dx = vec![S::zero(); m * d];
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                for i in 0..m {
                    let row = &xd[i * d..(i + 1) * d];
                    let (mu, inv) = row_norm_stats(row, *eps);
                    let go = &g_out[i * d..(i + 1) * d];
                    let mut mean_h = S::zero();
                    let mut mean_hx = S::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv;
                        let h = go[j] * g[j];
                        mean_h += h;
                        mean_hx += h * xhat;
                        dgain[j] += go[j] * xhat;
                        dbias[j] += go[j];
                    }
                    mean_h = mean_h * inv_d;
                    mean_hx = mean_hx * inv_d;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv;
                        dx[i * d + j] = (go[j] * g[j] - mean_h - xhat * mean_hx) * inv;
                    }
                }
                if self.wants(*x) {
                    self.accumulate(*x, dx);
                }
                if self.wants(*gain) {
                    self.accumulate(*gain, dgain);
                }
                if self.wants(*bias) {
                    self.accumulate(*bias, dbias);
                }
            }
            Op::Embed { table, ids, .. } => {
                if self.wants(*table) {
                    let (v, d) = rc(&self.vals[*table].shape);
                    let mut dt = vec![S::zero(); v * d];
                    for (t, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        let src = &g_out[t * d..(t + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                    self.accumulate(*table, dt);
                }
            }
            Op::SliceRows { x, start, out } => {
                if self.wants(*x) {
                    let (m, n) = rc(&self.vals[*x].shape);
                    let len = self.vals[*out].shape[0];
                    let mut dx = vec![S::zero(); m * n];
                    dx[start * n..(start + len) * n].copy_from_slice(g_out);
                    self.accumulate(*x, dx);
                }
            }
            Op::SliceCols { x, start, out } => {
                if self.wants(*x) {
                    let (m, n) = rc(&self.vals[*x].shape);
                    let len = self.vals[*out].shape[1];
                    let mut dx = vec![S::zero(); m * n];
                    for i in 0..m {
                        dx[i * n + start..i * n + start + len]
                            .copy_from_slice(&g_out[i * len..(i + 1) * len]);
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::ConcatRows { parts, .. } => {
                let mut off = 0;
                for &p in parts {
                    let (pm, pn) = rc(&self.vals[p].shape);
                    if self.wants(p) {
                        self.accumulate(p, g_out[off..off + pm * pn].to_vec());
                    }
                    off += pm * pn;
                }
            }
            Op::ConcatCols { parts, out } => {
                let n = self.vals[*out].shape[1];
                let mut off = 0;
                for &p in parts {
                    let (pm, pw) = rc(&self.vals[p].shape);
                    if self.wants(p) {
                        let mut dp = vec![S::zero(); pm * pw];
                        for i in 0..pm {
                            dp[i * pw..(i + 1) * pw]
                                .copy_from_slice(&g_out[i * n + off..i * n + off + pw]);
                        }
                        self.accumulate(p, dp);
                    }
                    off += pw;
                }
            }
            Op::CrossEntropyMasked { logits, targets, mask, .. } => {
                if self.wants(*logits) {
                    let (t, v) = rc(&self.vals[*logits].shape);
                    let ld = &self.vals[*logits].data;
                    let m_count = mask.iter().filter(|&&b| b).count();
                    let scale = g_out[0] / scalar::<S>(m_count as f64);
                    let mut dl = vec![S::zero(); t * v];
                    for i in 0..t {
                        if !mask[i] {
                            continue;
                        }
                        let row = &ld[i * v..(i + 1) * v];
                        let drow = &mut dl[i * v..(i + 1) * v];
                        softmax_row(row, drow);
                        drow[targets[i] as usize] = drow[targets[i] as usize] - S::one();
                        for x in drow.iter_mut() {
                            *x = *x * scale;
                        }
                    }
                    self.accumulate(*logits, dl);
                }
            }
        }
    }
}

fn rc(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        1 => (1, shape[0]),
        _ => (1, shape.iter().product()),
    }
}

pub(crate) fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn softmax_row_bwd<S: Scalar>(p: &[S], g: &[S], dx: &mut [S]) {
    let mut dot = S::zero();
    for (&pi, &gi) in p.iter().zip(g) {
        dot += pi * gi;
    }
    for ((d, &pi), &gi) in dx.iter_mut().zip(p).zip(g) {
        *d = pi * (gi - dot);
    }
}

pub(crate) fn row_norm_stats<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = scalar::<S>(row.len() as f64);
    let mut mu = S::zero();
    for &v in row {
        mu += v;
    }
    mu = mu / n;
    let mut var = S::zero();
    for &v in row {
        let d = v - mu;
        var += d * d;
    }
    var = var / n;
    (mu, S::one() / (var + eps).sqrt())
}

fn log_softmax_at<S: Scalar>(row: &[S], target: usize) -> S {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    row[target] - max - sum.ln()
}

pub(crate) fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = scalar::<S>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = scalar::<S>(0.044715);
    let half = scalar::<S>(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = scalar::<S>(0.797_884_560_802_865_4);
    let k = scalar::<S>(0.044715);
    let half = scalar::<S>(0.5);
    let three = scalar::<S>(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(shape: [usize; 2], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.input(&t2([2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.input(&t2([2, 2], &[3.0, -1.5, 2.0, 0.25])).unwrap();
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[3.0, -1.5, 2.0, 0.25]);
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.input(&t2([2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.input(&t2([2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&t2([2, 3], &[0.0; 6])).unwrap();
        let b = tape.input(&t2([2, 2], &[0.0; 4])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(NumericsError::ShapeMismatch { .. })));
    }

    #[test]
    fn grad_of_sum_of_product_is_transpose_row_sums() {
        // d/dA of sum(A·B) = 1·Bᵀ broadcast over rows of A.
        let mut tape = Tape::new();
        let a = tape.param(&t2([2, 3], &[0.3, -0.2, 0.9, 1.1, 0.0, -0.4])).unwrap();
        let b = tape.input(&t2([3, 2], &[2.0, -1.0, 0.5, 3.0, 1.5, 0.25])).unwrap();
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(a).unwrap();
        // Row i of dA is the vector of B's row sums.
        let row_sums = [1.0, 3.5, 1.75];
        for i in 0..2 {
            for j in 0..3 {
                assert!((g[i * 3 + j] - row_sums[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_all_equal_row() {
        let mut tape = Tape::new();
        let x = tape.input(&t2([1, 4], &[0.7; 4])).unwrap();
        let p = tape.softmax_rows(x).unwrap();
        for &v in tape.value(p) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_quarter_three_quarters() {
        let mut tape = Tape::new();
        let x = tape.input(&t2([1, 2], &[0.0, 3.0f64.ln()])).unwrap();
        let p = tape.softmax_rows(x).unwrap();
        assert!((tape.value(p)[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(p)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let base = [0.4, -1.2, 2.2, 0.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 123.5).collect();
        let mut tape = Tape::new();
        let a = tape.input(&t2([1, 4], &base)).unwrap();
        let b = tape.input(&t2([1, 4], &shifted)).unwrap();
        let pa = tape.softmax_rows(a).unwrap();
        let pb = tape.softmax_rows(b).unwrap();
        for (x, y) in tape.value(pa).iter().zip(tape.value(pb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let mut t = t2([1, 2], &[0.0, 0.0]);
        t.data_mut()[0] = f64::NAN;
        assert!(tape.input(&t).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(&t2([1, 4], &[5.0; 4])).unwrap();
        let gain = tape.input(&Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap()).unwrap();
        let bias = tape.input(&Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap()).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for &v in tape.value(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::new();
        let x = tape.input(&t2([1, 2], &[1.0, 3.0])).unwrap();
        let gain = tape.input(&Tensor::from_vec(vec![2], vec![1.0; 2]).unwrap()).unwrap();
        let bias = tape.input(&Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap()).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-5);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 11;
        let mut tape = Tape::new();
        let logits = tape.input(&t2([1, v], &vec![0.25; v])).unwrap();
        let loss = tape.cross_entropy_masked(logits, &[3], &[true]).unwrap();
        assert!((tape.scalar_of(loss) - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_margin() {
        let mut tape = Tape::new();
        let mut row = vec![0.0; 8];
        row[2] = 30.0;
        let logits = tape.input(&t2([1, 8], &row)).unwrap();
        let loss = tape.cross_entropy_masked(logits, &[2], &[true]).unwrap();
        assert!(tape.scalar_of(loss) <= 1e-10);
    }

    #[test]
    fn cross_entropy_masked_equals_sliced_rows() {
        // Loss over 2 selected rows of 5 equals the loss over just those
        // 2 rows extracted into their own matrix.
        let data: Vec<f64> = (0..5 * 7).map(|i| ((i * 37 % 11) as f64) * 0.3 - 1.0).collect();
        let targets = [1u32, 4, 0, 6, 2];
        let mask = [false, true, false, false, true];

        let mut tape = Tape::new();
        let logits = tape.input(&t2([5, 7], &data)).unwrap();
        let loss = tape.cross_entropy_masked(logits, &targets, &mask).unwrap();

        let mut sliced = Vec::new();
        sliced.extend_from_slice(&data[7..14]);
        sliced.extend_from_slice(&data[28..35]);
        let mut tape2 = Tape::new();
        let logits2 = tape2.input(&t2([2, 7], &sliced)).unwrap();
        let loss2 = tape2.cross_entropy_masked(logits2, &[4, 2], &[true, true]).unwrap();

        assert!((tape.scalar_of(loss) - tape2.scalar_of(loss2)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask_and_bad_target() {
        let mut tape = Tape::new();
        let logits = tape.input(&t2([2, 3], &[0.0; 6])).unwrap();
        assert!(matches!(
            tape.cross_entropy_masked(logits, &[0, 1], &[false, false]),
            Err(NumericsError::EmptyMask)
        ));
        assert!(matches!(
            tape.cross_entropy_masked(logits, &[0, 9], &[true, true]),
            Err(NumericsError::TargetOutOfVocab { id: 9, .. })
        ));
    }

    #[test]
    fn cross_entropy_unmasked_rows_get_exact_zero_grad() {
        let data: Vec<f64> = (0..4 * 5).map(|i| (i as f64) * 0.1 - 1.0).collect();
        let mut tape = Tape::new();
        let logits = tape.param(&t2([4, 5], &data)).unwrap();
        let loss = tape
            .cross_entropy_masked(logits, &[0, 1, 2, 3], &[true, false, true, false])
            .unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        for j in 0..5 {
            assert_eq!(g[5 + j], 0.0);
            assert_eq!(g[15 + j], 0.0);
        }
        // Masked rows do receive gradient.
        assert!(g[0..5].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_leaves_unrelated_leaf_at_zero() {
        let mut tape = Tape::new();
        let a = tape.param(&t2([1, 2], &[1.0, 2.0])).unwrap();
        let b = tape.param(&t2([1, 2], &[3.0, 4.0])).unwrap();
        let loss = tape.sum(a).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(b).is_none());
        let mut bt = t2([1, 2], &[3.0, 4.0]);
        tape.write_grad(b, &mut bt);
        assert_eq!(bt.grad.as_deref().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_and_attached_loss() {
        let mut tape = Tape::new();
        let a = tape.param(&t2([1, 2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(a), Err(NumericsError::NonScalarLoss(_))));
        let c = tape.input(&Tensor::scalar_value(3.0f64)).unwrap();
        assert!(matches!(tape.backward(c), Err(NumericsError::DetachedLoss)));
    }

    #[test]
    fn repeated_backward_reproduces_grads_bit_exactly() {
        let data: Vec<f64> = (0..6).map(|i| (i as f64) * 0.37 - 0.8).collect();
        let run = || {
            let mut tape = Tape::new();
            let w = tape.param(&t2([2, 3], &data)).unwrap();
            let x = tape.input(&t2([3, 2], &[0.5, -1.0, 0.25, 2.0, -0.75, 0.1])).unwrap();
            let h = tape.matmul(w, x).unwrap();
            let p = tape.softmax_rows(h).unwrap();
            let loss = tape.sum(p).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(w).unwrap().to_vec()
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(g1, g2);
    }

    #[test]
    fn causal_softmax_rows_zero_above_diagonal() {
        let data: Vec<f64> = (0..9).map(|i| i as f64 * 0.2).collect();
        let mut tape = Tape::new();
        let x = tape.input(&t2([3, 3], &data)).unwrap();
        let p = tape.causal_softmax_rows(x).unwrap();
        let pv = tape.value(p);
        assert_eq!(pv[1], 0.0);
        assert_eq!(pv[2], 0.0);
        assert_eq!(pv[5], 0.0);
        for i in 0..3 {
            let s: f64 = pv[i * 3..i * 3 + i + 1].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.input(&t2([2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.input(&t2([1, 2], &[5.0, 6.0])).unwrap();
        let cat = tape.concat_rows(&[a, b]).unwrap();
        let back = tape.slice_rows(cat, 2, 1).unwrap();
        assert_eq!(tape.value(back), &[5.0, 6.0]);

        let c = tape.input(&t2([2, 1], &[7.0, 8.0])).unwrap();
        let wide = tape.concat_cols(&[a, c]).unwrap();
        assert_eq!(tape.value(wide), &[1.0, 2.0, 7.0, 3.0, 4.0, 8.0]);
        let col = tape.slice_cols(wide, 2, 1).unwrap();
        assert_eq!(tape.value(col), &[7.0, 8.0]);
    }

    #[test]
    fn embed_looks_up_rows() {
        let mut tape = Tape::new();
        let table = tape.input(&t2([3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        let out = tape.embed(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(out), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        assert!(tape.embed(table, &[3]).is_err());
    }
}
