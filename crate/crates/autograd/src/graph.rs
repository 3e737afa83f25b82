//! Tape of tensor operations with reverse-mode gradient propagation.
//!
//! Every operation appends one node whose inputs were created before it, so
//! insertion order is a topological order and the backward sweep is a single
//! reverse pass over the tape.

use crate::error::{GraphError, Result};
use crate::tensor::{Real, Tensor, EPS};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    AddScalar {
        x: usize,
    },
    MulScalar {
        x: usize,
        s: usize,
    },
    Exp {
        x: usize,
    },
    Log {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    SelectRows {
        x: usize,
        idx: Vec<usize>,
    },
    ExpandLeading {
        x: usize,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    SwapAxes12 {
        x: usize,
        dims: [usize; 4],
    },
}

/// Recorded computation over dense tensors.
///
/// A graph is owned by one thread at a time; nothing inside it is shared.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Real> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Adds an input tensor to the tape.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// `None` for nodes that do not require gradients; zeros for nodes that
    /// require them but are not reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if !self.requires_grad[v.0] {
            return None;
        }
        let shape = self.values[v.0].shape();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad matches value shape"),
            None => Tensor::zeros(shape),
        })
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let rg = inputs.iter().any(|&i| self.requires_grad[i]);
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(rg);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.0 < self.values.len() {
            Ok(v.0)
        } else {
            Err(GraphError::UnknownVar(v.0))
        }
    }

    fn mismatch(&self, op: &'static str, vars: &[Var]) -> GraphError {
        GraphError::ShapeMismatch {
            op,
            shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    // ------------------------------------------------------------------
    // forward operations
    // ------------------------------------------------------------------

    /// `a @ b` where `a` is `[.., k]` (leading dimensions flattened) and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.values[ai].shape(), self.values[bi].shape());
        if sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.values[ai].numel() / k;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.values[ai].data(),
            false,
            self.values[bi].data(),
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a: ai, b: bi, m, k, n }, &[ai, bi]))
    }

    /// Batched product: `[B, m, k] @ [B, k, n]`, or `[B, m, k] @ [B, n, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.values[ai].shape(), self.values[bi].shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.mismatch("bmm", &[a, b]));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(self.mismatch("bmm", &[a, b]));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.values[ai].data(), self.values[bi].data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        let op = Op::BatchMatMul {
            a: ai,
            b: bi,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.push(value, op, &[ai, bi]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.values[xi].shape();
        if s.len() != 2 {
            return Err(self.mismatch("transpose", &[x]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.values[xi].data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor::new(&[cols, rows], out)?;
        Ok(self.push(value, Op::Transpose { x: xi, rows, cols }, &[xi]))
    }

    /// Elementwise sum. `b` may have a shape equal to a trailing suffix of
    /// `a`'s shape, in which case it is repeated over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.values[ai].shape(), self.values[bi].shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.mismatch("add", &[a, b]));
        }
        let bd = self.values[bi].data();
        let block = bd.len();
        let mut out = self.values[ai].data().to_vec();
        for chunk in out.chunks_exact_mut(block) {
            for (o, &y) in chunk.iter_mut().zip(bd) {
                *o = *o + y;
            }
        }
        let value = Tensor::new(sa, out)?;
        Ok(self.push(value, Op::Add { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.values[xi].map(|v| v * c);
        Ok(self.push(value, Op::Scale { x: xi, c }, &[xi]))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.values[xi].map(|v| v + c);
        Ok(self.push(value, Op::AddScalar { x: xi }, &[xi]))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.check(x)?, self.check(s)?);
        if self.values[si].numel() != 1 {
            return Err(self.mismatch("mul_scalar", &[x, s]));
        }
        let sv = self.values[si].item();
        let value = self.values[xi].map(|v| v * sv);
        Ok(self.push(value, Op::MulScalar { x: xi, s: si }, &[xi, si]))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.values[xi].map(|v| v.exp());
        Ok(self.push(value, Op::Exp { x: xi }, &[xi]))
    }

    /// Natural log with inputs clamped below at 1e-12.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let eps = T::lit(EPS);
        let value = self.values[xi].map(|v| v.max(eps).ln());
        Ok(self.push(value, Op::Log { x: xi }, &[xi]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.values[xi].map(|v| v.max(T::zero()));
        Ok(self.push(value, Op::Relu { x: xi }, &[xi]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (c, k) = (T::lit(SQRT_2_OVER_PI), T::lit(GELU_CUBIC));
        let half = T::lit(0.5);
        let value = self.values[xi].map(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        Ok(self.push(value, Op::Gelu { x: xi }, &[xi]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, false)
    }

    /// Softmax over the last axis; with `causal`, the trailing `[.., t, t]`
    /// block is treated as attention scores and position `i` only receives
    /// weight from positions `j <= i`. Masked weights are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.values[xi].shape();
        let n = s[s.len() - 1];
        let t = if s.len() >= 2 { s[s.len() - 2] } else { 1 };
        if causal && (s.len() < 2 || t != n) {
            return Err(self.mismatch("masked_softmax", &[x]));
        }
        let mut out = self.values[xi].data().to_vec();
        for (r, row) in out.chunks_exact_mut(n).enumerate() {
            let allowed = if causal { r % t + 1 } else { n };
            let (live, masked) = row.split_at_mut(allowed);
            let max = live.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in live.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in live.iter_mut() {
                *v = *v / total;
            }
            masked.fill(T::zero());
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::Softmax { x: xi }, &[xi]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// shape `[d]`. Variance floor is 1e-12.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let d = self.values[xi].cols();
        if self.values[gi].shape() != [d] || self.values[bi].shape() != [d] {
            return Err(self.mismatch("layer_norm", &[x, gamma, beta]));
        }
        let rows = self.values[xi].rows();
        let inv_d = T::one() / T::from_usize(d).expect("dim");
        let eps = T::lit(EPS);
        let (g, b) = (self.values[gi].data(), self.values[bi].data());
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = self.values[xi].row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.values[xi].shape(), out)?;
        let op = Op::LayerNorm {
            x: xi,
            gamma: gi,
            beta: bi,
            xhat,
            rstd,
        };
        Ok(self.push(value, op, &[xi, gi, bi]))
    }

    /// Rows of `table` (`[vocab, d]`) selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let s = self.values[ti].shape();
        if s.len() != 2 || ids.is_empty() {
            return Err(self.mismatch("embedding", &[table]));
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(GraphError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                size: vocab,
            });
        }
        let src = self.values[ti].data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        let op = Op::Embedding {
            table: ti,
            ids: ids.to_vec(),
        };
        Ok(self.push(value, op, &[ti]))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = idx.first().ok_or(GraphError::ShapeMismatch {
            op: "concat_rows",
            shapes: vec![],
        })?;
        let tail = self.values[*first].shape()[1..].to_vec();
        if idx.iter().any(|&i| self.values[i].shape()[1..] != *tail) {
            return Err(self.mismatch("concat_rows", parts));
        }
        let lead: usize = idx.iter().map(|&i| self.values[i].shape()[0]).sum();
        let mut out = Vec::new();
        for &i in &idx {
            out.extend_from_slice(self.values[i].data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ConcatRows { parts: idx.clone() }, &idx))
    }

    /// Gathers rows of `x` viewed as `[rows, last_dim]`.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let (rows, d) = (self.values[xi].rows(), self.values[xi].cols());
        if idx.is_empty() {
            return Err(self.mismatch("select_rows", &[x]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(GraphError::IndexOutOfRange {
                op: "select_rows",
                index: bad,
                size: rows,
            });
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            out.extend_from_slice(self.values[xi].row(r));
        }
        let value = Tensor::new(&[idx.len(), d], out)?;
        let op = Op::SelectRows {
            x: xi,
            idx: idx.to_vec(),
        };
        Ok(self.push(value, op, &[xi]))
    }

    /// Repeats `x` along a new leading axis of size `batch`.
    pub fn expand_leading(&mut self, x: Var, batch: usize) -> Result<Var> {
        let xi = self.check(x)?;
        if batch == 0 {
            return Err(self.mismatch("expand_leading", &[x]));
        }
        let src = self.values[xi].data();
        let mut out = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(src);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.values[xi].shape());
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ExpandLeading { x: xi }, &[xi]))
    }

    /// Scales each row (last axis) to unit Euclidean norm. Rows with norm
    /// below 1e-12 are rejected.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (rows, d) = (self.values[xi].rows(), self.values[xi].cols());
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = self.values[xi].row(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm.to_f64().is_none_or(|n| n.is_nan() || n < EPS) {
                return Err(GraphError::Degenerate {
                    op: "l2_normalize",
                    row: r,
                    norm: norm.to_f64().unwrap_or(f64::NAN),
                });
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(self.values[xi].shape(), out)?;
        Ok(self.push(value, Op::L2Normalize { x: xi, norms }, &[xi]))
    }

    /// Summed softmax cross-entropy of `logits` rows (`[rows, classes]`, leading
    /// dimensions flattened) against `targets`. Rows where `mask` is false
    /// contribute nothing. Returns a one-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let li = self.check(logits)?;
        let (rows, classes) = (self.values[li].rows(), self.values[li].cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(GraphError::ShapeMismatch {
                op: "cross_entropy",
                shapes: vec![self.shape(logits).to_vec(), vec![targets.len()], vec![mask.len()]],
            });
        }
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= classes {
                return Err(GraphError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: targets[r],
                    size: classes,
                });
            }
            let z = self.values[li].row(r);
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = z.iter().map(|&v| (v - max).exp()).sum::<T>();
            let lse = max + sum.ln();
            total = total + lse - z[targets[r]];
            for c in 0..classes {
                probs[r * classes + c] = (z[c] - lse).exp();
            }
        }
        let op = Op::CrossEntropy {
            logits: li,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total), op, &[li]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let total = self.values[xi].data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(total), Op::Sum { x: xi }, &[xi]))
    }

    /// Mean of all elements, accumulated relative to the first element so
    /// that a constant tensor yields its value exactly.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let data = self.values[xi].data();
        let n = T::from_usize(data.len()).expect("count");
        let shift = data[0];
        let dev = data.iter().map(|&v| v - shift).sum::<T>();
        Ok(self.push(Tensor::scalar(shift + dev / n), Op::Mean { x: xi }, &[xi]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.values[xi].clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: xi }, &[xi]))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`; splits or merges attention heads.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.values[xi].shape();
        if s.len() != 4 {
            return Err(self.mismatch("swap_axes12", &[x]));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.values[xi].data(), dims);
        let value = Tensor::new(&[dims[0], dims[2], dims[1], dims[3]], out)?;
        Ok(self.push(value, Op::SwapAxes12 { x: xi, dims }, &[xi]))
    }

    // ------------------------------------------------------------------
    // reverse pass
    // ------------------------------------------------------------------

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires them. Previous gradients are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.values[li].numel() != 1 {
            return Err(GraphError::NonScalarLoss {
                shape: self.values[li].shape().to_vec(),
            });
        }
        self.zero_grad();
        if !self.requires_grad[li] {
            return Ok(());
        }
        self.grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, g: &[T]) {
        let Self {
            values,
            ops,
            requires_grad,
            grads,
        } = self;
        let values = &*values;
        let rg = &*requires_grad;
        macro_rules! slot {
            ($j:expr) => {
                grad_slot(grads, rg, values, $j)
            };
        }
        let out = &values[i];
        match &ops[i] {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = slot!(a) {
                    T::gemm(m, n, k, T::one(), g, false, values[b].data(), true, T::one(), ga);
                }
                if let Some(gb) = slot!(b) {
                    T::gemm(k, m, n, T::one(), values[a].data(), true, g, false, T::one(), gb);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (sa, sb, so) = (m * k, k * n, m * n);
                if let Some(ga) = slot!(a) {
                    let bd = values[b].data();
                    for t in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[t * so..(t + 1) * so],
                            false,
                            &bd[t * sb..(t + 1) * sb],
                            !trans_b,
                            T::one(),
                            &mut ga[t * sa..(t + 1) * sa],
                        );
                    }
                }
                if let Some(gb) = slot!(b) {
                    let ad = values[a].data();
                    for t in 0..batch {
                        let (gs, as_, gbs) = (
                            &g[t * so..(t + 1) * so],
                            &ad[t * sa..(t + 1) * sa],
                            &mut gb[t * sb..(t + 1) * sb],
                        );
                        if trans_b {
                            T::gemm(n, m, k, T::one(), gs, true, as_, false, T::one(), gbs);
                        } else {
                            T::gemm(k, m, n, T::one(), as_, true, gs, false, T::one(), gbs);
                        }
                    }
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if let Some(gx) = slot!(x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] = gx[r * cols + c] + g[c * rows + r];
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = slot!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(b) {
                    let block = gb.len();
                    for chunk in g.chunks_exact(block) {
                        add_into(gb, chunk);
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(gx) = slot!(x) {
                    for (o, &d) in gx.iter_mut().zip(g) {
                        *o = *o + c * d;
                    }
                }
            }
            &Op::AddScalar { x } | &Op::Reshape { x } => {
                if let Some(gx) = slot!(x) {
                    add_into(gx, g);
                }
            }
            &Op::MulScalar { x, s } => {
                let sv = values[s].item();
                if let Some(gx) = slot!(x) {
                    for (o, &d) in gx.iter_mut().zip(g) {
                        *o = *o + sv * d;
                    }
                }
                if let Some(gs) = slot!(s) {
                    let dot = values[x].data().iter().zip(g).map(|(&v, &d)| v * d).sum::<T>();
                    gs[0] = gs[0] + dot;
                }
            }
            &Op::Exp { x } => {
                if let Some(gx) = slot!(x) {
                    for ((o, &d), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *o = *o + d * y;
                    }
                }
            }
            &Op::Log { x } => {
                let eps = T::lit(EPS);
                if let Some(gx) = slot!(x) {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(values[x].data()) {
                        if v > eps {
                            *o = *o + d / v;
                        }
                    }
                }
            }
            &Op::Relu { x } => {
                if let Some(gx) = slot!(x) {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(values[x].data()) {
                        if v > T::zero() {
                            *o = *o + d;
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                let (c, k) = (T::lit(SQRT_2_OVER_PI), T::lit(GELU_CUBIC));
                let (half, three) = (T::lit(0.5), T::lit(3.0));
                if let Some(gx) = slot!(x) {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(values[x].data()) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        *o = *o + d * (half * (T::one() + t) + half * v * dt);
                    }
                }
            }
            &Op::Softmax { x } => {
                if let Some(gx) = slot!(x) {
                    let n = out.cols();
                    for ((gr, yr), dr) in gx
                        .chunks_exact_mut(n)
                        .zip(out.data().chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let dot = yr.iter().zip(dr).map(|(&y, &d)| y * d).sum::<T>();
                        for ((o, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *o = *o + y * (d - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = out.cols();
                let rows = out.rows();
                if let Some(gg) = slot!(gamma) {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] = gg[c] + g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(gb) = slot!(beta) {
                    for r in 0..rows {
                        add_into(gb, &g[r * d..(r + 1) * d]);
                    }
                }
                let gam = values[gamma].data();
                if let Some(gx) = slot!(x) {
                    let inv_d = T::one() / T::from_usize(d).expect("dim");
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..d {
                            dxhat[c] = gr[c] * gam[c];
                            mean_d = mean_d + dxhat[c];
                            mean_dh = mean_dh + dxhat[c] * hr[c];
                        }
                        mean_d = mean_d * inv_d;
                        mean_dh = mean_dh * inv_d;
                        for c in 0..d {
                            let v = rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                            gx[r * d + c] = gx[r * d + c] + v;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = slot!(*table) {
                    let d = out.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = values[p].numel();
                    if let Some(gp) = slot!(p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SelectRows { x, idx } => {
                if let Some(gx) = slot!(*x) {
                    let d = out.cols();
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            &Op::ExpandLeading { x } => {
                if let Some(gx) = slot!(x) {
                    let block = gx.len();
                    for chunk in g.chunks_exact(block) {
                        add_into(gx, chunk);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if let Some(gx) = slot!(*x) {
                    let d = out.cols();
                    for (r, &norm) in norms.iter().enumerate() {
                        let (yr, dr) = (&out.data()[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot = yr.iter().zip(dr).map(|(&y, &dd)| y * dd).sum::<T>();
                        for c in 0..d {
                            gx[r * d + c] = gx[r * d + c] + (dr[c] - yr[c] * dot) / norm;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                if let Some(gl) = slot!(*logits) {
                    let classes = values[*logits].cols();
                    let up = g[0];
                    for (r, (&t, &live)) in targets.iter().zip(mask).enumerate() {
                        if !live {
                            continue;
                        }
                        for c in 0..classes {
                            let mut p = probs[r * classes + c];
                            if c == t {
                                p = p - T::one();
                            }
                            gl[r * classes + c] = gl[r * classes + c] + up * p;
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = slot!(x) {
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
            &Op::Mean { x } => {
                if let Some(gx) = slot!(x) {
                    let share = g[0] / T::from_usize(gx.len()).expect("count");
                    for o in gx.iter_mut() {
                        *o = *o + share;
                    }
                }
            }
            &Op::SwapAxes12 { x, dims } => {
                if let Some(gx) = slot!(x) {
                    let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                    add_into(gx, &back);
                }
            }
        }
    }
}

fn grad_slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    requires_grad: &[bool],
    values: &[Tensor<T>],
    j: usize,
) -> Option<&'a mut [T]> {
    if !requires_grad[j] {
        return None;
    }
    let len = values[j].numel();
    Some(grads[j].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + v;
    }
}

fn swap12<T: Real>(src: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let a = g.constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros(&[3]));
        let y = g.softmax(z).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_three_four() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_rejects_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 1e-13]));
        let err = g.l2_normalize(x).unwrap_err();
        assert!(matches!(err, GraphError::Degenerate { row: 0, .. }));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            GraphError::ShapeMismatch {
                op: "matmul",
                shapes: vec![vec![2, 3], vec![2, 3]]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let s = g.mul_scalar(x, x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let z = g.param(t(&[4], &[0.3, -1.0, 2.0, 0.5]));
        let p = g.softmax(z).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        for &d in g.grad(z).unwrap().data() {
            assert!(d.abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_gradient() {
        let mut g = Graph::new();
        let z = g.param(Tensor::<f64>::zeros(&[1, 4]));
        let l = g.cross_entropy(z, &[0], &[true]).unwrap();
        g.backward(l).unwrap();
        let expect = [0.25 - 1.0, 0.25, 0.25, 0.25];
        for (d, e) in g.grad(z).unwrap().data().iter().zip(expect) {
            assert!((d - e).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(GraphError::NonScalarLoss { .. })));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::scalar(2.0));
        let y = g.param(t(&[2], &[1.0, 1.0]));
        let l = g.exp(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(y).unwrap().data(), &[0.0, 0.0]);
        let c = g.constant(Tensor::<f64>::scalar(1.0));
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let z = g.constant(t(&[2, 2], &[1.0, 5.0, 1.0, 1.0]));
        let p = g.masked_softmax(z, true).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn mean_of_constant_is_exact() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[3], 0.1));
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), 0.1);
    }

    #[test]
    fn swap_axes_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64));
        let y = g.swap_axes12(x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 3, 5]);
        let z = g.swap_axes12(y).unwrap();
        assert_eq!(g.value(z), g.value(x));
    }
}
