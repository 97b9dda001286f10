//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is a topological
//! order and `backward` is a single reverse sweep. A node whose inputs are all
//! constant (including frozen leaves) is stored as a constant and never
//! visited by the backward pass.

use std::sync::Arc;

use crate::categorical::{sigmoid, softplus};
use crate::error::{dim_err, NumericError};
use crate::par;
use crate::tensor::{rows_cols, Tensor};

type Result<T> = std::result::Result<T, NumericError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Mask = Arc<Vec<bool>>;

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddGroup(Var, Var, usize),
    AddTiled(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    LogSoftmax(Var, Option<Mask>),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Pick(Var, Vec<usize>),
    GroupDot(Var, Var, usize),
    GroupMaskedMean(Var, Mask, usize),
    KlRows { p: Var, q: Var, mask: Option<Mask>, detach_p: bool, logp: Vec<f64>, logq: Vec<f64> },
    BernoulliKlRows { p: Var, q: Var, mask: Option<Mask>, detach_p: bool },
    BceRows { x: Var, targets: Vec<f64>, mask: Option<Mask> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A single computation graph. Not shared across threads; build one per worker.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── construction ──────────────────────────────────────────────────

    /// Registers a tensor as a leaf. Frozen tensors become constants.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_values(),
            op: if rg { Op::Leaf } else { Op::Const },
            requires_grad: rg,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, rg: bool, name: &str) -> Result<Var> {
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(NumericError::NonFinite(format!("{name} produced {} at index {i}", value[i])));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op: if rg { op } else { Op::Const },
            requires_grad: rg,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    /// Single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    // ── linear algebra ────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`; rank-1 operands are treated as a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 {
            return Err(dim_err(format!("matmul inner dims {k} vs {k2}")));
        }
        let out = matmul_forward(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg, "matmul")
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg, "mul")
    }

    /// Adds a length-`n` vector to every row of `[m,n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.rc(x);
        if self.value(row).len() != n {
            return Err(dim_err(format!("add_row: row len {} vs cols {n}", self.value(row).len())));
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(x)
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row), rg, "add_row")
    }

    /// Multiplies every row of `[m,n]` elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.rc(x);
        if self.value(row).len() != n {
            return Err(dim_err(format!("mul_row: row len {} vs cols {n}", self.value(row).len())));
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(x)
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a * b))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        self.push(self.shape(x).to_vec(), out, Op::MulRow(x, row), rg, "mul_row")
    }

    /// `x: [B*group, n] + y: [B, n]`, row `b` of `y` broadcast over its group.
    pub fn add_group(&mut self, x: Var, y: Var, group: usize) -> Result<Var> {
        let (xr, n) = self.rc(x);
        let (yr, yn) = self.rc(y);
        if yn != n || group == 0 || xr != yr * group {
            return Err(dim_err(format!(
                "add_group: x {:?}, y {:?}, group {group}",
                self.shape(x),
                self.shape(y)
            )));
        }
        let yv = self.value(y);
        let out: Vec<f64> = self
            .value(x)
            .chunks(n)
            .enumerate()
            .flat_map(|(r, xrow)| {
                let yrow = &yv[(r / group) * n..(r / group + 1) * n];
                xrow.iter().zip(yrow).map(|(a, b)| a + b)
            })
            .collect();
        let rg = self.rg(x) || self.rg(y);
        self.push(self.shape(x).to_vec(), out, Op::AddGroup(x, y, group), rg, "add_group")
    }

    /// `x: [k*B, n] + y: [B, n]` with row `r` of `x` receiving row `r % B`
    /// of `y` (time-major rows, one `y` row per trajectory).
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xr, n) = self.rc(x);
        let (yr, yn) = self.rc(y);
        if yn != n || yr == 0 || xr % yr != 0 {
            return Err(dim_err(format!("add_tiled: x {:?}, y {:?}", self.shape(x), self.shape(y))));
        }
        let yv = self.value(y);
        let out: Vec<f64> = self
            .value(x)
            .chunks(n)
            .enumerate()
            .flat_map(|(r, xrow)| {
                let b = r % yr;
                xrow.iter().zip(&yv[b * n..(b + 1) * n]).map(|(a, c)| a + c)
            })
            .collect();
        let rg = self.rg(x) || self.rg(y);
        self.push(self.shape(x).to_vec(), out, Op::AddTiled(x, y), rg, "add_tiled")
    }

    /// Multiplies every element of `x` by the single value of `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("mul_scalar_var: scale must have one element"));
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        self.push(self.shape(x).to_vec(), out, Op::MulScalarVar(x, s), rg, "mul_scalar_var")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg, "scale")
    }

    // ── elementwise nonlinearities ─────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), rg, "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Exp(x), rg, "exp")
    }

    // ── normalization ─────────────────────────────────────────────────

    /// Row-wise log-softmax. Masked (`false`) entries receive a `-1e30`
    /// additive logit and exactly zero gradient.
    pub fn log_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        let mask = self.check_mask(mask, rows * cols, "log_softmax")?;
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let m = mask.as_ref().map(|m| &m[r * cols..(r + 1) * cols]);
            crate::categorical::log_softmax_into(&xv[r * cols..(r + 1) * cols], m, &mut out[r * cols..(r + 1) * cols])?;
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x, mask), rg, "log_softmax")
    }

    fn check_mask(&self, mask: Option<&[bool]>, len: usize, what: &str) -> Result<Option<Mask>> {
        match mask {
            None => Ok(None),
            Some(m) if m.len() == len => Ok(Some(Arc::new(m.to_vec()))),
            Some(m) => Err(dim_err(format!("{what}: mask len {} vs {len}", m.len()))),
        }
    }

    /// Row-wise layer normalization without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        let xv = self.value(x);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let rg = self.rg(x);
        let out = xhat.clone();
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, xhat, inv_std }, rg, "layer_norm")
    }

    // ── structural ────────────────────────────────────────────────────

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.rc(p).0).ok_or_else(|| dim_err("concat_cols: no inputs"))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if r != rows {
                return Err(dim_err(format!("concat_cols: rows {r} vs {rows}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.rc(p);
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.rc(p).1).ok_or_else(|| dim_err("concat_rows: no inputs"))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rc(p);
            if c != cols {
                return Err(dim_err(format!("concat_rows: cols {c} vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if start >= end || end > cols {
            return Err(dim_err(format!("slice_cols {start}..{end} of {cols}")));
        }
        let w = end - start;
        let xv = self.value(x);
        let out: Vec<f64> = (0..rows).flat_map(|r| xv[r * cols + start..r * cols + end].iter().copied()).collect();
        let rg = self.rg(x);
        self.push(vec![rows, w], out, Op::SliceCols(x, start), rg, "slice_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(dim_err(format!("reshape {:?} -> {:?}", self.shape(x), shape)));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Reshape(x), rg, "reshape")
    }

    // ── reductions ────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(dim_err("mean of empty tensor"));
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg, "mean")
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(dim_err(format!("pick: {} indices for [{rows},{cols}]", idx.len())));
        }
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(r, &i)| xv[r * cols + i]).collect();
        let rg = self.rg(x);
        self.push(vec![rows], out, Op::Pick(x, idx.to_vec()), rg, "pick")
    }

    /// Pointer scores: `out[b, e] = keys[b*group + e, :] . query[b, :]`.
    pub fn group_dot(&mut self, keys: Var, query: Var, group: usize) -> Result<Var> {
        let (kr, d) = self.rc(keys);
        let (b, qd) = self.rc(query);
        if qd != d || kr != b * group {
            return Err(dim_err(format!(
                "group_dot: keys {:?}, query {:?}, group {group}",
                self.shape(keys),
                self.shape(query)
            )));
        }
        let kv = self.value(keys);
        let qv = self.value(query);
        let out = (0..b * group)
            .map(|r| dot(&kv[r * d..(r + 1) * d], &qv[(r / group) * d..(r / group + 1) * d]))
            .collect();
        let rg = self.rg(keys) || self.rg(query);
        self.push(vec![b, group], out, Op::GroupDot(keys, query, group), rg, "group_dot")
    }

    /// Mean over the valid rows of each group: `[B*group, d] -> [B, d]`.
    pub fn group_masked_mean(&mut self, x: Var, mask: &[bool], group: usize) -> Result<Var> {
        let (rows, d) = self.rc(x);
        if group == 0 || rows % group != 0 || mask.len() != rows {
            return Err(dim_err(format!("group_masked_mean: rows {rows}, group {group}, mask {}", mask.len())));
        }
        let b = rows / group;
        let xv = self.value(x);
        let mut out = vec![0.0; b * d];
        for gi in 0..b {
            let valid = mask[gi * group..(gi + 1) * group].iter().filter(|&&m| m).count();
            if valid == 0 {
                return Err(NumericError::InvalidMask(format!("group {gi} has no valid rows")));
            }
            let o = &mut out[gi * d..(gi + 1) * d];
            for e in 0..group {
                let r = gi * group + e;
                if mask[r] {
                    o.iter_mut().zip(&xv[r * d..(r + 1) * d]).for_each(|(a, v)| *a += v);
                }
            }
            o.iter_mut().for_each(|a| *a /= valid as f64);
        }
        let rg = self.rg(x);
        self.push(vec![b, d], out, Op::GroupMaskedMean(x, Arc::new(mask.to_vec()), group), rg, "group_masked_mean")
    }

    // ── divergences and losses ────────────────────────────────────────

    /// Row-wise `KL(softmax(p) || softmax(q))` over the unmasked support.
    /// With `detach_p` no gradient reaches `p`.
    pub fn kl_rows(&mut self, p: Var, q: Var, mask: Option<&[bool]>, detach_p: bool) -> Result<Var> {
        if self.shape(p) != self.shape(q) {
            return Err(dim_err(format!("kl_rows: {:?} vs {:?}", self.shape(p), self.shape(q))));
        }
        let (rows, cols) = self.rc(p);
        let mask = self.check_mask(mask, rows * cols, "kl_rows")?;
        let mut logp = vec![0.0; rows * cols];
        let mut logq = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let sl = r * cols..(r + 1) * cols;
            let m = mask.as_ref().map(|m| &m[sl.clone()]);
            crate::categorical::log_softmax_into(&self.value(p)[sl.clone()], m, &mut logp[sl.clone()])?;
            crate::categorical::log_softmax_into(&self.value(q)[sl.clone()], m, &mut logq[sl.clone()])?;
            out[r] = crate::categorical::kl_from_log_probs(&logp[sl.clone()], &logq[sl.clone()], m);
        }
        let rg = self.rg(q) || (!detach_p && self.rg(p));
        self.push(vec![rows], out, Op::KlRows { p, q, mask, detach_p, logp, logq }, rg, "kl_rows")
    }

    /// Row-wise mean over valid entries of `KL(Bern(sigmoid(p)) || Bern(sigmoid(q)))`.
    pub fn bernoulli_kl_rows(&mut self, p: Var, q: Var, mask: Option<&[bool]>, detach_p: bool) -> Result<Var> {
        if self.shape(p) != self.shape(q) {
            return Err(dim_err(format!("bernoulli_kl_rows: {:?} vs {:?}", self.shape(p), self.shape(q))));
        }
        let (rows, cols) = self.rc(p);
        let mask = self.check_mask(mask, rows * cols, "bernoulli_kl_rows")?;
        let (pv, qv) = (self.value(p), self.value(q));
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let (mut acc, mut n) = (0.0, 0usize);
            for c in 0..cols {
                let i = r * cols + c;
                if mask.as_ref().is_none_or(|m| m[i]) {
                    acc += bernoulli_kl(pv[i], qv[i]);
                    n += 1;
                }
            }
            if n == 0 {
                return Err(NumericError::InvalidMask(format!("bernoulli_kl_rows: row {r} fully masked")));
            }
            out[r] = (acc / n as f64).max(0.0);
        }
        let rg = self.rg(q) || (!detach_p && self.rg(p));
        self.push(vec![rows], out, Op::BernoulliKlRows { p, q, mask, detach_p }, rg, "bernoulli_kl_rows")
    }

    /// Row-wise mean binary cross-entropy of logits `x` against targets in `[0,1]`.
    pub fn bce_rows(&mut self, x: Var, targets: &[f64], mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if targets.len() != rows * cols {
            return Err(dim_err(format!("bce_rows: {} targets for [{rows},{cols}]", targets.len())));
        }
        let mask = self.check_mask(mask, rows * cols, "bce_rows")?;
        let xv = self.value(x);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let (mut acc, mut n) = (0.0, 0usize);
            for c in 0..cols {
                let i = r * cols + c;
                if mask.as_ref().is_none_or(|m| m[i]) {
                    acc += softplus(xv[i]) - targets[i] * xv[i];
                    n += 1;
                }
            }
            if n == 0 {
                return Err(NumericError::InvalidMask(format!("bce_rows: row {r} fully masked")));
            }
            out[r] = acc / n as f64;
        }
        let rg = self.rg(x);
        self.push(vec![rows], out, Op::BceRows { x, targets: targets.to_vec(), mask }, rg, "bce_rows")
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a one-element node. Interior gradients are reset
    /// first; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(dim_err(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                match self.grads[i].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => self.grads[i] = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut pending);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = pending[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let (_, n) = rows_cols(&nodes[b.0].shape);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| {
                    // dA = dC . B^T
                    par::for_each_chunk_mut(da, k, |r, row| {
                        let gr = &g[r * n..(r + 1) * n];
                        for (t, d) in row.iter_mut().enumerate() {
                            *d += dot(gr, &bv[t * n..(t + 1) * n]);
                        }
                    });
                });
                acc(*b, &mut |db| {
                    // dB = A^T . dC
                    par::for_each_chunk_mut(db, n, |t, row| {
                        for r in 0..m {
                            let a_rt = av[r * k + t];
                            if a_rt != 0.0 {
                                axpy(row, a_rt, &g[r * n..(r + 1) * n]);
                            }
                        }
                    });
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| d.iter_mut().zip(g.iter().zip(bv.iter())).for_each(|(x, (gy, bb))| *x += gy * bb));
                acc(*b, &mut |d| d.iter_mut().zip(g.iter().zip(av.iter())).for_each(|(x, (gy, aa))| *x += gy * aa));
            }
            Op::AddRow(x, row) => {
                let n = nodes[row.0].value.len();
                acc(*x, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    for gr in g.chunks(n) {
                        add_into(d, gr);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let n = nodes[row.0].value.len();
                let (xv, rv) = (&nodes[x.0].value, &nodes[row.0].value);
                acc(*x, &mut |d| {
                    for (i, (a, gy)) in d.iter_mut().zip(g).enumerate() {
                        *a += gy * rv[i % n];
                    }
                });
                acc(*row, &mut |d| {
                    for (i, gy) in g.iter().enumerate() {
                        d[i % n] += gy * xv[i];
                    }
                });
            }
            Op::AddGroup(x, y, group) => {
                let (_, n) = rows_cols(&nodes[y.0].shape);
                acc(*x, &mut |d| add_into(d, g));
                acc(*y, &mut |d| {
                    for (r, gr) in g.chunks(n).enumerate() {
                        let b = r / group;
                        add_into(&mut d[b * n..(b + 1) * n], gr);
                    }
                });
            }
            Op::AddTiled(x, y) => {
                let (yr, n) = rows_cols(&nodes[y.0].shape);
                acc(*x, &mut |d| add_into(d, g));
                acc(*y, &mut |d| {
                    for (r, gr) in g.chunks(n).enumerate() {
                        let b = r % yr;
                        add_into(&mut d[b * n..(b + 1) * n], gr);
                    }
                });
            }
            Op::MulScalarVar(x, s) => {
                let sv = nodes[s.0].value[0];
                let xv = &nodes[x.0].value;
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, gy)| *a += gy * sv));
                acc(*s, &mut |d| d[0] += dot(g, xv));
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, gy)| *a += gy * c)),
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |d| {
                    for ((a, gy), v) in d.iter_mut().zip(g).zip(xv.iter()) {
                        if *v > 0.0 {
                            *a += gy;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |d| {
                    for ((a, gy), s) in d.iter_mut().zip(g).zip(y.iter()) {
                        *a += gy * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, &mut |d| {
                    for ((a, gy), t) in d.iter_mut().zip(g).zip(y.iter()) {
                        *a += gy * (1.0 - t * t);
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                acc(*x, &mut |d| {
                    for ((a, gy), e) in d.iter_mut().zip(g).zip(y.iter()) {
                        *a += gy * e;
                    }
                });
            }
            Op::LogSoftmax(x, mask) => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        let sl = r * cols..(r + 1) * cols;
                        let valid = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
                        let gsum: f64 = (0..cols).filter(|&c| valid(c)).map(|c| g[sl.start + c]).sum();
                        for c in (0..cols).filter(|&c| valid(c)) {
                            let i = sl.start + c;
                            d[i] += g[i] - y[i].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let (rows, cols) = rows_cols(&node.shape);
                acc(*x, &mut |d| {
                    let n = cols as f64;
                    for r in 0..rows {
                        let sl = r * cols..(r + 1) * cols;
                        let gs = &g[sl.clone()];
                        let xh = &xhat[sl.clone()];
                        let sum_g: f64 = gs.iter().sum();
                        let sum_gx: f64 = dot(gs, xh);
                        for c in 0..cols {
                            d[sl.start + c] += inv_std[r] / n * (n * gs[c] - sum_g - xh[c] * sum_gx);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = rows_cols(&node.shape);
                let mut offset = 0;
                for p in parts {
                    let (_, c) = rows_cols(&nodes[p.0].shape);
                    let off = offset;
                    acc(*p, &mut |d| {
                        for r in 0..rows {
                            add_into(&mut d[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    let off = offset;
                    acc(*p, &mut |d| add_into(d, &g[off..off + len]));
                    offset += len;
                }
            }
            Op::SliceCols(x, start) => {
                let (rows, w) = rows_cols(&node.shape);
                let (_, cols) = rows_cols(&nodes[x.0].shape);
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * cols + start..r * cols + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::Pick(x, idx) => {
                let (_, cols) = rows_cols(&nodes[x.0].shape);
                acc(*x, &mut |d| {
                    for (r, &c) in idx.iter().enumerate() {
                        d[r * cols + c] += g[r];
                    }
                });
            }
            Op::GroupDot(keys, query, group) => {
                let (_, dd) = rows_cols(&nodes[keys.0].shape);
                let (kv, qv) = (&nodes[keys.0].value, &nodes[query.0].value);
                acc(*keys, &mut |d| {
                    for (r, gy) in g.iter().enumerate() {
                        let b = r / group;
                        axpy(&mut d[r * dd..(r + 1) * dd], *gy, &qv[b * dd..(b + 1) * dd]);
                    }
                });
                acc(*query, &mut |d| {
                    for (r, gy) in g.iter().enumerate() {
                        let b = r / group;
                        axpy(&mut d[b * dd..(b + 1) * dd], *gy, &kv[r * dd..(r + 1) * dd]);
                    }
                });
            }
            Op::GroupMaskedMean(x, mask, group) => {
                let (_, dd) = rows_cols(&node.shape);
                acc(*x, &mut |d| {
                    for b in 0..mask.len() / group {
                        let valid = mask[b * group..(b + 1) * group].iter().filter(|&&m| m).count() as f64;
                        for e in 0..*group {
                            let r = b * group + e;
                            if mask[r] {
                                axpy(&mut d[r * dd..(r + 1) * dd], 1.0 / valid, &g[b * dd..(b + 1) * dd]);
                            }
                        }
                    }
                });
            }
            Op::KlRows { p, q, mask, detach_p, logp, logq } => {
                let (rows, cols) = rows_cols(&nodes[p.0].shape);
                let valid = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                acc(*q, &mut |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            if valid(i) {
                                d[i] += g[r] * (logq[i].exp() - logp[i].exp());
                            }
                        }
                    }
                });
                if !detach_p {
                    let kl = &node.value;
                    acc(*p, &mut |d| {
                        for r in 0..rows {
                            for c in 0..cols {
                                let i = r * cols + c;
                                if valid(i) {
                                    d[i] += g[r] * logp[i].exp() * ((logp[i] - logq[i]) - kl[r]);
                                }
                            }
                        }
                    });
                }
            }
            Op::BernoulliKlRows { p, q, mask, detach_p } => {
                let (rows, cols) = rows_cols(&nodes[p.0].shape);
                let (pv, qv) = (&nodes[p.0].value, &nodes[q.0].value);
                let counts = valid_counts(mask.as_deref().map(|m| m.as_slice()), rows, cols);
                let valid = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                acc(*q, &mut |d| {
                    for i in (0..rows * cols).filter(|&i| valid(i)) {
                        let r = i / cols;
                        d[i] += g[r] * (sigmoid(qv[i]) - sigmoid(pv[i])) / counts[r];
                    }
                });
                if !detach_p {
                    acc(*p, &mut |d| {
                        for i in (0..rows * cols).filter(|&i| valid(i)) {
                            let r = i / cols;
                            let s = sigmoid(pv[i]);
                            d[i] += g[r] * s * (1.0 - s) * (pv[i] - qv[i]) / counts[r];
                        }
                    });
                }
            }
            Op::BceRows { x, targets, mask } => {
                let (rows, cols) = rows_cols(&nodes[x.0].shape);
                let xv = &nodes[x.0].value;
                let counts = valid_counts(mask.as_deref().map(|m| m.as_slice()), rows, cols);
                acc(*x, &mut |d| {
                    for i in 0..rows * cols {
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            let r = i / cols;
                            d[i] += g[r] * (sigmoid(xv[i]) - targets[i]) / counts[r];
                        }
                    }
                });
            }
        }
    }
}

fn valid_counts(mask: Option<&[bool]>, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| match mask {
            None => cols as f64,
            Some(m) => m[r * cols..(r + 1) * cols].iter().filter(|&&v| v).count() as f64,
        })
        .collect()
}

/// `KL(Bern(sigmoid(a)) || Bern(sigmoid(b)))` in log-odds form.
pub(crate) fn bernoulli_kl(a: f64, b: f64) -> f64 {
    sigmoid(a) * (a - b) - softplus(a) + softplus(b)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    dst.iter_mut().zip(x).for_each(|(d, v)| *d += a * v);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const ROW_BLOCK: usize = 8;

/// Row-blocked kernel; every output element sums over `t` in ascending order,
/// so the result does not depend on blocking or thread count.
pub(crate) fn matmul_forward(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut c, ROW_BLOCK * n, |blk, cblock| {
        let r0 = blk * ROW_BLOCK;
        let nrows = cblock.len() / n.max(1);
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            for i in 0..nrows {
                let av = a[(r0 + i) * k + t];
                if av != 0.0 {
                    axpy(&mut cblock[i * n..(i + 1) * n], av, brow);
                }
            }
        }
    });
    c
}
