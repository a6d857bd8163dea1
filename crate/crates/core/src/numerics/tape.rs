//! Tape-based reverse-mode automatic differentiation over dense 2-D grids.
//!
//! Every primitive evaluates eagerly and appends one node to the tape.
//! Nodes only reference earlier nodes, so the tape is topologically ordered
//! by construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Shape mismatches are programming errors and panic. Data-dependent
//! failures (empty attention rows, bad targets, non-finite values) surface
//! as [`Error`]s.

use std::rc::Rc;

use super::grid::{Real, ValueGrid};
use super::kernels::{log_sum_exp, sigmoid, softmax_in_place};
use crate::error::{Error, Result};

/// Epsilon inside the RMS normalization square root.
pub const RMS_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call.
///
/// `q`, `k` and `v` hold `blocks * seq_len` rows; attention never crosses a
/// block boundary. `mask` is `seq_len x seq_len` admissibility shared by all
/// blocks and heads, `bias` an optional additive `heads x seq_len x seq_len`
/// score offset.
#[derive(Clone, Debug)]
pub struct AttentionSpec<F> {
    pub heads: usize,
    pub seq_len: usize,
    pub mask: Option<Rc<[bool]>>,
    pub bias: Option<Rc<[F]>>,
    pub relative: Option<RelativeBias>,
}

/// Learned score offset `table[h, bucket[i * seq_len + j]]` for a
/// `heads x buckets` table.
#[derive(Clone, Debug)]
pub struct RelativeBias {
    pub table: Var,
    pub bucket: Rc<[usize]>,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRows(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    Sum(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Gather(Var, Rc<[usize]>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Rc<[usize]>),
    SliceCols(Var, usize),
    Pick(Var, Rc<[usize]>),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<F> },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Rc<[usize]>, include: Vec<bool>, probs: Vec<F>, count: usize },
    Scan { alpha: Var, x: Var, seq_len: usize },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec<F>, probs: Vec<F> },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRows(..) => "mul_rows",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Gather(..) => "gather",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SelectRows(..) => "select_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Pick(..) => "pick",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy_mean",
            Op::Scan { .. } => "linear_scan",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: ValueGrid<F>,
    op: Op<F>,
    tracked: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    non_finite: Option<&'static str>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), non_finite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: ValueGrid<F>) -> Var {
        let tracked = value.requires_grad();
        self.push(value, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, mut value: ValueGrid<F>) -> Var {
        if value.requires_grad() {
            value = ValueGrid::from_parts(value.shape().to_vec(), value.into_data());
        }
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &ValueGrid<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    /// Fails if any primitive so far produced a NaN or infinity.
    pub fn check(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: ValueGrid<F>, op: Op<F>, tracked: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let value = &self.nodes[a.0].value;
        let out = ValueGrid::from_parts(value.shape().to_vec(), value.data().iter().map(|&x| f(x)).collect());
        let tracked = self.tracked(&[a]);
        self.push(out, op, tracked)
    }

    fn binary_same(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "{}: operand sizes differ", op.name());
        let out = ValueGrid::from_parts(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        );
        let tracked = self.tracked(&[a, b]);
        self.push(out, op, tracked)
    }

    // ----- primitives -------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let c = super::kernels::matmul(self.data(a), self.data(b), m, k, n);
        let tracked = self.tracked(&[a, b]);
        self.push(ValueGrid::from_parts(vec![m, n], c), Op::MatMul(a, b), tracked)
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut c = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.data(a), k as isize, 1, self.data(b), 1, k as isize, &mut c, n as isize, 1, false);
        let tracked = self.tracked(&[a, b]);
        self.push(ValueGrid::from_parts(vec![m, n], c), Op::MatMulNt(a, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.nodes[bias.0].value.len(), n, "add_row bias length");
        let b = self.data(bias);
        let mut out = self.data(a).to_vec();
        for r in 0..m {
            for (x, &y) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *x = *x + y;
            }
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        let tracked = self.tracked(&[a, bias]);
        self.push(ValueGrid::from_parts(shape, out), Op::AddRow(a, bias), tracked)
    }

    /// Scales row `i` of `a` by `s[i]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.nodes[s.0].value.len(), m, "mul_rows scale length");
        let sv = self.data(s);
        let mut out = self.data(a).to_vec();
        for r in 0..m {
            out[r * n..(r + 1) * n].iter_mut().for_each(|x| *x = *x * sv[r]);
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        let tracked = self.tracked(&[a, s]);
        self.push(ValueGrid::from_parts(shape, out), Op::MulRows(a, s), tracked)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), super::kernels::silu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.data(a).iter().copied().sum();
        let tracked = self.tracked(&[a]);
        self.push(ValueGrid::scalar(s), Op::Sum(a), tracked)
    }

    fn reduce_axis(&self, a: Var, axis: usize) -> (Vec<usize>, Vec<F>) {
        let (m, n) = self.dims(a);
        let d = self.data(a);
        match axis {
            0 => {
                let mut out = vec![F::zero(); n];
                for r in 0..m {
                    for (o, &x) in out.iter_mut().zip(&d[r * n..(r + 1) * n]) {
                        *o = *o + x;
                    }
                }
                (vec![1, n], out)
            }
            1 => (vec![m, 1], (0..m).map(|r| d[r * n..(r + 1) * n].iter().copied().sum()).collect()),
            _ => panic!("reduction axis {axis} out of range for 2-D grid"),
        }
    }

    /// Sum over rows (`axis = 0`, giving `[1,n]`) or columns (`axis = 1`,
    /// giving `[m,1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let (shape, out) = self.reduce_axis(a, axis);
        let tracked = self.tracked(&[a]);
        self.push(ValueGrid::from_parts(shape, out), Op::SumAxis(a, axis), tracked)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let (m, n) = self.dims(a);
        let count = F::lit(if axis == 0 { m } else { n } as f64);
        let (shape, mut out) = self.reduce_axis(a, axis);
        out.iter_mut().for_each(|x| *x = *x / count);
        let tracked = self.tracked(&[a]);
        self.push(ValueGrid::from_parts(shape, out), Op::MeanAxis(a, axis), tracked)
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.dims(table);
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "gather id {id} out of range {v}");
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let tracked = self.tracked(&[table]);
        self.push(ValueGrid::from_parts(vec![ids.len(), d], out), Op::Gather(table, ids.into()), tracked)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.dims(p);
            assert_eq!(c, n, "concat_rows column mismatch");
            out.extend_from_slice(self.data(p));
            rows += m;
        }
        let tracked = self.tracked(parts);
        self.push(ValueGrid::from_parts(vec![rows, n], out), Op::ConcatRows(parts.to_vec()), tracked)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, m, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let tracked = self.tracked(parts);
        self.push(ValueGrid::from_parts(vec![m, total], out), Op::ConcatCols(parts.to_vec()), tracked)
    }

    /// Output row `i` is row `idx[i]` of `a`; indices may repeat.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = self.dims(a);
        let d = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "select_rows index {i} out of range {m}");
            out.extend_from_slice(&d[i * n..(i + 1) * n]);
        }
        let tracked = self.tracked(&[a]);
        self.push(ValueGrid::from_parts(vec![idx.len(), n], out), Op::SelectRows(a, idx.into()), tracked)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(start + len <= n, "slice_cols out of range");
        let d = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&d[r * n + start..r * n + start + len]);
        }
        let tracked = self.tracked(&[a]);
        self.push(ValueGrid::from_parts(vec![m, len], out), Op::SliceCols(a, start), tracked)
    }

    /// Picks entry `cols[i]` from row `i`, giving `[m,1]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(cols.len(), m, "pick needs one column per row");
        let d = self.data(a);
        let out = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < n, "pick column out of range");
                d[r * n + c]
            })
            .collect();
        let tracked = self.tracked(&[a]);
        self.push(ValueGrid::from_parts(vec![m, 1], out), Op::Pick(a, cols.into()), tracked)
    }

    /// Row-wise `x / rms(x) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(self.nodes[gain.0].value.len(), n, "rms_norm gain length");
        let xd = self.data(x);
        let g = self.data(gain);
        let eps = F::lit(RMS_EPS);
        let nf = F::lit(n as f64);
        let mut out = vec![F::zero(); m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let ms = row.iter().map(|&v| v * v).sum::<F>() / nf;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..n {
                out[r * n + j] = row[j] * inv * g[j];
            }
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        let tracked = self.tracked(&[x, gain]);
        self.push(ValueGrid::from_parts(shape, out), Op::RmsNorm { x, gain, inv_rms }, tracked)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let d = self.data(a);
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = d[r * n + c];
            }
        }
        let tracked = self.tracked(&[a]);
        self.push(ValueGrid::from_parts(vec![n, m], out), Op::Transpose(a), tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = &self.nodes[a.0].value;
        assert_eq!(shape.iter().product::<usize>(), value.len(), "reshape size mismatch");
        let out = ValueGrid::from_parts(shape.to_vec(), value.data().to_vec());
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Reshape(a), tracked)
    }

    /// Row softmax. Entries where `mask` is `false` are excluded before
    /// normalization and come out exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(mask) = mask {
            assert_eq!(mask.len(), m * n, "softmax mask shape");
        }
        if !self.nodes[a.0].value.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = self.data(a).to_vec();
        for r in 0..m {
            let row_mask = mask.map(|mk| &mk[r * n..(r + 1) * n]);
            if !softmax_in_place(&mut out[r * n..(r + 1) * n], row_mask) {
                return Err(Error::EmptyAttentionRow { row: r });
            }
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        let tracked = self.tracked(&[a]);
        Ok(self.push(ValueGrid::from_parts(shape, out), Op::Softmax(a), tracked))
    }

    /// Mean over included rows of `-log softmax(logits_i)[target_i]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize], include: Option<&[bool]>) -> Result<Var> {
        let (n, classes) = self.dims(logits);
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} logit rows", targets.len())));
        }
        let include: Vec<bool> = match include {
            Some(w) if w.len() != n => return Err(Error::Shape(format!("{} inclusion flags for {n} rows", w.len()))),
            Some(w) => w.to_vec(),
            None => vec![true; n],
        };
        let count = include.iter().filter(|&&w| w).count();
        if count == 0 {
            return Err(Error::NoInstances);
        }
        let d = self.data(logits);
        let mut probs = vec![F::zero(); n * classes];
        let mut total = F::zero();
        for r in 0..n {
            if !include[r] {
                continue;
            }
            let t = targets[r];
            if t >= classes {
                return Err(Error::TargetOutOfRange { target: t, classes });
            }
            let row = &d[r * classes..(r + 1) * classes];
            let lse = log_sum_exp(row);
            total = total + (lse - row[t]);
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / F::lit(count as f64);
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            ValueGrid::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.into(), include, probs, count },
            tracked,
        ))
    }

    /// Gated linear recurrence `s_t = alpha_t * s_{t-1} + (1 - alpha_t) * x_t`
    /// with `s` reset to zero at the start of every `seq_len`-row block.
    pub fn linear_scan(&mut self, alpha: Var, x: Var, seq_len: usize) -> Var {
        let (rows, e) = self.dims(x);
        assert_eq!(self.dims(alpha), (rows, e), "linear_scan operand shapes");
        assert!(seq_len > 0 && rows % seq_len == 0, "linear_scan block layout");
        let a = self.data(alpha);
        let xd = self.data(x);
        let mut s = vec![F::zero(); rows * e];
        for r in 0..rows {
            let first = r % seq_len == 0;
            for c in 0..e {
                let i = r * e + c;
                let prev = if first { F::zero() } else { s[i - e] };
                s[i] = a[i] * prev + (F::one() - a[i]) * xd[i];
            }
        }
        let tracked = self.tracked(&[alpha, x]);
        self.push(ValueGrid::from_parts(vec![rows, e], s), Op::Scan { alpha, x, seq_len }, tracked)
    }

    /// Multi-head scaled dot-product attention over independent blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec<F>) -> Result<Var> {
        let (rows, d) = self.dims(q);
        assert_eq!(self.dims(k), (rows, d), "attention key shape");
        assert_eq!(self.dims(v), (rows, d), "attention value shape");
        let (h, l) = (spec.heads, spec.seq_len);
        assert!(h > 0 && d % h == 0, "model width not divisible by heads");
        assert!(l > 0 && rows % l == 0, "attention block layout");
        if let Some(mask) = &spec.mask {
            assert_eq!(mask.len(), l * l, "attention mask shape");
        }
        if let Some(bias) = &spec.bias {
            assert_eq!(bias.len(), h * l * l, "attention bias shape");
        }
        let rel = spec.relative.as_ref().map(|r| {
            let (th, nb) = self.dims(r.table);
            assert_eq!(th, h, "relative bias table rows");
            assert!(r.bucket.len() == l * l && r.bucket.iter().all(|&b| b < nb), "relative bias buckets");
            (self.data(r.table), nb, &r.bucket)
        });
        let dh = d / h;
        let blocks = rows / l;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let ds = d as isize;
        let mut probs = vec![F::zero(); blocks * h * l * l];
        let mut out = vec![F::zero(); rows * d];
        for b in 0..blocks {
            for hh in 0..h {
                let off = b * l * d + hh * dh;
                let p = &mut probs[(b * h + hh) * l * l..(b * h + hh + 1) * l * l];
                F::gemm(l, dh, l, &qd[off..], ds, 1, &kd[off..], 1, ds, p, l as isize, 1, false);
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = *x * scale;
                        if let Some(bias) = &spec.bias {
                            *x = *x + bias[(hh * l + i) * l + j];
                        }
                        if let Some((table, nb, bucket)) = rel {
                            *x = *x + table[hh * nb + bucket[i * l + j]];
                        }
                    }
                    let row_mask = spec.mask.as_ref().map(|m| &m[i * l..(i + 1) * l]);
                    if !softmax_in_place(row, row_mask) {
                        return Err(Error::EmptyAttentionRow { row: i });
                    }
                }
                F::gemm(l, l, dh, p, l as isize, 1, &vd[off..], ds, 1, &mut out[off..], ds, 1, false);
            }
        }
        let mut inputs = vec![q, k, v];
        inputs.extend(spec.relative.as_ref().map(|r| r.table));
        let tracked = self.tracked(&inputs);
        Ok(self.push(ValueGrid::from_parts(vec![rows, d], out), Op::Attention { q, k, v, spec, probs }, tracked))
    }

    // ----- backward ---------------------------------------------------------

    /// Propagates `d(loss)/d(node)` back to every tracked leaf, whose
    /// gradient slots are overwritten. Intermediate gradients are dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check()?;
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, true) = (&node.op, node.value.requires_grad()) {
                let g = g.unwrap_or_else(|| vec![F::zero(); node.value.len()]);
                node.value.zero_grad();
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Zero-initialized accumulation buffer for an input, or `None` when the
        // input does not need a gradient.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].tracked {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if let Some(da) = slot!(*a) {
                    F::gemm(m, n, k, g, n as isize, 1, self.data(*b), 1, n as isize, da, k as isize, 1, true);
                }
                if let Some(db) = slot!(*b) {
                    F::gemm(k, m, n, self.data(*a), 1, k as isize, g, n as isize, 1, db, n as isize, 1, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if let Some(da) = slot!(*a) {
                    F::gemm(m, n, k, g, n as isize, 1, self.data(*b), k as isize, 1, da, k as isize, 1, true);
                }
                if let Some(db) = slot!(*b) {
                    F::gemm(n, m, k, g, 1, n as isize, self.data(*a), k as isize, 1, db, k as isize, 1, true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if let Some(da) = slot!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
                if let Some(db) = slot!(*b) {
                    if negate {
                        db.iter_mut().zip(g).for_each(|(d, &x)| *d = *d - x);
                    } else {
                        db.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                let n = self.dims(*a).1;
                if let Some(da) = slot!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
                if let Some(db) = slot!(*bias) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(da) = slot!(*a) {
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * bv[j];
                    }
                }
                if let Some(db) = slot!(*b) {
                    for j in 0..g.len() {
                        db[j] = db[j] + g[j] * av[j];
                    }
                }
            }
            Op::MulRows(a, s) => {
                let (m, n) = self.dims(*a);
                let (av, sv) = (self.data(*a), self.data(*s));
                if let Some(da) = slot!(*a) {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] = da[r * n + c] + g[r * n + c] * sv[r];
                        }
                    }
                }
                if let Some(ds) = slot!(*s) {
                    for r in 0..m {
                        let dot: F = (0..n).map(|c| g[r * n + c] * av[r * n + c]).sum();
                        ds[r] = ds[r] + dot;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = slot!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *c);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = slot!(*a) {
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * out[j] * (F::one() - out[j]);
                    }
                }
            }
            Op::Silu(a) => {
                let av = self.data(*a);
                if let Some(da) = slot!(*a) {
                    for j in 0..g.len() {
                        let s = sigmoid(av[j]);
                        da[j] = da[j] + g[j] * s * (F::one() + av[j] * (F::one() - s));
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = slot!(*a) {
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * out[j];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = slot!(*a) {
                    da.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (m, n) = self.dims(*a);
                let div = match node.op {
                    Op::MeanAxis(..) => F::lit(if *axis == 0 { m } else { n } as f64),
                    _ => F::one(),
                };
                if let Some(da) = slot!(*a) {
                    for r in 0..m {
                        for c in 0..n {
                            let up = if *axis == 0 { g[c] } else { g[r] };
                            da[r * n + c] = da[r * n + c] + up / div;
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                let d = self.dims(*table).1;
                if let Some(dt) = slot!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] = dt[id * d + c] + g[r * d + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(dp) = slot!(p) {
                        dp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, &x)| *d = *d + x);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2();
                let mut start = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if let Some(dp) = slot!(p) {
                        for r in 0..m {
                            for c in 0..w {
                                dp[r * w + c] = dp[r * w + c] + g[r * total + start + c];
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::SelectRows(a, idx) => {
                let n = self.dims(*a).1;
                if let Some(da) = slot!(*a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            da[src * n + c] = da[src * n + c] + g[r * n + c];
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a);
                let w = node.value.dims2().1;
                if let Some(da) = slot!(*a) {
                    for r in 0..m {
                        for c in 0..w {
                            da[r * n + start + c] = da[r * n + start + c] + g[r * w + c];
                        }
                    }
                }
            }
            Op::Pick(a, cols) => {
                let n = self.dims(*a).1;
                if let Some(da) = slot!(*a) {
                    for (r, &c) in cols.iter().enumerate() {
                        da[r * n + c] = da[r * n + c] + g[r];
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (m, n) = self.dims(*x);
                let (xv, gv) = (self.data(*x), self.data(*gain));
                if let Some(dg) = slot!(*gain) {
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] = dg[c] + g[r * n + c] * xv[r * n + c] * inv_rms[r];
                        }
                    }
                }
                if let Some(dx) = slot!(*x) {
                    let nf = F::lit(n as f64);
                    for r in 0..m {
                        let inv = inv_rms[r];
                        // d/dx of x * inv: (dxhat - xhat * mean(dxhat * xhat)) * inv
                        let mut dot = F::zero();
                        for c in 0..n {
                            dot = dot + g[r * n + c] * gv[c] * xv[r * n + c] * inv;
                        }
                        let mean = dot / nf;
                        for c in 0..n {
                            let xhat = xv[r * n + c] * inv;
                            let dxhat = g[r * n + c] * gv[c];
                            dx[r * n + c] = dx[r * n + c] + (dxhat - xhat * mean) * inv;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                if let Some(da) = slot!(*a) {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] = da[r * n + c] + g[c * m + r];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = slot!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
            }
            Op::Softmax(a) => {
                let n = node.value.dims2().1;
                if let Some(da) = slot!(*a) {
                    for (r, (gy, y)) in g.chunks(n).zip(out.chunks(n)).enumerate() {
                        let dot: F = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for c in 0..n {
                            da[r * n + c] = da[r * n + c] + y[c] * (gy[c] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, include, probs, count } => {
                let classes = self.dims(*logits).1;
                let scale = g[0] / F::lit(*count as f64);
                if let Some(dl) = slot!(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if !include[r] {
                            continue;
                        }
                        for c in 0..classes {
                            let onehot = if c == t { F::one() } else { F::zero() };
                            dl[r * classes + c] = dl[r * classes + c] + (probs[r * classes + c] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Scan { alpha, x, seq_len } => {
                let (rows, e) = self.dims(*x);
                let (av, xv) = (self.data(*alpha), self.data(*x));
                // Total gradient flowing into each state, accumulated right to left.
                let mut ds = g.to_vec();
                for r in (0..rows).rev() {
                    if (r + 1) % seq_len != 0 {
                        for c in 0..e {
                            let i = r * e + c;
                            ds[i] = ds[i] + av[i + e] * ds[i + e];
                        }
                    }
                }
                if let Some(da) = slot!(*alpha) {
                    for r in 0..rows {
                        let first = r % seq_len == 0;
                        for c in 0..e {
                            let i = r * e + c;
                            let prev = if first { F::zero() } else { out[i - e] };
                            da[i] = da[i] + ds[i] * (prev - xv[i]);
                        }
                    }
                }
                if let Some(dx) = slot!(*x) {
                    for i in 0..rows * e {
                        dx[i] = dx[i] + ds[i] * (F::one() - av[i]);
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec<F>,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (rows, d) = self.dims(q);
        let (h, l) = (spec.heads, spec.seq_len);
        let dh = d / h;
        let blocks = rows / l;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let ds_ = d as isize;
        let li = l as isize;
        let mut dq = vec![F::zero(); rows * d];
        let mut dk = vec![F::zero(); rows * d];
        let mut dv = vec![F::zero(); rows * d];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dp = vec![F::zero(); l * l];
        let rel = spec.relative.as_ref().filter(|r| self.nodes[r.table.0].tracked);
        let nb = rel.map_or(0, |r| self.dims(r.table).1);
        let mut dtable = vec![F::zero(); h * nb];
        for b in 0..blocks {
            for hh in 0..h {
                let off = b * l * d + hh * dh;
                let p = &probs[(b * h + hh) * l * l..(b * h + hh + 1) * l * l];
                // dV = P^T dO
                F::gemm(l, l, dh, p, 1, li, &g[off..], ds_, 1, &mut dv[off..], ds_, 1, true);
                // dP = dO V^T
                F::gemm(l, dh, l, &g[off..], ds_, 1, &vd[off..], 1, ds_, &mut dp, li, 1, false);
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                for i in 0..l {
                    let pr = &p[i * l..(i + 1) * l];
                    let dr = &mut dp[i * l..(i + 1) * l];
                    let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..l {
                        let raw = pr[j] * (dr[j] - dot);
                        if let Some(r) = rel {
                            let t = &mut dtable[hh * nb + r.bucket[i * l + j]];
                            *t = *t + raw;
                        }
                        dr[j] = raw * scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q
                F::gemm(l, l, dh, &dp, li, 1, &kd[off..], ds_, 1, &mut dq[off..], ds_, 1, true);
                F::gemm(l, l, dh, &dp, 1, li, &qd[off..], ds_, 1, &mut dk[off..], ds_, 1, true);
            }
        }
        if let Some(r) = rel {
            let slot = grads[r.table.0].get_or_insert_with(|| vec![F::zero(); dtable.len()]);
            slot.iter_mut().zip(&dtable).for_each(|(s, &x)| *s = *s + x);
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].tracked {
                let slot = grads[var.0].get_or_insert_with(|| vec![F::zero(); delta.len()]);
                slot.iter_mut().zip(&delta).for_each(|(s, &x)| *s = *s + x);
            }
        }
    }
}
