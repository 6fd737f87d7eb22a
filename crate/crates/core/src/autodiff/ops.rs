use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::{NodeId, Tape, Var};

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    Scalar,
    /// `1×c` row against an `r×c` matrix.
    Row,
}

pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId, Bcast),
    Sub(NodeId, NodeId, Bcast),
    Mul(NodeId, NodeId, Bcast),
    Div(NodeId, NodeId, Bcast),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Silu(NodeId),
    EluPlusOne(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Outer(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    CumsumRows(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    RmsNorm(NodeId, f64),
    L2Normalize(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    GatherRows(NodeId, Rc<[usize]>),
    ScatterAddRows(NodeId, Rc<[usize]>),
    GatherCols(NodeId, Rc<[usize]>),
    DecayScores(NodeId, NodeId, NodeId),
    Copy(NodeId),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b, _) | Sub(a, b, _) | Mul(a, b, _) | Div(a, b, _) | Matmul(a, b) | Outer(a, b)
            | ScaleRows(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Exp(a) | Ln(a) | Sigmoid(a) | Softplus(a) | Silu(a) | EluPlusOne(a)
            | Square(a) | Sqrt(a) | Transpose(a) | Sum(a) | Mean(a) | SumRows(a) | SumCols(a)
            | CumsumRows(a) | Softmax(a) | LogSoftmax(a) | RmsNorm(a, _) | L2Normalize(a)
            | SliceRows(a, _) | SliceCols(a, _) | Reshape(a) | GatherRows(a, _) | ScatterAddRows(a, _)
            | GatherCols(a, _) | Copy(a) => vec![*a],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            DecayScores(q, k, l) => vec![*q, *k, *l],
        }
    }
}

pub(crate) fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Bcast::Scalar);
    }
    if b.shape().len() <= 2 {
        let (_, ac) = a.dims2()?;
        let (br, bc) = b.dims2()?;
        if br == 1 && bc == ac && a.shape().len() == 2 {
            return Ok(Bcast::Row);
        }
    }
    Err(Error::shape(op, a.shape(), b.shape()))
}

#[inline]
pub(crate) fn bidx(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % cols,
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const L2_FLOOR: f64 = 1e-12;

fn same_tape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::invalid(op, "operands recorded on different tapes"))
    }
}

fn softmax_row(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut mx = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if allowed(j) && v > mx {
            mx = v;
        }
    }
    if mx == f64::NEG_INFINITY {
        return Err(Error::invalid("softmax", "row has no unmasked entries"));
    }
    let mut s = 0.0;
    for (j, &v) in x.iter().enumerate() {
        out[j] = if allowed(j) { (v - mx).exp() } else { 0.0 };
        s += out[j];
    }
    for o in out.iter_mut() {
        *o /= s;
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn unary(self, name: &'static str, op: fn(NodeId) -> Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let out = self.value().map(f);
        self.tape.push(name, out, op(self.id))
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: fn(NodeId, NodeId, Bcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        same_tape(name, &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let kind = bcast_kind(name, &a, &b)?;
        let cols = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[bidx(kind, i, cols)]))
            .collect();
        let out = Tensor::new(a.shape(), data)?;
        self.tape.push(name, out, op(self.id, other.id, kind))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().scale(c);
        self.tape.push("scale", out, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddScalar, move |x| x + c)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp, f64::exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", Op::Ln, f64::ln)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid, sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", Op::Softplus, softplus)
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.unary("silu", Op::Silu, |x| x * sigmoid(x))
    }

    pub fn elu_plus_one(self) -> Result<Var<'t>> {
        self.unary("elu_plus_one", Op::EluPlusOne, |x| if x > 0.0 { x + 1.0 } else { x.exp() })
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", Op::Square, |x| x * x)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary("sqrt", Op::Sqrt, f64::sqrt)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape("matmul", &self, &other)?;
        let out = self.value().matmul(&other.value())?;
        self.tape.push("matmul", out, Op::Matmul(self.id, other.id))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        self.tape.push("transpose", out, Op::Transpose(self.id))
    }

    /// `aᵀb` for two vectors (any shape, flattened): an `m×n` matrix.
    pub fn outer(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape("outer", &self, &other)?;
        let (a, b) = (self.value(), other.value());
        let (m, n) = (a.numel(), b.numel());
        let mut data = Vec::with_capacity(m * n);
        for &x in a.data() {
            data.extend(b.data().iter().map(|&y| x * y));
        }
        self.tape.push("outer", Tensor::new(&[m, n], data)?, Op::Outer(self.id, other.id))
    }

    /// `diag(s) · self`: row `i` multiplied by `s[i]`.
    pub fn scale_rows(self, s: Var<'t>) -> Result<Var<'t>> {
        same_tape("scale_rows", &self, &s)?;
        let (m, sv) = (self.value(), s.value());
        let (r, c) = m.dims2()?;
        if sv.numel() != r {
            return Err(Error::shape("scale_rows", m.shape(), sv.shape()));
        }
        let data = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * sv.data()[i / c.max(1)])
            .collect();
        self.tape.push("scale_rows", Tensor::new(m.shape(), data)?, Op::ScaleRows(self.id, s.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push("sum", out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        self.tape.push("mean", out, Op::Mean(self.id))
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(v.row_slice(i)) {
                *o += x;
            }
        }
        self.tape.push("sum_rows", Tensor::new(&[1, c], out)?, Op::SumRows(self.id))
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, _) = v.dims2()?;
        let out = (0..r).map(|i| v.row_slice(i).iter().sum()).collect();
        self.tape.push("sum_cols", Tensor::new(&[r, 1], out)?, Op::SumCols(self.id))
    }

    /// Inclusive running sum down the rows.
    pub fn cumsum_rows(self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let mut out = v.data().to_vec();
        for i in 1..r {
            for j in 0..c {
                out[i * c + j] += out[(i - 1) * c + j];
            }
        }
        self.tape.push("cumsum_rows", Tensor::new(&[r, c], out)?, Op::CumsumRows(self.id))
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        self.softmax_impl(None)
    }

    /// Softmax over each row restricted to entries where `mask` is true;
    /// masked entries come out exactly zero.
    pub fn masked_softmax_rows(self, mask: &[bool]) -> Result<Var<'t>> {
        self.softmax_impl(Some(mask))
    }

    fn softmax_impl(self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape("softmax", v.shape(), &[m.len()]));
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(
                v.row_slice(i),
                mask.map(|m| &m[i * c..(i + 1) * c]),
                &mut out[i * c..(i + 1) * c],
            )?;
        }
        self.tape.push("softmax", Tensor::new(v.shape(), out)?, Op::Softmax(self.id))
    }

    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = v.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        self.tape.push("log_softmax", Tensor::new(v.shape(), out)?, Op::LogSoftmax(self.id))
    }

    /// `x / sqrt(mean(x²) + eps)` per row, without a learned gain.
    pub fn rms_norm_rows(self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = v.row_slice(i);
            let rms = (row.iter().map(|x| x * x).sum::<f64>() / c as f64 + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = row[j] / rms;
            }
        }
        self.tape.push("rms_norm", Tensor::new(v.shape(), out)?, Op::RmsNorm(self.id, eps))
    }

    pub fn l2_normalize_rows(self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = v.row_slice(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_FLOOR);
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        self.tape.push("l2_normalize", Tensor::new(v.shape(), out)?, Op::L2Normalize(self.id))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let out = self.value().slice_rows(start, end)?;
        self.tape.push("slice_rows", out, Op::SliceRows(self.id, start))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let out = self.value().slice_cols(start, end)?;
        self.tape.push("slice_cols", out, Op::SliceCols(self.id, start))
    }

    pub fn row(self, i: usize) -> Result<Var<'t>> {
        self.slice_rows(i, i + 1)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape.push("reshape", out, Op::Reshape(self.id))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::invalid("gather_rows", format!("row {i} out of {r}")));
            }
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Tensor::new(&[idx.len(), c], data)?;
        self.tape.push("gather_rows", out, Op::GatherRows(self.id, idx.into()))
    }

    /// Adds row `i` of `self` into row `idx[i]` of a zero `rows×c` matrix.
    pub fn scatter_add_rows(self, idx: &[usize], rows: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if idx.len() != r {
            return Err(Error::shape("scatter_add_rows", v.shape(), &[idx.len()]));
        }
        let mut data = vec![0.0; rows * c];
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= rows {
                return Err(Error::invalid("scatter_add_rows", format!("row {dst} out of {rows}")));
            }
            for j in 0..c {
                data[dst * c + j] += v.data()[i * c + j];
            }
        }
        let out = Tensor::new(&[rows, c], data)?;
        self.tape.push("scatter_add_rows", out, Op::ScatterAddRows(self.id, idx.into()))
    }

    /// Per-row column selection: `out[t, s] = self[t, idx[t·k + s]]`.
    pub fn gather_cols(self, idx: &[usize], k: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if idx.len() != r * k {
            return Err(Error::shape("gather_cols", v.shape(), &[idx.len()]));
        }
        let mut data = Vec::with_capacity(r * k);
        for t in 0..r {
            for s in 0..k {
                let j = idx[t * k + s];
                if j >= c {
                    return Err(Error::invalid("gather_cols", format!("column {j} out of {c}")));
                }
                data.push(v.data()[t * c + j]);
            }
        }
        let out = Tensor::new(&[r, k], data)?;
        self.tape.push("gather_cols", out, Op::GatherCols(self.id, idx.into()))
    }

    /// Identity node; used where a value conceptually crosses a rank boundary.
    pub fn copy(self) -> Result<Var<'t>> {
        let out = (*self.value()).clone();
        self.tape.push("copy", out, Op::Copy(self.id))
    }
}

impl Tape {
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        for p in parts {
            self.check(*p)?;
        }
        let vals: Vec<Tensor> = parts.iter().map(|p| (*p.value()).clone()).collect();
        let out = Tensor::concat_rows(&vals)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        for p in parts {
            self.check(*p)?;
        }
        let vals: Vec<Tensor> = parts.iter().map(|p| (*p.value()).clone()).collect();
        let out = Tensor::concat_cols(&vals)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Causal decay-weighted scores:
    /// `out[t, s] = Σ_i q[t,i]·k[s,i]·exp(l[t,i] − l[s,i])` for `s ≤ t`, else 0.
    ///
    /// `l` holds running sums of log-decays, so every exponent is ≤ 0 when the
    /// per-step decays lie in (0, 1].
    pub fn decay_scores<'t>(&'t self, q: Var<'t>, k: Var<'t>, l: Var<'t>) -> Result<Var<'t>> {
        same_tape("decay_scores", &q, &k)?;
        same_tape("decay_scores", &q, &l)?;
        let (qv, kv, lv) = (q.value(), k.value(), l.value());
        if qv.shape() != kv.shape() || qv.shape() != lv.shape() {
            return Err(Error::shape("decay_scores", qv.shape(), kv.shape()));
        }
        let (n, d) = qv.dims2()?;
        let mut out = vec![0.0; n * n];
        for t in 0..n {
            let (qt, lt) = (qv.row_slice(t), lv.row_slice(t));
            for s in 0..=t {
                let (ks, ls) = (kv.row_slice(s), lv.row_slice(s));
                let mut acc = 0.0;
                for i in 0..d {
                    acc += qt[i] * ks[i] * (lt[i] - ls[i]).exp();
                }
                out[t * n + s] = acc;
            }
        }
        self.push(
            "decay_scores",
            Tensor::new(&[n, n], out)?,
            Op::DecayScores(q.id, k.id, l.id),
        )
    }
}
