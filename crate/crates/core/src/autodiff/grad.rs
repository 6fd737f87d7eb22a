//! Vector-Jacobian products for every recorded op.

use crate::error::Result;
use crate::tensor::Tensor;

use super::ops::{bidx, sigmoid, Bcast, Op, L2_FLOOR};
use super::tape::NodeId;

fn reduce_to(kind: Bcast, g: &Tensor, target: &Tensor) -> Result<Tensor> {
    match kind {
        Bcast::Same => Ok(g.clone()),
        Bcast::Scalar => Tensor::new(target.shape(), vec![g.sum()]),
        Bcast::Row => {
            let (r, c) = g.dims2()?;
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, x) in out.iter_mut().zip(g.row_slice(i)) {
                    *o += x;
                }
            }
            Tensor::new(target.shape(), out)
        }
    }
}

fn elementwise(g: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let data = g.data().iter().enumerate().map(|(i, &x)| f(i, x)).collect();
    Tensor::new(g.shape(), data).expect("same shape")
}

pub(crate) fn backprop_node<'a>(
    op: &Op,
    out: &Tensor,
    g: &Tensor,
    val: &dyn Fn(NodeId) -> &'a Tensor,
    acc: &mut dyn FnMut(NodeId, Tensor),
) -> Result<()> {
    use Op::*;
    match op {
        Leaf => {}
        Add(a, b, k) => {
            acc(*a, g.clone());
            acc(*b, reduce_to(*k, g, val(*b))?);
        }
        Sub(a, b, k) => {
            acc(*a, g.clone());
            acc(*b, reduce_to(*k, g, val(*b))?.scale(-1.0));
        }
        Mul(a, b, k) => {
            let (av, bv) = (val(*a), val(*b));
            let c = av.cols();
            acc(*a, elementwise(g, |i, gi| gi * bv.data()[bidx(*k, i, c)]));
            let gb = elementwise(g, |i, gi| gi * av.data()[i]);
            acc(*b, reduce_to(*k, &gb, bv)?);
        }
        Div(a, b, k) => {
            let bv = val(*b);
            let c = out.cols();
            acc(*a, elementwise(g, |i, gi| gi / bv.data()[bidx(*k, i, c)]));
            let gb = elementwise(g, |i, gi| -gi * out.data()[i] / bv.data()[bidx(*k, i, c)]);
            acc(*b, reduce_to(*k, &gb, bv)?);
        }
        Scale(a, c) => acc(*a, g.scale(*c)),
        AddScalar(a) | Copy(a) => acc(*a, g.clone()),
        Exp(a) => acc(*a, elementwise(g, |i, gi| gi * out.data()[i])),
        Ln(a) => {
            let av = val(*a);
            acc(*a, elementwise(g, |i, gi| gi / av.data()[i]));
        }
        Sigmoid(a) => acc(*a, elementwise(g, |i, gi| {
            let y = out.data()[i];
            gi * y * (1.0 - y)
        })),
        Softplus(a) => {
            let av = val(*a);
            acc(*a, elementwise(g, |i, gi| gi * sigmoid(av.data()[i])));
        }
        Silu(a) => {
            let av = val(*a);
            acc(*a, elementwise(g, |i, gi| {
                let x = av.data()[i];
                let s = sigmoid(x);
                gi * s * (1.0 + x * (1.0 - s))
            }));
        }
        EluPlusOne(a) => {
            let av = val(*a);
            acc(*a, elementwise(g, |i, gi| {
                if av.data()[i] > 0.0 {
                    gi
                } else {
                    gi * out.data()[i]
                }
            }));
        }
        Square(a) => {
            let av = val(*a);
            acc(*a, elementwise(g, |i, gi| 2.0 * gi * av.data()[i]));
        }
        Sqrt(a) => acc(*a, elementwise(g, |i, gi| gi / (2.0 * out.data()[i]))),
        Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = g.matmul(&bv.transpose()?)?.reshape(av.shape())?;
            let gb = av.transpose()?.matmul(g)?.reshape(bv.shape())?;
            acc(*a, ga);
            acc(*b, gb);
        }
        Transpose(a) => acc(*a, g.transpose()?.reshape(val(*a).shape())?),
        Outer(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, n) = (av.numel(), bv.numel());
            let mut ga = vec![0.0; m];
            let mut gb = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    let gij = g.data()[i * n + j];
                    ga[i] += gij * bv.data()[j];
                    gb[j] += gij * av.data()[i];
                }
            }
            acc(*a, Tensor::new(av.shape(), ga)?);
            acc(*b, Tensor::new(bv.shape(), gb)?);
        }
        ScaleRows(m, s) => {
            let (mv, sv) = (val(*m), val(*s));
            let (r, c) = mv.dims2()?;
            let cc = c.max(1);
            acc(*m, elementwise(g, |i, gi| gi * sv.data()[i / cc]));
            let mut gs = vec![0.0; r];
            for (i, (gi, mi)) in g.data().iter().zip(mv.data()).enumerate() {
                gs[i / cc] += gi * mi;
            }
            acc(*s, Tensor::new(sv.shape(), gs)?);
        }
        Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.data()[0])),
        Mean(a) => {
            let av = val(*a);
            acc(*a, Tensor::full(av.shape(), g.data()[0] / av.numel() as f64));
        }
        SumRows(a) => {
            let av = val(*a);
            let c = av.cols();
            acc(*a, Tensor::new(av.shape(), (0..av.numel()).map(|i| g.data()[i % c]).collect())?);
        }
        SumCols(a) => {
            let av = val(*a);
            let c = av.cols().max(1);
            acc(*a, Tensor::new(av.shape(), (0..av.numel()).map(|i| g.data()[i / c]).collect())?);
        }
        CumsumRows(a) => {
            let (r, c) = g.dims2()?;
            let mut data = g.data().to_vec();
            for i in (0..r.saturating_sub(1)).rev() {
                for j in 0..c {
                    data[i * c + j] += data[(i + 1) * c + j];
                }
            }
            acc(*a, Tensor::new(val(*a).shape(), data)?);
        }
        Softmax(a) => {
            let (r, c) = out.dims2()?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                let (y, gr) = (out.row_slice(i), g.row_slice(i));
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    data[i * c + j] = y[j] * (gr[j] - dot);
                }
            }
            acc(*a, Tensor::new(out.shape(), data)?);
        }
        LogSoftmax(a) => {
            let (r, c) = out.dims2()?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                let (y, gr) = (out.row_slice(i), g.row_slice(i));
                let gs: f64 = gr.iter().sum();
                for j in 0..c {
                    data[i * c + j] = gr[j] - y[j].exp() * gs;
                }
            }
            acc(*a, Tensor::new(out.shape(), data)?);
        }
        RmsNorm(a, eps) => {
            let av = val(*a);
            let (r, c) = av.dims2()?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                let x = av.row_slice(i);
                let rms = (x.iter().map(|v| v * v).sum::<f64>() / c as f64 + eps).sqrt();
                let (y, gr) = (out.row_slice(i), g.row_slice(i));
                let m = y.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    data[i * c + j] = (gr[j] - y[j] * m) / rms;
                }
            }
            acc(*a, Tensor::new(av.shape(), data)?);
        }
        L2Normalize(a) => {
            let av = val(*a);
            let (r, c) = av.dims2()?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                let x = av.row_slice(i);
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let (y, gr) = (out.row_slice(i), g.row_slice(i));
                if n > L2_FLOOR {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        data[i * c + j] = (gr[j] - y[j] * dot) / n;
                    }
                } else {
                    for j in 0..c {
                        data[i * c + j] = gr[j] / L2_FLOOR;
                    }
                }
            }
            acc(*a, Tensor::new(av.shape(), data)?);
        }
        SliceRows(a, start) => {
            let av = val(*a);
            let c = av.cols();
            let mut data = vec![0.0; av.numel()];
            data[start * c..start * c + g.numel()].copy_from_slice(g.data());
            acc(*a, Tensor::new(av.shape(), data)?);
        }
        SliceCols(a, start) => {
            let av = val(*a);
            let (r, c) = av.dims2()?;
            let w = g.cols();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                data[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
            }
            acc(*a, Tensor::new(av.shape(), data)?);
        }
        ConcatRows(parts) => {
            let mut row = 0;
            for &p in parts {
                let pv = val(p);
                let r = pv.rows();
                acc(p, g.slice_rows(row, row + r)?.reshape(pv.shape())?);
                row += r;
            }
        }
        ConcatCols(parts) => {
            let mut col = 0;
            for &p in parts {
                let pv = val(p);
                let c = pv.cols();
                acc(p, g.slice_cols(col, col + c)?.reshape(pv.shape())?);
                col += c;
            }
        }
        Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
        GatherRows(a, idx) => {
            let av = val(*a);
            let c = av.cols();
            let mut data = vec![0.0; av.numel()];
            for (i, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    data[src * c + j] += g.data()[i * c + j];
                }
            }
            acc(*a, Tensor::new(av.shape(), data)?);
        }
        ScatterAddRows(a, idx) => {
            let av = val(*a);
            let c = av.cols();
            let mut data = Vec::with_capacity(av.numel());
            for &dst in idx.iter() {
                data.extend_from_slice(&g.data()[dst * c..(dst + 1) * c]);
            }
            acc(*a, Tensor::new(av.shape(), data)?);
        }
        GatherCols(a, idx) => {
            let av = val(*a);
            let (r, c) = av.dims2()?;
            let k = idx.len() / r.max(1);
            let mut data = vec![0.0; r * c];
            for t in 0..r {
                for s in 0..k {
                    data[t * c + idx[t * k + s]] += g.data()[t * k + s];
                }
            }
            acc(*a, Tensor::new(av.shape(), data)?);
        }
        DecayScores(q, k, l) => {
            let (qv, kv, lv) = (val(*q), val(*k), val(*l));
            let (n, d) = qv.dims2()?;
            let mut gq = vec![0.0; n * d];
            let mut gk = vec![0.0; n * d];
            let mut gl = vec![0.0; n * d];
            for t in 0..n {
                for s in 0..=t {
                    let w = g.data()[t * n + s];
                    if w == 0.0 {
                        continue;
                    }
                    for i in 0..d {
                        let e = (lv.data()[t * d + i] - lv.data()[s * d + i]).exp();
                        let qi = qv.data()[t * d + i];
                        let ki = kv.data()[s * d + i];
                        gq[t * d + i] += w * ki * e;
                        gk[s * d + i] += w * qi * e;
                        let term = w * qi * ki * e;
                        gl[t * d + i] += term;
                        gl[s * d + i] -= term;
                    }
                }
            }
            acc(*q, Tensor::new(qv.shape(), gq)?);
            acc(*k, Tensor::new(kv.shape(), gk)?);
            acc(*l, Tensor::new(lv.shape(), gl)?);
        }
    }
    Ok(())
}
