// Forward and backward kernels over flat row-major buffers. Reductions always
// accumulate in ascending index order so results are reproducible bit for bit.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.values().iter().map(|&x| f(x)).collect())
}

pub(crate) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn mul_slices(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub(crate) fn sum(xs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in xs {
        acc += x;
    }
    acc
}

fn last_axis(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

pub(crate) fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn log_softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &x in row {
        total += (x - max).exp();
    }
    let lse = max + total.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

pub(crate) fn softmax_rows(a: &Tensor) -> Tensor {
    let k = last_axis(a);
    let mut out = vec![0.0; a.len()];
    for (row, o) in a.values().chunks(k).zip(out.chunks_mut(k)) {
        softmax_slice(row, o);
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

pub(crate) fn log_softmax_rows(a: &Tensor) -> Tensor {
    let k = last_axis(a);
    let mut out = vec![0.0; a.len()];
    for (row, o) in a.values().chunks(k).zip(out.chunks_mut(k)) {
        log_softmax_slice(row, o);
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

/// `dx = y * (g - <g, y>)` row by row, where `y` is the softmax output.
pub(crate) fn softmax_backward(y: &Tensor, g: &[f64]) -> Vec<f64> {
    let k = last_axis(y);
    let mut out = vec![0.0; g.len()];
    for ((yr, gr), o) in y.values().chunks(k).zip(g.chunks(k)).zip(out.chunks_mut(k)) {
        let dot = sum(&mul_slices(yr, gr));
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    out
}

/// `dx = g - softmax(x) * sum(g)` row by row, given the log-softmax output.
pub(crate) fn log_softmax_backward(logp: &Tensor, g: &[f64]) -> Vec<f64> {
    let k = last_axis(logp);
    let mut out = vec![0.0; g.len()];
    for ((lr, gr), o) in logp.values().chunks(k).zip(g.chunks(k)).zip(out.chunks_mut(k)) {
        let total = sum(gr);
        for ((o, &l), &gv) in o.iter_mut().zip(lr).zip(gr) {
            *o = gv - l.exp() * total;
        }
    }
    out
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        ref s => Err(Error::shape(op, format!("expected 2-D operand, got {s:?}"))),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    Ok(Tensor::from_parts(vec![m, n], matmul_raw(a.values(), b.values(), m, k, n)))
}

pub(crate) fn transpose_slice(data: &[f64], shape: &[usize]) -> Vec<f64> {
    // `shape` is the shape of `data`; returns data laid out as its transpose.
    let (m, n) = (shape[0], shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2("transpose", a)?;
    Ok(Tensor::from_parts(vec![n, m], transpose_slice(a.values(), a.shape())))
}

pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ga = want_a.then(|| {
        // g [m, n] x b^T [n, k]
        let bt = transpose_slice(b.values(), b.shape());
        matmul_raw(g, &bt, m, n, k)
    });
    let gb = want_b.then(|| {
        // a^T [k, m] x g [m, n]
        let at = transpose_slice(a.values(), a.shape());
        matmul_raw(&at, g, k, m, n)
    });
    (ga, gb)
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn broadcast(src: &Tensor, shape: &[usize], axis: Option<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    match axis {
        None => {
            if src.len() != 1 {
                return Err(Error::shape("broadcast", format!("{:?} is not a scalar", src.shape())));
            }
            Ok(Tensor::from_parts(shape.to_vec(), vec![src.values()[0]; n]))
        }
        Some(ax) => {
            if src.rank() != 1 || ax >= shape.len() || shape[ax] != src.len() {
                return Err(Error::shape(
                    "broadcast",
                    format!("cannot place {:?} along axis {ax} of {shape:?}", src.shape()),
                ));
            }
            let (outer, extent, inner) = axis_strides(shape, ax);
            let mut data = Vec::with_capacity(n);
            for _ in 0..outer {
                for c in 0..extent {
                    data.extend(std::iter::repeat_n(src.values()[c], inner));
                }
            }
            Ok(Tensor::from_parts(shape.to_vec(), data))
        }
    }
}

pub(crate) fn broadcast_backward(
    src: &Tensor,
    shape: &[usize],
    axis: Option<usize>,
    g: &[f64],
) -> Vec<f64> {
    match axis {
        None => vec![sum(g)],
        Some(ax) => {
            let (outer, extent, inner) = axis_strides(shape, ax);
            let mut out = vec![0.0; src.len()];
            for o in 0..outer {
                for (c, acc) in out.iter_mut().enumerate().take(extent) {
                    let base = (o * extent + c) * inner;
                    for &v in &g[base..base + inner] {
                        *acc += v;
                    }
                }
            }
            out
        }
    }
}

pub(crate) fn narrow_backward(
    src_shape: &[usize],
    axis: usize,
    start: usize,
    out_shape: &[usize],
    g: &[f64],
) -> Vec<f64> {
    let (outer, extent, inner) = axis_strides(src_shape, axis);
    let len = out_shape[axis];
    let mut out = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        let dst = o * extent * inner + start * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
    }
    out
}

pub(crate) fn suffix_sum(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    let mut acc = 0.0;
    for i in (0..xs.len()).rev() {
        acc += xs[i];
        out[i] = acc;
    }
    out
}

pub(crate) fn prefix_sum(xs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    xs.iter()
        .map(|&x| {
            acc += x;
            acc
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, c_in, h, w], &[c_out, k_in, kh, kw]) = (input, kernel) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-D input and kernel, got {input:?} and {kernel:?}"),
            ));
        };
        if k_in != c_in {
            return Err(Error::shape("conv2d", format!("input has {c_in} channels, kernel expects {k_in}")));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} (stride {stride}, pad {padding}) does not fit {h}x{w}"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&i| i < extent)
    }
}

pub(crate) fn conv2d(x: &Tensor, k: &Tensor, g: &ConvGeometry) -> Tensor {
    let (xv, kv) = (x.values(), k.values());
    let mut out = vec![0.0; g.batch * g.c_out * g.h_out * g.w_out];
    let mut idx = 0;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for i in 0..g.kh {
                            let Some(ih) = g.src(oh, i, g.h) else { continue };
                            for j in 0..g.kw {
                                let Some(iw) = g.src(ow, j, g.w) else { continue };
                                acc += xv[((b * g.c_in + ci) * g.h + ih) * g.w + iw]
                                    * kv[((co * g.c_in + ci) * g.kh + i) * g.kw + j];
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_parts(vec![g.batch, g.c_out, g.h_out, g.w_out], out)
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &ConvGeometry,
    grad: &[f64],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (xv, kv) = (x.values(), k.values());
    let mut gx = want_x.then(|| vec![0.0; xv.len()]);
    let mut gk = want_k.then(|| vec![0.0; kv.len()]);
    let mut idx = 0;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let go = grad[idx];
                    idx += 1;
                    for ci in 0..g.c_in {
                        for i in 0..g.kh {
                            let Some(ih) = g.src(oh, i, g.h) else { continue };
                            for j in 0..g.kw {
                                let Some(iw) = g.src(ow, j, g.w) else { continue };
                                let xi = ((b * g.c_in + ci) * g.h + ih) * g.w + iw;
                                let ki = ((co * g.c_in + ci) * g.kh + i) * g.kw + j;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += go * kv[ki];
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[ki] += go * xv[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}
