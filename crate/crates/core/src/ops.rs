//! Plain (non-recording) kernels. The tape calls these for its forward
//! values and reuses the `*_backward` helpers for vector-Jacobian products.
//!
//! Index order is row-major throughout: matrices are `[rows, cols]`,
//! feature maps are `[channels, height, width]`, conv kernels are
//! `[c_out, c_in / groups, k, k]`.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(dim_err("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `[k×n]`.
pub(crate) fn matmul_nt_into(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            out[i * k + t] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `[m×k]`, `g` is `[m×n]`.
pub(crate) fn matmul_tn_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[t * n..(t + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::Shape(format!("transpose needs rank 2, got {:?}", a.shape())));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis` with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!("softmax axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, len, inner) = axis_view(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let max = (0..len).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for t in 0..len {
                let e = (src[idx(t)] - max).exp();
                out[idx(t)] = e;
                total += e;
            }
            for t in 0..len {
                out[idx(t)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize, out: &mut [f64]) {
    let (outer, len, inner) = axis_view(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let dot: f64 = (0..len).map(|t| y[idx(t)] * g[idx(t)]).sum();
            for t in 0..len {
                out[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
            }
        }
    }
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

pub(crate) fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

/// Convolution geometry. `groups == c_in` gives a depthwise convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, dilation: usize) -> Self {
        Self::same(kernel, dilation, channels)
    }
}

pub fn conv_out_dim(input: usize, kernel: usize, spec: &ConvSpec) -> Option<usize> {
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.padding;
    if spec.stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / spec.stride + 1)
}

pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub cin_per_group: usize,
    pub cout_per_group: usize,
}

pub(crate) fn conv_geom(x: &[usize], kernel: &[usize], spec: &ConvSpec) -> Result<ConvGeom> {
    if x.len() != 3 || kernel.len() != 4 || kernel[2] != kernel[3] {
        return Err(dim_err("conv2d", x, kernel));
    }
    let (c_in, h, w) = (x[0], x[1], x[2]);
    let (c_out, cpg, k) = (kernel[0], kernel[1], kernel[2]);
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv2d kernel size {k} must be odd")));
    }
    if spec.groups == 0
        || c_in % spec.groups != 0
        || c_out % spec.groups != 0
        || c_in / spec.groups != cpg
    {
        return Err(dim_err("conv2d", x, kernel));
    }
    let (ho, wo) = match (conv_out_dim(h, k, spec), conv_out_dim(w, k, spec)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::Config(format!(
                "conv2d on {h}x{w} with k={k} {spec:?} has no valid output"
            )))
        }
    };
    Ok(ConvGeom {
        h,
        w,
        c_out,
        k,
        ho,
        wo,
        cin_per_group: cpg,
        cout_per_group: c_out / spec.groups,
    })
}

/// Range of output columns `ox` for which `ox*s - p + off` lands in `[0, w)`.
#[inline]
fn valid_range(w: usize, wo: usize, stride: usize, pad: usize, off: usize) -> (usize, usize) {
    // ix = ox*s + off - pad
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    let hi_excl = if w + pad <= off {
        0
    } else {
        ((w + pad - off - 1) / stride + 1).min(wo)
    };
    (lo, hi_excl.max(lo))
}

/// Cross-correlation (no kernel flip). Output dims follow
/// `floor((H + 2p - d(k-1) - 1)/s) + 1`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let g = conv_geom(x.shape(), kernel.shape(), spec)?;
    let mut out = vec![0.0; g.c_out * g.ho * g.wo];
    conv2d_visit(&g, spec, |oc, ic, kidx, ipos, opos, n, s| {
        let wv = kernel.data()[kidx];
        if wv == 0.0 {
            return;
        }
        let src = &x.data()[ic * g.h * g.w..];
        let dst = &mut out[oc * g.ho * g.wo..];
        for t in 0..n {
            dst[opos + t] += wv * src[ipos + t * s];
        }
    });
    Tensor::new(&[g.c_out, g.ho, g.wo], out)
}

/// Walks every (kernel tap, output row) pair that touches the input,
/// handing the callback contiguous runs of output columns.
///
/// Callback args: `(oc, ic, kernel_index, input_offset, output_offset, run_len, input_stride)`.
/// Offsets are relative to the channel planes.
#[inline]
pub(crate) fn conv2d_visit(
    g: &ConvGeom,
    spec: &ConvSpec,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize),
) {
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    for oc in 0..g.c_out {
        let grp = oc / g.cout_per_group;
        for icg in 0..g.cin_per_group {
            let ic = grp * g.cin_per_group + icg;
            for ky in 0..g.k {
                let (oy0, oy1) = valid_range(g.h, g.ho, s, p, ky * d);
                for kx in 0..g.k {
                    let (ox0, ox1) = valid_range(g.w, g.wo, s, p, kx * d);
                    if ox1 <= ox0 {
                        continue;
                    }
                    let kidx = ((oc * g.cin_per_group + icg) * g.k + ky) * g.k + kx;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky * d - p;
                        let ix0 = ox0 * s + kx * d - p;
                        f(oc, ic, kidx, iy * g.w + ix0, oy * g.wo + ox0, ox1 - ox0, s);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    spec: &ConvSpec,
    mut gx: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
) {
    conv2d_visit(g, spec, |oc, ic, kidx, ipos, opos, n, s| {
        let go = &gout[oc * g.ho * g.wo + opos..];
        let ibase = ic * g.h * g.w + ipos;
        if let Some(gx) = gx.as_deref_mut() {
            let wv = kernel[kidx];
            if wv != 0.0 {
                for t in 0..n {
                    gx[ibase + t * s] += wv * go[t];
                }
            }
        }
        if let Some(gk) = gk.as_deref_mut() {
            let mut acc = 0.0;
            for t in 0..n {
                acc += go[t] * x[ibase + t * s];
            }
            gk[kidx] += acc;
        }
    });
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!("global_avg_pool needs [c,h,w], got {:?}", x.shape())));
    }
    let c = x.shape()[0];
    let plane = x.shape()[1] * x.shape()[2];
    let data = (0..c)
        .map(|i| x.data()[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::vector(data))
}

/// Input index window `[floor(i*n/out), ceil((i+1)*n/out))`.
#[inline]
pub(crate) fn adaptive_window(i: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = (i * n) / out;
    let hi = ((i + 1) * n).div_ceil(out);
    (lo, hi)
}

pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!("adaptive_avg_pool needs [c,h,w], got {:?}", x.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("adaptive_avg_pool output dims must be >= 1".into()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; c * out_h * out_w];
    let src = x.data();
    for ch in 0..c {
        for i in 0..out_h {
            let (y0, y1) = adaptive_window(i, h, out_h);
            for j in 0..out_w {
                let (x0, x1) = adaptive_window(j, w, out_w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    let row = &src[(ch * h + y) * w..];
                    acc += row[x0..x1].iter().sum::<f64>();
                }
                out[(ch * out_h + i) * out_w + j] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub(crate) fn adaptive_avg_pool_backward(
    in_shape: &[usize],
    out_h: usize,
    out_w: usize,
    g: &[f64],
    gx: &mut [f64],
) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    for ch in 0..c {
        for i in 0..out_h {
            let (y0, y1) = adaptive_window(i, h, out_h);
            for j in 0..out_w {
                let (x0, x1) = adaptive_window(j, w, out_w);
                let share = g[(ch * out_h + i) * out_w + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut gx[(ch * h + y) * w + x0..(ch * h + y) * w + x1] {
                        *v += share;
                    }
                }
            }
        }
    }
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::Shape(format!("concat axis {axis} out of range for {:?}", first.shape())));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for x in xs {
        let ok = x.rank() == first.rank()
            && x
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(dim_err("concat", first.shape(), x.shape()));
        }
        shape[axis] += x.shape()[axis];
    }
    let (outer, _, inner) = axis_view(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for x in xs {
            let chunk = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&shape, out)
}

/// `x·W + b` for `x: [n]` or `[rows, n]`, `W: [n, m]`, `b: [m]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let rows = match x.rank() {
        1 => 1,
        2 => x.shape()[0],
        _ => return Err(dim_err("linear", x.shape(), w.shape())),
    };
    let n = *x.shape().last().unwrap();
    if w.rank() != 2 || w.shape()[0] != n || b.shape() != [w.shape()[1]] {
        return Err(dim_err("linear", x.shape(), w.shape()));
    }
    let m = w.shape()[1];
    let mut out = Vec::with_capacity(rows * m);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    matmul_into(x.data(), w.data(), &mut out, rows, n, m);
    if x.rank() == 1 {
        Ok(Tensor::vector(out))
    } else {
        Tensor::new(&[rows, m], out)
    }
}
