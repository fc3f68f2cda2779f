//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value and the
//! [`Op`] that produced it. Inputs always precede outputs, so walking the
//! node list backwards is a valid reverse topological order and visits
//! each op exactly once. The op set is closed: anything that can be
//! recorded has a backward rule.
//!
//! A tape is single-threaded; use one tape per sample and merge the
//! resulting gradients outside.

use crate::error::{dim_err, Error, Result};
use crate::ops::{self, ConvSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Recip(Var),
    Ln(Var),
    AddAxis { x: Var, v: Var, axis: usize },
    MulAxis { x: Var, v: Var, axis: usize },
    Expand(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    Sum(Var),
    MeanAxis { x: Var, axis: usize },
    Conv2d { x: Var, k: Var, spec: ConvSpec },
    GlobalAvgPool(Var),
    AdaptiveAvgPool { x: Var, oh: usize, ow: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape(Var),
    Pick { x: Var, index: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, or zeros if `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let shape = &self.shapes[v.0];
        self.grads[v.0]
            .take()
            .map(|g| Tensor::new(shape, g).expect("gradient shape"))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = ops::transpose(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err(name, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |p, q| p + q)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |p, q| p - q)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |p, q| p * q)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |p, q| p / q)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::Shift(a), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        let ng = self.ng(a);
        self.push(v, Op::Recip(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    fn check_axis_vec(&self, x: Var, v: Var, axis: usize, name: &'static str) -> Result<()> {
        let (xs, vs) = (self.shape(x), self.shape(v));
        if axis >= xs.len() || vs != [xs[axis]] {
            return Err(dim_err(name, xs, vs));
        }
        Ok(())
    }

    /// Adds vector `v` along `axis` of `x` (bias broadcast).
    pub fn add_axis(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.check_axis_vec(x, v, axis, "add_axis")?;
        let (outer, len, inner) = ops::axis_view(self.shape(x), axis);
        let mut out = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for o in 0..outer {
            for (t, &b) in vd.iter().enumerate().take(len) {
                let base = (o * len + t) * inner;
                for e in &mut out.data_mut()[base..base + inner] {
                    *e += b;
                }
            }
        }
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(out, Op::AddAxis { x, v, axis }, ng))
    }

    /// Multiplies `x` by vector `v` along `axis` (channel gating).
    pub fn mul_axis(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.check_axis_vec(x, v, axis, "mul_axis")?;
        let (outer, len, inner) = ops::axis_view(self.shape(x), axis);
        let mut out = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for o in 0..outer {
            for (t, &s) in vd.iter().enumerate().take(len) {
                let base = (o * len + t) * inner;
                for e in &mut out.data_mut()[base..base + inner] {
                    *e *= s;
                }
            }
        }
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(out, Op::MulAxis { x, v, axis }, ng))
    }

    /// Broadcasts a one-element tensor to length `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(dim_err("expand", self.shape(a), &[n]));
        }
        let v = Tensor::full(&[n], self.value(a).data()[0]);
        let ng = self.ng(a);
        Ok(self.push(v, Op::Expand(a), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = ops::sigmoid(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(ops::gelu_scalar);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(a), axis)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Softmax { x: a, axis }, ng))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("mean axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = ops::axis_view(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let base = (o * len + t) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &src[base..base + inner]);
            }
        }
        for e in &mut out {
            *e /= len as f64;
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let v = Tensor::new(&new_shape, out)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::MeanAxis { x: a, axis }, ng))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, spec: ConvSpec) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(k), &spec)?;
        let ng = self.ng(x) || self.ng(k);
        Ok(self.push(v, Op::Conv2d { x, k, spec }, ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = ops::global_avg_pool(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::GlobalAvgPool(x), ng))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let v = ops::adaptive_avg_pool(self.value(x), oh, ow)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::AdaptiveAvgPool { x, oh, ow }, ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let v = ops::concat(&refs, axis)?;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Element `index` of the flattened tensor, as `[1]`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return Err(Error::Shape(format!("pick index {index} out of range for {:?}", t.shape())));
        }
        let v = Tensor::scalar(t.data()[index]);
        let ng = self.ng(x);
        Ok(self.push(v, Op::Pick { x, index }, ng))
    }

    /// `x·W + b` with `x: [n]` or `[rows, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        match xs.len() {
            1 => {
                let x2 = self.reshape(x, &[1, xs[0]])?;
                let y = self.matmul(x2, w)?;
                let m = self.shape(y)[1];
                let y = self.reshape(y, &[m])?;
                self.add_axis(y, b, 0)
            }
            2 => {
                let y = self.matmul(x, w)?;
                self.add_axis(y, b, 1)
            }
            _ => Err(dim_err("linear", &xs, self.shape(w))),
        }
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let nn = shape(b)[1];
                acc(a, &mut |ga| ops::matmul_nt_into(g, val(b), ga, m, k, nn));
                acc(b, &mut |gb| ops::matmul_tn_into(val(a), g, gb, m, k, nn));
            }
            &Op::Transpose(a) => {
                let (m, nn) = (shape(a)[0], shape(a)[1]);
                acc(a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..nn {
                            ga[i * nn + j] += g[j * m + i];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            &Op::Mul(a, b) => {
                acc(a, &mut |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(val(b)) {
                        *d += s * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(val(a)) {
                        *d += s * x;
                    }
                });
            }
            &Op::Div(a, b) => {
                acc(a, &mut |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(val(b)) {
                        *d += s / y;
                    }
                });
                let out = node.value.data();
                acc(b, &mut |gb| {
                    for (((d, s), y), q) in gb.iter_mut().zip(g).zip(val(b)).zip(out) {
                        *d -= s * q / y;
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |ga| {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += c * s;
                }
            }),
            &Op::Shift(a) | &Op::Reshape(a) => acc(a, &mut |ga| add_into(ga, g)),
            &Op::Recip(a) => {
                let out = node.value.data();
                acc(a, &mut |ga| {
                    for ((d, s), q) in ga.iter_mut().zip(g).zip(out) {
                        *d -= s * q * q;
                    }
                });
            }
            &Op::Ln(a) => acc(a, &mut |ga| {
                for ((d, s), x) in ga.iter_mut().zip(g).zip(val(a)) {
                    *d += s / x;
                }
            }),
            &Op::AddAxis { x, v, axis } => {
                acc(x, &mut |gx| add_into(gx, g));
                let (outer, len, inner) = ops::axis_view(shape(x), axis);
                acc(v, &mut |gv| {
                    for o in 0..outer {
                        for (t, d) in gv.iter_mut().enumerate().take(len) {
                            let base = (o * len + t) * inner;
                            *d += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            &Op::MulAxis { x, v, axis } => {
                let (outer, len, inner) = ops::axis_view(shape(x), axis);
                let vd = val(v);
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for (t, &s) in vd.iter().enumerate().take(len) {
                            let base = (o * len + t) * inner;
                            for e in base..base + inner {
                                gx[e] += g[e] * s;
                            }
                        }
                    }
                });
                let xd = val(x);
                acc(v, &mut |gv| {
                    for o in 0..outer {
                        for (t, d) in gv.iter_mut().enumerate().take(len) {
                            let base = (o * len + t) * inner;
                            *d += (base..base + inner).map(|e| g[e] * xd[e]).sum::<f64>();
                        }
                    }
                });
            }
            &Op::Expand(a) => acc(a, &mut |ga| ga[0] += g.iter().sum::<f64>()),
            &Op::Sigmoid(a) => {
                let out = node.value.data();
                acc(a, &mut |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(out) {
                        *d += s * y * (1.0 - y);
                    }
                });
            }
            &Op::Relu(a) => acc(a, &mut |ga| {
                for ((d, s), x) in ga.iter_mut().zip(g).zip(val(a)) {
                    if *x > 0.0 {
                        *d += s;
                    }
                }
            }),
            &Op::Gelu(a) => acc(a, &mut |ga| {
                for ((d, s), &x) in ga.iter_mut().zip(g).zip(val(a)) {
                    *d += s * ops::gelu_grad(x);
                }
            }),
            &Op::Softmax { x, axis } => {
                let out = node.value.data();
                acc(x, &mut |gx| ops::softmax_backward(out, g, shape(x), axis, gx));
            }
            &Op::Sum(a) => acc(a, &mut |ga| {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }),
            &Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = ops::axis_view(shape(x), axis);
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for t in 0..len {
                            let base = (o * len + t) * inner;
                            for e in 0..inner {
                                gx[base + e] += g[o * inner + e] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, k, spec } => {
                let (x, k) = (*x, *k);
                let geom = ops::conv_geom(shape(x), shape(k), spec).expect("recorded conv geometry");
                let mut gx = want(x).then(|| vec![0.0; val(x).len()]);
                let mut gk = want(k).then(|| vec![0.0; val(k).len()]);
                ops::conv2d_backward(val(x), val(k), g, &geom, spec, gx.as_deref_mut(), gk.as_deref_mut());
                if let Some(gx) = gx {
                    acc(x, &mut |d| add_into(d, &gx));
                }
                if let Some(gk) = gk {
                    acc(k, &mut |d| add_into(d, &gk));
                }
            }
            &Op::GlobalAvgPool(x) => {
                let plane = shape(x)[1] * shape(x)[2];
                acc(x, &mut |gx| {
                    for (c, &gc) in g.iter().enumerate() {
                        for d in &mut gx[c * plane..(c + 1) * plane] {
                            *d += gc / plane as f64;
                        }
                    }
                });
            }
            &Op::AdaptiveAvgPool { x, oh, ow } => {
                acc(x, &mut |gx| ops::adaptive_avg_pool_backward(shape(x), oh, ow, g, gx));
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = ops::axis_view(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let chunk = shape(x)[*axis] * inner;
                    acc(x, &mut |gx| {
                        for o in 0..outer {
                            add_into(
                                &mut gx[o * chunk..(o + 1) * chunk],
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::Pick { x, index } => acc(x, &mut |gx| gx[index] += g[0]),
        }
    }
}

/// Central-difference gradient check of a scalar-valued function.
///
/// Returns `max_i |analytic_i - cd_i| / max(|analytic_i|, |cd_i|, 1e-12)`.
pub fn grad_check<F>(x: &Tensor, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(x, eps, 1e-12, None, f)
}

/// [`grad_check`] with an explicit relative-error floor and an optional
/// subset of element indices to probe.
pub fn grad_check_with<F>(
    x: &Tensor,
    eps: f64,
    floor: f64,
    indices: Option<&[usize]>,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let out = f(&mut tape, v)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.get_or_zeros(v);
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let cd = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - cd).abs() / a.abs().max(cd.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}
