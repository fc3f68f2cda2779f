//! Slow, direct reference implementations of the numerical pieces of
//! `mainet`. Everything here is written from the definitions with nested
//! loops over plain `Vec<f64>`, and shares no code with the engine, so the
//! two can be checked against each other.

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} from {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(v: Vec<f64>) -> Self {
        Self::new(1, v.len(), v)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat::new(self.rows, self.cols, self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for t in 0..a.cols {
                s += a.at(i, t) * b.at(t, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = Vec::with_capacity(x.data.len());
    for i in 0..x.rows {
        out.extend(softmax(&x.data[i * x.cols..(i + 1) * x.cols]));
    }
    Mat::new(x.rows, x.cols, out)
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Tanh approximation of GELU.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

/// Convolution geometry, mirroring the usual framework arguments.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// `x: [c_in, h, w]`, `k: [c_out, c_in/groups, ks, ks]`. Returns the
/// output with its height and width.
pub fn conv2d(x: &[f64], c_in: usize, h: usize, w: usize, k: &[f64], c_out: usize, ks: usize, g: Conv) -> (Vec<f64>, usize, usize) {
    let cpg = c_in / g.groups;
    let opg = c_out / g.groups;
    let span = g.dilation * (ks - 1) + 1;
    let ho = (h + 2 * g.padding - span) / g.stride + 1;
    let wo = (w + 2 * g.padding - span) / g.stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        let group = o / opg;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ci in 0..cpg {
                    let c = group * cpg + ci;
                    for u in 0..ks {
                        for v in 0..ks {
                            let iy = (oy * g.stride + u * g.dilation) as isize - g.padding as isize;
                            let ix = (ox * g.stride + v * g.dilation) as isize - g.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += x[(c * h + iy as usize) * w + ix as usize] * k[((o * cpg + ci) * ks + u) * ks + v];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = s;
            }
        }
    }
    (out, ho, wo)
}

/// Adaptive average pooling; bin `i` of `n → out` covers
/// `[floor(i·n/out), ceil((i+1)·n/out))`.
pub fn adaptive_avg_pool(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let bin = |i: usize, n: usize, out: usize| {
        let lo = (i as f64 * n as f64 / out as f64).floor() as usize;
        let hi = ((i + 1) as f64 * n as f64 / out as f64).ceil() as usize;
        (lo, hi)
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            let (y0, y1) = bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = bin(j, w, ow);
                let mut s = 0.0;
                let mut n = 0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += x[(ch * h + y) * w + xx];
                        n += 1;
                    }
                }
                out.push(s / n as f64);
            }
        }
    }
    out
}

/// Named parameter lookup; vectors come back as `1 × n` matrices.
pub type Params<'a> = &'a dyn Fn(&str) -> Mat;

/// `x·W + b` row by row.
pub fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = matmul(x, w);
    for i in 0..y.rows {
        for j in 0..y.cols {
            y.set(i, j, y.at(i, j) + b.data[j]);
        }
    }
    y
}

/// Multi-head cross attention with per-head projections `name.q{i}`,
/// `name.k{i}`, `name.v{i}` and output projection `name.o`.
pub fn mhca(p: Params, name: &str, heads: usize, xq: &Mat, xkv: &Mat) -> Mat {
    let mut cat = Mat::zeros(xq.rows, 0);
    for i in 0..heads {
        let q = matmul(xq, &p(&format!("{name}.q{i}")));
        let k = matmul(xkv, &p(&format!("{name}.k{i}")));
        let v = matmul(xkv, &p(&format!("{name}.v{i}")));
        let dk = q.cols as f64;
        let mut logits = Mat::zeros(q.rows, k.rows);
        for a in 0..q.rows {
            for b in 0..k.rows {
                let dot: f64 = (0..q.cols).map(|t| q.at(a, t) * k.at(b, t)).sum();
                logits.set(a, b, dot / dk.sqrt());
            }
        }
        let head = matmul(&softmax_rows(&logits), &v);
        cat = hcat(&cat, &head);
    }
    matmul(&cat, &p(&format!("{name}.o")))
}

pub fn mhsa(p: Params, name: &str, heads: usize, x: &Mat) -> Mat {
    mhca(p, name, heads, x, x)
}

fn hcat(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, a.cols + b.cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.set(i, j, a.at(i, j));
        }
        for j in 0..b.cols {
            out.set(i, a.cols + j, b.at(i, j));
        }
    }
    out
}

/// Channel gating of `[x | y]` by a squeeze-excite bottleneck, then a
/// projection back to the token width.
pub fn cafn(p: Params, name: &str, x: &Mat, y: &Mat) -> Mat {
    let cat = hcat(x, y);
    let mean = Mat::row((0..cat.cols).map(|j| (0..cat.rows).map(|i| cat.at(i, j)).sum::<f64>() / cat.rows as f64).collect());
    let mut h = linear(&mean, &p(&format!("{name}.se1.w")), &p(&format!("{name}.se1.b")));
    h.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let s = linear(&h, &p(&format!("{name}.se2.w")), &p(&format!("{name}.se2.b")));
    let mut gated = cat.clone();
    for i in 0..gated.rows {
        for j in 0..gated.cols {
            gated.set(i, j, cat.at(i, j) * sigmoid(s.data[j]));
        }
    }
    linear(&gated, &p(&format!("{name}.proj.w")), &p(&format!("{name}.proj.b")))
}

pub fn dafn1(p: Params, name: &str, heads: usize, primary: &Mat, aux: &Mat) -> Mat {
    let s = mhsa(p, &format!("{name}.sa1"), heads, aux);
    let c = mhca(p, &format!("{name}.ca"), heads, &s, primary);
    mhsa(p, &format!("{name}.sa2"), heads, &s.add(&c))
}

pub fn dafn2(p: Params, name: &str, heads: usize, u0: &Mat, v0: &Mat) -> Mat {
    let u = mhca(p, &format!("{name}.ca1"), heads, u0, v0);
    let v = mhca(p, &format!("{name}.ca2"), heads, v0, u0);
    let f = cafn(p, &format!("{name}.cafn"), &u, &v);
    mhsa(p, &format!("{name}.sa"), heads, &f)
}

/// Enhanced feature of every modality, each in turn taken as primary with
/// the others (in order) as auxiliaries.
pub fn arpm_forward(p: Params, prefix: &str, heads: usize, feats: &[Mat]) -> Vec<Mat> {
    let n = feats.len();
    (0..n)
        .map(|m| {
            let aux: Vec<&Mat> = (0..n).filter(|&i| i != m).map(|i| &feats[i]).collect();
            let enhance = if n == 3 {
                let shallow: Vec<Mat> = aux
                    .iter()
                    .enumerate()
                    .map(|(j, a)| {
                        let base = format!("{prefix}.r{m}.a{j}");
                        dafn1(p, &format!("{base}.dafn1"), heads, &feats[m], a).add(&cafn(p, &format!("{base}.cafn"), &feats[m], a))
                    })
                    .collect();
                dafn2(p, &format!("{prefix}.r{m}.dafn2"), heads, &shallow[0], &shallow[1])
            } else {
                dafn2(p, &format!("{prefix}.r{m}.dafn2"), heads, &feats[m], aux[0])
            };
            feats[m].add(&enhance)
        })
        .collect()
}

/// ER rule over `M` evidences of `N` classes, straight from the closed
/// form with `c_m = 1/(1 + w_m - r_m)`.
pub fn er(p: &[Vec<f64>], w: &[f64], r: &[f64]) -> Vec<f64> {
    let n = p[0].len();
    let mut residual = 1.0;
    for m in 0..p.len() {
        residual *= (1.0 - r[m]) / (1.0 + w[m] - r[m]);
    }
    let mut class = vec![1.0; n];
    for (k, slot) in class.iter_mut().enumerate() {
        for m in 0..p.len() {
            *slot *= (1.0 - r[m] + w[m] * p[m][k]) / (1.0 + w[m] - r[m]);
        }
    }
    let l = 1.0 / (class.iter().sum::<f64>() - (n as f64 - 1.0) * residual);
    class.iter().map(|b| l * (b - residual) / (1.0 - l * residual)).collect()
}

/// Dempster's rule on singleton masses: normalized elementwise product.
pub fn dempster(p: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![1.0; p[0].len()];
    for e in p {
        for (o, v) in out.iter_mut().zip(e) {
            *o *= v;
        }
    }
    let z: f64 = out.iter().sum();
    out.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores in percent from individual `(label, predicted)` pairs. Per-class
/// precision and recall are macro-averaged; F1 is their harmonic mean.
/// Empty denominators count as 0.
pub fn scores(pairs: &[(usize, usize)], classes: usize) -> Scores {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let correct = pairs.iter().filter(|(l, p)| l == p).count();
    let mut prec = 0.0;
    let mut rec = 0.0;
    for c in 0..classes {
        let tp = pairs.iter().filter(|&&(l, p)| l == c && p == c).count();
        let predicted = pairs.iter().filter(|&&(_, p)| p == c).count();
        let actual = pairs.iter().filter(|&&(l, _)| l == c).count();
        prec += ratio(tp, predicted);
        rec += ratio(tp, actual);
    }
    let (precision, recall) = (100.0 * prec / classes as f64, 100.0 * rec / classes as f64);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Scores {
        accuracy: 100.0 * ratio(correct, pairs.len()),
        precision,
        recall,
        f1,
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest `|a - b| / max(1, |b|)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}
