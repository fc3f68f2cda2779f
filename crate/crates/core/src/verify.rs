//! Self-check suite: brute-force oracles, gradient checks, kernel merging
//! and ER algebra, run on small random instances.

use crate::arpm::{self, ArpmConfig};
use crate::backbone;
use crate::error::Result;
use crate::fusion::{self, Evidence};
use crate::ops::{self, ConvSpec};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tape::{grad_check, grad_check_with, Tape, Var};
use crate::tensor::Tensor;
use crate::train::{compute_metrics, split_counts};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, measured: Result<f64>, tol: f64) -> Check {
    match measured {
        Ok(v) => Check {
            name,
            passed: v <= tol,
            detail: format!("max error {v:.3e} (tolerance {tol:.0e})"),
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(&[n, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        (0..k).map(|t| a.at2(i, t) * b.at2(t, j)).sum()
    })
}

fn conv_oracle(x: &Tensor, k: &Tensor, s: &ConvSpec) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, cig, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * s.padding - s.dilation * (kh - 1) - 1) / s.stride + 1;
    let ow = (w + 2 * s.padding - s.dilation * (kw - 1) - 1) / s.stride + 1;
    let per_group = co / s.groups;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        let g = o / per_group;
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cig {
                    let cin = g * cig + ci;
                    debug_assert!(cin < c);
                    for u in 0..kh {
                        for v in 0..kw {
                            let y = (i * s.stride + u * s.dilation) as isize - s.padding as isize;
                            let xx = (j * s.stride + v * s.dilation) as isize - s.padding as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                acc += k.data()[((o * cig + ci) * kh + u) * kw + v] * x.at3(cin, y as usize, xx as usize);
                            }
                        }
                    }
                }
                out.data_mut()[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

fn pool_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let (r0, r1) = (i * h / oh, ((i + 1) * h).div_ceil(oh));
                let (c0, c1) = (j * w / ow, ((j + 1) * w).div_ceil(ow));
                let mut s = 0.0;
                for r in r0..r1 {
                    for cc in c0..c1 {
                        s += x.at3(ch, r, cc);
                    }
                }
                out.data_mut()[(ch * oh + i) * ow + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    out
}

fn random_dist(rng: &mut Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.range(0.01, 1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn random_evidence(rng: &mut Rng, n: usize) -> Evidence {
    let p = random_dist(rng, n);
    Evidence::new(p, rng.range(0.05, 1.0), rng.range(0.0, 1.0)).expect("valid evidence")
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Runs every check with a fixed seed.
pub fn run_checks(seed: u64) -> Vec<Check> {
    let mut rng = Rng::derived(seed, 0x7e21f);
    let mut out = Vec::new();

    out.push(check(
        "matmul oracle",
        (0..20).try_fold(0.0f64, |m, _| {
            let a = rng.normal_tensor(&[5, 7], 1.0);
            let b = rng.normal_tensor(&[7, 4], 1.0);
            Ok(m.max(ops::matmul(&a, &b)?.max_abs_diff(&matmul_oracle(&a, &b))))
        }),
        1e-10,
    ));

    out.push(check(
        "conv2d oracle",
        (0..10).try_fold(0.0f64, |m, i| {
            let groups = if i % 2 == 0 { 1 } else { 2 };
            let spec = ConvSpec {
                stride: 1 + i % 2,
                padding: i % 3,
                dilation: 1 + i % 2,
                groups,
            };
            let x = rng.normal_tensor(&[4, 9, 8], 1.0);
            let k = rng.normal_tensor(&[4, 4 / groups, 3, 3], 1.0);
            Ok(m.max(ops::conv2d(&x, &k, &spec)?.max_abs_diff(&conv_oracle(&x, &k, &spec))))
        }),
        1e-10,
    ));

    out.push(check(
        "adaptive pool oracle",
        (0..10).try_fold(0.0f64, |m, _| {
            let x = rng.normal_tensor(&[2, 7, 9], 1.0);
            Ok(m.max(ops::adaptive_avg_pool(&x, 3, 4)?.max_abs_diff(&pool_oracle(&x, 3, 4))))
        }),
        1e-12,
    ));

    out.push(check(
        "softmax oracle",
        (0..20).try_fold(0.0f64, |m, _| {
            let x = rng.normal_tensor(&[6], 3.0);
            let z: f64 = x.data().iter().map(|v| v.exp()).sum();
            let want: Vec<f64> = x.data().iter().map(|v| v.exp() / z).collect();
            Ok(m.max(max_diff(ops::softmax(&x, 0)?.data(), &want)))
        }),
        1e-12,
    ));

    let x = rng.normal_tensor(&[3, 4], 1.0);
    let w = rng.normal_tensor(&[4, 3], 1.0);
    out.push(check(
        "gradient: matmul, gelu, softmax",
        grad_check(&x, 1e-6, |t, v| {
            let wv = t.constant(w.clone());
            let y = t.matmul(v, wv)?;
            let y = t.gelu(y);
            let s = t.softmax(y, 1)?;
            let s = t.mul(s, s)?;
            Ok(t.sum(s))
        }),
        1e-6,
    ));

    let img = rng.normal_tensor(&[2, 6, 6], 1.0);
    let kern = rng.normal_tensor(&[2, 1, 3, 3], 1.0);
    out.push(check(
        "gradient: depthwise dilated conv",
        grad_check(&kern, 1e-6, |t, v| {
            let xv = t.constant(img.clone());
            let y = t.conv2d(xv, v, ConvSpec::depthwise(2, 3, 2))?;
            let y = t.sigmoid(y);
            Ok(t.sum(y))
        }),
        1e-6,
    ));

    let evs: Vec<Evidence> = (0..3).map(|_| random_evidence(&mut rng, 3)).collect();
    let flat: Vec<f64> = evs
        .iter()
        .flat_map(|e| e.p.iter().copied().chain([e.weight, e.reliability]))
        .collect();
    out.push(check(
        "gradient: ER rule in p, w, r",
        grad_check_with(&Tensor::vector(flat), 1e-6, 1e-8, None, |t, v| {
            let (mut ps, mut ws, mut rs) = (Vec::new(), Vec::new(), Vec::new());
            for m in 0..3 {
                let cols: Vec<Var> = (0..5).map(|k| t.pick(v, m * 5 + k)).collect::<Result<_>>()?;
                ps.push(t.concat(&cols[..3], 0)?);
                ws.push(t.reshape(cols[3], &[1])?);
                rs.push(t.reshape(cols[4], &[1])?);
            }
            let joint = fusion::er_combine_tape(t, &ps, &ws, &rs)?;
            let target = t.constant(Tensor::vector(vec![0.2, -0.5, 1.0]));
            let y = t.mul(joint, target)?;
            Ok(t.sum(y))
        }),
        1e-5,
    ));

    out.push(check(
        "reparameterized kernel merge",
        (0..10).try_fold(0.0f64, |m, _| {
            let branches = [(13usize, 1usize), (5, 2), (3, 3), (3, 4)];
            let ws: Vec<Tensor> = branches.iter().map(|&(k, _)| rng.normal_tensor(&[3, 1, k, k], 1.0)).collect();
            let refs: Vec<(usize, usize, &Tensor)> = branches.iter().zip(&ws).map(|(&(k, d), w)| (k, d, w)).collect();
            let merged = backbone::reparam_merge(&refs, 13)?;
            let x = rng.normal_tensor(&[3, 15, 15], 1.0);
            let single = ops::conv2d(&x, &merged, &ConvSpec::depthwise(3, 13, 1))?;
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let vars: Vec<(usize, usize, Var)> =
                refs.iter().map(|&(k, d, w)| (k, d, tape.constant(w.clone()))).collect();
            let multi = backbone::dilated_reparam_forward(&mut tape, xv, &vars, 13)?;
            Ok(m.max(tape.value(multi).max_rel_diff(&single, 1.0)))
        }),
        1e-10,
    ));

    let mut single = 0.0f64;
    let mut perm = 0.0f64;
    let mut dempster = 0.0f64;
    let mut norm = 0.0f64;
    let er = (0..200).try_for_each(|_| -> Result<()> {
        let e = random_evidence(&mut rng, 3);
        single = single.max(max_diff(&fusion::er_combine(std::slice::from_ref(&e))?, &e.p));
        let mut evs: Vec<Evidence> = (0..3).map(|_| random_evidence(&mut rng, 3)).collect();
        let a = fusion::er_combine(&evs)?;
        norm = norm.max((a.iter().sum::<f64>() - 1.0).abs());
        evs.reverse();
        perm = perm.max(max_diff(&a, &fusion::er_combine(&evs)?));
        for e in &mut evs {
            e.reliability = 1.0;
        }
        dempster = dempster.max(max_diff(&fusion::er_combine(&evs)?, &fusion::ds_combine(&evs)?));
        Ok(())
    });
    for (name, v, tol) in [
        ("ER single-evidence identity", single, 1e-12),
        ("ER permutation invariance", perm, 1e-12),
        ("ER reduces to Dempster at r = 1", dempster, 1e-9),
        ("ER output normalization", norm, 1e-9),
    ] {
        let measured = match &er {
            Ok(()) => Ok(v),
            Err(e) => Err(crate::error::Error::Contract(e.to_string())),
        };
        out.push(check(name, measured, tol));
    }

    let acfg = ArpmConfig {
        d_model: 8,
        heads: 2,
        tokens: 4,
    };
    out.push(check(
        "ARPM residual identity with zero parameters",
        (|| {
            let mut store = ParamStore::new();
            arpm::init_arpm(&mut store, &mut rng, "arpm", 3, &acfg)?;
            store.zero_prefix("arpm");
            let mut tape = Tape::new();
            let mut bound = Bound::frozen(&store);
            let feats: Vec<Var> = (0..3).map(|_| tape.constant(rng.normal_tensor(&[4, 8], 1.0))).collect();
            let outs = arpm::arpm_forward(&mut tape, &mut bound, "arpm", &feats, &acfg)?;
            Ok(feats
                .iter()
                .zip(&outs)
                .fold(0.0f64, |m, (f, o)| m.max(tape.value(*f).max_abs_diff(tape.value(*o)))))
        })(),
        0.0,
    ));

    let counts = [2409usize, 2353, 2327].map(|n| split_counts(n, &[0.8, 0.1, 0.1]));
    let totals = counts.iter().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    out.push(Check {
        name: "stratified split counts",
        passed: totals == (5669, 710, 710) && counts[0] == (1927, 241, 241),
        detail: format!("totals {totals:?}, per class {counts:?}"),
    });

    out.push(check(
        "metrics on a perfect diagonal",
        compute_metrics(&[vec![4, 0, 0], vec![0, 5, 0], vec![0, 0, 6]])
            .map(|m| [m.accuracy, m.precision, m.recall, m.f1].iter().map(|v| (v - 100.0).abs()).fold(0.0, f64::max)),
        1e-12,
    ));
    out
}
