//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::path::Path;
use std::time::Instant;

use mainet::ablate::{run_ablation, AblationPlan, AblationReport};
use mainet::arpm::{self, ArpmConfig};
use mainet::backbone::{reparam_merge, BackboneConfig};
use mainet::config::{Profile, RunConfig};
use mainet::data::{gen_synthetic, write_dataset, Modality, ModalSample, SynthConfig};
use mainet::fusion::{ds_combine, er_combine, er_combine_tape, Evidence};
use mainet::model::{FeatureFusion, Model, ModelConfig};
use mainet::ops::{self, ConvSpec};
use mainet::params::{Bound, ParamStore};
use mainet::rng::Rng;
use mainet::tape::{Tape, Var};
use mainet::tensor::Tensor;
use mainet::train::{compute_metrics, evaluate, split_dataset, train};
use mainet_oracles as oracle;
use mainet_oracles::{Conv, Mat};

type Outcome = (bool, String);

fn to_mat(t: &Tensor) -> Mat {
    match t.shape() {
        [_] => Mat::row(t.data().to_vec()),
        [r, c] => Mat::new(*r, *c, t.data().to_vec()),
        s => panic!("not a matrix: {s:?}"),
    }
}

fn lookup(store: &ParamStore) -> impl Fn(&str) -> Mat + '_ {
    move |name| to_mat(store.get(name).unwrap_or_else(|| panic!("missing `{name}`")))
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Error relative to the oracle's magnitude (at least 1).
fn scaled(a: &[f64], b: &[f64]) -> f64 {
    let mag = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    max_abs(a, b) / mag
}

fn grad_rel(a: &[f64], n: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn simplex(rng: &mut Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.range(0.02, 1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn arpm_cfg(rng: &mut Rng) -> ArpmConfig {
    let (d, heads) = [(4, 1), (4, 2), (8, 2), (8, 4), (12, 3), (16, 4), (16, 2)][rng.below(7)];
    ArpmConfig { d_model: d, heads, tokens: 4 }
}

fn tokens(rng: &mut Rng, l: usize, d: usize) -> Tensor {
    rng.normal_tensor(&[l, d], 1.0)
}

/// Runs `f` on constants in a fresh tape with frozen parameters.
fn lib_eval(store: &ParamStore, inputs: &[&Tensor], f: impl Fn(&mut Tape, &mut Bound, &[Var]) -> mainet::Result<Var>) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut p = Bound::frozen(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &mut p, &vars).unwrap();
    tape.value(out).data().to_vec()
}

fn criterion_1() -> Outcome {
    const N: usize = 100;
    let mut rng = Rng::seed(101);
    let mut linear = [0.0f64; 4];
    for _ in 0..N {
        let (n, k, m) = (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8));
        let a = rng.normal_tensor(&[n, k], 1.0);
        let b = rng.normal_tensor(&[k, m], 1.0);
        let got = ops::matmul(&a, &b).unwrap();
        linear[0] = linear[0].max(scaled(got.data(), &oracle::matmul(&to_mat(&a), &to_mat(&b)).data));

        let groups = [1, 2, 4][rng.below(3)];
        let (c_in, c_out) = (groups * (1 + rng.below(2)), groups * (1 + rng.below(2)));
        let ks = [1, 3, 5][rng.below(3)];
        let spec = ConvSpec { stride: 1 + rng.below(2), padding: rng.below(3), dilation: 1 + rng.below(2), groups };
        let span = spec.dilation * (ks - 1) + 1;
        let (h, w) = (span + rng.below(8), span + rng.below(8));
        let x = rng.normal_tensor(&[c_in, h, w], 1.0);
        let kern = rng.normal_tensor(&[c_out, c_in / groups, ks, ks], 1.0);
        let got = ops::conv2d(&x, &kern, &spec).unwrap();
        let g = Conv { stride: spec.stride, padding: spec.padding, dilation: spec.dilation, groups };
        let (want, _, _) = oracle::conv2d(x.data(), c_in, h, w, kern.data(), c_out, ks, g);
        linear[1] = linear[1].max(scaled(got.data(), &want));

        let rows = 1 + rng.below(5);
        let cols = 1 + rng.below(9);
        let spread = 1.0 + 9.0 * rng.uniform();
        let logits = rng.normal_tensor(&[rows, cols], spread);
        let got = ops::softmax(&logits, 1).unwrap();
        linear[2] = linear[2].max(scaled(got.data(), &oracle::softmax_rows(&to_mat(&logits)).data));

        let (c, h, w) = (1 + rng.below(3), 1 + rng.below(20), 1 + rng.below(20));
        let (oh, ow) = (1 + rng.below(h), 1 + rng.below(w));
        let x = rng.normal_tensor(&[c, h, w], 1.0);
        let got = ops::adaptive_avg_pool(&x, oh, ow).unwrap();
        linear[3] = linear[3].max(scaled(got.data(), &oracle::adaptive_avg_pool(x.data(), c, h, w, oh, ow)));
    }

    let mut composed = [0.0f64; 6];
    for i in 0..N {
        let mut rng = Rng::derived(102, i as u64);
        let cfg = arpm_cfg(&mut rng);
        let (d, heads) = (cfg.d_model, cfg.heads);
        let (lq, lk) = (1 + rng.below(6), 1 + rng.below(6));
        let mut store = ParamStore::new();
        for name in ["sa", "ca"] {
            arpm::init_attention(&mut store, &mut rng, name, &cfg);
        }
        arpm::init_cafn(&mut store, &mut rng, "cafn", &cfg);
        arpm::init_dafn1(&mut store, &mut rng, "d1", &cfg);
        arpm::init_dafn2(&mut store, &mut rng, "d2", &cfg);
        let n_mod = 2 + rng.below(2);
        for m in 0..n_mod {
            arpm::init_rotation(&mut store, &mut rng, "arpm", m, n_mod, &cfg);
        }
        // biases start at zero; randomize them so they are exercised
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in names.iter().filter(|n| n.ends_with(".b")) {
            let len = store.get(n).unwrap().len();
            *store.get_mut(n).unwrap() = rng.normal_tensor(&[len], 0.5);
        }
        let p = lookup(&store);
        let (xq, xkv) = (tokens(&mut rng, lq, d), tokens(&mut rng, lk, d));
        let y = tokens(&mut rng, lq, d);
        let (mq, mkv, my) = (to_mat(&xq), to_mat(&xkv), to_mat(&y));

        let got = lib_eval(&store, &[&xq], |t, b, v| arpm::mhsa(t, b, "sa", v[0], &cfg));
        composed[0] = composed[0].max(scaled(&got, &oracle::mhsa(&p, "sa", heads, &mq).data));
        let got = lib_eval(&store, &[&xq, &xkv], |t, b, v| arpm::mhca(t, b, "ca", v[0], v[1], &cfg));
        composed[1] = composed[1].max(scaled(&got, &oracle::mhca(&p, "ca", heads, &mq, &mkv).data));
        let got = lib_eval(&store, &[&xq, &y], |t, b, v| arpm::cafn(t, b, "cafn", v[0], v[1], &cfg));
        composed[2] = composed[2].max(scaled(&got, &oracle::cafn(&p, "cafn", &mq, &my).data));
        let got = lib_eval(&store, &[&xq, &xkv], |t, b, v| arpm::dafn1(t, b, "d1", v[0], v[1], &cfg));
        composed[3] = composed[3].max(scaled(&got, &oracle::dafn1(&p, "d1", heads, &mq, &mkv).data));
        let got = lib_eval(&store, &[&xq, &y], |t, b, v| arpm::dafn2(t, b, "d2", v[0], v[1], &cfg));
        composed[4] = composed[4].max(scaled(&got, &oracle::dafn2(&p, "d2", heads, &mq, &my).data));

        let feats: Vec<Tensor> = (0..n_mod).map(|_| tokens(&mut rng, lq, d)).collect();
        let mats: Vec<Mat> = feats.iter().map(to_mat).collect();
        let want = oracle::arpm_forward(&p, "arpm", heads, &mats);
        let mut tape = Tape::new();
        let mut b = Bound::frozen(&store);
        let vars: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
        let outs = arpm::arpm_forward(&mut tape, &mut b, "arpm", &vars, &cfg).unwrap();
        for (o, w) in outs.iter().zip(&want) {
            composed[5] = composed[5].max(scaled(tape.value(*o).data(), &w.data));
        }
    }
    let lin = linear.iter().cloned().fold(0.0, f64::max);
    let comp = composed.iter().cloned().fold(0.0, f64::max);
    (
        lin <= 1e-10 && comp <= 1e-9,
        format!(
            "{N} instances each; matmul {:.1e} conv2d {:.1e} softmax {:.1e} pool {:.1e} (tol 1e-10); \
             mhsa {:.1e} mhca {:.1e} cafn {:.1e} dafn1 {:.1e} dafn2 {:.1e} arpm {:.1e} (tol 1e-9)",
            linear[0], linear[1], linear[2], linear[3], composed[0], composed[1], composed[2], composed[3], composed[4], composed[5]
        ),
    )
}

/// Analytic gradient of `Σ f(x) ⊙ weights` from the tape against a central
/// difference of the oracle's version of the same function.
fn op_grad(x: &Tensor, lib: impl Fn(&mut Tape, Var) -> mainet::Result<Var>, oracle_f: impl Fn(&[f64]) -> Vec<f64>, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = lib(&mut tape, v).unwrap();
    let mut rng = Rng::seed(seed);
    let weights = rng.normal_tensor(tape.shape(y), 1.0);
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(y, wv).unwrap();
    let s = tape.sum(prod);
    let analytic = tape.backward(s).unwrap().get_or_zeros(v);
    let numeric = oracle::numeric_grad(x.data(), 1e-5, |z| oracle_f(z).iter().zip(weights.data()).map(|(a, b)| a * b).sum());
    grad_rel(analytic.data(), &numeric, 1e-6)
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.1 { v + 0.3_f64.copysign(v) } else { v })
}

fn criterion_2() -> Outcome {
    let mut rng = Rng::seed(201);
    let mut elem: Vec<(&str, f64)> = Vec::new();

    let a = rng.normal_tensor(&[3, 4], 1.0);
    let b = rng.normal_tensor(&[4, 5], 1.0);
    let (bm, am) = (to_mat(&b), to_mat(&a));
    elem.push(("matmul", op_grad(&a, |t, v| { let c = t.constant(b.clone()); t.matmul(v, c) }, |z| oracle::matmul(&Mat::new(3, 4, z.to_vec()), &bm).data, 1)));
    elem.push(("matmul rhs", op_grad(&b, |t, v| { let c = t.constant(a.clone()); t.matmul(c, v) }, |z| oracle::matmul(&am, &Mat::new(4, 5, z.to_vec())).data, 2)));

    let x = rng.normal_tensor(&[2, 7, 6], 1.0);
    let k = rng.normal_tensor(&[4, 2, 3, 3], 1.0);
    let spec = ConvSpec { stride: 2, padding: 1, dilation: 1, groups: 1 };
    let g = Conv { stride: 2, padding: 1, dilation: 1, groups: 1 };
    let (kd, xd) = (k.data().to_vec(), x.data().to_vec());
    elem.push(("conv2d input", op_grad(&x, |t, v| { let c = t.constant(k.clone()); t.conv2d(v, c, spec) }, |z| oracle::conv2d(z, 2, 7, 6, &kd, 4, 3, g).0, 3)));
    let dw = rng.normal_tensor(&[2, 1, 3, 3], 1.0);
    let dspec = ConvSpec::depthwise(2, 3, 2);
    let dg = Conv { stride: 1, padding: 2, dilation: 2, groups: 2 };
    elem.push(("conv2d dilated depthwise kernel", op_grad(&dw, |t, v| { let c = t.constant(x.clone()); t.conv2d(c, v, dspec) }, |z| oracle::conv2d(&xd, 2, 7, 6, z, 2, 3, dg).0, 4)));

    let l = rng.normal_tensor(&[3, 5], 2.0);
    elem.push(("softmax", op_grad(&l, |t, v| t.softmax(v, 1), |z| oracle::softmax_rows(&Mat::new(3, 5, z.to_vec())).data, 5)));
    let px = rng.normal_tensor(&[2, 7, 5], 1.0);
    elem.push(("adaptive pool", op_grad(&px, |t, v| t.adaptive_avg_pool(v, 3, 2), |z| oracle::adaptive_avg_pool(z, 2, 7, 5, 3, 2), 6)));

    let u = away_from_zero(rng.normal_tensor(&[12], 1.5));
    elem.push(("gelu", op_grad(&u, |t, v| Ok(t.gelu(v)), |z| z.iter().map(|v| oracle::gelu(*v)).collect(), 7)));
    elem.push(("sigmoid", op_grad(&u, |t, v| Ok(t.sigmoid(v)), |z| z.iter().map(|v| oracle::sigmoid(*v)).collect(), 8)));
    elem.push(("relu", op_grad(&u, |t, v| Ok(t.relu(v)), |z| z.iter().map(|v| v.max(0.0)).collect(), 9)));
    let pos = rng.uniform_tensor(&[8], 0.2, 3.0);
    elem.push(("ln", op_grad(&pos, |t, v| Ok(t.ln(v)), |z| z.iter().map(|v| v.ln()).collect(), 10)));
    elem.push(("recip", op_grad(&pos, |t, v| Ok(t.recip(v)), |z| z.iter().map(|v| 1.0 / v).collect(), 11)));

    let lx = rng.normal_tensor(&[3, 4], 1.0);
    let lw = rng.normal_tensor(&[4, 2], 1.0);
    let lb = rng.normal_tensor(&[2], 1.0);
    let (lxm, lbm) = (to_mat(&lx), to_mat(&lb));
    elem.push(("linear weight", op_grad(&lw, |t, v| { let (x, b) = (t.constant(lx.clone()), t.constant(lb.clone())); t.linear(x, v, b) }, |z| oracle::linear(&lxm, &Mat::new(4, 2, z.to_vec()), &lbm).data, 12)));
    let gate = rng.normal_tensor(&[4], 1.0);
    let lxd = lx.data().to_vec();
    elem.push(("channel scaling", op_grad(&gate, |t, v| { let x = t.constant(lx.clone()); t.mul_axis(x, v, 1) }, |z| (0..12).map(|i| lxd[i] * z[i % 4]).collect(), 13)));
    elem.push(("mean over rows", op_grad(&lx, |t, v| t.mean_axis(v, 0), |z| (0..4).map(|j| (0..3).map(|i| z[i * 4 + j]).sum::<f64>() / 3.0).collect(), 14)));

    let elem_worst = elem.iter().map(|e| e.1).fold(0.0, f64::max);
    let elem_name = elem.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;

    // ER rule in p, w and r
    let mut er_worst = 0.0f64;
    for i in 0..200 {
        let mut rng = Rng::derived(202, i);
        let (m, n) = (2 + rng.below(3), 2 + rng.below(4));
        let mut flat = Vec::new();
        for _ in 0..m {
            flat.extend(simplex(&mut rng, n));
            flat.push(rng.range(0.05, 1.0));
            flat.push(rng.range(0.05, 0.95));
        }
        let x = Tensor::vector(flat);
        let stride = n + 2;
        let split = move |z: &[f64]| {
            let p: Vec<Vec<f64>> = (0..m).map(|j| z[j * stride..j * stride + n].to_vec()).collect();
            let w: Vec<f64> = (0..m).map(|j| z[j * stride + n]).collect();
            let r: Vec<f64> = (0..m).map(|j| z[j * stride + n + 1]).collect();
            (p, w, r)
        };
        let err = op_grad(
            &x,
            |t, v| {
                let mut ps = Vec::new();
                let mut ws = Vec::new();
                let mut rs = Vec::new();
                for j in 0..m {
                    let parts: Vec<Var> = (0..stride).map(|q| t.pick(v, j * stride + q)).collect::<mainet::Result<_>>()?;
                    ps.push(t.concat(&parts[..n], 0)?);
                    ws.push(parts[n]);
                    rs.push(parts[n + 1]);
                }
                er_combine_tape(t, &ps, &ws, &rs)
            },
            |z| {
                let (p, w, r) = split(z);
                oracle::er(&p, &w, &r)
            },
            300 + i,
        );
        er_worst = er_worst.max(err);
    }

    // whole model, trimodal ARPM with ER
    let full = full_forward_grad();

    (
        elem_worst <= 1e-6 && full <= 1e-4 && er_worst <= 1e-5,
        format!(
            "elementary ops {elem_worst:.1e} (worst: {elem_name}, tol 1e-6); full forward {full:.1e} (tol 1e-4); \
             ER in p/w/r over 200 sets {er_worst:.1e} (tol 1e-5)"
        ),
    )
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        modalities: Modality::ALL.to_vec(),
        fusion: FeatureFusion::Arpm,
        backbone: BackboneConfig {
            stage_channels: [4, 4, 8, 8],
            large_kernel: 5,
            dilated_branches: vec![(5, 1), (3, 2)],
            blocks_per_stage: 1,
            se_reduction: 2,
            mlp_ratio: 1,
        },
        arpm: ArpmConfig { d_model: 8, heads: 2, tokens: 4 },
        wave_embed_dim: 16,
        er_raw_init: 0.7,
    }
}

fn full_forward_grad() -> f64 {
    let synth = SynthConfig { n_samples: 3, map_size: 16, seed: 5, ..SynthConfig::default() };
    let sample = gen_synthetic(&synth).unwrap().remove(0);
    let mut model = Model::new(tiny_model_config(), 9).unwrap();
    // perturb zero-initialized biases so every path carries signal
    let mut rng = Rng::seed(203);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for n in &names {
        let t = model.params.get_mut(n).unwrap();
        if t.data().iter().all(|v| *v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.05 * rng.normal());
        }
    }
    let loss_of = |m: &Model, s: &ModalSample| -> f64 {
        let mut tape = Tape::new();
        let mut p = Bound::frozen(&m.params);
        let out = m.forward(&mut tape, &mut p, s).unwrap();
        let l = m.loss(&mut tape, &out, s.label).unwrap();
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let mut bound = Bound::new(&model.params);
    let out = model.forward(&mut tape, &mut bound, &sample).unwrap();
    let loss = model.loss(&mut tape, &out, sample.label).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut probes = Vec::new();
    for (i, n) in names.iter().enumerate() {
        if i % 3 != 0 && !n.starts_with("er.") {
            continue;
        }
        let Some(v) = bound.var(n) else { continue };
        let g = grads.get_or_zeros(v);
        let j = rng.below(g.len());
        probes.push((n.clone(), j, g.data()[j]));
    }
    drop(bound);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (n, j, analytic) in probes {
        let orig = model.params.get(&n).unwrap().data()[j];
        model.params.get_mut(&n).unwrap().data_mut()[j] = orig + eps;
        let up = loss_of(&model, &sample);
        model.params.get_mut(&n).unwrap().data_mut()[j] = orig - eps;
        let down = loss_of(&model, &sample);
        model.params.get_mut(&n).unwrap().data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(grad_rel(&[analytic], &[numeric], 1e-4));
    }
    worst
}

fn criterion_3() -> Outcome {
    let configs: [(usize, &[(usize, usize)]); 10] = [
        (13, &[(13, 1), (5, 2), (3, 3)]),
        (13, &[(13, 1), (5, 2), (3, 3), (3, 4)]),
        (13, &[(5, 3), (3, 6), (7, 2)]),
        (15, &[(15, 1), (7, 2), (5, 3), (3, 7)]),
        (11, &[(11, 1), (5, 2), (3, 5)]),
        (9, &[(9, 1), (3, 3), (5, 2)]),
        (7, &[(7, 1), (3, 2), (3, 3)]),
        (5, &[(5, 1), (3, 2)]),
        (5, &[(3, 1), (3, 2), (1, 1)]),
        (3, &[(3, 1), (1, 1)]),
    ];
    let mut worst = 0.0f64;
    let mut rng = Rng::seed(301);
    for (large, branches) in configs {
        let c = 1 + rng.below(4);
        let kernels: Vec<Tensor> = branches.iter().map(|&(k, _)| rng.normal_tensor(&[c, 1, k, k], 1.0)).collect();
        let refs: Vec<(usize, usize, &Tensor)> = branches.iter().zip(&kernels).map(|(&(k, d), w)| (k, d, w)).collect();
        let merged = reparam_merge(&refs, large).unwrap();
        for _ in 0..10 {
            let (h, w) = (3 + rng.below(18), 3 + rng.below(18));
            let x = rng.normal_tensor(&[c, h, w], 1.0);
            let mut multi = vec![0.0; c * h * w];
            for (&(k, d), kern) in branches.iter().zip(&kernels) {
                let g = Conv { stride: 1, padding: d * (k - 1) / 2, dilation: d, groups: c };
                let (y, _, _) = oracle::conv2d(x.data(), c, h, w, kern.data(), c, k, g);
                multi.iter_mut().zip(y).for_each(|(a, b)| *a += b);
            }
            let g = Conv { stride: 1, padding: large / 2, dilation: 1, groups: c };
            let (single, _, _) = oracle::conv2d(x.data(), c, h, w, merged.data(), c, large, g);
            let mag = multi.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
            worst = worst.max(max_abs(&single, &multi) / mag);
        }
    }
    (worst <= 1e-10, format!("10 branch sets x 10 inputs, kernels 3 to 15; max relative error {worst:.1e} (tol 1e-10)"))
}

fn evidence_set(rng: &mut Rng, m: usize, n: usize) -> Vec<Evidence> {
    (0..m)
        .map(|_| Evidence::new(simplex(rng, n), rng.range(0.05, 1.0), rng.range(0.0, 1.0)).unwrap())
        .collect()
}

fn oracle_er(evs: &[Evidence]) -> Vec<f64> {
    let p: Vec<Vec<f64>> = evs.iter().map(|e| e.p.clone()).collect();
    let w: Vec<f64> = evs.iter().map(|e| e.weight).collect();
    let r: Vec<f64> = evs.iter().map(|e| e.reliability).collect();
    oracle::er(&p, &w, &r)
}

fn criterion_4() -> Outcome {
    const SETS: u64 = 1000;
    let (mut vs_oracle, mut identity, mut perm, mut dempster, mut norm, mut neutral) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..SETS {
        let mut rng = Rng::derived(401, i);
        let (m, n) = (2 + rng.below(4), 3);
        let evs = evidence_set(&mut rng, m, n);
        let joint = er_combine(&evs).unwrap();
        vs_oracle = vs_oracle.max(max_abs(&joint, &oracle_er(&evs)));
        norm = norm.max((joint.iter().sum::<f64>() - 1.0).abs());
        if joint.iter().any(|v| *v < 0.0) {
            norm = f64::INFINITY;
        }
        identity = identity.max(max_abs(&er_combine(&evs[..1]).unwrap(), &evs[0].p));

        let mut shuffled = evs.clone();
        rng.shuffle(&mut shuffled);
        perm = perm.max(max_abs(&er_combine(&shuffled).unwrap(), &joint));

        let certain: Vec<Evidence> = evs.iter().map(|e| Evidence::new(e.p.clone(), e.weight, 1.0).unwrap()).collect();
        let ps: Vec<Vec<f64>> = certain.iter().map(|e| e.p.clone()).collect();
        let want = oracle::dempster(&ps);
        dempster = dempster.max(max_abs(&er_combine(&certain).unwrap(), &want));
        dempster = dempster.max(max_abs(&ds_combine(&certain).unwrap(), &want));

        let mut with_void = evs.clone();
        with_void.push(Evidence::new(simplex(&mut rng, n), rng.range(0.05, 1.0), 0.0).unwrap());
        neutral = neutral.max(max_abs(&er_combine(&with_void).unwrap(), &joint));
    }
    let algebra = vs_oracle <= 1e-12 && identity <= 1e-12 && perm <= 1e-12 && dempster <= 1e-9 && norm <= 1e-9;
    let neutral_ok = neutral <= 1e-9;
    (
        algebra && neutral_ok,
        format!(
            "{SETS} random 3-class sets; oracle {vs_oracle:.1e}, single-evidence identity {identity:.1e}, permutation {perm:.1e} (tol 1e-12); \
             r=1 vs Dempster {dempster:.1e}, normalization {norm:.1e} (tol 1e-9); \
             adding an r=0 evidence moves the result by up to {neutral:.3} (tol 1e-9{})",
            if neutral_ok { "" } else { ": an r=0 evidence still contributes 1 + w·p factors, so it is not neutral" }
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut checked = 0;
    let mut exact = true;
    for i in 0..100 {
        let mut rng = Rng::derived(501, i);
        let cfg = arpm_cfg(&mut rng);
        let n = 2 + rng.below(2);
        let mut store = ParamStore::new();
        arpm::init_arpm(&mut store, &mut rng, "arpm", n, &cfg).unwrap();
        store.zero_prefix("arpm");
        let l = 1 + rng.below(6);
        let feats: Vec<Tensor> = (0..n).map(|_| tokens(&mut rng, l, cfg.d_model)).collect();
        let mut tape = Tape::new();
        let mut b = Bound::frozen(&store);
        let vars: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
        let outs = arpm::arpm_forward(&mut tape, &mut b, "arpm", &vars, &cfg).unwrap();
        for (o, f) in outs.iter().zip(&feats) {
            exact &= tape.value(*o).data() == f.data();
            checked += 1;
        }
    }
    (exact, format!("{checked} enhanced features from 100 random bimodal and trimodal inputs, all bit-identical to the primary: {exact}"))
}

fn criterion_6() -> Outcome {
    // class sizes and per-class split sizes of the published dataset
    let classes = [(2409, 1927, 241, 241), (2353, 1881, 236, 236), (2327, 1861, 233, 233)];
    let labels: Vec<usize> = classes.iter().enumerate().flat_map(|(c, row)| std::iter::repeat(c).take(row.0)).collect();
    let split = split_dataset(&labels, &[0.8, 0.1, 0.1], 0).unwrap();
    let mut ok = (split.train.len(), split.val.len(), split.test.len()) == (5669, 710, 710);
    let mut rows = Vec::new();
    for (c, &(_, tr, va, te)) in classes.iter().enumerate() {
        let count = |idx: &[usize]| idx.iter().filter(|&&i| labels[i] == c).count();
        let got = (count(&split.train), count(&split.val), count(&split.test));
        ok &= got == (tr, va, te);
        rows.push(format!("{}/{}/{}", got.0, got.1, got.2));
    }
    let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
    all.sort_unstable();
    let partition = all == (0..labels.len()).collect::<Vec<_>>();
    ok &= partition;
    (
        ok,
        format!(
            "7089 samples -> {}/{}/{}; per class {}; disjoint cover: {partition}",
            split.train.len(),
            split.val.len(),
            split.test.len(),
            rows.join(", ")
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut rng = Rng::derived(701, i);
        let k = 2 + rng.below(5);
        let conf: Vec<Vec<u64>> = (0..k)
            .map(|_| (0..k).map(|_| if rng.uniform() < 0.15 { 0 } else { rng.below(60) as u64 }).collect())
            .collect();
        if conf.iter().flatten().all(|v| *v == 0) {
            continue;
        }
        let pairs: Vec<(usize, usize)> = conf
            .iter()
            .enumerate()
            .flat_map(|(l, row)| row.iter().enumerate().flat_map(move |(p, &n)| std::iter::repeat((l, p)).take(n as usize)))
            .collect();
        let want = oracle::scores(&pairs, k);
        let got = compute_metrics(&conf).unwrap();
        for (a, b) in [(got.accuracy, want.accuracy), (got.precision, want.precision), (got.recall, want.recall), (got.f1, want.f1)] {
            worst = worst.max((a - b).abs());
        }
    }
    let diag = compute_metrics(&[vec![40, 0, 0], vec![0, 25, 0], vec![0, 0, 31]]).unwrap();
    let perfect = [diag.accuracy, diag.precision, diag.recall, diag.f1].iter().all(|v| (*v - 100.0).abs() < 1e-12);
    (
        worst <= 1e-9 && perfect,
        format!("100 random confusion matrices, max difference {worst:.1e} points (tol 1e-9); perfect diagonal gives 100: {perfect}"),
    )
}

struct Benchmark {
    report: AblationReport,
    concat_acc: f64,
    ablation_secs: f64,
    concat_secs: f64,
}

fn benchmark() -> Benchmark {
    let cfg = RunConfig::build(Profile::Desk, None, &[]).unwrap();
    let start = Instant::now();
    let samples = gen_synthetic(&cfg.synth().unwrap()).unwrap();
    let tc = cfg.train().unwrap();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let split = split_dataset(&labels, &tc.split, tc.seed).unwrap();
    let base = cfg.model().unwrap();
    let plan = AblationPlan { modalities: true, mechanisms: false, decisions: true, lf_steps: cfg.plan().unwrap().lf_steps };
    let report = run_ablation(&samples, &split, &base, &tc, plan, &mut |m| {
        if !m.starts_with(' ') {
            eprintln!("  {m}");
        }
    })
    .unwrap();
    let ablation_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    eprintln!("  training concat baseline");
    let mut concat = Model::new(ModelConfig { fusion: FeatureFusion::Concat, ..base }, tc.seed).unwrap();
    train(&mut concat, &samples, &split, &tc, None, false, &mut |_| {}).unwrap();
    let concat_acc = evaluate(&concat, &samples, &split.test).unwrap().metrics.accuracy;
    Benchmark { report, concat_acc, ablation_secs, concat_secs: start.elapsed().as_secs_f64() }
}

fn acc(rows: &[mainet::ablate::AblationRow], label: &str) -> f64 {
    AblationReport::find(rows, label).unwrap_or_else(|| panic!("no row `{label}`")).metrics.accuracy
}

fn criterion_8(b: &Benchmark) -> Outcome {
    let rows = &b.report.modality_rows;
    let (i, a, w) = (acc(rows, "image"), acc(rows, "audio"), acc(rows, "wave"));
    let order = i > a && a > w;
    let mut bimodal_ok = true;
    let mut bi = Vec::new();
    for (label, x, y) in [("image+audio", i, a), ("image+wave", i, w), ("audio+wave", a, w)] {
        let v = acc(rows, label);
        bimodal_ok &= v >= x.max(y) - 2.0;
        bi.push(format!("{label} {v:.2}"));
    }
    let tri = acc(rows, "image+audio+wave");
    let best_single = i.max(a).max(w);
    let tri_ok = tri >= best_single + 5.0;
    let time_ok = b.ablation_secs <= 600.0;
    (
        order && bimodal_ok && tri_ok && time_ok,
        format!(
            "image {i:.2} > audio {a:.2} > wave {w:.2}: {order}; {} (each >= best constituent - 2: {bimodal_ok}); \
             trimodal {tri:.2} vs best single + 5 = {:.2}: {tri_ok}; {:.0} s (limit 600 s)",
            bi.join(", "),
            best_single + 5.0,
            b.ablation_secs
        ),
    )
}

fn criterion_9(b: &Benchmark) -> Outcome {
    let arpm_er = acc(&b.report.modality_rows, "image+audio+wave");
    let d = &b.report.decision_rows;
    let (er, mv, dst) = (acc(d, "ER"), acc(d, "MV"), acc(d, "DST"));
    let (c1, c2, c3) = (arpm_er >= b.concat_acc, er >= mv, er >= dst);
    (
        c1 && c2 && c3,
        format!(
            "ARPM+ER {arpm_er:.2} vs concat {:.2}: {c1}; ER {er:.2} vs MV {mv:.2}: {c2}; ER vs DST {dst:.2}: {c3} (concat trained in {:.0} s)",
            b.concat_acc, b.concat_secs
        ),
    )
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let cfg = RunConfig::build(Profile::Smoke, None, &[]).unwrap();
    let run = |root: &Path| {
        let data = root.join("data");
        let samples = gen_synthetic(&cfg.synth().unwrap()).unwrap();
        write_dataset(&data, &samples, cfg.seed(), &cfg.to_toml(), "synthetic").unwrap();
        let (samples, _) = mainet::data::read_dataset(&data).unwrap();
        let tc = cfg.train().unwrap();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let split = split_dataset(&labels, &tc.split, tc.seed).unwrap();
        let mut model = Model::new(cfg.model().unwrap(), tc.seed).unwrap();
        let run_dir = root.join("run");
        std::fs::create_dir_all(&run_dir).unwrap();
        train(&mut model, &samples, &split, &tc, Some(&run_dir), false, &mut |_| {}).unwrap();
        read_tree(root)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ta, tb) = (run(a.path()), run(b.path()));
    let bytes: usize = ta.iter().map(|f| f.1.len()).sum();
    let same = ta == tb;
    let differing: Vec<&str> = ta.iter().zip(&tb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    (
        same,
        format!(
            "two smoke gen + train runs: {} files, {bytes} bytes, identical: {same}{}",
            ta.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {})", differing.join(", ")) }
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, title: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let (pass, detail) = f();
        let secs = start.elapsed().as_secs_f64();
        if !pass {
            failed += 1;
        }
        println!("{} {n:>2} {title} [{secs:.1} s]: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    report(1, "forward passes match nested-loop references", &mut criterion_1);
    report(2, "gradients match central differences", &mut criterion_2);
    report(3, "merged kernel equals multi-branch convolution", &mut criterion_3);
    report(4, "ER rule algebra", &mut criterion_4);
    report(5, "zeroed fusion blocks leave features unchanged", &mut criterion_5);
    report(6, "stratified split sizes", &mut criterion_6);
    report(7, "metrics match a re-count of the pairs", &mut criterion_7);
    eprintln!("running the desk benchmark");
    let bench = benchmark();
    report(8, "modality ablation on the desk benchmark", &mut || criterion_8(&bench));
    report(9, "fusion baselines on the desk benchmark", &mut || criterion_9(&bench));
    report(10, "repeated runs are byte-identical", &mut criterion_10);
    println!("{failed} of 10 criteria failed");
    std::process::exit(if failed == 0 { 0 } else { 1 });
}
