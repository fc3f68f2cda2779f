//! Miniature large-kernel backbone.
//!
//! `stem (3×3, stride 2) → 4 stages`, each stage a stack of blocks
//!
//! ```text
//! x → Σ dilated depthwise branches + bias → SE → 1×1 conv → GELU → 1×1 conv → + x
//! ```
//!
//! with a 3×3 stride-2 convolution between stages. The four stage outputs
//! are pooled, projected to 128 each and concatenated into a 512-wide
//! feature. There is no batch norm, so the multi-branch depthwise
//! convolution merges exactly into one large kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STAGES: usize = 4;
pub const STAGE_PROJ: usize = 128;
pub const FEATURE_WIDTH: usize = STAGES * STAGE_PROJ;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: [usize; STAGES],
    pub large_kernel: usize,
    /// `(kernel, dilation)` per depthwise branch.
    pub dilated_branches: Vec<(usize, usize)>,
    pub blocks_per_stage: usize,
    pub se_reduction: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [32, 64, 128, 256],
            large_kernel: 13,
            dilated_branches: vec![(13, 1), (5, 2), (3, 3)],
            blocks_per_stage: 2,
            se_reduction: 4,
            mlp_ratio: 4,
        }
    }
}

/// Footprint `d(k-1)+1` of a dilated branch.
pub fn branch_span(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) + 1
}

pub fn check_branches(branches: &[(usize, usize)], large_kernel: usize) -> Result<()> {
    if large_kernel % 2 == 0 {
        return Err(Error::Config(format!("large kernel {large_kernel} must be odd")));
    }
    if branches.is_empty() {
        return Err(Error::Config("at least one dilated branch is required".into()));
    }
    for &(k, d) in branches {
        if k == 0 || k % 2 == 0 || d == 0 {
            return Err(Error::Config(format!("branch ({k}, {d}) needs odd kernel and dilation >= 1")));
        }
        if branch_span(k, d) > large_kernel {
            return Err(Error::Config(format!(
                "branch ({k}, {d}) spans {} > large kernel {large_kernel}",
                branch_span(k, d)
            )));
        }
    }
    Ok(())
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        check_branches(&self.dilated_branches, self.large_kernel)?;
        if self.blocks_per_stage == 0 || self.mlp_ratio == 0 || self.se_reduction == 0 {
            return Err(Error::Config("blocks_per_stage, mlp_ratio and se_reduction must be >= 1".into()));
        }
        for &c in &self.stage_channels {
            if c == 0 || c % self.se_reduction != 0 {
                return Err(Error::Config(format!(
                    "stage width {c} must be a positive multiple of the SE reduction {}",
                    self.se_reduction
                )));
            }
        }
        Ok(())
    }

    /// Spatial size of each stage output for a square input.
    pub fn stage_sizes(&self, input: usize) -> [usize; STAGES] {
        let down = |n: usize| (n + 2 - 3) / 2 + 1;
        let mut s = [0; STAGES];
        let mut n = down(input);
        for (i, slot) in s.iter_mut().enumerate() {
            if i > 0 {
                n = down(n);
            }
            *slot = n;
        }
        s
    }
}

fn conv_init(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    rng.normal_tensor(shape, gain * (2.0 / fan_in as f64).sqrt())
}

/// Registers the parameters of one backbone under `prefix`.
pub fn init_backbone(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    in_channels: usize,
    cfg: &BackboneConfig,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.stage_channels;
    store.insert(format!("{prefix}.stem.w"), conv_init(rng, &[c[0], in_channels, 3, 3], 9 * in_channels, 1.0));
    store.insert(format!("{prefix}.stem.b"), Tensor::zeros(&[c[0]]));
    for s in 0..STAGES {
        let ch = c[s];
        if s > 0 {
            let p = format!("{prefix}.down{s}");
            store.insert(format!("{p}.w"), conv_init(rng, &[ch, c[s - 1], 3, 3], 9 * c[s - 1], 1.0));
            store.insert(format!("{p}.b"), Tensor::zeros(&[ch]));
        }
        for b in 0..cfg.blocks_per_stage {
            let p = format!("{prefix}.s{s}.b{b}");
            for (i, &(k, _)) in cfg.dilated_branches.iter().enumerate() {
                let gain = 1.0 / (cfg.dilated_branches.len() as f64).sqrt();
                store.insert(format!("{p}.dw{i}"), conv_init(rng, &[ch, 1, k, k], k * k, gain));
            }
            store.insert(format!("{p}.dw_b"), Tensor::zeros(&[ch]));
            let r = ch / cfg.se_reduction;
            store.init_linear(rng, &format!("{p}.se1"), ch, r);
            store.init_linear(rng, &format!("{p}.se2"), r, ch);
            let hid = ch * cfg.mlp_ratio;
            store.insert(format!("{p}.pw1.w"), conv_init(rng, &[hid, ch, 1, 1], ch, 1.0));
            store.insert(format!("{p}.pw1.b"), Tensor::zeros(&[hid]));
            // small residual branch at init keeps the unnormalized stack stable
            store.insert(format!("{p}.pw2.w"), conv_init(rng, &[ch, hid, 1, 1], hid, 0.2));
            store.insert(format!("{p}.pw2.b"), Tensor::zeros(&[ch]));
        }
        store.init_linear(rng, &format!("{prefix}.proj{s}"), ch, STAGE_PROJ);
    }
    Ok(())
}

fn conv_bias(tape: &mut Tape, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
    let y = tape.conv2d(x, w, spec)?;
    tape.add_axis(y, b, 0)
}

/// `x ⊙ sigmoid(W₂·relu(W₁·gap(x) + b₁) + b₂)`, gated per channel.
pub fn se_block(tape: &mut Tape, p: &mut Bound, prefix: &str, x: Var) -> Result<Var> {
    let pooled = tape.global_avg_pool(x)?;
    let (w1, b1) = (p.get(tape, &format!("{prefix}.se1.w"))?, p.get(tape, &format!("{prefix}.se1.b"))?);
    let (w2, b2) = (p.get(tape, &format!("{prefix}.se2.w"))?, p.get(tape, &format!("{prefix}.se2.b"))?);
    let h = tape.linear(pooled, w1, b1)?;
    let h = tape.relu(h);
    let s = tape.linear(h, w2, b2)?;
    let s = tape.sigmoid(s);
    tape.mul_axis(x, s, 0)
}

/// Training-time multi-branch form: the sum of same-padded depthwise
/// convolutions, one per `(kernel, dilation)` branch.
pub fn dilated_reparam_forward(
    tape: &mut Tape,
    x: Var,
    branches: &[(usize, usize, Var)],
    large_kernel: usize,
) -> Result<Var> {
    let geom: Vec<_> = branches.iter().map(|b| (b.0, b.1)).collect();
    check_branches(&geom, large_kernel)?;
    let c = tape.shape(x)[0];
    let mut acc: Option<Var> = None;
    for &(k, d, w) in branches {
        let y = tape.conv2d(x, w, ConvSpec::depthwise(c, k, d))?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    Ok(acc.expect("at least one branch"))
}

/// Folds dilated depthwise branches `(kernel, dilation, [c,1,k,k])` into one
/// `[c,1,K,K]` kernel: tap `(u,v)` lands at `center + d·(u - k/2, v - k/2)`.
pub fn reparam_merge(branches: &[(usize, usize, &Tensor)], large_kernel: usize) -> Result<Tensor> {
    let geom: Vec<_> = branches.iter().map(|b| (b.0, b.1)).collect();
    check_branches(&geom, large_kernel)?;
    let c = branches[0].2.shape()[0];
    let big = large_kernel;
    let mut out = Tensor::zeros(&[c, 1, big, big]);
    let center = big / 2;
    for &(k, d, w) in branches {
        if w.shape() != [c, 1, k, k] {
            return Err(Error::Shape(format!("branch kernel {:?}, expected [{c}, 1, {k}, {k}]", w.shape())));
        }
        let half = k / 2;
        for ch in 0..c {
            for u in 0..k {
                for v in 0..k {
                    let r = center + d * u - d * half;
                    let s = center + d * v - d * half;
                    out.data_mut()[(ch * big + r) * big + s] += w.data()[((ch * k) + u) * k + v];
                }
            }
        }
    }
    Ok(out)
}

fn block(tape: &mut Tape, p: &mut Bound, prefix: &str, x: Var, cfg: &BackboneConfig) -> Result<Var> {
    let mut branches = Vec::with_capacity(cfg.dilated_branches.len());
    for (i, &(k, d)) in cfg.dilated_branches.iter().enumerate() {
        branches.push((k, d, p.get(tape, &format!("{prefix}.dw{i}"))?));
    }
    let y = dilated_reparam_forward(tape, x, &branches, cfg.large_kernel)?;
    let db = p.get(tape, &format!("{prefix}.dw_b"))?;
    let y = tape.add_axis(y, db, 0)?;
    let y = se_block(tape, p, prefix, y)?;
    let (w1, b1) = (p.get(tape, &format!("{prefix}.pw1.w"))?, p.get(tape, &format!("{prefix}.pw1.b"))?);
    let y = conv_bias(tape, y, w1, b1, ConvSpec::default())?;
    let y = tape.gelu(y);
    let (w2, b2) = (p.get(tape, &format!("{prefix}.pw2.w"))?, p.get(tape, &format!("{prefix}.pw2.b"))?);
    let y = conv_bias(tape, y, w2, b2, ConvSpec::default())?;
    tape.add(x, y)
}

const DOWN: ConvSpec = ConvSpec {
    stride: 2,
    padding: 1,
    dilation: 1,
    groups: 1,
};

/// Runs the four stages, returning `F0..F3`.
pub fn forward_stages(
    tape: &mut Tape,
    p: &mut Bound,
    prefix: &str,
    x: Var,
    cfg: &BackboneConfig,
) -> Result<[Var; STAGES]> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != shape[2] || shape[1] < 2usize.pow(STAGES as u32) {
        return Err(Error::Shape(format!(
            "backbone input must be a square [c, n, n] map with n >= 16, got {shape:?}"
        )));
    }
    let (w, b) = (p.get(tape, &format!("{prefix}.stem.w"))?, p.get(tape, &format!("{prefix}.stem.b"))?);
    if tape.shape(w)[1] != shape[0] {
        return Err(Error::Shape(format!(
            "backbone `{prefix}` expects {} input channels, got {}",
            tape.shape(w)[1],
            shape[0]
        )));
    }
    let mut h = conv_bias(tape, x, w, b, DOWN)?;
    let mut outs = [h; STAGES];
    for (s, out) in outs.iter_mut().enumerate() {
        if s > 0 {
            let (w, b) = (p.get(tape, &format!("{prefix}.down{s}.w"))?, p.get(tape, &format!("{prefix}.down{s}.b"))?);
            h = conv_bias(tape, h, w, b, DOWN)?;
        }
        for bi in 0..cfg.blocks_per_stage {
            h = block(tape, p, &format!("{prefix}.s{s}.b{bi}"), h, cfg)?;
        }
        *out = h;
    }
    Ok(outs)
}

/// Pools each stage, projects it to 128 and concatenates into 512.
pub fn fuse_stages(tape: &mut Tape, p: &mut Bound, prefix: &str, stages: &[Var; STAGES]) -> Result<Var> {
    let mut parts = Vec::with_capacity(STAGES);
    for (s, &f) in stages.iter().enumerate() {
        let g = tape.global_avg_pool(f)?;
        let (w, b) = (p.get(tape, &format!("{prefix}.proj{s}.w"))?, p.get(tape, &format!("{prefix}.proj{s}.b"))?);
        parts.push(tape.linear(g, w, b)?);
    }
    tape.concat(&parts, 0)
}

/// Map to 512-wide modal feature.
pub fn backbone_feature(tape: &mut Tape, p: &mut Bound, prefix: &str, x: Var, cfg: &BackboneConfig) -> Result<Var> {
    let stages = forward_stages(tape, p, prefix, x, cfg)?;
    fuse_stages(tape, p, prefix, &stages)
}

/// Replaces every block's branches by the merged kernel, returning an
/// inference-time store with a single `(K, 1)` branch per block.
pub fn reparam_store(store: &ParamStore, prefix: &str, cfg: &BackboneConfig) -> Result<(ParamStore, BackboneConfig)> {
    let mut out = ParamStore::new();
    let mut done = std::collections::HashSet::new();
    for (name, t) in store.iter() {
        let Some(rest) = name.strip_prefix(&format!("{prefix}.")) else {
            out.insert(name, t.clone());
            continue;
        };
        let Some(pos) = rest.find(".dw").filter(|_| !rest.ends_with(".dw_b")) else {
            out.insert(name, t.clone());
            continue;
        };
        let block = format!("{prefix}.{}", &rest[..pos]);
        if !done.insert(block.clone()) {
            continue;
        }
        let kernels: Vec<&Tensor> = (0..cfg.dilated_branches.len())
            .map(|i| {
                store
                    .get(&format!("{block}.dw{i}"))
                    .ok_or_else(|| Error::Config(format!("missing branch `{block}.dw{i}`")))
            })
            .collect::<Result<_>>()?;
        let branches: Vec<_> = cfg
            .dilated_branches
            .iter()
            .zip(kernels)
            .map(|(&(k, d), w)| (k, d, w))
            .collect();
        out.insert(format!("{block}.dw0"), reparam_merge(&branches, cfg.large_kernel)?);
    }
    let merged = BackboneConfig {
        dilated_branches: vec![(cfg.large_kernel, 1)],
        ..cfg.clone()
    };
    Ok((out, merged))
}
