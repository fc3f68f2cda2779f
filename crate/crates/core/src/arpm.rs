//! Auxiliary-modality reinforcement of a primary modality.
//!
//! Modal features are split into `L` tokens and projected to width `d_m`.
//! For each choice of primary modality `a` with auxiliaries `b`, `c`:
//!
//! ```text
//! F_ab = DAFN1(F_a, F_b) + CAFN(F_a, F_b)          (likewise F_ac)
//! F_a* = F_a + DAFN2(F_ab, F_ac)
//! ```
//!
//! * `DAFN1(P, X)`: `S = SA(X)`, `C = CA(q = S, kv = P)`, `SA(S + C)`
//! * `DAFN2(U0, V0)`: `U = CA(U0, V0)`, `V = CA(V0, U0)`, `SA(CAFN(U, V))`
//! * `CAFN(X, Y)`: SE-style gating of `[X | Y]` over channels, projected
//!   back to `d_m`
//!
//! Every block owns its parameters and there are no positional encodings.
//! With two modalities only DAFN-2 is used: `F_a* = F_a + DAFN2(F_a, F_b)`.

use serde::{Deserialize, Serialize};

use crate::backbone::FEATURE_WIDTH;
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArpmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub tokens: usize,
}

impl Default for ArpmConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 4,
            tokens: 4,
        }
    }
}

pub const CAFN_REDUCTION: usize = 4;

impl ArpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.tokens == 0 || FEATURE_WIDTH % self.tokens != 0 {
            return Err(Error::Config(format!(
                "token count {} must divide the feature width {FEATURE_WIDTH}",
                self.tokens
            )));
        }
        if (2 * self.d_model) % CAFN_REDUCTION != 0 {
            return Err(Error::Config(format!(
                "2·d_model = {} must be divisible by {CAFN_REDUCTION}",
                2 * self.d_model
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

pub fn init_tokenizer(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &ArpmConfig) {
    store.init_linear(rng, name, FEATURE_WIDTH / cfg.tokens, cfg.d_model);
}

/// `[512] → [L, 512/L] → [L, d_m]`.
pub fn tokenize(tape: &mut Tape, p: &mut Bound, name: &str, f: Var, cfg: &ArpmConfig) -> Result<Var> {
    if tape.shape(f) != [FEATURE_WIDTH] {
        return Err(Error::Shape(format!(
            "tokenize needs a [{FEATURE_WIDTH}] feature, got {:?}",
            tape.shape(f)
        )));
    }
    cfg.validate()?;
    let x = tape.reshape(f, &[cfg.tokens, FEATURE_WIDTH / cfg.tokens])?;
    let (w, b) = (p.get(tape, &format!("{name}.w"))?, p.get(tape, &format!("{name}.b"))?);
    tape.linear(x, w, b)
}

pub fn init_attention(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &ArpmConfig) {
    let (d, dk) = (cfg.d_model, cfg.d_k());
    let std = (2.0 / (d + dk) as f64).sqrt();
    for i in 0..cfg.heads {
        for m in ["q", "k", "v"] {
            store.init_normal(rng, &format!("{name}.{m}{i}"), &[d, dk], std);
        }
    }
    store.init_normal(rng, &format!("{name}.o"), &[cfg.heads * dk, d], (1.0 / d as f64).sqrt());
}

fn check_width(tape: &Tape, x: Var, cfg: &ArpmConfig, what: &str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != cfg.d_model || s[0] == 0 {
        return Err(Error::Shape(format!("{what}: expected [L, {}], got {s:?}", cfg.d_model)));
    }
    Ok(())
}

/// Multi-head attention with queries from `xq` and keys/values from `xkv`:
/// `concat_i softmax(Q_i K_iᵀ/√d_k) V_i · W_O`.
pub fn mhca(tape: &mut Tape, p: &mut Bound, name: &str, xq: Var, xkv: Var, cfg: &ArpmConfig) -> Result<Var> {
    check_width(tape, xq, cfg, "query")?;
    check_width(tape, xkv, cfg, "key/value")?;
    let scale = 1.0 / (cfg.d_k() as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let wq = p.get(tape, &format!("{name}.q{i}"))?;
        let wk = p.get(tape, &format!("{name}.k{i}"))?;
        let wv = p.get(tape, &format!("{name}.v{i}"))?;
        let q = tape.matmul(xq, wq)?;
        let k = tape.matmul(xkv, wk)?;
        let v = tape.matmul(xkv, wv)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, scale);
        let a = tape.softmax(logits, 1)?;
        heads.push(tape.matmul(a, v)?);
    }
    let cat = tape.concat(&heads, 1)?;
    let wo = p.get(tape, &format!("{name}.o"))?;
    tape.matmul(cat, wo)
}

pub fn mhsa(tape: &mut Tape, p: &mut Bound, name: &str, x: Var, cfg: &ArpmConfig) -> Result<Var> {
    mhca(tape, p, name, x, x, cfg)
}

/// Per-head attention weight matrices `[L_q, L_kv]` of a stored block.
pub fn attention_weights(store: &ParamStore, name: &str, xq: &Tensor, xkv: &Tensor, cfg: &ArpmConfig) -> Result<Vec<Tensor>> {
    let get = |n: String| store.get(&n).ok_or_else(|| Error::Config(format!("unknown parameter `{n}`")));
    let scale = 1.0 / (cfg.d_k() as f64).sqrt();
    (0..cfg.heads)
        .map(|i| {
            let q = ops::matmul(xq, get(format!("{name}.q{i}"))?)?;
            let k = ops::matmul(xkv, get(format!("{name}.k{i}"))?)?;
            let logits = ops::matmul(&q, &ops::transpose(&k)?)?.map(|v| v * scale);
            ops::softmax(&logits, 1)
        })
        .collect()
}

pub fn init_cafn(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &ArpmConfig) {
    let c = 2 * cfg.d_model;
    store.init_linear(rng, &format!("{name}.se1"), c, c / CAFN_REDUCTION);
    store.init_linear(rng, &format!("{name}.se2"), c / CAFN_REDUCTION, c);
    store.init_linear(rng, &format!("{name}.proj"), c, cfg.d_model);
}

/// Channel attention over `[X | Y]`: squeeze over tokens, excite, gate, project.
pub fn cafn(tape: &mut Tape, p: &mut Bound, name: &str, x: Var, y: Var, cfg: &ArpmConfig) -> Result<Var> {
    check_width(tape, x, cfg, "cafn")?;
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::Shape(format!(
            "cafn inputs differ: {:?} vs {:?}",
            tape.shape(x),
            tape.shape(y)
        )));
    }
    let cat = tape.concat(&[x, y], 1)?;
    let squeeze = tape.mean_axis(cat, 0)?;
    let (w1, b1) = (p.get(tape, &format!("{name}.se1.w"))?, p.get(tape, &format!("{name}.se1.b"))?);
    let (w2, b2) = (p.get(tape, &format!("{name}.se2.w"))?, p.get(tape, &format!("{name}.se2.b"))?);
    let h = tape.linear(squeeze, w1, b1)?;
    let h = tape.relu(h);
    let s = tape.linear(h, w2, b2)?;
    let s = tape.sigmoid(s);
    let gated = tape.mul_axis(cat, s, 1)?;
    let (wp, bp) = (p.get(tape, &format!("{name}.proj.w"))?, p.get(tape, &format!("{name}.proj.b"))?);
    tape.linear(gated, wp, bp)
}

pub fn init_dafn1(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &ArpmConfig) {
    for part in ["sa1", "ca", "sa2"] {
        init_attention(store, rng, &format!("{name}.{part}"), cfg);
    }
}

/// Serial self/cross attention: the auxiliary's self-enhanced feature
/// queries the primary.
pub fn dafn1(tape: &mut Tape, p: &mut Bound, name: &str, primary: Var, aux: Var, cfg: &ArpmConfig) -> Result<Var> {
    let s = mhsa(tape, p, &format!("{name}.sa1"), aux, cfg)?;
    let c = mhca(tape, p, &format!("{name}.ca"), s, primary, cfg)?;
    let sc = tape.add(s, c)?;
    mhsa(tape, p, &format!("{name}.sa2"), sc, cfg)
}

pub fn init_dafn2(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &ArpmConfig) {
    init_attention(store, rng, &format!("{name}.ca1"), cfg);
    init_attention(store, rng, &format!("{name}.ca2"), cfg);
    init_cafn(store, rng, &format!("{name}.cafn"), cfg);
    init_attention(store, rng, &format!("{name}.sa"), cfg);
}

/// Parallel cross attention in both directions, fused by CAFN, refined by
/// self-attention.
pub fn dafn2(tape: &mut Tape, p: &mut Bound, name: &str, f_ab: Var, f_ac: Var, cfg: &ArpmConfig) -> Result<Var> {
    let u = mhca(tape, p, &format!("{name}.ca1"), f_ab, f_ac, cfg)?;
    let v = mhca(tape, p, &format!("{name}.ca2"), f_ac, f_ab, cfg)?;
    let fused = cafn(tape, p, &format!("{name}.cafn"), u, v, cfg)?;
    mhsa(tape, p, &format!("{name}.sa"), fused, cfg)
}

/// Registers every fusion block for `n` modalities under `prefix`.
pub fn init_arpm(store: &mut ParamStore, rng: &mut Rng, prefix: &str, n: usize, cfg: &ArpmConfig) -> Result<()> {
    cfg.validate()?;
    if !(2..=3).contains(&n) {
        return Err(Error::Config(format!("ARPM needs 2 or 3 modalities, got {n}")));
    }
    for m in 0..n {
        init_rotation(store, rng, prefix, m, n, cfg);
    }
    Ok(())
}

/// Parameters of the single rotation with primary `m` out of `n` modalities.
pub fn init_rotation(store: &mut ParamStore, rng: &mut Rng, prefix: &str, m: usize, n: usize, cfg: &ArpmConfig) {
    if n == 3 {
        for j in 0..2 {
            init_dafn1(store, rng, &format!("{prefix}.r{m}.a{j}.dafn1"), cfg);
            init_cafn(store, rng, &format!("{prefix}.r{m}.a{j}.cafn"), cfg);
        }
    }
    init_dafn2(store, rng, &format!("{prefix}.r{m}.dafn2"), cfg);
}

/// Enhanced feature of modality `m`, with the others, in order, as
/// auxiliaries.
pub fn arpm_rotation(tape: &mut Tape, p: &mut Bound, prefix: &str, feats: &[Var], m: usize, cfg: &ArpmConfig) -> Result<Var> {
    let n = feats.len();
    if !(2..=3).contains(&n) || m >= n {
        return Err(Error::Config(format!("ARPM rotation {m} of {n} modalities")));
    }
    let primary = feats[m];
    let auxes: Vec<Var> = feats.iter().enumerate().filter(|(i, _)| *i != m).map(|(_, f)| *f).collect();
    let enhance = if n == 3 {
        let mut shallow = Vec::with_capacity(2);
        for (j, &aux) in auxes.iter().enumerate() {
            let base = format!("{prefix}.r{m}.a{j}");
            let a = dafn1(tape, p, &format!("{base}.dafn1"), primary, aux, cfg)?;
            let g = cafn(tape, p, &format!("{base}.cafn"), primary, aux, cfg)?;
            shallow.push(tape.add(a, g)?);
        }
        dafn2(tape, p, &format!("{prefix}.r{m}.dafn2"), shallow[0], shallow[1], cfg)?
    } else {
        dafn2(tape, p, &format!("{prefix}.r{m}.dafn2"), primary, auxes[0], cfg)?
    };
    tape.add(primary, enhance)
}

/// Enhanced features for every modality, one rotation per primary.
pub fn arpm_forward(tape: &mut Tape, p: &mut Bound, prefix: &str, feats: &[Var], cfg: &ArpmConfig) -> Result<Vec<Var>> {
    (0..feats.len()).map(|m| arpm_rotation(tape, p, prefix, feats, m, cfg)).collect()
}
