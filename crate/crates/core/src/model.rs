//! Model assembly: per-modality backbones, tokenization, feature fusion and
//! decision heads.
//!
//! Feature fusion variants:
//!
//! * `concat`: the 512-wide modal features are concatenated and classified
//!   by one linear head
//! * `none`: every modality keeps its own head, heads are combined by ER
//! * `arpm`: every modality is enhanced by the others, heads combined by ER
//! * `arpm_primary`: only the named modality is enhanced, one head
//!
//! The ER weight and reliability of each head are `sigmoid` of raw
//! learnable scalars.

use serde::{Deserialize, Serialize};

use crate::arpm::{self, ArpmConfig};
use crate::backbone::{self, BackboneConfig, FEATURE_WIDTH};
use crate::data::{ModalSample, Modality};
use crate::error::{Error, Result};
use crate::fusion::{self, Evidence};
use crate::params::{Bound, ParamStore};
use crate::preprocess::{self, NUM_CLASSES, WAVE_CHANNELS};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFusion {
    Concat,
    None,
    Arpm,
    ArpmPrimary(Modality),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modalities: Vec<Modality>,
    pub fusion: FeatureFusion,
    pub backbone: BackboneConfig,
    pub arpm: ArpmConfig,
    pub wave_embed_dim: usize,
    /// Initial raw (pre-sigmoid) ER weight and reliability.
    pub er_raw_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: Modality::ALL.to_vec(),
            fusion: FeatureFusion::Arpm,
            backbone: BackboneConfig::default(),
            arpm: ArpmConfig::default(),
            wave_embed_dim: preprocess::WAVE_EMBED_DIM,
            er_raw_init: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.arpm.validate()?;
        let mut seen = Vec::new();
        for m in &self.modalities {
            if seen.contains(m) {
                return Err(Error::Config(format!("modality `{}` listed twice", m.name())));
            }
            seen.push(*m);
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        match self.fusion {
            FeatureFusion::Arpm if self.modalities.len() < 2 => {
                Err(Error::Config("ARPM fusion needs at least two modalities".into()))
            }
            FeatureFusion::ArpmPrimary(m) if !self.modalities.contains(&m) || self.modalities.len() < 2 => Err(
                Error::Config(format!("primary `{}` must be one of at least two modalities", m.name())),
            ),
            _ => Ok(()),
        }
    }

    /// Modalities that get their own decision head.
    pub fn head_modalities(&self) -> Vec<Modality> {
        match self.fusion {
            FeatureFusion::Concat => Vec::new(),
            FeatureFusion::ArpmPrimary(m) => vec![m],
            _ => self.modalities.clone(),
        }
    }

    /// Whether the joint output is an ER combination of several heads.
    pub fn uses_er(&self) -> bool {
        self.head_modalities().len() > 1
    }
}

/// A configured model with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Tape handles of one forward pass.
pub struct Outputs {
    /// Class probabilities per head, in `head_modalities` order.
    pub heads: Vec<Var>,
    pub weights: Vec<Var>,
    pub reliabilities: Vec<Var>,
    /// Final class probabilities.
    pub joint: Var,
}

/// Plain-value result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub evidences: Vec<Evidence>,
    pub joint: Vec<f64>,
}

impl Prediction {
    pub fn decision(&self) -> usize {
        fusion::decide(&self.joint)
    }
}

fn bb(m: Modality) -> String {
    format!("bb.{}", m.name())
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derived(seed, 0x30de1);
        let mut params = ParamStore::new();
        for &m in &cfg.modalities {
            backbone::init_backbone(&mut params, &mut rng, &bb(m), m.channels(), &cfg.backbone)?;
            if m == Modality::Wave {
                params.init_linear(&mut rng, "wave.embed", WAVE_CHANNELS, cfg.wave_embed_dim);
            }
        }
        match cfg.fusion {
            FeatureFusion::Concat => {
                params.init_linear(&mut rng, "concat_head", FEATURE_WIDTH * cfg.modalities.len(), NUM_CLASSES);
            }
            _ => {
                for &m in &cfg.modalities {
                    arpm::init_tokenizer(&mut params, &mut rng, &format!("tok.{}", m.name()), &cfg.arpm);
                }
                let n = cfg.modalities.len();
                match cfg.fusion {
                    FeatureFusion::Arpm => arpm::init_arpm(&mut params, &mut rng, "arpm", n, &cfg.arpm)?,
                    FeatureFusion::ArpmPrimary(p) => {
                        let i = cfg.modalities.iter().position(|m| *m == p).expect("validated");
                        arpm::init_rotation(&mut params, &mut rng, "arpm", i, n, &cfg.arpm);
                    }
                    _ => {}
                }
                for m in cfg.head_modalities() {
                    params.init_linear(&mut rng, &format!("head.{}", m.name()), cfg.arpm.d_model, NUM_CLASSES);
                    params.insert(format!("er.w.{}", m.name()), Tensor::scalar(cfg.er_raw_init));
                    params.insert(format!("er.r.{}", m.name()), Tensor::scalar(cfg.er_raw_init));
                }
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    fn modal_input(&self, tape: &mut Tape, p: &mut Bound, sample: &ModalSample, m: Modality) -> Result<Var> {
        let x = sample.map(m);
        if m == Modality::Wave && sample.has_raw_wave() {
            let (w, b) = (p.get(tape, "wave.embed.w")?, p.get(tape, "wave.embed.b")?);
            return preprocess::wave_to_map_tape(tape, x, w, b);
        }
        Ok(tape.constant(x.clone()))
    }

    /// Records the forward pass of one sample.
    pub fn forward(&self, tape: &mut Tape, p: &mut Bound, sample: &ModalSample) -> Result<Outputs> {
        let cfg = &self.cfg;
        let mut feats = Vec::with_capacity(cfg.modalities.len());
        for &m in &cfg.modalities {
            let x = self.modal_input(tape, p, sample, m)?;
            feats.push(backbone::backbone_feature(tape, p, &bb(m), x, &cfg.backbone)?);
        }
        if cfg.fusion == FeatureFusion::Concat {
            let cat = tape.concat(&feats, 0)?;
            let (w, b) = (p.get(tape, "concat_head.w")?, p.get(tape, "concat_head.b")?);
            let logits = tape.linear(cat, w, b)?;
            let joint = tape.softmax(logits, 0)?;
            return Ok(Outputs {
                heads: Vec::new(),
                weights: Vec::new(),
                reliabilities: Vec::new(),
                joint,
            });
        }
        let mut tokens = Vec::with_capacity(feats.len());
        for (&m, &f) in cfg.modalities.iter().zip(&feats) {
            tokens.push(arpm::tokenize(tape, p, &format!("tok.{}", m.name()), f, &cfg.arpm)?);
        }
        let enhanced = match cfg.fusion {
            FeatureFusion::Arpm => arpm::arpm_forward(tape, p, "arpm", &tokens, &cfg.arpm)?,
            FeatureFusion::ArpmPrimary(pm) => {
                let i = cfg.modalities.iter().position(|m| *m == pm).expect("validated");
                vec![arpm::arpm_rotation(tape, p, "arpm", &tokens, i, &cfg.arpm)?]
            }
            _ => tokens,
        };
        let mut heads = Vec::new();
        let mut weights = Vec::new();
        let mut rels = Vec::new();
        for (m, f) in cfg.head_modalities().into_iter().zip(enhanced) {
            heads.push(head_forward(tape, p, &format!("head.{}", m.name()), f)?);
            let w = p.get(tape, &format!("er.w.{}", m.name()))?;
            let r = p.get(tape, &format!("er.r.{}", m.name()))?;
            weights.push(tape.sigmoid(w));
            rels.push(tape.sigmoid(r));
        }
        let joint = if heads.len() == 1 {
            heads[0]
        } else {
            fusion::er_combine_tape(tape, &heads, &weights, &rels)?
        };
        Ok(Outputs {
            heads,
            weights,
            reliabilities: rels,
            joint,
        })
    }

    /// Training loss: cross-entropy of every head plus that of the joint
    /// output when it is an ER combination.
    pub fn loss(&self, tape: &mut Tape, out: &Outputs, label: usize) -> Result<Var> {
        let mut total = cross_entropy_tape(tape, out.joint, label)?;
        if out.heads.len() > 1 {
            for &h in &out.heads {
                let ce = cross_entropy_tape(tape, h, label)?;
                total = tape.add(total, ce)?;
            }
        }
        Ok(total)
    }

    pub fn predict(&self, sample: &ModalSample) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut p = Bound::frozen(&self.params);
        let out = self.forward(&mut tape, &mut p, sample)?;
        let mut evidences = Vec::with_capacity(out.heads.len());
        for i in 0..out.heads.len() {
            evidences.push(Evidence::new(
                tape.value(out.heads[i]).data().to_vec(),
                tape.value(out.weights[i]).data()[0],
                tape.value(out.reliabilities[i]).data()[0],
            )?);
        }
        Ok(Prediction {
            evidences,
            joint: tape.value(out.joint).data().to_vec(),
        })
    }
}

/// Mean over tokens, linear to class logits, softmax.
pub fn head_forward(tape: &mut Tape, p: &mut Bound, name: &str, f: Var) -> Result<Var> {
    let pooled = tape.mean_axis(f, 0)?;
    let (w, b) = (p.get(tape, &format!("{name}.w"))?, p.get(tape, &format!("{name}.b"))?);
    let logits = tape.linear(pooled, w, b)?;
    tape.softmax(logits, 0)
}

pub const CE_FLOOR: f64 = 1e-12;

/// `-ln(p[label] + 1e-12)`.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -(probs[label] + CE_FLOOR).ln()
}

pub fn cross_entropy_tape(tape: &mut Tape, probs: Var, label: usize) -> Result<Var> {
    let p = tape.pick(probs, label)?;
    let p = tape.shift(p, CE_FLOOR);
    let lp = tape.ln(p);
    Ok(tape.scale(lp, -1.0))
}
