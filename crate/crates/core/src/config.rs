//! Run configuration: flat dotted keys from profiles, a TOML file and
//! `key=value` overrides, validated against a fixed schema.

use std::collections::BTreeMap;

use crate::ablate::AblationPlan;
use crate::arpm::ArpmConfig;
use crate::backbone::BackboneConfig;
use crate::data::{Modality, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{FeatureFusion, ModelConfig};
use crate::preprocess::MelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Str,
    IntList,
    FloatList,
    PairList,
}

const SCHEMA: &[(&str, Kind)] = &[
    ("seed", Kind::Int),
    ("data.n_samples", Kind::Int),
    ("data.class_ratio", Kind::FloatList),
    ("data.snr", Kind::FloatList),
    ("data.rho", Kind::Float),
    ("data.map_size", Kind::Int),
    ("preprocess.window_s", Kind::Float),
    ("preprocess.overlap", Kind::Float),
    ("preprocess.n_fft", Kind::Int),
    ("preprocess.hop", Kind::Int),
    ("preprocess.n_mels", Kind::Int),
    ("model.modalities", Kind::Str),
    ("model.fusion", Kind::Str),
    ("model.wave_embed_dim", Kind::Int),
    ("model.er_raw_init", Kind::Float),
    ("backbone.stage_channels", Kind::IntList),
    ("backbone.large_kernel", Kind::Int),
    ("backbone.dilated_branches", Kind::PairList),
    ("backbone.blocks_per_stage", Kind::Int),
    ("backbone.se_reduction", Kind::Int),
    ("backbone.mlp_ratio", Kind::Int),
    ("arpm.d_model", Kind::Int),
    ("arpm.heads", Kind::Int),
    ("arpm.tokens", Kind::Int),
    ("train.batch_size", Kind::Int),
    ("train.epochs", Kind::Int),
    ("train.lr", Kind::Float),
    ("train.plateau_patience", Kind::Int),
    ("train.plateau_factor", Kind::Float),
    ("train.split", Kind::FloatList),
    ("ablate.plan", Kind::Str),
    ("ablate.lf_steps", Kind::Int),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Smoke,
    Desk,
    Full,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Self::Smoke),
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown profile `{s}` (smoke, desk, full)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Smoke => "smoke",
            Self::Desk => "desk",
            Self::Full => "full",
        }
    }

    /// Profile values as TOML text.
    pub fn defaults(self) -> &'static str {
        match self {
            Self::Full => FULL,
            Self::Desk => DESK,
            Self::Smoke => SMOKE,
        }
    }
}

const FULL: &str = r#"
seed = 0
data.n_samples = 7089
data.class_ratio = [1.0, 1.0, 1.0]
data.snr = [2.0, 1.4, 0.9]
data.rho = 0.0
data.map_size = 224
preprocess.window_s = 1.0
preprocess.overlap = 0.5
preprocess.n_fft = 1024
preprocess.hop = 256
preprocess.n_mels = 128
model.modalities = "image,audio,wave"
model.fusion = "arpm"
model.wave_embed_dim = 224
model.er_raw_init = 2.0
backbone.stage_channels = [32, 64, 128, 256]
backbone.large_kernel = 13
backbone.dilated_branches = [[13, 1], [5, 2], [3, 3]]
backbone.blocks_per_stage = 2
backbone.se_reduction = 4
backbone.mlp_ratio = 4
arpm.d_model = 256
arpm.heads = 4
arpm.tokens = 4
train.batch_size = 32
train.epochs = 100
train.lr = 0.001
train.plateau_patience = 5
train.plateau_factor = 0.5
train.split = [0.8, 0.1, 0.1]
ablate.plan = "all"
ablate.lf_steps = 200
"#;

const DESK: &str = r#"
data.n_samples = 4000
data.map_size = 16
model.wave_embed_dim = 16
backbone.stage_channels = [4, 8, 16, 32]
backbone.large_kernel = 5
backbone.dilated_branches = [[5, 1], [3, 2]]
backbone.blocks_per_stage = 1
backbone.mlp_ratio = 2
arpm.d_model = 32
train.epochs = 6
train.split = [0.7, 0.15, 0.15]
"#;

const SMOKE: &str = r#"
data.n_samples = 60
data.map_size = 32
model.wave_embed_dim = 32
backbone.stage_channels = [4, 4, 8, 8]
backbone.large_kernel = 5
backbone.dilated_branches = [[5, 1], [3, 2]]
backbone.blocks_per_stage = 1
backbone.mlp_ratio = 1
arpm.d_model = 16
arpm.heads = 2
train.batch_size = 16
train.epochs = 3
train.split = [0.6, 0.2, 0.2]
ablate.lf_steps = 50
"#;

/// Effective configuration: every schema key with a value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    values: BTreeMap<String, toml::Value>,
}

fn kind_of(key: &str) -> Result<Kind> {
    SCHEMA
        .iter()
        .find(|(k, _)| *k == key)
        .map(|&(_, kind)| kind)
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn parse_toml(text: &str, origin: &str) -> Result<Vec<(String, toml::Value)>> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.message())))?;
    let mut out = Vec::new();
    flatten("", &table, &mut out);
    Ok(out)
}

fn check(key: &str, v: toml::Value) -> Result<toml::Value> {
    use toml::Value as V;
    let kind = kind_of(key)?;
    let bad = || Error::Config(format!("config key `{key}` expects {kind:?}, got `{v}`"));
    let as_float = |x: &V| match x {
        V::Float(f) => Some(*f),
        V::Integer(i) => Some(*i as f64),
        _ => None,
    };
    let out = match (kind, &v) {
        (Kind::Int, V::Integer(i)) if *i >= 0 => v.clone(),
        (Kind::Float, _) => V::Float(as_float(&v).ok_or_else(bad)?),
        (Kind::Str, V::String(_)) => v.clone(),
        (Kind::IntList, V::Array(a)) if a.iter().all(|x| matches!(x, V::Integer(i) if *i >= 0)) => v.clone(),
        (Kind::FloatList, V::Array(a)) => {
            V::Array(a.iter().map(|x| as_float(x).map(V::Float)).collect::<Option<_>>().ok_or_else(bad)?)
        }
        (Kind::PairList, V::Array(a))
            if a.iter().all(|p| matches!(p, V::Array(q) if q.len() == 2 && q.iter().all(|x| matches!(x, V::Integer(i) if *i > 0)))) =>
        {
            v.clone()
        }
        _ => return Err(bad()),
    };
    Ok(out)
}

impl RunConfig {
    /// Layers: full defaults, then the profile, then the file, then
    /// overrides. Keys are validated before anything is applied.
    pub fn build(profile: Profile, file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self {
            profile,
            values: BTreeMap::new(),
        };
        let mut layers = parse_toml(FULL, "defaults")?;
        if profile != Profile::Full {
            layers.extend(parse_toml(profile.defaults(), profile.name())?);
        }
        if let Some(text) = file_text {
            layers.extend(parse_toml(text, "config file")?);
        }
        for o in overrides {
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let k = k.trim();
            kind_of(k)?;
            let raw = raw.trim();
            let v = match format!("v = {raw}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            layers.push((k.to_string(), v));
        }
        for (k, v) in layers {
            let v = check(&k, v)?;
            cfg.values.insert(k, v);
        }
        cfg.synth()?;
        cfg.model()?;
        cfg.train()?;
        cfg.plan()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let v = check(key, value)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    fn get(&self, key: &str) -> &toml::Value {
        self.values.get(key).unwrap_or_else(|| panic!("schema key `{key}` has a default"))
    }

    pub fn int(&self, key: &str) -> usize {
        self.get(key).as_integer().expect("validated integer") as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).as_float().expect("validated float")
    }

    pub fn string(&self, key: &str) -> &str {
        self.get(key).as_str().expect("validated string")
    }

    fn floats<const N: usize>(&self, key: &str) -> Result<[f64; N]> {
        let v: Vec<f64> = self
            .get(key)
            .as_array()
            .expect("validated list")
            .iter()
            .map(|x| x.as_float().expect("validated float"))
            .collect();
        v.try_into()
            .map_err(|v: Vec<f64>| Error::Config(format!("config key `{key}` needs {N} values, got {}", v.len())))
    }

    pub fn seed(&self) -> u64 {
        self.int("seed") as u64
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            n_samples: self.int("data.n_samples"),
            class_ratio: self.floats("data.class_ratio")?,
            snr: self.floats("data.snr")?,
            rho: self.float("data.rho"),
            map_size: self.int("data.map_size"),
            seed: self.seed(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mel(&self) -> MelConfig {
        MelConfig {
            n_fft: self.int("preprocess.n_fft"),
            hop: self.int("preprocess.hop"),
            n_mels: self.int("preprocess.n_mels"),
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let modalities = self
            .string("model.modalities")
            .split(',')
            .map(|s| {
                Modality::parse(s.trim()).ok_or_else(|| Error::Config(format!("model.modalities: unknown modality `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = match self.string("model.fusion") {
            "arpm" => FeatureFusion::Arpm,
            "none" | "er" => FeatureFusion::None,
            "concat" => FeatureFusion::Concat,
            other => match other.strip_prefix("arpm:").and_then(Modality::parse) {
                Some(m) => FeatureFusion::ArpmPrimary(m),
                None => return Err(Error::Config(format!("model.fusion: unknown value `{other}`"))),
            },
        };
        let ch: Vec<usize> = self
            .get("backbone.stage_channels")
            .as_array()
            .expect("validated list")
            .iter()
            .map(|x| x.as_integer().expect("validated") as usize)
            .collect();
        let stage_channels: [usize; 4] = ch
            .try_into()
            .map_err(|_| Error::Config("backbone.stage_channels needs 4 values".into()))?;
        let dilated_branches = self
            .get("backbone.dilated_branches")
            .as_array()
            .expect("validated list")
            .iter()
            .map(|p| {
                let q = p.as_array().expect("validated pair");
                (q[0].as_integer().expect("int") as usize, q[1].as_integer().expect("int") as usize)
            })
            .collect();
        let cfg = ModelConfig {
            modalities,
            fusion,
            backbone: BackboneConfig {
                stage_channels,
                large_kernel: self.int("backbone.large_kernel"),
                dilated_branches,
                blocks_per_stage: self.int("backbone.blocks_per_stage"),
                se_reduction: self.int("backbone.se_reduction"),
                mlp_ratio: self.int("backbone.mlp_ratio"),
            },
            arpm: ArpmConfig {
                d_model: self.int("arpm.d_model"),
                heads: self.int("arpm.heads"),
                tokens: self.int("arpm.tokens"),
            },
            wave_embed_dim: self.int("model.wave_embed_dim"),
            er_raw_init: self.float("model.er_raw_init"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.int("train.batch_size"),
            epochs: self.int("train.epochs"),
            lr: self.float("train.lr"),
            plateau_patience: self.int("train.plateau_patience"),
            plateau_factor: self.float("train.plateau_factor"),
            split: self.floats("train.split")?,
            seed: self.seed(),
            config_hash: self.hash(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn plan(&self) -> Result<AblationPlan> {
        let mut plan = AblationPlan::parse(self.string("ablate.plan"))?;
        plan.lf_steps = self.int("ablate.lf_steps");
        Ok(plan)
    }

    /// Canonical TOML of every key, one `key = value` line each, sorted.
    pub fn to_toml(&self) -> String {
        let mut s = format!("# profile {}\n", self.profile.name());
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn hash(&self) -> String {
        crate::data::config_hash(&self.to_toml())
    }
}
