//! Trimodal samples, the synthetic generator and dataset files.
//!
//! A dataset directory holds `dataset.bin` (a `u32` sample count, then per
//! sample a `u32` label followed by the image, audio and wave tensors) and
//! `manifest.json`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::preprocess::{self, MelConfig, RawWindow, NUM_CLASSES, WAVE_CHANNELS, WAVE_RATE_HZ};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Audio,
    Wave,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Audio, Modality::Wave];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Image => 3,
            Modality::Audio => 2,
            Modality::Wave => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Wave => "wave",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s.trim().to_ascii_lowercase())
    }
}

/// One synchronized observation. `maps` is indexed by [`Modality::index`];
/// the wave entry is either a `1×S×S` map or raw `9×200` readings, which the
/// model embeds itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalSample {
    pub maps: [Tensor; 3],
    pub label: usize,
}

impl ModalSample {
    pub fn map(&self, m: Modality) -> &Tensor {
        &self.maps[m.index()]
    }

    pub fn has_raw_wave(&self) -> bool {
        self.maps[2].shape() == [WAVE_CHANNELS, WAVE_RATE_HZ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub samples: usize,
    pub class_counts: [usize; NUM_CLASSES],
    pub seed: u64,
    pub config_hash: String,
    pub source: String,
    pub shapes: Vec<Vec<usize>>,
}

pub const DATASET_FORMAT: &str = "mainet-dataset-v1";

/// Hex SHA-256 of a canonical config text.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn class_counts(samples: &[ModalSample]) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    for s in samples {
        c[s.label] += 1;
    }
    c
}

pub fn write_dataset(dir: &Path, samples: &[ModalSample], seed: u64, config_text: &str, source: &str) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("dataset.bin"))?);
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    for s in samples {
        w.write_all(&(s.label as u32).to_le_bytes())?;
        for m in &s.maps {
            m.write_to(&mut w)?;
        }
    }
    w.flush()?;
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        samples: samples.len(),
        class_counts: class_counts(samples),
        seed,
        config_hash: config_hash(config_text),
        source: source.into(),
        shapes: samples
            .first()
            .map(|s| s.maps.iter().map(|m| m.shape().to_vec()).collect())
            .unwrap_or_default(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<ModalSample>, Manifest)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Malformed(format!("unknown dataset format `{}`", manifest.format)));
    }
    let mut r = BufReader::new(fs::File::open(dir.join("dataset.bin"))?);
    let mut word = [0u8; 4];
    let malformed = |e: std::io::Error| Error::Malformed(format!("dataset.bin: {e}"));
    r.read_exact(&mut word).map_err(malformed)?;
    let n = u32::from_le_bytes(word) as usize;
    if n != manifest.samples {
        return Err(Error::Malformed(format!("dataset.bin holds {n} samples, manifest says {}", manifest.samples)));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        r.read_exact(&mut word).map_err(malformed)?;
        let label = u32::from_le_bytes(word) as usize;
        if label >= NUM_CLASSES {
            return Err(Error::Malformed(format!("sample {i}: label {label}")));
        }
        let mut read = || {
            Tensor::read_from(&mut r).map_err(|e| match e {
                Error::Io(io) => Error::Malformed(format!("dataset.bin: sample {i}: {io}")),
                e => e,
            })
        };
        let maps = [read()?, read()?, read()?];
        out.push(ModalSample { maps, label });
    }
    Ok((out, manifest))
}


/// A sample from a raw window: image and log-mel maps pooled to
/// `map_size`, wave kept as raw readings for the model's trainable
/// embedding.
pub fn sample_from_window(w: &RawWindow, mel: &MelConfig, map_size: usize) -> Result<ModalSample> {
    let image = preprocess::adaptive_avg_pool(&w.image, map_size, map_size)?;
    let audio = preprocess::audio_to_melspec(&w.audio, w.sample_rate, mel)?;
    let audio = preprocess::adaptive_avg_pool(&audio, map_size, map_size)?;
    Ok(ModalSample {
        maps: [image, audio, w.wave.clone()],
        label: w.label,
    })
}

/// Windows every recording under `root` (itself a recording, or a directory
/// of them, visited in name order) into samples.
pub fn samples_from_recordings(
    root: &Path,
    width_s: f64,
    overlap: f64,
    mel: &MelConfig,
    map_size: usize,
) -> Result<Vec<ModalSample>> {
    let mut dirs = Vec::new();
    if root.join("wave.csv").exists() {
        dirs.push(root.to_path_buf());
    } else {
        for e in fs::read_dir(root)? {
            let p = e?.path();
            if p.join("wave.csv").exists() {
                dirs.push(p);
            }
        }
        dirs.sort();
    }
    if dirs.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no recordings under {}", root.display()),
        )));
    }
    let mut out = Vec::new();
    for d in dirs {
        let stream = preprocess::load_recording(&d)?;
        for w in preprocess::window_stream(&stream, width_s, overlap)? {
            out.push(sample_from_window(&w, mel, map_size)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Relative class frequencies (strong, weak, none).
    pub class_ratio: [f64; NUM_CLASSES],
    /// Signal-to-noise of the latent feeding intensity per modality
    /// (image, audio, wave).
    pub snr: [f64; 3],
    /// Correlation of the latent noise across modalities.
    pub rho: f64,
    pub map_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 7089,
            class_ratio: [1.0; NUM_CLASSES],
            snr: [2.0, 1.4, 0.9],
            rho: 0.0,
            map_size: 224,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("snr values must be positive, got {:?}", self.snr)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.class_ratio.iter().any(|r| !(*r >= 0.0)) || self.class_ratio.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("class ratios must be non-negative with a positive sum".into()));
        }
        if self.map_size < 16 {
            return Err(Error::Config(format!("map size {} is below 16", self.map_size)));
        }
        Ok(())
    }

    /// Per-class counts: floor of the ratio share, remainder to the lowest
    /// class ids.
    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        let total: f64 = self.class_ratio.iter().sum();
        let mut c = [0; NUM_CLASSES];
        for (k, slot) in c.iter_mut().enumerate() {
            *slot = (self.n_samples as f64 * self.class_ratio[k] / total + 1e-9).floor() as usize;
        }
        let mut rest = self.n_samples - c.iter().sum::<usize>();
        for (k, slot) in c.iter_mut().enumerate() {
            if rest == 0 {
                break;
            }
            if self.class_ratio[k] > 0.0 {
                *slot += 1;
                rest -= 1;
            }
        }
        c
    }
}

/// Fixed spatial templates shared by all samples of one generator seed.
struct Templates {
    blobs: Vec<(f64, f64, f64)>,
    band: (usize, usize),
    phases: Vec<f64>,
}

impl Templates {
    fn new(seed: u64, s: usize) -> Self {
        let mut rng = Rng::derived(seed, 0x7e3a);
        let blobs = (0..5)
            .map(|_| (rng.range(0.2, 0.8) * s as f64, rng.range(0.2, 0.8) * s as f64, s as f64 / 10.0))
            .collect();
        let phases = (0..s).map(|_| rng.range(0.0, std::f64::consts::TAU)).collect();
        Self {
            blobs,
            band: (s / 4, s / 2),
            phases,
        }
    }

    fn blob(&self, y: usize, x: usize) -> f64 {
        self.blobs
            .iter()
            .map(|&(cy, cx, r)| (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * r * r)).exp())
            .sum::<f64>()
            .min(1.0)
    }
}

/// Class-conditional synthetic trimodal maps.
///
/// A latent intensity per modality `ι = (snr·level + ε)/√(1 + snr²)`, with
/// `level` = +1/0/−1 for strong/weak/none and `ε = √ρ·z + √(1−ρ)·z_m`,
/// drives:
///
/// * image: brightness of a fixed set of blobs over a dim background
/// * audio: energy in a fixed mel band of a sloped log-spectrum
/// * wave: amplitude and frequency of a row-wise sinusoid
///
/// plus independent per-pixel noise.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<ModalSample>> {
    cfg.validate()?;
    let s = cfg.map_size;
    let tpl = Templates::new(cfg.seed, s);
    let mut labels: Vec<usize> = cfg
        .counts()
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat(k).take(n))
        .collect();
    Rng::derived(cfg.seed, 1).shuffle(&mut labels);
    let blob: Vec<f64> = (0..s * s).map(|i| tpl.blob(i / s, i % s)).collect();
    let mut out = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = Rng::derived(cfg.seed, 1000 + i as u64);
        let level = 1.0 - label as f64;
        let shared = rng.normal();
        let iota: Vec<f64> = cfg
            .snr
            .iter()
            .map(|&snr| {
                let eps = cfg.rho.sqrt() * shared + (1.0 - cfg.rho).sqrt() * rng.normal();
                (snr * level + eps) / (1.0 + snr * snr).sqrt()
            })
            .collect();

        let mut image = Tensor::zeros(&[3, s, s]);
        let tint = [1.0, 0.8, 0.5];
        for c in 0..3 {
            for p in 0..s * s {
                image.data_mut()[c * s * s + p] = 0.3 + tint[c] * 0.25 * iota[0] * blob[p] + 0.1 * rng.normal();
            }
        }

        let mut audio = Tensor::zeros(&[2, s, s]);
        let gain = [1.0, 0.9];
        for c in 0..2 {
            for y in 0..s {
                let slope = -(y as f64) / s as f64;
                let band = if (tpl.band.0..tpl.band.1).contains(&y) { 0.4 * iota[1] } else { 0.0 };
                for x in 0..s {
                    audio.data_mut()[(c * s + y) * s + x] = gain[c] * (slope + band) + 0.15 * rng.normal();
                }
            }
        }

        let mut wave = Tensor::zeros(&[1, s, s]);
        let amp = 0.5 + 0.3 * iota[2];
        let freq = 2.0 + 0.5 * iota[2];
        for y in 0..s {
            let t = y as f64 / s as f64;
            for x in 0..s {
                wave.data_mut()[y * s + x] =
                    amp * (std::f64::consts::TAU * freq * t + tpl.phases[x]).sin() + 0.15 * rng.normal();
            }
        }
        out.push(ModalSample {
            maps: [image, audio, wave],
            label,
        });
    }
    Ok(out)
}
