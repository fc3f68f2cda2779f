//! Raw trimodal recordings to fixed-size embedding maps.
//!
//! * image frame: `3×H×W` in `[0, 1]`, adaptive-average-pooled to `3×224×224`
//! * stereo audio: per-channel log-mel spectrogram, pooled to `2×224×224`
//! * water wave (accel/gyro/angle × XYZ at 200 Hz): standardized, embedded
//!   per time step, pooled to `1×224×224`
//!
//! Streams are cut into 1 s windows with 50% overlap before conversion.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MAP_SIZE: usize = 224;
pub const WAVE_CHANNELS: usize = 9;
pub const WAVE_RATE_HZ: usize = 200;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["strong", "weak", "none"];

/// Maximum start-time disagreement between modalities inside a window.
pub const MAX_SKEW_MS: f64 = 1.0;

pub use crate::ops::adaptive_avg_pool;

/// One second of synchronized raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    /// `3×224×224`, values in `[0, 1]`.
    pub image: Tensor,
    /// `2×sample_rate` PCM values in `[-1, 1]`.
    pub audio: Tensor,
    pub sample_rate: usize,
    /// `9×200` readings.
    pub wave: Tensor,
    pub label: usize,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMaps {
    pub image_map: Tensor,
    pub audio_map: Tensor,
    pub wave_map: Tensor,
}

/// A time-indexed trimodal recording sharing one millisecond clock that
/// starts at 0.
#[derive(Debug, Clone, Default)]
pub struct TrimodalStream {
    /// `(timestamp_ms, 3×H×W frame)`, sorted by time.
    pub frames: Vec<(u64, Tensor)>,
    /// Two PCM channels of equal length.
    pub audio: [Vec<f64>; 2],
    pub sample_rate: usize,
    /// `(timestamp_ms, readings)` at 200 Hz, sorted by time.
    pub wave: Vec<(f64, [f64; WAVE_CHANNELS])>,
    /// `(window_start_ms, label)`, sorted by time.
    pub labels: Vec<(u64, usize)>,
}

impl TrimodalStream {
    /// Seconds covered by every modality.
    pub fn duration_s(&self) -> f64 {
        if self.sample_rate == 0 || self.wave.is_empty() {
            return 0.0;
        }
        let audio = self.audio[0].len().min(self.audio[1].len()) as f64 / self.sample_rate as f64;
        let wave_end = self.wave.last().map(|w| w.0).unwrap_or(0.0) / 1000.0 + 1.0 / WAVE_RATE_HZ as f64;
        audio.min(wave_end)
    }
}

/// Number of windows of `width_s` seconds, stepping by `width_s·(1 - overlap)`.
pub fn window_count(duration_s: f64, width_s: f64, overlap: f64) -> usize {
    if duration_s + 1e-9 < width_s {
        return 0;
    }
    let step = width_s * (1.0 - overlap);
    ((duration_s - width_s) / step + 1e-9).floor() as usize + 1
}

/// Cuts a stream into synchronized windows.
pub fn window_stream(stream: &TrimodalStream, width_s: f64, overlap: f64) -> Result<Vec<RawWindow>> {
    if !(width_s > 0.0) || !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("window width {width_s} / overlap {overlap} invalid")));
    }
    let duration = stream.duration_s();
    let count = window_count(duration, width_s, overlap);
    if count == 0 {
        return Err(Error::Empty(format!(
            "stream of {duration:.3} s is shorter than one {width_s} s window"
        )));
    }
    if stream.frames.is_empty() || stream.labels.is_empty() {
        return Err(Error::Empty("stream has no image frames or no labels".into()));
    }
    let sr = stream.sample_rate;
    let audio_len = (width_s * sr as f64).round() as usize;
    let wave_len = (width_s * WAVE_RATE_HZ as f64).round() as usize;
    let step_ms = width_s * (1.0 - overlap) * 1000.0;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start_ms = i as f64 * step_ms;
        let a0 = (start_ms * sr as f64 / 1000.0).round() as usize;
        let audio_skew = (a0 as f64 * 1000.0 / sr as f64 - start_ms).abs();
        let w0 = stream
            .wave
            .partition_point(|(t, _)| *t < start_ms - MAX_SKEW_MS);
        let Some(&(wt, _)) = stream.wave.get(w0) else {
            return Err(Error::Malformed(format!("no wave readings at {start_ms} ms")));
        };
        let wave_skew = (wt - start_ms).abs();
        if audio_skew > MAX_SKEW_MS || wave_skew > MAX_SKEW_MS {
            return Err(Error::Malformed(format!(
                "window at {start_ms} ms misaligned (audio {audio_skew:.3} ms, wave {wave_skew:.3} ms)"
            )));
        }
        if w0 + wave_len > stream.wave.len() || a0 + audio_len > stream.audio[0].len() {
            return Err(Error::Malformed(format!("window at {start_ms} ms runs past the stream end")));
        }
        let mut wave = vec![0.0; WAVE_CHANNELS * wave_len];
        for (t, (_, row)) in stream.wave[w0..w0 + wave_len].iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                wave[c * wave_len + t] = *v;
            }
        }
        let mut audio = Vec::with_capacity(2 * audio_len);
        for ch in &stream.audio {
            audio.extend_from_slice(&ch[a0..a0 + audio_len]);
        }
        let mid = start_ms + width_s * 500.0;
        let frame = stream
            .frames
            .iter()
            .min_by(|a, b| {
                (a.0 as f64 - mid)
                    .abs()
                    .partial_cmp(&(b.0 as f64 - mid).abs())
                    .expect("finite timestamps")
            })
            .expect("non-empty frames");
        let image = ops::adaptive_avg_pool(&frame.1, MAP_SIZE, MAP_SIZE)?;
        let li = stream
            .labels
            .partition_point(|(t, _)| (*t as f64) <= start_ms + MAX_SKEW_MS);
        let label = stream.labels[li.saturating_sub(1)].1;
        out.push(RawWindow {
            image,
            audio: Tensor::new(&[2, audio_len], audio)?,
            sample_rate: sr,
            wave: Tensor::new(&[WAVE_CHANNELS, wave_len], wave)?,
            label,
            timestamp_ms: start_ms.round() as u64,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            n_mels: 128,
        }
    }
}

pub const LOG_FLOOR: f64 = 1e-10;

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Lower edge, center and upper edge (Hz) of each triangular filter.
pub fn mel_band_edges(sample_rate: usize, n_mels: usize) -> Vec<(f64, f64, f64)> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels).map(|k| (pts[k], pts[k + 1], pts[k + 2])).collect()
}

/// Triangular mel filter bank, `[n_mels, n_fft/2 + 1]`. A filter too narrow
/// to cover any FFT bin gets unit weight on its nearest bin.
pub fn mel_filter_bank(sample_rate: usize, n_fft: usize, n_mels: usize) -> Tensor {
    let bins = n_fft / 2 + 1;
    let hz_per_bin = sample_rate as f64 / n_fft as f64;
    let mut fb = Tensor::zeros(&[n_mels, bins]);
    for (k, (lo, c, hi)) in mel_band_edges(sample_rate, n_mels).into_iter().enumerate() {
        let row = &mut fb.data_mut()[k * bins..(k + 1) * bins];
        for (j, v) in row.iter_mut().enumerate() {
            let f = j as f64 * hz_per_bin;
            let up = (f - lo) / (c - lo);
            let down = (hi - f) / (hi - c);
            *v = up.min(down).max(0.0);
        }
        if row.iter().all(|v| *v == 0.0) {
            let j = ((c / hz_per_bin).round() as usize).min(bins - 1);
            row[j] = 1.0;
        }
    }
    fb
}

/// Periodic Hann-windowed power spectrogram, `[n_fft/2 + 1, frames]`.
pub fn power_spectrogram(signal: &[f64], n_fft: usize, hop: usize) -> Result<Tensor> {
    if signal.len() < n_fft || hop == 0 || n_fft == 0 {
        return Err(Error::Config(format!(
            "signal of {} samples too short for n_fft {n_fft} (hop {hop})",
            signal.len()
        )));
    }
    let frames = 1 + (signal.len() - n_fft) / hop;
    let bins = n_fft / 2 + 1;
    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut out = Tensor::zeros(&[bins, frames]);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        let seg = &signal[f * hop..f * hop + n_fft];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (j, b) in buf.iter().take(bins).enumerate() {
            out.data_mut()[j * frames + f] = b.norm_sqr();
        }
    }
    Ok(out)
}

/// Log-mel spectrogram of one channel before pooling, `[n_mels, frames]`.
pub fn log_mel(signal: &[f64], sample_rate: usize, cfg: &MelConfig) -> Result<Tensor> {
    if sample_rate == 0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    let spec = power_spectrogram(signal, cfg.n_fft, cfg.hop)?;
    let fb = mel_filter_bank(sample_rate, cfg.n_fft, cfg.n_mels);
    let mel = ops::matmul(&fb, &spec)?;
    Ok(mel.map(|v| (v + LOG_FLOOR).ln()))
}

/// Stereo PCM `[2, S]` to a `2×224×224` log-mel map.
pub fn audio_to_melspec(pcm: &Tensor, sample_rate: usize, cfg: &MelConfig) -> Result<Tensor> {
    if pcm.rank() != 2 || pcm.shape()[0] != 2 {
        return Err(Error::Shape(format!("audio must be [2, S], got {:?}", pcm.shape())));
    }
    let s = pcm.shape()[1];
    let mut planes = Vec::with_capacity(2 * cfg.n_mels);
    let mut frames = 0;
    for ch in 0..2 {
        let m = log_mel(&pcm.data()[ch * s..(ch + 1) * s], sample_rate, cfg)?;
        frames = m.shape()[1];
        planes.extend_from_slice(m.data());
    }
    let stacked = Tensor::new(&[2, cfg.n_mels, frames], planes)?;
    ops::adaptive_avg_pool(&stacked, MAP_SIZE, MAP_SIZE)
}

/// Zero-mean, unit-variance rows (variance floored at 1e-8), returned
/// time-major as `[steps, 9]`.
pub fn standardize_wave(wave: &Tensor) -> Result<Tensor> {
    if wave.shape() != [WAVE_CHANNELS, WAVE_RATE_HZ] {
        return Err(Error::Shape(format!(
            "wave must be [{WAVE_CHANNELS}, {WAVE_RATE_HZ}], got {:?}",
            wave.shape()
        )));
    }
    let t = WAVE_RATE_HZ;
    let mut out = Tensor::zeros(&[t, WAVE_CHANNELS]);
    for c in 0..WAVE_CHANNELS {
        let row = &wave.data()[c * t..(c + 1) * t];
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        let sd = var.max(1e-8).sqrt();
        for (i, v) in row.iter().enumerate() {
            out.data_mut()[i * WAVE_CHANNELS + c] = (v - mean) / sd;
        }
    }
    Ok(out)
}

/// `9×200` readings to a `1×D_w×D_w` map through a per-step linear
/// embedding `W: [9, D_w]`, `b: [D_w]`; the time axis is pooled to `D_w`.
pub fn wave_to_map(wave: &Tensor, embed_w: &Tensor, embed_b: &Tensor) -> Result<Tensor> {
    let z = standardize_wave(wave)?;
    let latent = ops::linear(&z, embed_w, embed_b)?;
    let d = latent.shape()[1];
    let latent = latent.reshape(&[1, WAVE_RATE_HZ, d])?;
    ops::adaptive_avg_pool(&latent, d, d)
}

/// [`wave_to_map`] recorded on a tape so the embedding can be trained.
pub fn wave_to_map_tape(tape: &mut Tape, wave: &Tensor, embed_w: Var, embed_b: Var) -> Result<Var> {
    let z = tape.constant(standardize_wave(wave)?);
    let latent = tape.linear(z, embed_w, embed_b)?;
    let d = tape.shape(latent)[1];
    let latent = tape.reshape(latent, &[1, WAVE_RATE_HZ, d])?;
    tape.adaptive_avg_pool(latent, d, d)
}

/// Default wave embedding width.
pub const WAVE_EMBED_DIM: usize = 224;

/// Converts one window into the three embedding maps.
pub fn window_to_maps(
    w: &RawWindow,
    mel: &MelConfig,
    embed_w: &Tensor,
    embed_b: &Tensor,
) -> Result<EmbeddingMaps> {
    let image_map = if w.image.shape() == [3, MAP_SIZE, MAP_SIZE] {
        w.image.clone()
    } else {
        ops::adaptive_avg_pool(&w.image, MAP_SIZE, MAP_SIZE)?
    };
    Ok(EmbeddingMaps {
        image_map,
        audio_map: audio_to_melspec(&w.audio, w.sample_rate, mel)?,
        wave_map: wave_to_map(&w.wave, embed_w, embed_b)?,
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, row: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Malformed(format!("{what}: row {row}: cannot parse `{s}`")))
}

/// Loads a recording directory:
///
/// * `frames/<timestamp_ms>.png`
/// * `audio.wav` (PCM16, mono or stereo; mono is duplicated)
/// * `wave.csv`: `timestamp_ms` then 9 reading columns
/// * `labels.csv`: `window_start_ms,label` with label a class id or name
///
/// A leading header row is skipped in both CSVs.
pub fn load_recording(dir: &Path) -> Result<TrimodalStream> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir.join("frames"))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let ts: u64 = stem
            .parse()
            .map_err(|_| Error::Malformed(format!("frame name `{stem}` is not a ms timestamp")))?;
        let img = image::open(&path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
            }
        }
        frames.push((ts, Tensor::new(&[3, h, w], data)?));
    }
    frames.sort_by_key(|f| f.0);

    let mut reader = hound::WavReader::open(dir.join("audio.wav"))?;
    let spec = reader.spec();
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Malformed("audio.wav must be 16-bit PCM".into()));
    }
    let ch = spec.channels as usize;
    let samples: Vec<i16> = reader.samples::<i16>().collect::<std::result::Result<_, _>>()?;
    let mut audio = [Vec::new(), Vec::new()];
    for frame in samples.chunks_exact(ch) {
        let l = frame[0] as f64 / 32768.0;
        let r = if ch > 1 { frame[1] as f64 / 32768.0 } else { l };
        audio[0].push(l);
        audio[1].push(r);
    }

    let mut wave = Vec::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(dir.join("wave.csv"))?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.get(0).is_some_and(|f| f.trim().parse::<f64>().is_err()) {
            continue;
        }
        if rec.len() != 1 + WAVE_CHANNELS {
            return Err(Error::Malformed(format!("wave.csv: row {}: expected 10 columns", i + 1)));
        }
        let ts: f64 = parse_num(&rec[0], "wave.csv", i + 1)?;
        let mut vals = [0.0; WAVE_CHANNELS];
        for (c, v) in vals.iter_mut().enumerate() {
            *v = parse_num(&rec[c + 1], "wave.csv", i + 1)?;
        }
        wave.push((ts, vals));
    }

    let mut labels = Vec::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(dir.join("labels.csv"))?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.get(0).is_some_and(|f| f.trim().parse::<u64>().is_err()) {
            continue;
        }
        let ts: u64 = parse_num(rec.get(0).unwrap_or(""), "labels.csv", i + 1)?;
        let raw = rec.get(1).unwrap_or("").trim().to_ascii_lowercase();
        let label = match CLASS_NAMES.iter().position(|n| *n == raw) {
            Some(k) => k,
            None => parse_num::<usize>(&raw, "labels.csv", i + 1)?,
        };
        if label >= NUM_CLASSES {
            return Err(Error::Malformed(format!("labels.csv: row {}: label {label}", i + 1)));
        }
        labels.push((ts, label));
    }
    labels.sort_by_key(|l| l.0);

    Ok(TrimodalStream {
        frames,
        audio,
        sample_rate: spec.sample_rate as usize,
        wave,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn synthetic_stream(seconds: f64, sr: usize) -> TrimodalStream {
        let n_audio = (seconds * sr as f64) as usize;
        let n_wave = (seconds * WAVE_RATE_HZ as f64) as usize;
        TrimodalStream {
            frames: (0..(seconds * 10.0) as u64)
                .map(|i| (i * 100, Tensor::full(&[3, 8, 8], (i % 7) as f64 / 7.0)))
                .collect(),
            audio: [vec![0.0; n_audio], vec![0.0; n_audio]],
            sample_rate: sr,
            wave: (0..n_wave)
                .map(|i| (i as f64 * 5.0, [i as f64; WAVE_CHANNELS]))
                .collect(),
            labels: vec![(0, 0), (1000, 1), (3000, 2)],
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(1.0, 1.0, 0.5), 1);
        assert_eq!(window_count(2.0, 1.0, 0.5), 3);
        assert_eq!(window_count(10.0, 1.0, 0.5), 19);
        assert_eq!(window_count(0.9, 1.0, 0.5), 0);
    }

    #[test]
    fn windows_start_every_half_second() {
        let w = window_stream(&synthetic_stream(2.0, 8000), 1.0, 0.5).unwrap();
        let starts: Vec<_> = w.iter().map(|w| w.timestamp_ms).collect();
        assert_eq!(starts, [0, 500, 1000]);
        assert_eq!(w[2].label, 1);
        assert_eq!(w[0].wave.shape(), &[9, 200]);
        assert_eq!(w[1].wave.data()[0], 100.0);
        assert_eq!(w[1].audio.shape(), &[2, 8000]);
        assert_eq!(w[0].image.shape(), &[3, MAP_SIZE, MAP_SIZE]);
    }

    #[test]
    fn short_stream_is_empty_result() {
        assert!(matches!(
            window_stream(&synthetic_stream(0.5, 8000), 1.0, 0.5),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn misaligned_wave_is_rejected() {
        let mut s = synthetic_stream(2.0, 8000);
        for w in &mut s.wave {
            w.0 += 2.5;
        }
        assert!(matches!(window_stream(&s, 1.0, 0.5), Err(Error::Malformed(_))));
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let pcm = Tensor::zeros(&[2, 16000]);
        let m = audio_to_melspec(&pcm, 16000, &MelConfig::default()).unwrap();
        assert_eq!(m.shape(), &[2, MAP_SIZE, MAP_SIZE]);
        let want = LOG_FLOOR.ln();
        assert!(m.data().iter().all(|v| (v - want).abs() < 1e-9));
    }

    #[test]
    fn short_audio_is_config_error() {
        let pcm = Tensor::zeros(&[2, 512]);
        assert!(matches!(
            audio_to_melspec(&pcm, 16000, &MelConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tone_peaks_at_the_band_containing_it() {
        let sr = 16000;
        let cfg = MelConfig::default();
        let tone: Vec<f64> = (0..sr)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / sr as f64).sin())
            .collect();
        let mut pcm = tone.clone();
        pcm.extend(&tone);
        let m = audio_to_melspec(&Tensor::new(&[2, sr], pcm).unwrap(), sr, &cfg).unwrap();

        // oracle: the filter whose center (HTK mel grid) is closest to 1 kHz
        // among those whose band contains it
        let edges = mel_band_edges(sr, cfg.n_mels);
        let expected = edges
            .iter()
            .enumerate()
            .filter(|(_, (lo, _, hi))| *lo <= 1000.0 && 1000.0 <= *hi)
            .min_by(|a, b| {
                (a.1 .1 - 1000.0).abs().partial_cmp(&(b.1 .1 - 1000.0).abs()).unwrap()
            })
            .unwrap()
            .0;
        for col in [0, 100, 223] {
            let row = (0..MAP_SIZE)
                .max_by(|&a, &b| m.at3(0, a, col).partial_cmp(&m.at3(0, b, col)).unwrap())
                .unwrap();
            let (lo, hi) = ops::adaptive_window(row, cfg.n_mels, MAP_SIZE);
            assert!((lo..hi).contains(&expected), "col {col}: row {row} covers {lo}..{hi}, want {expected}");
        }
    }

    #[test]
    fn filter_bank_rows_are_positive() {
        for (sr, n_fft, n_mels) in [(16000, 1024, 128), (44100, 1024, 128), (8000, 512, 64)] {
            let fb = mel_filter_bank(sr, n_fft, n_mels);
            let bins = n_fft / 2 + 1;
            for k in 0..n_mels {
                let s: f64 = fb.data()[k * bins..(k + 1) * bins].iter().sum();
                assert!(s > 0.0, "filter {k} empty at sr {sr}");
            }
            let edges = mel_band_edges(sr, n_mels);
            assert!(edges[0].0.abs() < 1e-9);
            assert!((edges[n_mels - 1].2 - sr as f64 / 2.0).abs() < 1e-6);
        }
    }

    fn embed(rng: &mut Rng) -> (Tensor, Tensor) {
        (
            rng.normal_tensor(&[WAVE_CHANNELS, WAVE_EMBED_DIM], 0.3),
            rng.normal_tensor(&[WAVE_EMBED_DIM], 0.3),
        )
    }

    #[test]
    fn flat_wave_maps_to_bias_pattern() {
        let mut rng = Rng::seed(30);
        let (w, b) = embed(&mut rng);
        let zero = wave_to_map(&Tensor::zeros(&[9, 200]), &w, &b).unwrap();
        let flat = wave_to_map(&Tensor::full(&[9, 200], 3.7), &w, &b).unwrap();
        assert!(zero.max_abs_diff(&flat) < 1e-9);
        let bias_map = ops::adaptive_avg_pool(&b.clone().reshape(&[1, 1, WAVE_EMBED_DIM]).unwrap(), 1, MAP_SIZE).unwrap();
        for r in 0..MAP_SIZE {
            for c in 0..MAP_SIZE {
                assert!((zero.at3(0, r, c) - bias_map.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wave_map_matches_step_by_step_oracle() {
        let mut rng = Rng::seed(31);
        let (w, b) = embed(&mut rng);
        let wave = rng.normal_tensor(&[9, 200], 2.0);
        let got = wave_to_map(&wave, &w, &b).unwrap();
        // oracle: explicit per-step embedding then window averaging
        let mut z = vec![[0.0; 9]; 200];
        for c in 0..9 {
            let row: Vec<f64> = (0..200).map(|t| wave.at2(c, t)).collect();
            let mean = row.iter().sum::<f64>() / 200.0;
            let sd = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 200.0).sqrt();
            for t in 0..200 {
                z[t][c] = (row[t] - mean) / sd;
            }
        }
        let latent: Vec<Vec<f64>> = z
            .iter()
            .map(|zt| {
                (0..WAVE_EMBED_DIM)
                    .map(|j| b.data()[j] + (0..9).map(|c| zt[c] * w.at2(c, j)).sum::<f64>())
                    .collect()
            })
            .collect();
        for i in 0..MAP_SIZE {
            let (r0, r1) = ((i * 200) / 224, ((i + 1) * 200usize).div_ceil(224));
            for j in [0, 17, 223] {
                let (c0, c1) = (j, j + 1);
                let mut acc = 0.0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        acc += latent[r][c];
                    }
                }
                let want = acc / ((r1 - r0) * (c1 - c0)) as f64;
                assert!((got.at3(0, i, j) - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn wave_shape_is_checked() {
        let mut rng = Rng::seed(32);
        let (w, b) = embed(&mut rng);
        assert!(matches!(wave_to_map(&Tensor::zeros(&[6, 200]), &w, &b), Err(Error::Shape(_))));
        assert!(matches!(wave_to_map(&Tensor::zeros(&[9, 199]), &w, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn wave_tape_matches_plain() {
        let mut rng = Rng::seed(33);
        let (w, b) = embed(&mut rng);
        let wave = rng.normal_tensor(&[9, 200], 1.0);
        let mut t = Tape::new();
        let wv = t.leaf(w.clone());
        let bv = t.leaf(b.clone());
        let m = wave_to_map_tape(&mut t, &wave, wv, bv).unwrap();
        assert!(t.value(m).max_abs_diff(&wave_to_map(&wave, &w, &b).unwrap()) < 1e-12);
    }

    #[test]
    fn preprocessing_is_deterministic() {
        let mut rng = Rng::seed(34);
        let pcm = rng.normal_tensor(&[2, 8000], 0.1);
        let a = audio_to_melspec(&pcm, 8000, &MelConfig::default()).unwrap();
        let b = audio_to_melspec(&pcm, 8000, &MelConfig::default()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
