//! WebAssembly bindings for the demo page in `www/`. Every export takes
//! plain numbers or strings and returns a JSON string, so the page needs no
//! glue beyond what `wasm-bindgen` generates.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use mainet::backbone::reparam_merge;
use mainet::fusion::{ds_combine, er_combine, Evidence};
use mainet::preprocess::{log_mel, MelConfig};
use mainet::rng::Rng;

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}

fn normalize(p: Vec<f64>) -> Result<Vec<f64>, String> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|v| *v < 0.0) || s <= 0.0 {
        return Err("confidences must be non-negative with a positive sum".into());
    }
    Ok(p.into_iter().map(|v| v / s).collect())
}

/// ER and Dempster combinations of evidences given one per line as
/// `p1 p2 ... pN ; w ; r`. Confidences are normalized first.
pub fn compare_rules(text: &str) -> Result<Value, String> {
    let mut evs = Vec::new();
    for (i, line) in text.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let parts: Vec<&str> = line.split(';').collect();
        if parts.len() != 3 {
            return Err(format!("line {}: expected `probabilities ; w ; r`", i + 1));
        }
        let p = normalize(parse_list(parts[0])?)?;
        let scalar = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("line {}: bad number `{}`", i + 1, s.trim()));
        let ev = Evidence::new(p, scalar(parts[1])?, scalar(parts[2])?).map_err(|e| format!("line {}: {e}", i + 1))?;
        evs.push(ev);
    }
    let er = er_combine(&evs).map_err(|e| e.to_string())?;
    let dst = match ds_combine(&evs) {
        Ok(p) => json!(p),
        Err(e) => json!(e.to_string()),
    };
    Ok(json!({ "evidences": evs.iter().map(|e| &e.p).collect::<Vec<_>>(), "er": er, "dst": dst }))
}

/// Random depthwise branches `k:d` merged into one `large × large` kernel
/// (first channel only).
pub fn merged_kernel(branches: &str, large: usize, seed: u64) -> Result<Value, String> {
    let mut geom = Vec::new();
    for b in branches.split(',').map(str::trim).filter(|b| !b.is_empty()) {
        let (k, d) = b.split_once(':').ok_or_else(|| format!("branch `{b}` is not k:d"))?;
        let k: usize = k.trim().parse().map_err(|_| format!("bad kernel size in `{b}`"))?;
        let d: usize = d.trim().parse().map_err(|_| format!("bad dilation in `{b}`"))?;
        geom.push((k, d));
    }
    if geom.is_empty() {
        return Err("no branches".into());
    }
    let mut rng = Rng::seed(seed);
    let kernels: Vec<_> = geom.iter().map(|&(k, _)| rng.uniform_tensor(&[1, 1, k, k], 0.2, 1.0)).collect();
    let refs: Vec<_> = geom.iter().zip(&kernels).map(|(&(k, d), w)| (k, d, w)).collect();
    let merged = reparam_merge(&refs, large).map_err(|e| e.to_string())?;
    Ok(json!({ "size": large, "values": merged.data() }))
}

/// Log-mel spectrogram `[n_mels, frames]` of a pure tone.
pub fn tone_spectrogram(freq_hz: f64, sample_rate: usize, seconds: f64, n_fft: usize, hop: usize, n_mels: usize) -> Result<Value, String> {
    if !(seconds > 0.0 && seconds <= 10.0) || sample_rate == 0 {
        return Err("duration must be in (0, 10] s and the sample rate positive".into());
    }
    let n = (seconds * sample_rate as f64) as usize;
    let signal: Vec<f64> = (0..n)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / sample_rate as f64).sin())
        .collect();
    let mel = log_mel(&signal, sample_rate, &MelConfig { n_fft, hop, n_mels }).map_err(|e| e.to_string())?;
    let frames = mel.shape()[1];
    let peak = (0..n_mels)
        .max_by(|&a, &b| mel.at2(a, 0).total_cmp(&mel.at2(b, 0)))
        .unwrap_or(0);
    Ok(json!({ "n_mels": n_mels, "frames": frames, "peak_band": peak, "values": mel.data() }))
}

fn to_js(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

#[wasm_bindgen(js_name = compareRules)]
pub fn compare_rules_js(text: &str) -> String {
    to_js(compare_rules(text))
}

#[wasm_bindgen(js_name = mergedKernel)]
pub fn merged_kernel_js(branches: &str, large: usize, seed: u32) -> String {
    to_js(merged_kernel(branches, large, seed as u64))
}

#[wasm_bindgen(js_name = toneSpectrogram)]
pub fn tone_spectrogram_js(freq_hz: f64, sample_rate: usize, seconds: f64, n_fft: usize, hop: usize, n_mels: usize) -> String {
    to_js(tone_spectrogram(freq_hz, sample_rate, seconds, n_fft, hop, n_mels))
}
