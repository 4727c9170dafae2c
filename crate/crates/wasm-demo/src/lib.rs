//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export returns a JSON string so the page needs no generated types.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use speechalign::alignment::{alignment_dump, AlignedPair};
use speechalign::features::{LogMel, LogMelConfig};
use speechalign::masking::plan_masks;
use speechalign::numerics::Tensor2D;

fn text<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Temporal and channel mask plan as JSON.
#[wasm_bindgen]
pub fn mask_plan(frames: usize, channels: usize, p_time: f64, p_channel: f64, seed: u64) -> Result<String, String> {
    let plan = plan_masks(frames, channels, p_time, p_channel, seed).map_err(text)?;
    serde_json::to_string(&plan).map_err(text)
}

/// Log-Mel features of a pure tone at 16 kHz.
#[wasm_bindgen]
pub fn tone_log_mel(freq_hz: f64, seconds: f64, n_mels: usize) -> Result<String, String> {
    let cfg = LogMelConfig { n_mels, ..LogMelConfig::default() };
    let rate = cfg.sample_rate;
    let len = (seconds * f64::from(rate)).round().max(0.0) as usize;
    let samples: Vec<f32> = (0..len)
        .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / f64::from(rate)).sin()) as f32)
        .collect();
    let mel = LogMel::new(cfg).map_err(text)?;
    let f = mel.compute(&samples, rate, "tone", "demo").map_err(text)?;
    let mean_per_band: Vec<f64> = (0..f.channels())
        .map(|c| (0..f.frames()).map(|t| f64::from(f.get(t, c))).sum::<f64>() / f.frames() as f64)
        .collect();
    let peak_band = mean_per_band
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    serde_json::to_string(&json!({
        "frames": f.frames(),
        "channels": f.channels(),
        "values": f.values(),
        "centers_hz": mel.center_frequencies(),
        "peak_band": peak_band,
    }))
    .map_err(text)
}

/// Token alignment of random frames against tokens that are noisy copies of
/// evenly spaced frames. `noise` scales the perturbation.
#[wasm_bindgen]
pub fn token_alignment(frames: usize, tokens: usize, hidden: usize, noise: f64, seed: u64) -> Result<String, String> {
    if frames == 0 || tokens == 0 || hidden == 0 {
        return Err("frames, tokens and hidden must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut speech = vec![vec![0.0; hidden]];
    speech.extend((0..frames).map(|_| (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()));
    let mut text_rows = vec![vec![0.0; hidden]];
    let mut source = Vec::with_capacity(tokens);
    for j in 0..tokens {
        let i = j * frames / tokens;
        source.push(i);
        text_rows.push(speech[i + 1].iter().map(|x| x + noise * rng.random_range(-1.0..1.0)).collect());
    }
    let pair = AlignedPair {
        pair_id: format!("demo-{seed}"),
        speech: Tensor2D::from_rows(&speech).map_err(text)?,
        text: Tensor2D::from_rows(&text_rows).map_err(text)?,
        idf: vec![1.0; tokens],
    };
    let dump = alignment_dump(&pair, false).map_err(text)?;
    serde_json::to_string(&json!({ "dump": dump, "source_frames": source })).map_err(text)
}
