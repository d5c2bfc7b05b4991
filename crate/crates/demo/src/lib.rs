//! Browser demo: a synthetic sequence viewer, a Gaussian entropy-coding
//! explorer, and the flexible-rate token layout. The plain functions are
//! usable natively; `#[wasm_bindgen]` wrappers expose them to the page.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use terracodec::coder::{cdf_from_gaussian, range_decode, range_encode, CdfTable};
use terracodec::dataio::SynthConfig;
use terracodec::flexrate::repack;
use wasm_bindgen::prelude::*;

pub const SIDE: usize = 64;
pub const FRAMES: usize = 6;
const BANDS: usize = 4;

/// One synthetic frame as RGBA bytes (`SIDE * SIDE * 4`), bands 2, 1, 0 as
/// red, green, blue. `clear` shows the cloud-free truth instead.
pub fn frame_rgba(seed: u64, cloud_prob: f64, frame: usize, clear: bool) -> Vec<u8> {
    let cfg = SynthConfig { h: SIDE, w: SIDE, c: BANDS, frames: FRAMES, cloud_prob, ..Default::default() };
    let s = cfg.generate(seed);
    let frame = frame.min(FRAMES - 1);
    let cube = if clear { &s.clear[frame] } else { &s.seq.frames[frame] };
    // A fixed stretch keeps brightness comparable across frames and seeds.
    let scale = |v: u16| (v as f64 / 6000.0 * 255.0).clamp(0.0, 255.0) as u8;
    let mut out = Vec::with_capacity(SIDE * SIDE * 4);
    for p in 0..SIDE * SIDE {
        for b in [2, 1, 0] {
            out.push(scale(cube.band(b)[p]));
        }
        out.push(255);
    }
    out
}

/// Cloud cover of each frame of the sequence.
pub fn cloud_fractions(seed: u64, cloud_prob: f64) -> Vec<f64> {
    let cfg = SynthConfig { h: SIDE, w: SIDE, c: BANDS, frames: FRAMES, cloud_prob, ..Default::default() };
    cfg.generate(seed).masks.iter().map(|m| m.data.iter().filter(|&&c| c).count() as f64 / m.data.len() as f64).collect()
}

#[derive(Debug, Serialize)]
pub struct CoderReport {
    pub lo: i32,
    pub probs: Vec<f64>,
    pub symbols: usize,
    pub ideal_bits: f64,
    pub actual_bits: usize,
    pub round_trip: bool,
}

/// Draws `n` symbols from a discretized Gaussian, range codes them under the
/// matching table, and decodes them again.
pub fn coder_report(mu: f64, sigma: f64, n: usize, seed: u64) -> Result<CoderReport, String> {
    let table = cdf_from_gaussian(mu, sigma).map_err(|e| e.to_string())?;
    let (lo, hi) = table.range();
    let probs: Vec<f64> = (lo..=hi).map(|v| (-table.bits(v)).exp2()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols: Vec<i32> = (0..n)
        .map(|_| {
            let mut u: f64 = rng.gen();
            for (i, p) in probs.iter().enumerate() {
                if u < *p {
                    return lo + i as i32;
                }
                u -= p;
            }
            hi
        })
        .collect();
    let tables: Vec<&CdfTable> = vec![&table; n];
    let bytes = range_encode(&symbols, &tables).map_err(|e| e.to_string())?;
    let back = range_decode(&bytes, &tables).map_err(|e| e.to_string())?;
    Ok(CoderReport {
        lo,
        probs,
        symbols: n,
        ideal_bits: symbols.iter().map(|&s| table.bits(s)).sum(),
        actual_bits: bytes.len() * 8,
        round_trip: back == symbols,
    })
}

#[derive(Debug, Serialize)]
pub struct TokenLayout {
    pub d_lat: usize,
    pub tokens: usize,
    pub channels_per_token: usize,
    /// Latent channels carried by each token.
    pub token_channels: Vec<Vec<usize>>,
    pub kept_channels: Vec<usize>,
    pub kept_fraction: f64,
}

/// Which latent channels survive when only the first `budget` tokens of a
/// 4x4 block are kept.
pub fn token_layout(d_lat: usize, budget: usize) -> Result<TokenLayout, String> {
    const TOKENS: usize = 16;
    let positions = 16;
    let block: Vec<usize> = (0..positions).flat_map(|_| 0..d_lat).collect();
    let r = repack(&block, positions, d_lat, TOKENS).map_err(|e| e.to_string())?;
    let budget = budget.min(TOKENS);
    let token_channels: Vec<Vec<usize>> = (0..TOKENS).map(|u| r.token(u)[..r.k].to_vec()).collect();
    let kept_channels: Vec<usize> = token_channels[..budget].concat();
    Ok(TokenLayout {
        d_lat,
        tokens: TOKENS,
        channels_per_token: r.k,
        kept_fraction: kept_channels.len() as f64 / d_lat as f64,
        token_channels,
        kept_channels,
    })
}

#[wasm_bindgen]
pub fn side() -> usize {
    SIDE
}

#[wasm_bindgen]
pub fn frames() -> usize {
    FRAMES
}

#[wasm_bindgen(js_name = frameRgba)]
pub fn frame_rgba_js(seed: u32, cloud_prob: f64, frame: usize, clear: bool) -> Vec<u8> {
    frame_rgba(seed as u64, cloud_prob, frame, clear)
}

#[wasm_bindgen(js_name = cloudFractions)]
pub fn cloud_fractions_js(seed: u32, cloud_prob: f64) -> Vec<f64> {
    cloud_fractions(seed as u64, cloud_prob)
}

#[wasm_bindgen(js_name = coderReport)]
pub fn coder_report_js(mu: f64, sigma: f64, n: usize, seed: u32) -> Result<String, JsValue> {
    let r = coder_report(mu, sigma, n, seed as u64).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&r).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = tokenLayout)]
pub fn token_layout_js(d_lat: usize, budget: usize) -> Result<String, JsValue> {
    let r = token_layout(d_lat, budget).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&r).map_err(|e| JsValue::from_str(&e.to_string()))
}
