//! Browser demo over the toy testbed: draw a normal, stripe or
//! pixel-shuffled stripe image, score it with the closed-form likelihood
//! and typicality, and compute an AUROC from two pasted score lists.
//!
//! The plain functions are what the tests exercise; the `#[wasm_bindgen]`
//! wrappers only convert errors to JS strings.

use favae::evalkit::auroc;
use favae::scoring::typicality_score;
use favae::toy::{sample_anomaly, sample_normal, shuffle_pixels, AnalyticVae, ToySpec};
use favae::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Largest side the page offers; keeps the likelihood cheap.
pub const MAX_SIDE: usize = 128;

fn spec(side: usize, sigma_e: f64) -> Result<ToySpec, String> {
    if side == 0 || side > MAX_SIDE {
        return Err(format!("side must be in 1..={MAX_SIDE}"));
    }
    let s = ToySpec::paper().with_side(side).with_sigma_e(sigma_e);
    s.validate().map_err(|e| e.to_string())?;
    Ok(s)
}

/// One raw toy image, row-major. `kind` is `normal`, `stripe` or `shuffled`.
pub fn sample(kind: &str, side: usize, sigma_e: f64, seed: u64) -> Result<Vec<f64>, String> {
    let s = spec(side, sigma_e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = match kind {
        "normal" => sample_normal(&s, 1, &mut rng),
        "stripe" => sample_anomaly(&s, 1, &mut rng),
        "shuffled" => {
            let a = sample_anomaly(&s, 1, &mut rng);
            shuffle_pixels(&a, &mut rng)
        }
        _ => return Err(format!("unknown kind {kind:?}")),
    };
    Ok(t.into_data())
}

/// `[log-likelihood, typicality]` of a raw image under the analytic model.
pub fn scores(pixels: &[f64], side: usize) -> Result<Vec<f64>, String> {
    if pixels.len() != side * side {
        return Err(format!("{} pixels for a {side}x{side} image", pixels.len()));
    }
    let vae = AnalyticVae::new(&spec(side, 0.0)?);
    let ll = vae.loglik(pixels).map_err(|e| e.to_string())?;
    let typ = typicality_score(pixels, &vae).map_err(|e| e.to_string())?;
    Ok(vec![ll, typ])
}

/// RGBA bytes of a raw image, stretched to its own range.
pub fn to_rgba(pixels: &[f64]) -> Vec<u8> {
    let lo = pixels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    pixels
        .iter()
        .flat_map(|&v| {
            let g = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// Numbers separated by commas, whitespace or newlines.
pub fn parse_list(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

/// AUROC of anomalous scores against normal ones; higher means anomalous.
pub fn auroc_text(anomalous: &str, normal: &str) -> Result<f64, String> {
    let (a, n) = (parse_list(anomalous)?, parse_list(normal)?);
    auroc(&a, &n).map_err(|e: Error| e.to_string())
}

#[wasm_bindgen(js_name = sample)]
pub fn js_sample(kind: &str, side: usize, sigma_e: f64, seed: u32) -> Result<Vec<f64>, JsValue> {
    sample(kind, side, sigma_e, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = scores)]
pub fn js_scores(pixels: &[f64], side: usize) -> Result<Vec<f64>, JsValue> {
    scores(pixels, side).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = toRgba)]
pub fn js_to_rgba(pixels: &[f64]) -> Vec<u8> {
    to_rgba(pixels)
}

#[wasm_bindgen(js_name = auroc)]
pub fn js_auroc(anomalous: &str, normal: &str) -> Result<f64, JsValue> {
    auroc_text(anomalous, normal).map_err(|e| JsValue::from_str(&e))
}
