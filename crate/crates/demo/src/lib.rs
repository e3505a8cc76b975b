//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string. The plain functions in [`views`] do the
//! work and are what the native tests call; the `#[wasm_bindgen]` wrappers only
//! convert errors.

use wasm_bindgen::prelude::*;

pub mod views {
    use mts_core::augment::{apply_pipeline, sample_rng, AugmentationPolicy};
    use mts_core::dataset::{synth_longrange, CHANNELS, PULSE_CHANNEL, PULSE_WIDTH};
    use mts_core::metrics;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use serde_json::{json, Value};

    /// Smooth, channel-distinct test signal so segment edits are easy to see.
    fn preview_signal(rows: usize, phase: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, CHANNELS), |(t, c)| {
            let period = 40.0 + 7.0 * c as f64;
            (t as f64 / period + phase + c as f64).sin() + 0.3 * (t as f64 / (3.0 * period) - phase).cos()
        })
    }

    fn channel_major(x: &Array2<f64>) -> Vec<Vec<f64>> {
        x.columns().into_iter().map(|c| c.to_vec()).collect()
    }

    /// One pipeline invocation on a fixed flight and donor.
    pub fn augment_preview(seed: u64, draw: usize, p_apply: f64, rows: usize) -> Result<Value, String> {
        let policy = AugmentationPolicy {
            p_apply,
            ..AugmentationPolicy::default()
        };
        policy.validate().map_err(|e| e.to_string())?;
        if rows == 0 {
            return Err("rows must be positive".into());
        }
        let x = preview_signal(rows, 0.0);
        let donor = preview_signal(rows, 2.1).mapv(|v| -0.8 * v);
        let mut rng = sample_rng(seed, "preview", 0, draw);
        let (y, record) = apply_pipeline(x.view(), |_| donor.view(), &policy, &mut rng).map_err(|e| e.to_string())?;
        Ok(json!({
            "rows": rows,
            "channels": CHANNELS,
            "original": channel_major(&x),
            "donor": channel_major(&donor),
            "augmented": channel_major(&y),
            "record": record,
        }))
    }

    fn curves(scores: &[f64], labels: &[u8]) -> Result<Value, String> {
        let e = |e: metrics::MetricError| e.to_string();
        Ok(json!({
            "n": scores.len(),
            "positives": labels.iter().filter(|&&l| l == 1).count(),
            "roc_auc": metrics::roc_auc(scores, labels).map_err(e)?,
            "pr_auc": metrics::pr_auc(scores, labels).map_err(e)?,
            "roc": metrics::roc_curve(scores, labels).map_err(e)?,
            "pr": metrics::pr_curve(scores, labels).map_err(e)?,
        }))
    }

    /// Scores from two unit Gaussians whose means differ by `separation`.
    pub fn synthetic_curves(n: usize, separation: f64, seed: u64) -> Result<Value, String> {
        if n < 2 {
            return Err("need at least two scores".into());
        }
        let normal = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| normal.sample(&mut rng) + separation * f64::from(l))
            .collect();
        curves(&scores, &labels)
    }

    /// Curves for pasted `score,label` lines; blank lines and a header are skipped.
    pub fn curves_from_text(text: &str) -> Result<Value, String> {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',').map(str::trim);
            let (s, l) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
            match (s.parse::<f64>(), l.parse::<u8>()) {
                (Ok(s), Ok(l @ (0 | 1))) => {
                    scores.push(s);
                    labels.push(l);
                }
                _ if i == 0 => continue,
                _ => return Err(format!("line {}: expected `score,label` with label 0 or 1", i + 1)),
            }
        }
        curves(&scores, &labels)
    }

    /// Flight `index` of the synthetic set, with a few distractor channels.
    pub fn longrange_flight(seed: u64, length: usize, gap: usize, index: usize) -> Result<Value, String> {
        let n = (index + 1).next_multiple_of(2);
        let set = synth_longrange(n, length, gap, seed).map_err(|e| e.to_string())?;
        let f = &set[index];
        let v = &f.series.values;
        let distractors: Vec<Vec<f64>> = (1..4).map(|c| v.column(c).to_vec()).collect();
        Ok(json!({
            "flight_id": f.series.flight_id,
            "label": f.series.label,
            "markers": f.markers,
            "pulse_width": PULSE_WIDTH,
            "gap": f.markers[1] - f.markers[0],
            "pulse": v.column(PULSE_CHANNEL).to_vec(),
            "distractors": distractors,
        }))
    }
}

fn to_js(r: Result<serde_json::Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn augment_preview(seed: u32, draw: u32, p_apply: f64, rows: u32) -> Result<String, JsError> {
    to_js(views::augment_preview(seed.into(), draw as usize, p_apply, rows as usize))
}

#[wasm_bindgen]
pub fn synthetic_curves(n: u32, separation: f64, seed: u32) -> Result<String, JsError> {
    to_js(views::synthetic_curves(n as usize, separation, seed.into()))
}

#[wasm_bindgen]
pub fn curves_from_text(text: &str) -> Result<String, JsError> {
    to_js(views::curves_from_text(text))
}

#[wasm_bindgen]
pub fn longrange_flight(seed: u32, length: u32, gap: u32, index: u32) -> Result<String, JsError> {
    to_js(views::longrange_flight(seed.into(), length as usize, gap as usize, index as usize))
}
