//! WebAssembly bindings for the browser demo in `www/`: pitch tracking,
//! windowed prosody features and blind SNR on mono sample arrays.

use prosodet::adversary::wada;
use prosodet::audio_io::AudioBuffer;
use prosodet::features::corpus::synthesize;
use prosodet::features::{extract_features, Label};
use prosodet::pitch::{track_pitch, PitchParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn buffer(samples: &[f32], sample_rate: u32) -> AudioBuffer {
    AudioBuffer::new(samples.iter().map(|&s| s as f64).collect(), sample_rate, "input")
}

/// Frame-wise F0 in Hz (0 for unvoiced frames) at the default 10 ms step.
pub fn f0_track(samples: &[f32], sample_rate: u32) -> Result<Vec<f64>, String> {
    let t = track_pitch(&buffer(samples, sample_rate), &PitchParams::default()).map_err(|e| e.to_string())?;
    Ok(t.f0)
}

/// Per-window prosody vectors as a JSON array.
pub fn features_json(samples: &[f32], sample_rate: u32, window_ms: u32) -> Result<String, String> {
    let seq = extract_features(&buffer(samples, sample_rate), &PitchParams::default(), window_ms)
        .map_err(|e| e.to_string())?;
    serde_json::to_string(&seq.windows).map_err(|e| e.to_string())
}

pub fn snr_db(samples: &[f32]) -> Result<f64, String> {
    let x: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    wada::wada_snr(&x).map_err(|e| e.to_string())
}

pub fn demo_clip(deepfake: bool, seconds: f64, sample_rate: u32, seed: u64) -> Vec<f32> {
    let label = if deepfake { Label::Deepfake } else { Label::Bonafide };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synthesize(label, seconds, sample_rate, &mut rng).into_iter().map(|s| s as f32).collect()
}

#[wasm_bindgen(js_name = trackPitch)]
pub fn track_pitch_js(samples: &[f32], sample_rate: u32) -> Result<Vec<f64>, JsError> {
    f0_track(samples, sample_rate).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = prosodyFeatures)]
pub fn prosody_features_js(samples: &[f32], sample_rate: u32, window_ms: u32) -> Result<String, JsError> {
    features_json(samples, sample_rate, window_ms).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = wadaSnr)]
pub fn wada_snr_js(samples: &[f32]) -> Result<f64, JsError> {
    snr_db(samples).map_err(|e| JsError::new(&e))
}

/// Synthetic bonafide-like or deepfake-like clip, for trying the demo without a file.
#[wasm_bindgen(js_name = demoClip)]
pub fn demo_clip_js(deepfake: bool, seconds: f64, sample_rate: u32, seed: u32) -> Vec<f32> {
    demo_clip(deepfake, seconds, sample_rate, seed as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_tracks_near_its_frequency() {
        let x: Vec<f32> = (0..16000)
            .map(|i| (0.5 * (std::f64::consts::TAU * 220.0 * i as f64 / 16000.0).sin()) as f32)
            .collect();
        let f0 = f0_track(&x, 16000).unwrap();
        let voiced: Vec<f64> = f0.into_iter().filter(|&f| f > 0.0).collect();
        let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
        assert!((mean - 220.0).abs() < 2.2, "{mean}");
    }

    #[test]
    fn features_serialize_per_window() {
        let clip = demo_clip(false, 1.0, 16000, 3);
        let json = features_json(&clip, 16000, 100).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 10);
        assert!(v[0].get("jitter_local").is_some());
        assert!(features_json(&clip, 16000, 77).is_err());
    }

    #[test]
    fn snr_is_high_for_clean_clips_and_errors_on_silence() {
        let clip = demo_clip(true, 1.0, 16000, 4);
        assert!(snr_db(&clip).unwrap() > 20.0);
        assert!(snr_db(&[0.0; 100]).is_err());
    }
}
