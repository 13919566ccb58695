//! Synthetic two-class speech-like corpus.
//!
//! Each clip is a glottal pulse train shaped by three formant resonators and
//! gated into syllables. The bonafide-like class has a wandering F0, cycle
//! jitter, shimmer and pitch-synchronous aspiration noise; the deepfake-like
//! class is flat, regular and clean.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_protocol, FeatureError, Label, ProtocolEntry};
use crate::audio_io::{write_wav, AudioBuffer};

const FORMANTS: [(f64, f64); 3] = [(700.0, 80.0), (1200.0, 100.0), (2600.0, 150.0)];
const SINC_HALF_WIDTH: isize = 8;
const NOISE_FLOOR: f64 = 3e-4;
const PEAK: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub sample_rate: u32,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub splits: Vec<SplitSpec>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self::with_counts(200, 50, 50)
    }
}

impl CorpusSpec {
    pub fn with_counts(train: usize, val: usize, eval: usize) -> Self {
        let split = |name: &str, per_class| SplitSpec {
            name: name.to_string(),
            per_class,
        };
        Self {
            sample_rate: 16000,
            min_duration_s: 1.0,
            max_duration_s: 1.6,
            splits: vec![split("train", train), split("val", val), split("eval", eval)],
        }
    }
}

/// Per-class generator settings.
#[derive(Debug, Clone, Copy)]
struct Voice {
    f0_walk: f64,
    period_jitter: f64,
    shimmer: f64,
    aspiration: f64,
}

const BONAFIDE: Voice = Voice {
    f0_walk: 0.01,
    period_jitter: 0.008,
    shimmer: 0.04,
    aspiration: 0.08,
};

const DEEPFAKE: Voice = Voice {
    f0_walk: 0.001,
    period_jitter: 0.0005,
    shimmer: 0.003,
    aspiration: 0.0,
};

/// Adds a band-limited unit impulse at fractional sample position `pos`.
fn add_impulse(out: &mut [f64], pos: f64, amp: f64) {
    let c = pos.floor() as isize;
    for k in (c - SINC_HALF_WIDTH)..=(c + SINC_HALF_WIDTH + 1) {
        if k < 0 || k as usize >= out.len() {
            continue;
        }
        let x = k as f64 - pos;
        let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
        let w = 0.5 + 0.5 * (PI * x / (SINC_HALF_WIDTH as f64 + 1.0)).cos();
        out[k as usize] += amp * sinc * w;
    }
}

fn resonate(x: &[f64], freq: f64, bw: f64, sr: f64) -> Vec<f64> {
    let r = (-PI * bw / sr).exp();
    let a1 = -2.0 * r * (2.0 * PI * freq / sr).cos();
    let a2 = r * r;
    let mut y = vec![0.0; x.len()];
    for i in 0..x.len() {
        let y1 = if i >= 1 { y[i - 1] } else { 0.0 };
        let y2 = if i >= 2 { y[i - 2] } else { 0.0 };
        y[i] = (1.0 - r) * x[i] - a1 * y1 - a2 * y2;
    }
    y
}

/// One clip of the given class; `label` must be bonafide or deepfake.
pub fn synthesize(label: Label, duration_s: f64, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let voice = match label {
        Label::Deepfake => DEEPFAKE,
        _ => BONAFIDE,
    };
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut env = vec![0.0; n];
    let mut exc = vec![0.0; n];

    let ramp = (0.04 * sr) as usize;
    let tail = (0.25 * sr) as usize;
    let mut f0: f64 = rng.random_range(100.0..200.0);
    let mut t = (0.05 * sr) as usize;
    while t + tail < n {
        let len = ((rng.random_range(0.2..0.45) * sr) as usize).min(n - t - (0.03 * sr) as usize);
        for (i, e) in env[t..t + len].iter_mut().enumerate() {
            let edge = i.min(len - 1 - i);
            *e = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
        }
        let mut pos = t as f64;
        while pos < (t + len) as f64 {
            f0 = (f0 * (voice.f0_walk * std_normal.sample(rng)).exp()).clamp(85.0, 280.0);
            let period = sr / f0 * (1.0 + voice.period_jitter * std_normal.sample(rng));
            let amp = 1.0 + voice.shimmer * std_normal.sample(rng);
            add_impulse(&mut exc, pos, amp);
            if voice.aspiration > 0.0 {
                let start = pos as usize;
                let stop = (start + (period * 0.4) as usize).min(n);
                for v in &mut exc[start..stop] {
                    *v += voice.aspiration * std_normal.sample(rng);
                }
            }
            pos += period;
        }
        t += len + (rng.random_range(0.05..0.15) * sr) as usize;
    }

    let mut y = exc;
    for (freq, bw) in FORMANTS {
        y = resonate(&y, freq, bw, sr);
    }
    for (v, e) in y.iter_mut().zip(&env) {
        *v *= e;
    }
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut y {
            *v *= PEAK / peak;
        }
    }
    for v in &mut y {
        *v = (*v + NOISE_FLOOR * std_normal.sample(rng)).clamp(-1.0, 1.0);
    }
    y
}

#[derive(Debug, Clone)]
pub struct GeneratedSplit {
    pub name: String,
    pub protocol: PathBuf,
    pub entries: Vec<ProtocolEntry>,
}

fn protocol_file_name(split: &str) -> String {
    format!("protocol_{split}.txt")
}

/// Writes `<out>/<split>/<id>.wav` and `<out>/protocol_<split>.txt` for every split.
/// Protocol paths are relative to `out_dir`.
pub fn generate_corpus(
    spec: &CorpusSpec,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<GeneratedSplit>, FeatureError> {
    let out_dir = out_dir.as_ref();
    if spec.sample_rate == 0 || !(spec.min_duration_s > 0.3 && spec.max_duration_s >= spec.min_duration_s) {
        return Err(FeatureError::Io(io::Error::new(
            io::ErrorKind::InvalidInput,
            "corpus spec needs a positive sample rate and durations of at least 0.3 s",
        )));
    }
    let mut out = Vec::new();
    for (si, split) in spec.splits.iter().enumerate() {
        let dir = out_dir.join(&split.name);
        fs::create_dir_all(&dir)?;
        let mut entries = Vec::new();
        for (ci, label) in [Label::Bonafide, Label::Deepfake].into_iter().enumerate() {
            for idx in 0..split.per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((si as u64) << 32) | ((ci as u64) << 31) | idx as u64);
                let dur = if spec.max_duration_s > spec.min_duration_s {
                    rng.random_range(spec.min_duration_s..spec.max_duration_s)
                } else {
                    spec.min_duration_s
                };
                let samples = synthesize(label, dur, spec.sample_rate, &mut rng);
                let tag = if label == Label::Bonafide { "bona" } else { "spoof" };
                let id = format!("{}_{tag}_{idx:04}", split.name);
                let rel = PathBuf::from(&split.name).join(format!("{id}.wav"));
                let buffer = AudioBuffer::new(samples, spec.sample_rate, id.clone());
                write_wav(out_dir.join(&rel), &buffer)?;
                entries.push(ProtocolEntry {
                    utterance_id: id,
                    path: rel,
                    label,
                });
            }
        }
        let protocol = out_dir.join(protocol_file_name(&split.name));
        write_protocol(&protocol, &entries)?;
        out.push(GeneratedSplit {
            name: split.name.clone(),
            protocol,
            entries,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{analyze, load_protocol};
    use crate::pitch::PitchParams;
    use crate::voice_quality::jitter_over_runs;

    fn small(per_class: usize) -> CorpusSpec {
        CorpusSpec {
            splits: vec![SplitSpec {
                name: "s".into(),
                per_class,
            }],
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn counts_and_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate_corpus(&small(10), 3, dir.path()).unwrap();
        let entries = load_protocol(&out[0].protocol).unwrap();
        assert_eq!(entries.len(), 20);
        assert_eq!(fs::read_dir(dir.path().join("s")).unwrap().count(), 20);
        assert_eq!(entries.iter().filter(|e| e.label == Label::Deepfake).count(), 10);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_corpus(&small(2), 9, a.path()).unwrap();
        generate_corpus(&small(2), 9, b.path()).unwrap();
        for name in ["s/s_bona_0001.wav", "s/s_spoof_0000.wav", "protocol_s.txt"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn samples_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = synthesize(Label::Bonafide, 1.2, 16000, &mut rng);
        assert_eq!(y.len(), 19200);
        assert!(y.iter().all(|v| v.abs() <= 1.0));
        let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - PEAK).abs() < 0.01);
    }

    #[test]
    fn bonafide_jitter_exceeds_deepfake() {
        let params = PitchParams::default();
        let mean_jitter = |label| {
            let mut total = 0.0;
            for s in 0..6 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
                let b = AudioBuffer::new(synthesize(label, 1.3, 16000, &mut rng), 16000, "x");
                total += jitter_over_runs(&analyze(&b, &params).unwrap().runs).unwrap();
            }
            total / 6.0
        };
        let bona = mean_jitter(Label::Bonafide);
        let fake = mean_jitter(Label::Deepfake);
        assert!(bona > 2.0 * fake, "bonafide {bona} deepfake {fake}");
    }
}
