//! Autocorrelation pitch tracking with Viterbi path selection.
//!
//! Each analysis frame yields a short list of candidates: local maxima of the
//! window-normalized autocorrelation (voiced) plus one unvoiced candidate whose
//! strength grows as the frame gets quieter relative to the whole signal. The
//! final contour is the path through the candidate lattice that maximizes
//! summed strength minus octave-jump and voicing-transition costs.

pub mod search;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum PitchError {
    #[error("buffer too short: need at least {needed} samples, got {got}")]
    BufferTooShort { needed: usize, got: usize },
    #[error("empty candidate lattice")]
    EmptyInput,
    #[error("invalid pitch parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PitchParams {
    pub min_f0: f64,
    pub max_f0: f64,
    pub time_step: f64,
    pub silence_threshold: f64,
    pub voicing_threshold: f64,
    pub octave_cost: f64,
    pub octave_jump_cost: f64,
    pub voiced_unvoiced_cost: f64,
    pub max_candidates: usize,
}

impl Default for PitchParams {
    fn default() -> Self {
        Self {
            min_f0: 75.0,
            max_f0: 500.0,
            time_step: 0.01,
            silence_threshold: 0.03,
            voicing_threshold: 0.45,
            octave_cost: 0.01,
            octave_jump_cost: 0.35,
            voiced_unvoiced_cost: 0.14,
            max_candidates: 15,
        }
    }
}

impl PitchParams {
    pub fn validate(&self, sample_rate: u32) -> Result<(), PitchError> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.min_f0 > 0.0 && self.min_f0 < self.max_f0 && self.max_f0 <= nyquist) {
            return Err(PitchError::InvalidParams(format!(
                "need 0 < min_f0 ({}) < max_f0 ({}) <= {nyquist}",
                self.min_f0, self.max_f0
            )));
        }
        if !(self.time_step > 0.0) {
            return Err(PitchError::InvalidParams("time_step must be positive".into()));
        }
        if self.max_candidates == 0 {
            return Err(PitchError::InvalidParams("max_candidates must be >= 1".into()));
        }
        for (name, v) in [
            ("silence_threshold", self.silence_threshold),
            ("octave_cost", self.octave_cost),
            ("octave_jump_cost", self.octave_jump_cost),
            ("voiced_unvoiced_cost", self.voiced_unvoiced_cost),
            ("voicing_threshold", self.voicing_threshold),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(PitchError::InvalidParams(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// The four parameters tuned by [`search::parameter_search`], in canonical order.
    pub fn searched(&self) -> [f64; 4] {
        [
            self.silence_threshold,
            self.octave_cost,
            self.octave_jump_cost,
            self.voiced_unvoiced_cost,
        ]
    }

    pub fn with_searched(mut self, v: [f64; 4]) -> Self {
        self.silence_threshold = v[0];
        self.octave_cost = v[1];
        self.octave_jump_cost = v[2];
        self.voiced_unvoiced_cost = v[3];
        self
    }
}

/// `frequency == 0.0` encodes the unvoiced candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchCandidate {
    pub frequency: f64,
    pub strength: f64,
}

impl PitchCandidate {
    pub fn is_voiced(&self) -> bool {
        self.frequency > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub frame_times: Vec<f64>,
    pub frames: Vec<Vec<PitchCandidate>>,
    pub path: Vec<usize>,
    pub f0: Vec<f64>,
}

impl PitchTrack {
    pub fn voiced_fraction(&self) -> f64 {
        if self.f0.is_empty() {
            return 0.0;
        }
        self.f0.iter().filter(|&&f| f > 0.0).count() as f64 / self.f0.len() as f64
    }

    /// Pitch (Hz) at time `t`, linearly interpolated between voiced neighbors;
    /// 0 when the nearest frame is unvoiced.
    pub fn f0_at(&self, t: f64) -> f64 {
        if self.frame_times.is_empty() {
            return 0.0;
        }
        let idx = self.frame_times.partition_point(|&ft| ft < t);
        let nearest = if idx == 0 {
            0
        } else if idx >= self.frame_times.len() {
            self.frame_times.len() - 1
        } else if (self.frame_times[idx] - t) < (t - self.frame_times[idx - 1]) {
            idx
        } else {
            idx - 1
        };
        if self.f0[nearest] <= 0.0 {
            return 0.0;
        }
        if idx > 0 && idx < self.frame_times.len() {
            let (a, b) = (self.f0[idx - 1], self.f0[idx]);
            if a > 0.0 && b > 0.0 {
                let (ta, tb) = (self.frame_times[idx - 1], self.frame_times[idx]);
                let w = (t - ta) / (tb - ta);
                return a + w * (b - a);
            }
        }
        self.f0[nearest]
    }
}

/// Analysis frame layout shared by the pitch and harmonicity passes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrid {
    pub window_len: usize,
    pub starts: Vec<usize>,
    pub times: Vec<f64>,
}

/// Frames of `3 / min_f0` seconds, hopped by `time_step`, centered in the signal.
pub fn frame_grid(
    n_samples: usize,
    sample_rate: u32,
    params: &PitchParams,
) -> Result<FrameGrid, PitchError> {
    let sr = sample_rate as f64;
    let window_len = ((3.0 / params.min_f0) * sr).round() as usize;
    if n_samples < window_len || window_len < 3 {
        return Err(PitchError::BufferTooShort {
            needed: window_len.max(3),
            got: n_samples,
        });
    }
    let hop = ((params.time_step * sr).round() as usize).max(1);
    let n_frames = (n_samples - window_len) / hop + 1;
    let offset = (n_samples - window_len - (n_frames - 1) * hop) / 2;
    let starts: Vec<usize> = (0..n_frames).map(|i| offset + i * hop).collect();
    let times = starts
        .iter()
        .map(|&s| (s as f64 + window_len as f64 / 2.0) / sr)
        .collect();
    Ok(FrameGrid {
        window_len,
        starts,
        times,
    })
}

pub(crate) fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / len as f64).cos())
        .collect()
}

/// Autocorrelation by FFT; returns lags `0..len`.
struct Autocorrelator {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    size: usize,
    buf: Vec<Complex<f64>>,
}

impl Autocorrelator {
    fn new(window_len: usize) -> Self {
        let size = (2 * window_len).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            fwd: planner.plan_fft_forward(size),
            inv: planner.plan_fft_inverse(size),
            size,
            buf: vec![Complex::new(0.0, 0.0); size],
        }
    }

    fn compute(&mut self, x: &[f64]) -> Vec<f64> {
        self.buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &v) in self.buf.iter_mut().zip(x) {
            b.re = v;
        }
        self.fwd.process(&mut self.buf);
        for c in self.buf.iter_mut() {
            *c = Complex::new(c.norm_sqr(), 0.0);
        }
        self.inv.process(&mut self.buf);
        let scale = 1.0 / self.size as f64;
        self.buf[..x.len()].iter().map(|c| c.re * scale).collect()
    }
}

/// Parabolic refinement of a local maximum at `i`; returns (offset, peak value).
pub(crate) fn parabolic(prev: f64, mid: f64, next: f64) -> (f64, f64) {
    let dr = 0.5 * (next - prev);
    let d2r = 2.0 * mid - prev - next;
    if d2r <= 0.0 {
        return (0.0, mid);
    }
    let frac = (dr / d2r).clamp(-0.5, 0.5);
    (frac, mid + 0.5 * dr * frac)
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

pub(crate) fn global_peak(samples: &[f64]) -> f64 {
    let m = mean(samples);
    samples.iter().fold(0.0_f64, |acc, s| acc.max((s - m).abs()))
}

/// Candidate lists for every frame on the [`frame_grid`], strongest first.
pub fn frame_candidates(
    buffer: &AudioBuffer,
    params: &PitchParams,
) -> Result<(Vec<Vec<PitchCandidate>>, Vec<f64>), PitchError> {
    params.validate(buffer.sample_rate)?;
    let grid = frame_grid(buffer.len(), buffer.sample_rate, params)?;
    let sr = buffer.sample_rate as f64;
    let lw = grid.window_len;
    let window = hann(lw);
    let mut ac = Autocorrelator::new(lw);
    let r_window = ac.compute(&window);
    let r_window0 = r_window[0];

    let gpeak = global_peak(&buffer.samples);
    let lag_min = ((sr / params.max_f0).floor() as usize).max(1);
    let lag_max = ((sr / params.min_f0).ceil() as usize).min(lw - 2);
    let unvoiced_floor = params.voicing_threshold;

    let mut frames = Vec::with_capacity(grid.starts.len());
    let mut seg = vec![0.0; lw];
    for &start in &grid.starts {
        let raw = &buffer.samples[start..start + lw];
        let m = mean(raw);
        let local_peak = raw.iter().fold(0.0_f64, |acc, s| acc.max((s - m).abs()));

        let unvoiced_strength = if gpeak == 0.0 {
            unvoiced_floor + 2.0
        } else {
            let ratio = (local_peak / gpeak)
                / (params.silence_threshold / (1.0 + params.voicing_threshold));
            unvoiced_floor + (2.0 - ratio).max(0.0)
        };

        let mut voiced = Vec::new();
        if local_peak > 0.0 {
            for (s, (&v, &w)) in seg.iter_mut().zip(raw.iter().zip(&window)) {
                *s = (v - m) * w;
            }
            let ra = ac.compute(&seg);
            let ra0 = ra[0];
            if ra0 > 0.0 {
                let r: Vec<f64> = (0..=lag_max + 1)
                    .map(|k| (ra[k] / ra0) / (r_window[k] / r_window0))
                    .collect();
                for i in lag_min.max(1)..=lag_max {
                    if r[i] > r[i - 1] && r[i] >= r[i + 1] && r[i] > 0.5 * params.voicing_threshold
                    {
                        let (frac, mut peak) = parabolic(r[i - 1], r[i], r[i + 1]);
                        if peak > 1.0 {
                            peak = 1.0 / peak;
                        }
                        let lag = (i as f64 + frac) / sr;
                        let frequency = 1.0 / lag;
                        if frequency < params.min_f0 || frequency > params.max_f0 {
                            continue;
                        }
                        let strength = peak - params.octave_cost * (params.min_f0 * lag).log2();
                        voiced.push(PitchCandidate {
                            frequency,
                            strength,
                        });
                    }
                }
            }
        }

        voiced.sort_by(|a, b| b.strength.total_cmp(&a.strength));
        voiced.truncate(params.max_candidates - 1);
        voiced.push(PitchCandidate {
            frequency: 0.0,
            strength: unvoiced_strength,
        });
        voiced.sort_by(|a, b| b.strength.total_cmp(&a.strength));
        frames.push(voiced);
    }
    Ok((frames, grid.times))
}

/// Cost of moving from a candidate at `from` Hz to one at `to` Hz between adjacent frames.
pub fn transition_cost(from: f64, to: f64, params: &PitchParams, time_step: f64) -> f64 {
    let correction = 0.01 / time_step;
    match (from > 0.0, to > 0.0) {
        (false, false) => 0.0,
        (true, true) => params.octave_jump_cost * (from / to).log2().abs() * correction,
        _ => params.voiced_unvoiced_cost * correction,
    }
}

/// Total score of a path: strengths minus transition costs.
pub fn path_score(
    frames: &[Vec<PitchCandidate>],
    path: &[usize],
    params: &PitchParams,
    time_step: f64,
) -> f64 {
    let mut score = 0.0;
    for (t, &j) in path.iter().enumerate() {
        score += frames[t][j].strength;
        if t > 0 {
            score -= transition_cost(
                frames[t - 1][path[t - 1]].frequency,
                frames[t][j].frequency,
                params,
                time_step,
            );
        }
    }
    score
}

/// Maximum-score path through the candidate lattice.
///
/// Ties prefer the lower candidate index, both for predecessors and for the
/// final frame.
pub fn viterbi_path(
    frames: &[Vec<PitchCandidate>],
    params: &PitchParams,
    time_step: f64,
) -> Result<Vec<usize>, PitchError> {
    if frames.is_empty() || frames.iter().any(|f| f.is_empty()) {
        return Err(PitchError::EmptyInput);
    }
    let mut delta: Vec<f64> = frames[0].iter().map(|c| c.strength).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(frames.len());
    back.push(vec![0; frames[0].len()]);

    for t in 1..frames.len() {
        let prev = &frames[t - 1];
        let mut next_delta = Vec::with_capacity(frames[t].len());
        let mut ptr = Vec::with_capacity(frames[t].len());
        for cand in &frames[t] {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for (i, p) in prev.iter().enumerate() {
                let v = delta[i] - transition_cost(p.frequency, cand.frequency, params, time_step);
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            next_delta.push(best + cand.strength);
            ptr.push(best_i);
        }
        delta = next_delta;
        back.push(ptr);
    }

    let mut last = 0;
    for (j, &d) in delta.iter().enumerate() {
        if d > delta[last] {
            last = j;
        }
    }
    let mut path = vec![0; frames.len()];
    path[frames.len() - 1] = last;
    for t in (1..frames.len()).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok(path)
}

pub fn track_pitch(buffer: &AudioBuffer, params: &PitchParams) -> Result<PitchTrack, PitchError> {
    let (frames, frame_times) = frame_candidates(buffer, params)?;
    let path = viterbi_path(&frames, params, params.time_step)?;
    let f0 = path
        .iter()
        .zip(&frames)
        .map(|(&j, cands)| cands[j].frequency)
        .collect();
    Ok(PitchTrack {
        frame_times,
        frames,
        path,
        f0,
    })
}

#[cfg(test)]
pub(crate) mod test_signals {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use crate::audio_io::AudioBuffer;

    pub fn sine(freq: f64, amp: f64, secs: f64, sr: u32) -> AudioBuffer {
        let n = (secs * sr as f64) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        AudioBuffer::new(s, sr, "sine")
    }

    pub fn silence(secs: f64, sr: u32) -> AudioBuffer {
        AudioBuffer::new(vec![0.0; (secs * sr as f64) as usize], sr, "silence")
    }

    pub fn noise(amp: f64, secs: f64, sr: u32, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (secs * sr as f64) as usize;
        let d = Normal::new(0.0, amp / 3.0).unwrap();
        let s = (0..n).map(|_| d.sample(&mut rng).clamp(-amp, amp)).collect();
        AudioBuffer::new(s, sr, "noise")
    }
}
