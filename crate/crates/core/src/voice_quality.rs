//! Glottal pulses, local jitter, local shimmer and harmonics-to-noise ratio.

use thiserror::Error;

use crate::audio_io::AudioBuffer;
use crate::pitch::{self, frame_grid, parabolic, PitchError, PitchParams, PitchTrack};

/// Largest allowed ratio between neighboring periods inside one run.
pub const DEFAULT_MAX_PERIOD_FACTOR: f64 = 1.3;

/// Correlation below this marks a harmonicity frame as unvoiced.
pub const HNR_VOICING_THRESHOLD: f64 = 0.45;

const R_CLAMP: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum VoiceQualityError {
    #[error("need at least 2 periods, got {0}")]
    InsufficientPeriods(usize),
    #[error("frame too short: need {needed} samples, got {got}")]
    FrameTooShort { needed: usize, got: usize },
    #[error(transparent)]
    Pitch(#[from] PitchError),
}

/// Glottal pulse instants (seconds, strictly increasing) and their peak amplitudes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointProcess {
    pub pulse_times: Vec<f64>,
    pub pulse_amplitudes: Vec<f64>,
}

impl PointProcess {
    pub fn len(&self) -> usize {
        self.pulse_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pulse_times.is_empty()
    }
}

/// A maximal stretch of consecutive retained periods. `amplitudes[i]` is the
/// amplitude of the pulse that opens `periods[i]`; `first_pulse` indexes the
/// owning [`PointProcess`].
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodRun {
    pub first_pulse: usize,
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicityTrack {
    pub frame_times: Vec<f64>,
    /// `None` marks an unvoiced frame.
    pub hnr_db: Vec<Option<f64>>,
}

impl HarmonicityTrack {
    pub fn voiced_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.hnr_db.iter().filter_map(|v| *v)
    }
}

fn voiced_runs(f0: &[f64]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &f) in f0.iter().enumerate() {
        match (f > 0.0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, f0.len() - 1));
    }
    runs
}

/// Index of the largest `polarity * x` in `[lo, hi]` (inclusive).
fn signed_peak(x: &[f64], lo: usize, hi: usize, polarity: f64) -> Option<usize> {
    if lo > hi || hi >= x.len() {
        return None;
    }
    let mut best = lo;
    for i in lo..=hi {
        if polarity * x[i] > polarity * x[best] {
            best = i;
        }
    }
    Some(best)
}

fn refine_time(x: &[f64], i: usize, polarity: f64, sr: f64) -> f64 {
    if i == 0 || i + 1 >= x.len() {
        return i as f64 / sr;
    }
    let (frac, _) = parabolic(polarity * x[i - 1], polarity * x[i], polarity * x[i + 1]);
    (i as f64 + frac) / sr
}

/// Places one pulse per glottal cycle inside every voiced run of `track`.
///
/// The seed is the absolute peak within one period of the run's first frame;
/// its sign fixes the polarity for the whole run, so each subsequent pulse is
/// the same-polarity extremum in a window of `1.25 / f0` centered one local
/// period away from the previous pulse.
pub fn extract_pulses(buffer: &AudioBuffer, track: &PitchTrack) -> PointProcess {
    let x = &buffer.samples;
    let sr = buffer.sample_rate as f64;
    let duration = x.len() as f64 / sr;
    let hop = if track.frame_times.len() > 1 {
        track.frame_times[1] - track.frame_times[0]
    } else {
        0.01
    };
    let to_index = |t: f64| -> usize { ((t * sr).round().max(0.0) as usize).min(x.len() - 1) };

    let mut times = Vec::new();
    let mut amps = Vec::new();

    for (a, b) in voiced_runs(&track.f0) {
        let span_lo = (track.frame_times[a] - hop / 2.0).max(0.0);
        let span_hi = (track.frame_times[b] + hop / 2.0).min(duration);
        let f_seed = track.f0[a];
        let t_seed = track.frame_times[a];
        let lo = to_index((t_seed - 0.5 / f_seed).max(span_lo));
        let hi = to_index((t_seed + 0.5 / f_seed).min(span_hi));
        let Some(seed) = (lo..=hi).max_by(|&i, &j| x[i].abs().total_cmp(&x[j].abs()).then(j.cmp(&i)))
        else {
            continue;
        };
        if x[seed] == 0.0 {
            continue;
        }
        let polarity = x[seed].signum();
        let seed_t = refine_time(x, seed, polarity, sr);

        let local_f0 = |t: f64, fallback: f64| -> f64 {
            let f = track.f0_at(t);
            if f > 0.0 {
                f
            } else {
                fallback
            }
        };

        let mut run_t = vec![seed_t];
        let mut run_a = vec![x[seed].abs()];

        // Forward.
        let mut t = seed_t;
        let mut f = f_seed;
        loop {
            f = local_f0(t, f);
            let period = 1.0 / f;
            let lo_t = t + 0.375 * period;
            let hi_t = (t + 1.625 * period).min(duration);
            if t + period > span_hi || hi_t <= lo_t {
                break;
            }
            let (lo, hi) = ((lo_t * sr).ceil() as usize, ((hi_t * sr).floor() as usize).min(x.len() - 1));
            let Some(i) = signed_peak(x, lo, hi, polarity) else { break };
            if polarity * x[i] <= 0.0 {
                break;
            }
            let ti = refine_time(x, i, polarity, sr);
            if ti <= t {
                break;
            }
            run_t.push(ti);
            run_a.push(x[i].abs());
            t = ti;
        }

        // Backward.
        let mut back_t = Vec::new();
        let mut back_a = Vec::new();
        let mut t = seed_t;
        let mut f = f_seed;
        loop {
            f = local_f0(t, f);
            let period = 1.0 / f;
            let hi_t = t - 0.375 * period;
            let lo_t = (t - 1.625 * period).max(0.0);
            if t - period < span_lo || hi_t <= lo_t {
                break;
            }
            let (lo, hi) = ((lo_t * sr).ceil() as usize, (hi_t * sr).floor() as usize);
            let Some(i) = signed_peak(x, lo, hi, polarity) else { break };
            if polarity * x[i] <= 0.0 {
                break;
            }
            let ti = refine_time(x, i, polarity, sr);
            if ti >= t {
                break;
            }
            back_t.push(ti);
            back_a.push(x[i].abs());
            t = ti;
        }

        back_t.reverse();
        back_a.reverse();
        for (ti, ai) in back_t.into_iter().chain(run_t).zip(back_a.into_iter().chain(run_a)) {
            if times.last().is_none_or(|&last: &f64| ti > last) {
                times.push(ti);
                amps.push(ai);
            }
        }
    }

    PointProcess {
        pulse_times: times,
        pulse_amplitudes: amps,
    }
}

/// Splits the pulse train into runs of plausible periods.
///
/// A period is kept when it lies in `[1/max_f0, 1/min_f0]`; it continues the
/// current run only if the previous period was kept and their ratio is at
/// most `max_period_factor`.
pub fn periods(
    pp: &PointProcess,
    min_f0: f64,
    max_f0: f64,
    max_period_factor: f64,
) -> Vec<PeriodRun> {
    let (shortest, longest) = (1.0 / max_f0, 1.0 / min_f0);
    let mut runs: Vec<PeriodRun> = Vec::new();
    let mut current: Option<PeriodRun> = None;
    let mut prev: Option<f64> = None;

    for i in 0..pp.pulse_times.len().saturating_sub(1) {
        let p = pp.pulse_times[i + 1] - pp.pulse_times[i];
        if !(shortest..=longest).contains(&p) {
            runs.extend(current.take());
            prev = None;
            continue;
        }
        let continues = prev.is_some_and(|q| p.max(q) / p.min(q) <= max_period_factor);
        match current.as_mut() {
            Some(run) if continues => {
                run.periods.push(p);
                run.amplitudes.push(pp.pulse_amplitudes[i]);
            }
            _ => {
                runs.extend(current.take());
                current = Some(PeriodRun {
                    first_pulse: i,
                    periods: vec![p],
                    amplitudes: vec![pp.pulse_amplitudes[i]],
                });
            }
        }
        prev = Some(p);
    }
    runs.extend(current);
    runs
}

fn mean_abs_consecutive_diff(v: &[f64]) -> f64 {
    let n = v.len();
    let mut sum = 0.0;
    for i in 0..n - 1 {
        sum += (v[i] - v[i + 1]).abs();
    }
    (1.0 / (n - 1) as f64) * sum
}

fn plain_mean(v: &[f64]) -> f64 {
    let n = v.len();
    let mut sum = 0.0;
    for x in v {
        sum += x;
    }
    (1.0 / n as f64) * sum
}

/// Mean absolute difference between consecutive periods, in seconds.
pub fn jitter_local_absolute(periods: &[f64]) -> Result<f64, VoiceQualityError> {
    if periods.len() < 2 {
        return Err(VoiceQualityError::InsufficientPeriods(periods.len()));
    }
    Ok(mean_abs_consecutive_diff(periods))
}

/// Absolute local jitter relative to the mean period, in percent.
pub fn jitter_local(periods: &[f64]) -> Result<f64, VoiceQualityError> {
    let abs = jitter_local_absolute(periods)?;
    Ok(abs / plain_mean(periods) * 100.0)
}

/// Mean absolute difference of consecutive amplitudes relative to the mean amplitude, in percent.
pub fn shimmer_local(amplitudes: &[f64]) -> Result<f64, VoiceQualityError> {
    if amplitudes.len() < 2 {
        return Err(VoiceQualityError::InsufficientPeriods(amplitudes.len()));
    }
    Ok(mean_abs_consecutive_diff(amplitudes) / plain_mean(amplitudes) * 100.0)
}

/// Pools consecutive differences over several runs; differences never span two runs.
fn pooled_local(runs: &[&[f64]]) -> Option<f64> {
    let usable: Vec<&[f64]> = runs.iter().copied().filter(|r| r.len() >= 2).collect();
    if usable.is_empty() {
        return None;
    }
    let (mut diff_sum, mut pairs, mut sum, mut n) = (0.0, 0usize, 0.0, 0usize);
    for r in &usable {
        for w in r.windows(2) {
            diff_sum += (w[0] - w[1]).abs();
        }
        pairs += r.len() - 1;
        sum += r.iter().sum::<f64>();
        n += r.len();
    }
    let mean = sum / n as f64;
    if mean <= 0.0 {
        return None;
    }
    Some((diff_sum / pairs as f64) / mean * 100.0)
}

/// Local jitter (percent) over several period runs, or `None` without a usable pair.
pub fn jitter_over_runs(runs: &[PeriodRun]) -> Option<f64> {
    let v: Vec<&[f64]> = runs.iter().map(|r| r.periods.as_slice()).collect();
    pooled_local(&v)
}

/// Local shimmer (percent) over several period runs, or `None` without a usable pair.
pub fn shimmer_over_runs(runs: &[PeriodRun]) -> Option<f64> {
    let v: Vec<&[f64]> = runs.iter().map(|r| r.amplitudes.as_slice()).collect();
    pooled_local(&v)
}

/// `10 log10(r / (1 - r))`: periodic share `r` against the aperiodic remainder.
pub fn hnr_from_r(r: f64) -> f64 {
    10.0 * (r / (1.0 - r)).log10()
}

/// Minimum samples [`hnr_frame`] accepts for a given pitch floor.
pub fn hnr_frame_len(min_f0: f64, sample_rate: u32) -> usize {
    (2.0 * sample_rate as f64 / min_f0).ceil() as usize
}

/// Harmonics-to-noise ratio of one frame, `None` when unvoiced.
///
/// Uses the cross-correlation normalization (each lag normalized by the
/// energies of its own two overlapping segments), which stays meaningful with
/// a single period of lag support.
pub fn hnr_frame(
    frame: &[f64],
    min_f0: f64,
    max_f0: f64,
    sample_rate: u32,
) -> Result<Option<f64>, VoiceQualityError> {
    let needed = hnr_frame_len(min_f0, sample_rate);
    if frame.len() + 1 < needed {
        return Err(VoiceQualityError::FrameTooShort {
            needed,
            got: frame.len(),
        });
    }
    let sr = sample_rate as f64;
    let m = frame.iter().sum::<f64>() / frame.len() as f64;
    let x: Vec<f64> = frame.iter().map(|v| v - m).collect();
    if x.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let lag_min = ((sr / max_f0).floor() as usize).max(1);
    let lag_max = ((sr / min_f0).ceil() as usize).min(x.len() - 2);
    if lag_max <= lag_min {
        return Ok(None);
    }

    let r: Vec<f64> = (lag_min - 1..=lag_max + 1)
        .map(|lag| {
            let a = &x[..x.len() - lag];
            let b = &x[lag..];
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (p, q) in a.iter().zip(b) {
                ab += p * q;
                aa += p * p;
                bb += q * q;
            }
            if aa > 0.0 && bb > 0.0 {
                ab / (aa * bb).sqrt()
            } else {
                0.0
            }
        })
        .collect();

    let mut best: Option<f64> = None;
    for k in 1..r.len() - 1 {
        if r[k] > r[k - 1] && r[k] >= r[k + 1] {
            let (_, peak) = parabolic(r[k - 1], r[k], r[k + 1]);
            if best.is_none_or(|b| peak > b) {
                best = Some(peak);
            }
        }
    }
    let Some(r_max) = best else { return Ok(None) };
    if r_max < HNR_VOICING_THRESHOLD {
        return Ok(None);
    }
    Ok(Some(hnr_from_r(r_max.clamp(R_CLAMP, 1.0 - R_CLAMP))))
}

/// Harmonicity on the pitch frame grid.
pub fn hnr_track(
    buffer: &AudioBuffer,
    params: &PitchParams,
) -> Result<HarmonicityTrack, VoiceQualityError> {
    params.validate(buffer.sample_rate)?;
    let grid = frame_grid(buffer.len(), buffer.sample_rate, params)?;
    let len = hnr_frame_len(params.min_f0, buffer.sample_rate);
    let x = &buffer.samples;
    if x.len() < len {
        return Err(VoiceQualityError::FrameTooShort {
            needed: len,
            got: x.len(),
        });
    }
    let gpeak = pitch::global_peak(x);
    let mut hnr_db = Vec::with_capacity(grid.times.len());
    for &start in &grid.starts {
        let center = start + grid.window_len / 2;
        let lo = center.saturating_sub(len / 2).min(x.len() - len);
        let frame = &x[lo..lo + len];
        let m = frame.iter().sum::<f64>() / len as f64;
        let local_peak = frame.iter().fold(0.0_f64, |a, v| a.max((v - m).abs()));
        if gpeak == 0.0 || local_peak < params.silence_threshold * gpeak {
            hnr_db.push(None);
            continue;
        }
        hnr_db.push(hnr_frame(frame, params.min_f0, params.max_f0, buffer.sample_rate)?);
    }
    Ok(HarmonicityTrack {
        frame_times: grid.times,
        hnr_db,
    })
}
