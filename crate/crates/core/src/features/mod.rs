//! From audio to model input: windowed prosody vectors, min-max scaling,
//! padded batches, protocol files and the per-utterance feature cache.

pub mod corpus;

use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{AudioBuffer, AudioError};
use crate::pitch::{track_pitch, PitchError, PitchParams, PitchTrack};
use crate::voice_quality::{
    extract_pulses, hnr_track, jitter_over_runs, periods, shimmer_over_runs, HarmonicityTrack,
    PeriodRun, PointProcess, VoiceQualityError, DEFAULT_MAX_PERIOD_FACTOR,
};

pub const N_FEATURES: usize = 6;
pub const WINDOW_SIZES_MS: [u32; 4] = [50, 100, 200, 500];
pub const DEFAULT_WINDOW_MS: u32 = 100;
pub const FEATURE_CSV_HEADER: &str = "window_index,mean_f0,std_f0,jitter,shimmer,mean_hnr,std_hnr";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("window size {0} ms not in {{50, 100, 200, 500}}")]
    InvalidWindow(u32),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("scaler has not been fitted")]
    NotFitted,
    #[error("cannot batch sequences with different window sizes ({0} vs {1} ms)")]
    MixedWindowSizes(u32, u32),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{path}:{line}: {message}")]
    ParseError {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown label '{label}'")]
    UnknownLabel {
        path: String,
        line: usize,
        label: String,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Pitch(#[from] PitchError),
    #[error(transparent)]
    VoiceQuality(#[from] VoiceQualityError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Deepfake,
    Unknown,
}

impl Label {
    /// Binary target with deepfake as the positive class.
    pub fn target(self) -> Option<f64> {
        match self {
            Label::Bonafide => Some(0.0),
            Label::Deepfake => Some(1.0),
            Label::Unknown => None,
        }
    }

    /// Protocol-file spelling.
    pub fn protocol_name(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Deepfake => "spoof",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Bonafide => "bonafide",
            Label::Deepfake => "deepfake",
            Label::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProsodyWindowVector {
    pub mean_f0: f64,
    pub std_f0: f64,
    pub jitter_local: f64,
    pub shimmer_local: f64,
    pub mean_hnr: f64,
    pub std_hnr: f64,
}

impl ProsodyWindowVector {
    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [
            self.mean_f0,
            self.std_f0,
            self.jitter_local,
            self.shimmer_local,
            self.mean_hnr,
            self.std_hnr,
        ]
    }

    pub fn from_array(a: [f64; N_FEATURES]) -> Self {
        Self {
            mean_f0: a[0],
            std_f0: a[1],
            jitter_local: a[2],
            shimmer_local: a[3],
            mean_hnr: a[4],
            std_hnr: a[5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub label: Label,
    pub windows: Vec<ProsodyWindowVector>,
    pub window_ms: u32,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

pub fn check_window(window_ms: u32) -> Result<(), FeatureError> {
    if WINDOW_SIZES_MS.contains(&window_ms) {
        Ok(())
    } else {
        Err(FeatureError::InvalidWindow(window_ms))
    }
}

/// Everything measured once per file before windowing.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub n_samples: usize,
    pub sample_rate: u32,
    pub pitch: PitchTrack,
    pub pulses: PointProcess,
    pub runs: Vec<PeriodRun>,
    pub harmonicity: HarmonicityTrack,
}

pub fn analyze(buffer: &AudioBuffer, params: &PitchParams) -> Result<Analysis, FeatureError> {
    buffer.validate()?;
    let pitch = track_pitch(buffer, params)?;
    let pulses = extract_pulses(buffer, &pitch);
    let runs = periods(&pulses, params.min_f0, params.max_f0, DEFAULT_MAX_PERIOD_FACTOR);
    let harmonicity = hnr_track(buffer, params)?;
    Ok(Analysis {
        n_samples: buffer.len(),
        sample_rate: buffer.sample_rate,
        pitch,
        pulses,
        runs,
        harmonicity,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    match v.len() {
        0 => (0.0, 0.0),
        1 => (v[0], 0.0),
        n => {
            let m = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            (m, var.sqrt())
        }
    }
}

impl Analysis {
    pub fn window_count(&self, window_ms: u32) -> usize {
        let per_window = self.sample_rate as usize * window_ms as usize;
        (self.n_samples * 1000).div_ceil(per_window).max(1)
    }

    fn window_of(&self, t: f64, window_ms: u32, n_windows: usize) -> usize {
        let w = (t * 1000.0 / window_ms as f64).floor();
        (w.max(0.0) as usize).min(n_windows - 1)
    }

    /// Splits every period run at window boundaries; a period belongs to a
    /// window only when both of its pulses do.
    fn runs_per_window(&self, window_ms: u32, n_windows: usize) -> Vec<Vec<PeriodRun>> {
        let mut out: Vec<Vec<PeriodRun>> = vec![Vec::new(); n_windows];
        let times = &self.pulses.pulse_times;
        for run in &self.runs {
            let mut current: Option<(usize, PeriodRun)> = None;
            for (i, (&p, &a)) in run.periods.iter().zip(&run.amplitudes).enumerate() {
                let j = run.first_pulse + i;
                let w0 = self.window_of(times[j], window_ms, n_windows);
                let w1 = self.window_of(times[j + 1], window_ms, n_windows);
                if w0 != w1 {
                    if let Some((w, r)) = current.take() {
                        out[w].push(r);
                    }
                    continue;
                }
                match current.as_mut() {
                    Some((w, r)) if *w == w0 => {
                        r.periods.push(p);
                        r.amplitudes.push(a);
                    }
                    _ => {
                        if let Some((w, r)) = current.take() {
                            out[w].push(r);
                        }
                        current = Some((
                            w0,
                            PeriodRun {
                                first_pulse: j,
                                periods: vec![p],
                                amplitudes: vec![a],
                            },
                        ));
                    }
                }
            }
            if let Some((w, r)) = current {
                out[w].push(r);
            }
        }
        out
    }

    pub fn windows(&self, window_ms: u32) -> Vec<ProsodyWindowVector> {
        let n = self.window_count(window_ms);
        let mut f0s: Vec<Vec<f64>> = vec![Vec::new(); n];
        for (&t, &f) in self.pitch.frame_times.iter().zip(&self.pitch.f0) {
            if f > 0.0 {
                f0s[self.window_of(t, window_ms, n)].push(f);
            }
        }
        let mut hnrs: Vec<Vec<f64>> = vec![Vec::new(); n];
        for (&t, h) in self.harmonicity.frame_times.iter().zip(&self.harmonicity.hnr_db) {
            if let Some(h) = h {
                hnrs[self.window_of(t, window_ms, n)].push(*h);
            }
        }
        let runs = self.runs_per_window(window_ms, n);

        (0..n)
            .map(|w| {
                if f0s[w].is_empty() {
                    return ProsodyWindowVector::default();
                }
                let (mean_f0, std_f0) = mean_std(&f0s[w]);
                let (mean_hnr, std_hnr) = mean_std(&hnrs[w]);
                ProsodyWindowVector {
                    mean_f0,
                    std_f0,
                    jitter_local: jitter_over_runs(&runs[w]).unwrap_or(0.0),
                    shimmer_local: shimmer_over_runs(&runs[w]).unwrap_or(0.0),
                    mean_hnr,
                    std_hnr,
                }
            })
            .collect()
    }

    /// Number of the six whole-file statistics that would be undefined
    /// (no support, or a deviation over fewer than two values).
    pub fn undefined_statistics(&self) -> usize {
        let voiced = self.pitch.f0.iter().filter(|&&f| f > 0.0).count();
        let hnr = self.harmonicity.voiced_values().count();
        let mut undefined = 0;
        undefined += match voiced {
            0 => 2,
            1 => 1,
            _ => 0,
        };
        undefined += match hnr {
            0 => 2,
            1 => 1,
            _ => 0,
        };
        if jitter_over_runs(&self.runs).is_none() {
            undefined += 2;
        }
        undefined
    }

    /// Per-frame diagnostics as CSV `time,f0,hnr_db` (empty field when unvoiced).
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("time,f0,hnr_db\n");
        for (i, (&t, &f)) in self.pitch.frame_times.iter().zip(&self.pitch.f0).enumerate() {
            let h = self
                .harmonicity
                .hnr_db
                .get(i)
                .copied()
                .flatten()
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!("{t},{f},{h}\n"));
        }
        out
    }
}

/// Windowed prosody features for one utterance (label left as `Unknown`).
pub fn extract_features(
    buffer: &AudioBuffer,
    params: &PitchParams,
    window_ms: u32,
) -> Result<FeatureSequence, FeatureError> {
    check_window(window_ms)?;
    let analysis = analyze(buffer, params)?;
    Ok(FeatureSequence {
        utterance_id: buffer.source_id.clone(),
        label: Label::Unknown,
        windows: analysis.windows(window_ms),
        window_ms,
    })
}

/// Per-feature minimum and maximum over the training windows.
///
/// An unfitted scaler has empty vectors; JSON form is `{"mins": [..6], "maxs": [..6]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl ScalerParams {
    pub fn is_fitted(&self) -> bool {
        self.mins.len() == N_FEATURES && self.maxs.len() == N_FEATURES
    }

    pub fn scale_value(&self, feature: usize, x: f64) -> f64 {
        let (lo, hi) = (self.mins[feature], self.maxs[feature]);
        if hi == lo {
            return 0.0;
        }
        ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

pub fn fit_scaler(train: &[FeatureSequence]) -> Result<ScalerParams, FeatureError> {
    let mut mins = vec![f64::INFINITY; N_FEATURES];
    let mut maxs = vec![f64::NEG_INFINITY; N_FEATURES];
    let mut seen = false;
    for w in train.iter().flat_map(|s| &s.windows) {
        seen = true;
        for (k, v) in w.to_array().into_iter().enumerate() {
            mins[k] = mins[k].min(v);
            maxs[k] = maxs[k].max(v);
        }
    }
    if !seen {
        return Err(FeatureError::EmptyTrainingSet);
    }
    Ok(ScalerParams { mins, maxs })
}

pub fn apply_scaler(
    seq: &FeatureSequence,
    sp: &ScalerParams,
) -> Result<FeatureSequence, FeatureError> {
    if !sp.is_fitted() {
        return Err(FeatureError::NotFitted);
    }
    let windows = seq
        .windows
        .iter()
        .map(|w| {
            let a = w.to_array();
            ProsodyWindowVector::from_array(std::array::from_fn(|k| sp.scale_value(k, a[k])))
        })
        .collect();
    Ok(FeatureSequence {
        windows,
        ..seq.clone()
    })
}

/// Zero-padded batch `B x T_max x 6` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub data: Array3<f64>,
    pub mask: Array2<bool>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn max_len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.mask
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&m| m).count())
            .collect()
    }
}

pub fn pad_batch(seqs: &[FeatureSequence]) -> Result<Batch, FeatureError> {
    let first = seqs.first().ok_or(FeatureError::EmptyBatch)?;
    if let Some(s) = seqs.iter().find(|s| s.window_ms != first.window_ms) {
        return Err(FeatureError::MixedWindowSizes(first.window_ms, s.window_ms));
    }
    let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
    let mut data = Array3::zeros((seqs.len(), t_max, N_FEATURES));
    let mut mask = Array2::from_elem((seqs.len(), t_max), false);
    for (b, s) in seqs.iter().enumerate() {
        for (t, w) in s.windows.iter().enumerate() {
            for (k, v) in w.to_array().into_iter().enumerate() {
                data[[b, t, k]] = v;
            }
            mask[[b, t]] = true;
        }
    }
    Ok(Batch { data, mask })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolEntry {
    pub utterance_id: String,
    pub path: PathBuf,
    pub label: Label,
}

/// Parses `utterance_id relative_path label` lines; blank lines and `#` comments are skipped.
pub fn load_protocol(path: impl AsRef<Path>) -> Result<Vec<ProtocolEntry>, FeatureError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(FeatureError::ParseError {
                path: shown,
                line: i + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let label = match fields[2] {
            "bonafide" => Label::Bonafide,
            "spoof" => Label::Deepfake,
            other => {
                return Err(FeatureError::UnknownLabel {
                    path: shown,
                    line: i + 1,
                    label: other.to_string(),
                })
            }
        };
        entries.push(ProtocolEntry {
            utterance_id: fields[0].to_string(),
            path: PathBuf::from(fields[1]),
            label,
        });
    }
    Ok(entries)
}

pub fn write_protocol(path: impl AsRef<Path>, entries: &[ProtocolEntry]) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for e in entries {
        writeln!(
            f,
            "{} {} {}",
            e.utterance_id,
            e.path.display(),
            e.label.protocol_name()
        )?;
    }
    f.flush()
}

pub fn feature_csv(seq: &FeatureSequence) -> String {
    let mut out = String::from(FEATURE_CSV_HEADER);
    out.push('\n');
    for (i, w) in seq.windows.iter().enumerate() {
        let a = w.to_array();
        out.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            a[0], a[1], a[2], a[3], a[4], a[5]
        ));
    }
    out
}

pub fn write_feature_csv(path: impl AsRef<Path>, seq: &FeatureSequence) -> io::Result<()> {
    fs::write(path, feature_csv(seq))
}

pub fn read_feature_csv(
    path: impl AsRef<Path>,
    utterance_id: &str,
    label: Label,
    window_ms: u32,
) -> Result<FeatureSequence, FeatureError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == FEATURE_CSV_HEADER => {}
        _ => {
            return Err(FeatureError::ParseError {
                path: shown,
                line: 1,
                message: "missing feature CSV header".into(),
            })
        }
    }
    let mut windows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| FeatureError::ParseError {
            path: shown.clone(),
            line: i + 1,
            message,
        };
        let vals: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<_, _>>()?;
        if vals.len() != N_FEATURES {
            return Err(parse_err(format!("expected {N_FEATURES} values")));
        }
        windows.push(ProsodyWindowVector::from_array(std::array::from_fn(|k| vals[k])));
    }
    Ok(FeatureSequence {
        utterance_id: utterance_id.to_string(),
        label,
        windows,
        window_ms,
    })
}
