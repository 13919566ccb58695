//! White-box gradient attacks on a raw-waveform surrogate, and their transfer
//! to the gradient-free prosody pipeline.

pub mod surrogate;
pub mod wada;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio_io::{AudioBuffer, AudioError};
use crate::features::{FeatureError, Label};
use crate::neural::{predict_file, Model, ModelBundle, NeuralError};

pub use surrogate::{
    accuracy, default_train_config, train_surrogate, Surrogate, SurrogateConfig, SurrogateReport,
};
pub use wada::wada_snr;

pub const DEFAULT_EPSILONS: [f64; 5] = [0.001, 0.0015, 0.002, 0.0025, 0.005];
pub const ROBUSTNESS_CSV_HEADER: &str =
    "epsilon,n,surrogate_acc,prosody_acc,mean_steps,success_rate,mean_wada_snr_db";

#[derive(Debug, thiserror::Error)]
pub enum AdversaryError {
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("waveform of {len} samples is shorter than the surrogate minimum of {min}")]
    TooShort { len: usize, min: usize },
    #[error("surrogate has not been trained")]
    NotTrained,
    #[error("input has no samples above the silence floor")]
    SilentInput,
    #[error("no data")]
    EmptyData,
    #[error("clip has no bonafide/deepfake label")]
    Unlabeled,
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub max_steps: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.005,
            alpha: 0.001,
            max_steps: 100,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AdversaryError> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(AdversaryError::InvalidConfig("epsilon must be in [0, 1)".into()));
        }
        if self.epsilon > 0.0 && !(self.alpha > 0.0 && self.alpha <= self.epsilon) {
            return Err(AdversaryError::InvalidConfig("alpha must be in (0, epsilon]".into()));
        }
        if self.max_steps == 0 {
            return Err(AdversaryError::InvalidConfig("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: Vec<f64>,
    /// Iterations used; `max_steps` when the attack failed.
    pub steps: usize,
    pub success: bool,
    pub original_score: f64,
    pub final_score: f64,
    /// Largest absolute deviation from the original samples.
    pub linf: f64,
    /// `None` when the adversarial clip is silent.
    pub wada_snr_db: Option<f64>,
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

fn finish(x: &[f64], adversarial: Vec<f64>, steps: usize, success: bool, original_score: f64, final_score: f64) -> AttackOutcome {
    AttackOutcome {
        linf: linf(&adversarial, x),
        wada_snr_db: wada_snr(&adversarial).ok(),
        adversarial,
        steps,
        success,
        original_score,
        final_score,
    }
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn decision(score: f64) -> Label {
    if score >= 0.5 {
        Label::Deepfake
    } else {
        Label::Bonafide
    }
}

/// Projects `v` onto `[x - eps, x + eps]` intersected with `[-1, 1]`, nudging
/// by single ulps so that `|v - x| <= eps` holds in floating point.
fn project(v: f64, x: f64, eps: f64) -> f64 {
    let mut out = v.clamp((x - eps).max(-1.0), (x + eps).min(1.0));
    while (out - x).abs() > eps {
        out = if out > x { out.next_down() } else { out.next_up() };
    }
    out
}

/// Iterative least-likely-class attack. The target is the class opposite to
/// the surrogate's current decision; each step descends the cross-entropy
/// toward it by `alpha * sign(grad)` and projects back into the epsilon ball.
/// Clips the surrogate already gets wrong count as immediate successes.
pub fn illm_attack(
    model: &Surrogate,
    x: &[f64],
    label: Label,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, AdversaryError> {
    cfg.validate()?;
    if !model.trained {
        return Err(AdversaryError::NotTrained);
    }
    if label.target().is_none() {
        return Err(AdversaryError::Unlabeled);
    }
    let original_score = model.score(x)?;
    let current = decision(original_score);
    if current != label {
        return Ok(finish(x, x.to_vec(), 0, true, original_score, original_score));
    }
    let mut adv = x.to_vec();
    let mut score = original_score;
    if cfg.epsilon == 0.0 {
        return Ok(finish(x, adv, cfg.max_steps, false, original_score, score));
    }
    let target = if current == Label::Deepfake { 0.0 } else { 1.0 };
    for step in 1..=cfg.max_steps {
        let g = model.input_gradient(&adv, target)?;
        for ((a, &gi), &xi) in adv.iter_mut().zip(&g).zip(x) {
            *a = project(*a - cfg.alpha * sign(gi), xi, cfg.epsilon);
        }
        score = model.score(&adv)?;
        if decision(score) != label {
            return Ok(finish(x, adv, step, true, original_score, score));
        }
    }
    Ok(finish(x, adv, cfg.max_steps, false, original_score, score))
}

/// Single fast-gradient-sign step that raises the loss of `label`.
pub fn fgsm_step(model: &Surrogate, x: &[f64], label: Label, epsilon: f64) -> Result<Vec<f64>, AdversaryError> {
    if !model.trained {
        return Err(AdversaryError::NotTrained);
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(AdversaryError::InvalidConfig("epsilon must be in [0, 1)".into()));
    }
    let y = label.target().ok_or(AdversaryError::Unlabeled)?;
    let g = model.input_gradient(x, y)?;
    Ok(x.iter()
        .zip(&g)
        .map(|(&xi, &gi)| project(xi + epsilon * sign(gi), xi, epsilon))
        .collect())
}

#[derive(Debug, Clone)]
pub struct EvalClip {
    pub id: String,
    pub path: Option<PathBuf>,
    pub buffer: AudioBuffer,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub epsilon: f64,
    pub n: usize,
    pub surrogate_acc: f64,
    pub prosody_acc: f64,
    pub mean_steps: f64,
    pub success_rate: f64,
    pub mean_wada_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossReport {
    pub clean_surrogate_acc: f64,
    pub clean_prosody_acc: f64,
    pub rows: Vec<RobustnessRow>,
}

impl CrossReport {
    pub fn csv(&self) -> String {
        let mut out = format!("{ROBUSTNESS_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epsilon, r.n, r.surrogate_acc, r.prosody_acc, r.mean_steps, r.success_rate, r.mean_wada_snr_db
            ));
        }
        out
    }
}

/// `dir/clip.wav` -> `dir/clip.adv-eps0.005.wav`.
pub fn adversarial_path(original: &Path, epsilon: f64) -> PathBuf {
    let stem = original.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
    original.with_file_name(format!("{stem}.adv-eps{epsilon}.wav"))
}

fn prosody_label(model: &Model, bundle: &ModelBundle, buffer: &AudioBuffer) -> Result<Label, AdversaryError> {
    Ok(predict_file(model, bundle, buffer, &bundle.pitch)?.label)
}

/// Attacks every clip at each epsilon on the surrogate, then scores the
/// perturbed audio with the prosody model. The prosody side only ever sees
/// the finished waveforms. `sink` receives each adversarial clip.
pub fn cross_evaluate(
    surrogate: &Surrogate,
    prosody: &Model,
    bundle: &ModelBundle,
    clips: &[EvalClip],
    epsilons: &[f64],
    base: &AttackConfig,
    mut sink: impl FnMut(f64, &EvalClip, &AudioBuffer) -> Result<(), AdversaryError>,
) -> Result<CrossReport, AdversaryError> {
    if clips.is_empty() {
        return Err(AdversaryError::EmptyData);
    }
    let n = clips.len() as f64;
    let mut clean_s = 0usize;
    let mut clean_p = 0usize;
    for c in clips {
        if c.label.target().is_none() {
            return Err(AdversaryError::Unlabeled);
        }
        clean_s += (surrogate.decide(&c.buffer.samples)? == c.label) as usize;
        clean_p += (prosody_label(prosody, bundle, &c.buffer)? == c.label) as usize;
    }
    let mut rows = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let cfg = AttackConfig { epsilon, ..*base };
        cfg.validate()?;
        let (mut s_ok, mut p_ok, mut steps, mut wins, mut snr) = (0usize, 0usize, 0usize, 0usize, 0.0);
        for c in clips {
            let out = illm_attack(surrogate, &c.buffer.samples, c.label, &cfg)?;
            let adv = AudioBuffer::new(out.adversarial.clone(), c.buffer.sample_rate, c.buffer.source_id.clone());
            s_ok += (decision(out.final_score) == c.label) as usize;
            p_ok += (prosody_label(prosody, bundle, &adv)? == c.label) as usize;
            steps += out.steps;
            wins += out.success as usize;
            snr += out.wada_snr_db.ok_or(AdversaryError::SilentInput)?;
            sink(epsilon, c, &adv)?;
        }
        let row = RobustnessRow {
            epsilon,
            n: clips.len(),
            surrogate_acc: s_ok as f64 / n,
            prosody_acc: p_ok as f64 / n,
            mean_steps: steps as f64 / n,
            success_rate: wins as f64 / n,
            mean_wada_snr_db: snr / n,
        };
        log::info!("epsilon {epsilon}: {row:?}");
        rows.push(row);
    }
    Ok(CrossReport {
        clean_surrogate_acc: clean_s as f64 / n,
        clean_prosody_acc: clean_p as f64 / n,
        rows,
    })
}
