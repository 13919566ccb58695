//! Two-stage search over the four tunable pitch parameters.
//!
//! Stage 1 walks a coarse grid and marks cells where feature extraction leaves
//! whole-file statistics undefined on too many clips. Stage 2 samples points
//! uniformly inside the bounding box of the valid cells, trains the reference
//! 64/32/32 LSTM at each point and keeps the lowest validation EER.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PitchParams;
use crate::audio_io::AudioBuffer;
use crate::features::{analyze, apply_scaler, extract_features, fit_scaler, FeatureError, FeatureSequence, Label};
use crate::neural::{train, ModelConfig, NeuralError, Preset, TrainConfig};

pub const PARAM_NAMES: [&str; 4] = ["silence_threshold", "octave_cost", "octave_jump_cost", "voiced_unvoiced_cost"];
pub const TRIAL_CSV_HEADER: &str =
    "stage,index,silence_threshold,octave_cost,octave_jump_cost,voiced_unvoiced_cost,invalid_fraction,val_eer";

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("every grid cell produced undefined features")]
    NoValidRegion,
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("search corpus needs both classes in train and validation sets")]
    SingleClass,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: [f64; 4],
    pub hi: [f64; 4],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            lo: [0.0; 4],
            hi: [1.0; 4],
        }
    }
}

impl Bounds {
    fn validate(&self) -> Result<(), SearchError> {
        for d in 0..4 {
            if !(self.lo[d].is_finite() && self.hi[d].is_finite() && 0.0 <= self.lo[d] && self.lo[d] < self.hi[d]) {
                return Err(SearchError::InvalidConfig(format!(
                    "{}: need 0 <= lo < hi, got [{}, {}]",
                    PARAM_NAMES[d], self.lo[d], self.hi[d]
                )));
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 4] {
        std::array::from_fn(|d| rng.random_range(self.lo[d]..self.hi[d]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub bounds: Bounds,
    pub budget: usize,
    pub seed: u64,
    /// Grid points per parameter in stage 1.
    pub grid_points: usize,
    /// Clips per class screened for each grid cell.
    pub grid_clips: usize,
    /// A cell is invalid when more than this fraction of screened clips has
    /// undefined statistics.
    pub max_invalid_fraction: f64,
    pub window_ms: u32,
    pub train: TrainConfig,
    /// Worker threads for stage 2.
    pub jobs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            bounds: Bounds::default(),
            budget: 8,
            seed: 42,
            grid_points: 3,
            grid_clips: 4,
            max_invalid_fraction: 0.25,
            window_ms: 100,
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Grid,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub stage: Stage,
    pub index: usize,
    pub values: [f64; 4],
    pub invalid_fraction: Option<f64>,
    pub val_eer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: PitchParams,
    pub best_eer: f64,
    pub region: Bounds,
    pub log: Vec<TrialRecord>,
}

pub fn trial_csv(log: &[TrialRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{TRIAL_CSV_HEADER}\n");
    for r in log {
        let stage = match r.stage {
            Stage::Grid => "grid",
            Stage::Random => "random",
        };
        out.push_str(&format!(
            "{stage},{},{},{},{},{},{},{}\n",
            r.index,
            r.values[0],
            r.values[1],
            r.values[2],
            r.values[3],
            opt(r.invalid_fraction),
            opt(r.val_eer)
        ));
    }
    out
}

/// A labelled clip for the search.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub buffer: AudioBuffer,
    pub label: Label,
}

fn check_classes(clips: &[Clip]) -> Result<(), SearchError> {
    let has = |l: Label| clips.iter().any(|c| c.label == l);
    if has(Label::Bonafide) && has(Label::Deepfake) {
        Ok(())
    } else {
        Err(SearchError::SingleClass)
    }
}

/// Fraction of clips whose whole-file statistics are partly undefined.
pub fn invalid_fraction(clips: &[Clip], params: &PitchParams) -> Result<f64, SearchError> {
    if clips.is_empty() {
        return Ok(0.0);
    }
    let mut bad = 0usize;
    for c in clips {
        if analyze(&c.buffer, params)?.undefined_statistics() > 0 {
            bad += 1;
        }
    }
    Ok(bad as f64 / clips.len() as f64)
}

fn screening_set(train: &[Clip], per_class: usize) -> Vec<Clip> {
    [Label::Bonafide, Label::Deepfake]
        .into_iter()
        .flat_map(|l| train.iter().filter(move |c| c.label == l).take(per_class))
        .cloned()
        .collect()
}

/// Stage 1. Returns the bounding box of valid cells (each cell spanning
/// its share of the bounds) and the grid log.
pub fn grid_stage(train: &[Clip], base: &PitchParams, cfg: &SearchConfig) -> Result<(Bounds, Vec<TrialRecord>), SearchError> {
    let g = cfg.grid_points;
    let screen = screening_set(train, cfg.grid_clips);
    let b = &cfg.bounds;
    let width: [f64; 4] = std::array::from_fn(|d| (b.hi[d] - b.lo[d]) / g as f64);
    let mut log = Vec::new();
    let mut region: Option<Bounds> = None;
    for cell in 0..g.pow(4) {
        let idx: [usize; 4] = std::array::from_fn(|d| cell / g.pow(d as u32) % g);
        let values: [f64; 4] = std::array::from_fn(|d| b.lo[d] + (idx[d] as f64 + 0.5) * width[d]);
        let frac = invalid_fraction(&screen, &base.with_searched(values))?;
        if frac <= cfg.max_invalid_fraction {
            let lo: [f64; 4] = std::array::from_fn(|d| b.lo[d] + idx[d] as f64 * width[d]);
            let hi: [f64; 4] = std::array::from_fn(|d| b.lo[d] + (idx[d] + 1) as f64 * width[d]);
            region = Some(match region {
                None => Bounds { lo, hi },
                Some(r) => Bounds {
                    lo: std::array::from_fn(|d| r.lo[d].min(lo[d])),
                    hi: std::array::from_fn(|d| r.hi[d].max(hi[d])),
                },
            });
        }
        log.push(TrialRecord {
            stage: Stage::Grid,
            index: cell,
            values,
            invalid_fraction: Some(frac),
            val_eer: None,
        });
    }
    region.map(|r| (r, log)).ok_or(SearchError::NoValidRegion)
}

fn features(clips: &[Clip], params: &PitchParams, window_ms: u32) -> Result<Vec<FeatureSequence>, SearchError> {
    clips
        .iter()
        .map(|c| {
            let mut f = extract_features(&c.buffer, params, window_ms)?;
            f.utterance_id = c.id.clone();
            f.label = c.label;
            Ok(f)
        })
        .collect()
}

/// Extracts features with `params`, trains Model A and returns the best
/// validation EER over its epochs.
pub fn evaluate_point(
    train_clips: &[Clip],
    val_clips: &[Clip],
    params: &PitchParams,
    window_ms: u32,
    tc: &TrainConfig,
) -> Result<f64, SearchError> {
    let tr = features(train_clips, params, window_ms)?;
    let va = features(val_clips, params, window_ms)?;
    let scaler = fit_scaler(&tr)?;
    let scale = |v: Vec<FeatureSequence>| v.iter().map(|s| apply_scaler(s, &scaler)).collect::<Result<Vec<_>, _>>();
    let out = train(&ModelConfig::preset(Preset::A), &scale(tr)?, &scale(va)?, tc)?;
    Ok(out
        .history
        .iter()
        .filter_map(|r| r.val_eer)
        .fold(f64::INFINITY, f64::min))
}

/// Evaluates explicit points, `jobs` at a time. Results come back in input
/// order regardless of scheduling.
pub fn run_trials(
    train_clips: &[Clip],
    val_clips: &[Clip],
    base: &PitchParams,
    points: &[[f64; 4]],
    window_ms: u32,
    tc: &TrainConfig,
    jobs: usize,
) -> Result<Vec<TrialRecord>, SearchError> {
    let eval = |i: usize| -> Result<TrialRecord, SearchError> {
        let eer = evaluate_point(train_clips, val_clips, &base.with_searched(points[i]), window_ms, tc)?;
        log::info!("trial {i}: {:?} -> val EER {eer:.4}", points[i]);
        Ok(TrialRecord {
            stage: Stage::Random,
            index: i,
            values: points[i],
            invalid_fraction: None,
            val_eer: Some(eer),
        })
    };
    let jobs = jobs.max(1).min(points.len().max(1));
    if jobs == 1 {
        return (0..points.len()).map(eval).collect();
    }
    let mut slots: Vec<Option<Result<TrialRecord, SearchError>>> = (0..points.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let eval = &eval;
                s.spawn(move || {
                    (w..points.len())
                        .step_by(jobs)
                        .map(|i| (i, eval(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("search worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every trial ran")).collect()
}

/// Index of the lowest EER; the earliest trial wins ties.
pub fn best_trial(trials: &[TrialRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in trials.iter().enumerate() {
        if let Some(e) = t.val_eer {
            if best.is_none_or(|(_, b)| e < b) {
                best = Some((i, e));
            }
        }
    }
    best.map(|(i, _)| i)
}

pub fn parameter_search(
    train_clips: &[Clip],
    val_clips: &[Clip],
    base: &PitchParams,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    if cfg.budget == 0 || cfg.grid_points == 0 {
        return Err(SearchError::InvalidConfig("budget and grid_points must be positive".into()));
    }
    cfg.bounds.validate()?;
    cfg.train.validate()?;
    check_classes(train_clips)?;
    check_classes(val_clips)?;

    let (region, mut log) = grid_stage(train_clips, base, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let points: Vec<[f64; 4]> = (0..cfg.budget).map(|_| region.sample(&mut rng)).collect();
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let trials = run_trials(train_clips, val_clips, base, &points, cfg.window_ms, &tc, cfg.jobs)?;
    let k = best_trial(&trials).ok_or(SearchError::NoValidRegion)?;
    let best_eer = trials[k].val_eer.unwrap_or(f64::NAN);
    let best = base.with_searched(trials[k].values);
    log.extend(trials);
    Ok(SearchOutcome {
        best,
        best_eer,
        region,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::corpus::synthesize;

    fn clips(per_class: usize, seed: u64) -> Vec<Clip> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [Label::Bonafide, Label::Deepfake]
            .into_iter()
            .flat_map(|l| (0..per_class).map(move |i| (l, i)))
            .map(|(l, i)| Clip {
                id: format!("{l}_{i}"),
                buffer: AudioBuffer::new(synthesize(l, 1.0, 16000, &mut rng), 16000, format!("{i}")),
                label: l,
            })
            .collect()
    }

    fn quick() -> SearchConfig {
        SearchConfig {
            budget: 1,
            grid_points: 1,
            grid_clips: 1,
            train: TrainConfig {
                epochs: 2,
                batch_size: 4,
                ..TrainConfig::default()
            },
            ..SearchConfig::default()
        }
    }

    #[test]
    fn budget_one_returns_the_sampled_point() {
        let (tr, va) = (clips(3, 1), clips(2, 2));
        let cfg = quick();
        let out = parameter_search(&tr, &va, &PitchParams::default(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let expected = out.region.sample(&mut rng);
        assert_eq!(out.best.searched(), expected);
        assert_eq!(out.log.iter().filter(|r| r.stage == Stage::Random).count(), 1);
    }

    #[test]
    fn same_seed_same_log() {
        let (tr, va) = (clips(3, 3), clips(2, 4));
        let cfg = SearchConfig { budget: 2, ..quick() };
        let a = parameter_search(&tr, &va, &PitchParams::default(), &cfg).unwrap();
        let b = parameter_search(&tr, &va, &PitchParams::default(), &cfg).unwrap();
        assert_eq!(trial_csv(&a.log), trial_csv(&b.log));
    }

    #[test]
    fn parallel_trials_match_serial() {
        let (tr, va) = (clips(2, 5), clips(2, 6));
        let tc = quick().train;
        let pts = [[0.03, 0.01, 0.35, 0.14], [0.1, 0.2, 0.3, 0.4], [0.05, 0.05, 0.5, 0.2]];
        let base = PitchParams::default();
        let serial = run_trials(&tr, &va, &base, &pts, 100, &tc, 1).unwrap();
        let parallel = run_trials(&tr, &va, &base, &pts, 100, &tc, 2).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn separating_point_wins() {
        // A silence threshold near 1 with no octave bonus and a steep voicing
        // cost leaves every clip unvoiced, so all features are zero.
        let (tr, va) = (clips(4, 7), clips(3, 8));
        let tc = TrainConfig {
            epochs: 15,
            learning_rate: 1e-2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let pts = [[0.99, 0.0, 0.0, 0.99], [0.03, 0.01, 0.35, 0.14]];
        let trials = run_trials(&tr, &va, &PitchParams::default(), &pts, 100, &tc, 1).unwrap();
        assert_eq!(trials[1].val_eer, Some(0.0));
        assert!(trials[0].val_eer.unwrap() > 0.0);
        assert_eq!(best_trial(&trials), Some(1));
    }

    #[test]
    fn all_invalid_grid_reports_no_region() {
        let tr = clips(1, 9);
        let cfg = SearchConfig {
            bounds: Bounds {
                lo: [0.98, 0.0, 0.0, 0.98],
                hi: [0.99, 0.001, 0.01, 0.99],
            },
            grid_points: 1,
            ..quick()
        };
        assert!(matches!(
            grid_stage(&tr, &PitchParams::default(), &cfg),
            Err(SearchError::NoValidRegion)
        ));
    }

    #[test]
    fn best_trial_prefers_earliest_tie() {
        let rec = |i, e| TrialRecord {
            stage: Stage::Random,
            index: i,
            values: [0.0; 4],
            invalid_fraction: None,
            val_eer: Some(e),
        };
        assert_eq!(best_trial(&[rec(0, 0.2), rec(1, 0.1), rec(2, 0.1)]), Some(1));
        assert_eq!(best_trial(&[]), None);
    }

    #[test]
    fn single_class_is_rejected() {
        let tr: Vec<Clip> = clips(2, 1).into_iter().filter(|c| c.label == Label::Bonafide).collect();
        assert!(matches!(
            parameter_search(&tr, &clips(1, 2), &PitchParams::default(), &quick()),
            Err(SearchError::SingleClass)
        ));
    }
}
