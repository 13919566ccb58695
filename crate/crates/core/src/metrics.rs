//! Detection scoring with deepfake as the positive class.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Label;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no trials")]
    EmptyTrials,
    #[error("both classes are required")]
    SingleClass,
    #[error("trial '{0}' has an unknown label or non-finite score")]
    InvalidTrial(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub utterance_id: String,
    pub score: f64,
    pub label: Label,
}

impl ScoredTrial {
    pub fn new(utterance_id: impl Into<String>, score: f64, label: Label) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            score,
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub eer: Option<f64>,
    pub auroc: Option<f64>,
    pub threshold: f64,
    pub counts: Counts,
    /// Set when precision, recall or F1 had an empty denominator.
    pub degenerate: bool,
}

pub const REPORT_CSV_HEADER: &str = "accuracy,precision,recall,f1,eer,auroc,threshold,tp,fp,tn,fn";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            opt(self.eer),
            opt(self.auroc),
            self.threshold,
            self.counts.tp,
            self.counts.fp,
            self.counts.tn,
            self.counts.fn_
        )
    }

    pub fn csv(&self) -> String {
        format!("{REPORT_CSV_HEADER}\n{}\n", self.csv_row())
    }
}

fn check(trials: &[ScoredTrial]) -> Result<(), MetricsError> {
    if trials.is_empty() {
        return Err(MetricsError::EmptyTrials);
    }
    match trials
        .iter()
        .find(|t| t.label == Label::Unknown || !t.score.is_finite())
    {
        Some(t) => Err(MetricsError::InvalidTrial(t.utterance_id.clone())),
        None => Ok(()),
    }
}

fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Counts and rates at `threshold` (deepfake when score ≥ threshold).
pub fn confusion_metrics(trials: &[ScoredTrial], threshold: f64) -> Result<MetricsReport, MetricsError> {
    check(trials)?;
    let mut c = Counts::default();
    for t in trials {
        let predicted_fake = t.score >= threshold;
        match (t.label == Label::Deepfake, predicted_fake) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    let mut degenerate = false;
    let accuracy = (c.tp + c.tn) as f64 / trials.len() as f64;
    let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        eer: None,
        auroc: None,
        threshold,
        counts: c,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

fn class_sizes(trials: &[ScoredTrial]) -> Result<(usize, usize), MetricsError> {
    check(trials)?;
    let fakes = trials.iter().filter(|t| t.label == Label::Deepfake).count();
    let bona = trials.len() - fakes;
    if fakes == 0 || bona == 0 {
        return Err(MetricsError::SingleClass);
    }
    Ok((bona, fakes))
}

/// Equal error rate by a sweep over every distinct score (plus +inf), linearly
/// interpolated where FNR − FPR changes sign.
pub fn eer(trials: &[ScoredTrial]) -> Result<EerPoint, MetricsError> {
    let (n_bona, n_fake) = class_sizes(trials)?;
    let mut sorted: Vec<(f64, bool)> = trials
        .iter()
        .map(|t| (t.score, t.label == Label::Deepfake))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Threshold at the lowest score: everything is called deepfake.
    let mut fake_below = 0usize;
    let mut bona_below = 0usize;
    let rates = |fb: usize, bb: usize| {
        let fnr = fb as f64 / n_fake as f64;
        let fpr = (n_bona - bb) as f64 / n_bona as f64;
        (fnr, fpr)
    };
    let (mut prev_fnr, mut prev_fpr) = rates(0, 0);
    let mut prev_threshold = sorted[0].0;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                fake_below += 1;
            } else {
                bona_below += 1;
            }
            i += 1;
        }
        let next = sorted.get(i).map_or(f64::INFINITY, |x| x.0);
        let (fnr, fpr) = rates(fake_below, bona_below);
        let d0 = prev_fnr - prev_fpr;
        let d1 = fnr - fpr;
        if d0 >= 0.0 {
            break;
        }
        if d1 >= 0.0 {
            let lambda = d0 / (d0 - d1);
            let eer = prev_fpr + lambda * (fpr - prev_fpr);
            let threshold = if d1.abs() < d0.abs() { next } else { prev_threshold };
            return Ok(EerPoint { eer, threshold });
        }
        prev_fnr = fnr;
        prev_fpr = fpr;
        prev_threshold = next;
    }
    Ok(EerPoint {
        eer: prev_fnr,
        threshold: prev_threshold,
    })
}

/// Probability that a random deepfake outscores a random bonafide, ties counting one half.
pub fn auroc(trials: &[ScoredTrial]) -> Result<f64, MetricsError> {
    let (n_bona, n_fake) = class_sizes(trials)?;
    let mut sorted: Vec<(f64, bool)> = trials
        .iter()
        .map(|t| (t.score, t.label == Label::Deepfake))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the Mann-Whitney U statistic, kept integral.
    let mut doubled: u64 = 0;
    let mut bona_below = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        let (mut fakes, mut bonas) = (0u64, 0u64);
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                fakes += 1;
            } else {
                bonas += 1;
            }
            i += 1;
        }
        doubled += fakes * (2 * bona_below + bonas);
        bona_below += bonas;
    }
    Ok(doubled as f64 / (2 * n_bona as u64 * n_fake as u64) as f64)
}

/// Confusion metrics at `threshold` together with EER and AUROC when both classes are present.
pub fn evaluate(trials: &[ScoredTrial], threshold: f64) -> Result<MetricsReport, MetricsError> {
    let mut report = confusion_metrics(trials, threshold)?;
    if class_sizes(trials).is_ok() {
        report.eer = Some(eer(trials)?.eer);
        report.auroc = Some(auroc(trials)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trials(scores: &[f64], fake: &[bool]) -> Vec<ScoredTrial> {
        scores
            .iter()
            .zip(fake)
            .enumerate()
            .map(|(i, (&s, &f))| {
                ScoredTrial::new(format!("t{i}"), s, if f { Label::Deepfake } else { Label::Bonafide })
            })
            .collect()
    }

    fn pairwise_auroc(t: &[ScoredTrial]) -> f64 {
        let mut s = 0.0;
        let mut pairs = 0.0;
        for a in t.iter().filter(|t| t.label == Label::Deepfake) {
            for b in t.iter().filter(|t| t.label == Label::Bonafide) {
                pairs += 1.0;
                if a.score > b.score {
                    s += 1.0;
                } else if a.score == b.score {
                    s += 0.5;
                }
            }
        }
        s / pairs
    }

    #[test]
    fn confusion_examples() {
        let t = trials(&[0.9, 0.1], &[true, false]);
        let r = confusion_metrics(&t, 0.5).unwrap();
        assert_eq!(r.counts, Counts { tp: 1, fp: 0, tn: 1, fn_: 0 });
        assert_eq!((r.precision, r.recall, r.accuracy, r.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(!r.degenerate);
        let all_bona = trials(&[0.1, 0.2], &[false, false]);
        assert!(confusion_metrics(&all_bona, 0.5).unwrap().degenerate);
        assert_eq!(confusion_metrics(&[], 0.5), Err(MetricsError::EmptyTrials));
    }

    #[test]
    fn confusion_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let f: Vec<bool> = (0..100).map(|_| rng.random()).collect();
        let t = trials(&s, &f);
        let r = confusion_metrics(&t, 0.4).unwrap();
        let mut tp = 0;
        let mut tn = 0;
        for i in 0..100 {
            if f[i] && s[i] >= 0.4 {
                tp += 1;
            }
            if !f[i] && s[i] < 0.4 {
                tn += 1;
            }
        }
        assert_eq!(r.counts.tp, tp);
        assert_eq!(r.counts.tn, tn);
        assert_eq!(r.accuracy, (tp + tn) as f64 / 100.0);
    }

    #[test]
    fn eer_examples() {
        let sep = trials(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]);
        assert_eq!(eer(&sep).unwrap().eer, 0.0);
        let same = trials(&[0.5, 0.5, 0.5, 0.5], &[false, true, false, true]);
        assert_eq!(eer(&same).unwrap().eer, 0.5);
        let single = trials(&[0.5], &[true]);
        assert_eq!(eer(&single), Err(MetricsError::SingleClass));
        let inverted = trials(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]);
        assert_eq!(eer(&inverted).unwrap().eer, 1.0);
    }

    #[test]
    fn auroc_examples() {
        let sep = trials(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]);
        assert_eq!(auroc(&sep).unwrap(), 1.0);
        let rev = trials(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]);
        assert_eq!(auroc(&rev).unwrap(), 0.0);
        let tie = trials(&[0.5, 0.5], &[false, true]);
        assert_eq!(auroc(&tie).unwrap(), 0.5);
    }

    #[test]
    fn eer_threshold_balances_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(4..60);
            let f: Vec<bool> = (0..n).map(|i| i % 2 == 0 || rng.random_bool(0.3)).collect();
            let s: Vec<f64> = f
                .iter()
                .map(|&x| rng.random::<f64>() + if x { 0.3 } else { 0.0 })
                .collect();
            let t = trials(&s, &f);
            let e = eer(&t).unwrap();
            let r = confusion_metrics(&t, e.threshold).unwrap();
            let c = r.counts;
            let fpr = c.fp as f64 / (c.fp + c.tn) as f64;
            let fnr = c.fn_ as f64 / (c.fn_ + c.tp) as f64;
            let smaller = (c.fp + c.tn).min(c.fn_ + c.tp) as f64;
            assert!((fpr - fnr).abs() <= 1.0 / smaller + 1e-12);
        }
    }

    fn arb_trials() -> impl Strategy<Value = Vec<ScoredTrial>> {
        proptest::collection::vec((0u32..50, any::<bool>()), 2..60).prop_filter_map("both classes", |v| {
            let s: Vec<f64> = v.iter().map(|x| x.0 as f64 / 50.0).collect();
            let f: Vec<bool> = v.iter().map(|x| x.1).collect();
            (f.iter().any(|&x| x) && f.iter().any(|&x| !x)).then(|| trials(&s, &f))
        })
    }

    proptest! {
        #[test]
        fn auroc_equals_pairwise(t in arb_trials()) {
            prop_assert_eq!(auroc(&t).unwrap(), pairwise_auroc(&t));
        }

        #[test]
        fn auroc_complement(t in arb_trials()) {
            let flipped: Vec<ScoredTrial> = t.iter().map(|x| ScoredTrial { score: 1.0 - x.score, ..x.clone() }).collect();
            prop_assert!((auroc(&t).unwrap() + auroc(&flipped).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn eer_invariant_under_monotone_maps(t in arb_trials()) {
            let mapped: Vec<ScoredTrial> = t.iter().map(|x| ScoredTrial { score: (3.0 * x.score).exp() - 7.0, ..x.clone() }).collect();
            prop_assert_eq!(eer(&t).unwrap().eer, eer(&mapped).unwrap().eer);
        }

        #[test]
        fn eer_in_unit_range(t in arb_trials()) {
            let e = eer(&t).unwrap().eer;
            prop_assert!((0.0..=1.0).contains(&e));
        }
    }
}
