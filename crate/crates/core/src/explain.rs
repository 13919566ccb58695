//! Attention-based explanations: which window drove each decision, and what
//! the prosody looked like there.

use serde::{Deserialize, Serialize};

use crate::features::{apply_scaler, pad_batch, FeatureSequence, Label, ScalerParams};
use crate::neural::{Model, NeuralError};

/// Attention weights over the windows of one scaled sequence.
pub fn attention_vector(model: &Model, scaled: &FeatureSequence) -> Result<Vec<f64>, NeuralError> {
    if !model.has_attention() {
        return Err(NeuralError::NoAttentionLayer);
    }
    let p = model.predict(&pad_batch(std::slice::from_ref(scaled))?)?;
    let a = p.attention.ok_or(NeuralError::NoAttentionLayer)?;
    Ok(a.row(0).to_vec())
}

/// Index of the largest weight; the earliest wins ties.
pub fn most_influential_slice(weights: &[f64]) -> usize {
    let mut best = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > weights[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub utterance_id: String,
    pub label: Label,
    pub argmax_window: usize,
    pub jitter: f64,
    pub shimmer: f64,
    pub mean_f0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub values: Vec<f64>,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let n = values.len();
        let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
        Self {
            n,
            mean,
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub label: Label,
    pub jitter: Summary,
    pub shimmer: Summary,
    pub mean_f0: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionAggregate {
    pub rows: Vec<AttentionRow>,
    pub classes: Vec<ClassSummary>,
}

pub const ATTENTION_CSV_HEADER: &str = "utterance_id,label,argmax_window,jitter,shimmer,mean_f0";

impl AttentionAggregate {
    pub fn csv(&self) -> String {
        let mut out = format!("{ATTENTION_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.utterance_id, r.label, r.argmax_window, r.jitter, r.shimmer, r.mean_f0
            ));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(&self.classes)
    }

    pub fn class(&self, label: Label) -> Option<&ClassSummary> {
        self.classes.iter().find(|c| c.label == label)
    }
}

/// For each unscaled sequence, finds its attention argmax and records the
/// physical jitter, shimmer and mean F0 of that window.
pub fn aggregate_attention_features(
    model: &Model,
    scaler: &ScalerParams,
    dataset: &[FeatureSequence],
) -> Result<AttentionAggregate, NeuralError> {
    let mut rows = Vec::with_capacity(dataset.len());
    for seq in dataset {
        let weights = attention_vector(model, &apply_scaler(seq, scaler)?)?;
        let k = most_influential_slice(&weights[..seq.len().max(1)]);
        let w = seq.windows.get(k).copied().unwrap_or_default();
        rows.push(AttentionRow {
            utterance_id: seq.utterance_id.clone(),
            label: seq.label,
            argmax_window: k,
            jitter: w.jitter_local,
            shimmer: w.shimmer_local,
            mean_f0: w.mean_f0,
        });
    }
    let classes = [Label::Bonafide, Label::Deepfake, Label::Unknown]
        .into_iter()
        .filter(|l| rows.iter().any(|r| r.label == *l))
        .map(|label| {
            let pick = |f: fn(&AttentionRow) -> f64| {
                Summary::of(rows.iter().filter(|r| r.label == label).map(f).collect())
            };
            ClassSummary {
                label,
                jitter: pick(|r| r.jitter),
                shimmer: pick(|r| r.shimmer),
                mean_f0: pick(|r| r.mean_f0),
            }
        })
        .collect();
    Ok(AttentionAggregate { rows, classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ProsodyWindowVector, N_FEATURES};
    use crate::neural::{ModelConfig, Preset};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        Model::new(&ModelConfig::preset(Preset::E).with_attention().unwrap(), 3).unwrap()
    }

    fn seq(id: &str, label: Label, len: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence {
            utterance_id: id.into(),
            label,
            windows: (0..len)
                .map(|_| ProsodyWindowVector::from_array(std::array::from_fn(|_| rng.random_range(0.0..5.0))))
                .collect(),
            window_ms: 100,
        }
    }

    fn unit_scaler() -> ScalerParams {
        ScalerParams {
            mins: vec![0.0; N_FEATURES],
            maxs: vec![5.0; N_FEATURES],
        }
    }

    #[test]
    fn single_window_gets_all_weight() {
        let w = attention_vector(&model(), &seq("a", Label::Bonafide, 1, 1)).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn requires_attention_layer() {
        let plain = Model::new(&ModelConfig::preset(Preset::E), 0).unwrap();
        assert!(matches!(
            attention_vector(&plain, &seq("a", Label::Bonafide, 3, 1)),
            Err(NeuralError::NoAttentionLayer)
        ));
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(most_influential_slice(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(most_influential_slice(&[0.25; 4]), 0);
    }

    #[test]
    fn one_sample_per_class() {
        let m = model();
        let data = vec![seq("b", Label::Bonafide, 4, 2), seq("d", Label::Deepfake, 6, 3)];
        let agg = aggregate_attention_features(&m, &unit_scaler(), &data).unwrap();
        for (s, row) in data.iter().zip(&agg.rows) {
            let w = attention_vector(&m, &apply_scaler(s, &unit_scaler()).unwrap()).unwrap();
            let k = most_influential_slice(&w);
            assert_eq!(row.argmax_window, k);
            let c = agg.class(s.label).unwrap();
            assert_eq!(c.jitter.mean, s.windows[k].jitter_local);
            assert_eq!(c.shimmer.median, s.windows[k].shimmer_local);
            assert_eq!(c.mean_f0.q1, s.windows[k].mean_f0);
        }
        assert!(agg.csv().starts_with(ATTENTION_CSV_HEADER));
    }

    #[test]
    fn quantiles_match_hand_values() {
        let s = Summary::of(vec![4.0, 1.0, 3.0, 2.0]);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.q1, 1.75);
        assert_eq!(s.q3, 3.25);
        assert_eq!(s.mean, 2.5);
    }

    proptest! {
        #[test]
        fn weights_form_distribution(lens in proptest::collection::vec(1usize..9, 1..5), seed in 0u64..1000) {
            let m = model();
            let seqs: Vec<FeatureSequence> = lens.iter().enumerate().map(|(i, &l)| seq("x", Label::Bonafide, l, seed + i as u64)).collect();
            let batch = pad_batch(&seqs).unwrap();
            let a = m.predict(&batch).unwrap().attention.unwrap();
            for (b, &l) in lens.iter().enumerate() {
                let row = a.row(b);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!(row.iter().skip(l).all(|&w| w == 0.0));
            }
        }

        #[test]
        fn argmax_survives_monotone_rescoring(scores in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            let softmax = |v: &[f64]| {
                let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let transformed: Vec<f64> = scores.iter().map(|s| 3.0 * s + s.powi(3)).collect();
            prop_assert_eq!(most_influential_slice(&softmax(&scores)), most_influential_slice(&softmax(&transformed)));
        }
    }
}
