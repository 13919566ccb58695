//! Small raw-waveform convolutional classifier used as the white-box target of
//! the gradient attacks.
//!
//! Layout: optional mu-law companding -> strided conv (no bias) -> ReLU ->
//! strided conv -> ReLU -> mean over time -> dense sigmoid. Score is
//! P(deepfake).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AdversaryError;
use crate::features::Label;
use crate::neural::{adam_update, AdamState, TrainConfig, PROB_CLAMP};

pub const SURROGATE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    /// Companding constant; 0 feeds the raw samples.
    pub mu_law: f64,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub conv2_stride: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            mu_law: 4095.0,
            conv1_channels: 16,
            conv1_kernel: 16,
            conv1_stride: 8,
            conv2_channels: 16,
            conv2_kernel: 4,
            conv2_stride: 2,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<(), AdversaryError> {
        let dims = [
            self.conv1_channels,
            self.conv1_kernel,
            self.conv1_stride,
            self.conv2_channels,
            self.conv2_kernel,
            self.conv2_stride,
        ];
        if !(self.mu_law >= 0.0 && self.mu_law.is_finite()) {
            return Err(AdversaryError::InvalidConfig("mu_law must be finite and non-negative".into()));
        }
        if dims.contains(&0) {
            return Err(AdversaryError::InvalidConfig("surrogate dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Shortest input that yields at least one output frame.
    pub fn min_len(&self) -> usize {
        (self.conv2_kernel - 1) * self.conv1_stride + self.conv1_kernel
    }

    fn frames(&self, n: usize) -> Option<(usize, usize)> {
        if n < self.min_len() {
            return None;
        }
        let n1 = (n - self.conv1_kernel) / self.conv1_stride + 1;
        let n2 = (n1 - self.conv2_kernel) / self.conv2_stride + 1;
        Some((n1, n2))
    }

    fn compand(&self, x: &[f64]) -> Vec<f64> {
        if self.mu_law == 0.0 {
            return x.to_vec();
        }
        let norm = self.mu_law.ln_1p();
        x.iter().map(|v| v.signum() * (self.mu_law * v.abs()).ln_1p() / norm).collect()
    }

    fn compand_slope(&self, v: f64) -> f64 {
        if self.mu_law == 0.0 {
            return 1.0;
        }
        self.mu_law / ((1.0 + self.mu_law * v.abs()) * self.mu_law.ln_1p())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub format_version: u32,
    pub config: SurrogateConfig,
    /// conv1_channels x conv1_kernel
    pub w1: Vec<f64>,
    /// conv2_channels x conv1_channels x conv2_kernel
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
    pub seed: u64,
    pub trained: bool,
}

#[derive(Debug, Clone)]
pub struct SurrogateCache {
    pub n1: usize,
    pub n2: usize,
    a1: Vec<f64>,
    a2: Vec<f64>,
    pooled: Vec<f64>,
    input: Vec<f64>,
    pub logit: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub history: Vec<SurrogateEpoch>,
    pub best_epoch: usize,
    pub val_accuracy: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn uniform(n: usize, limit: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

impl Surrogate {
    pub fn new(config: SurrogateConfig, seed: u64) -> Result<Self, AdversaryError> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            format_version: SURROGATE_FORMAT_VERSION,
            w1: uniform(c.conv1_channels * c.conv1_kernel, 1.0 / (c.conv1_kernel as f64).sqrt(), &mut rng),
            w2: uniform(
                c.conv2_channels * c.conv1_channels * c.conv2_kernel,
                1.0 / ((c.conv1_channels * c.conv2_kernel) as f64).sqrt(),
                &mut rng,
            ),
            b2: vec![0.0; c.conv2_channels],
            w3: uniform(c.conv2_channels, 1.0 / (c.conv2_channels as f64).sqrt(), &mut rng),
            b3: vec![0.0],
            config,
            seed,
            trained: false,
        })
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![&self.w1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    pub fn forward(&self, x: &[f64]) -> Result<SurrogateCache, AdversaryError> {
        let c = &self.config;
        let (n1, n2) = c.frames(x.len()).ok_or(AdversaryError::TooShort {
            len: x.len(),
            min: c.min_len(),
        })?;
        let (c1, k1, s1) = (c.conv1_channels, c.conv1_kernel, c.conv1_stride);
        let (c2, k2, s2) = (c.conv2_channels, c.conv2_kernel, c.conv2_stride);
        let x = c.compand(x);

        let mut a1 = vec![0.0; c1 * n1];
        for ch in 0..c1 {
            let w = &self.w1[ch * k1..(ch + 1) * k1];
            for j in 0..n1 {
                let seg = &x[j * s1..j * s1 + k1];
                a1[ch * n1 + j] = w.iter().zip(seg).map(|(a, b)| a * b).sum();
            }
        }
        let r1: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();

        let mut a2 = vec![0.0; c2 * n2];
        for d in 0..c2 {
            for j in 0..n2 {
                let mut acc = self.b2[d];
                for ch in 0..c1 {
                    let w = &self.w2[(d * c1 + ch) * k2..(d * c1 + ch + 1) * k2];
                    let r = &r1[ch * n1 + j * s2..ch * n1 + j * s2 + k2];
                    acc += w.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
                }
                a2[d * n2 + j] = acc;
            }
        }
        let pooled: Vec<f64> = (0..c2)
            .map(|d| a2[d * n2..(d + 1) * n2].iter().map(|v| v.max(0.0)).sum::<f64>() / n2 as f64)
            .collect();
        let logit = self.b3[0] + self.w3.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
        Ok(SurrogateCache {
            n1,
            n2,
            a1,
            a2,
            pooled,
            input: x,
            logit,
            prob: sigmoid(logit),
        })
    }

    /// P(deepfake) for a waveform.
    pub fn score(&self, x: &[f64]) -> Result<f64, AdversaryError> {
        Ok(self.forward(x)?.prob)
    }

    pub fn decide(&self, x: &[f64]) -> Result<Label, AdversaryError> {
        Ok(if self.score(x)? >= 0.5 { Label::Deepfake } else { Label::Bonafide })
    }

    /// Backpropagates `dlogit` (dL/dz). Returns parameter gradients in
    /// `params()` order and, if requested, the gradient with respect to `x`.
    pub fn backward(
        &self,
        raw: &[f64],
        cache: &SurrogateCache,
        dlogit: f64,
        want_input: bool,
    ) -> (Vec<Vec<f64>>, Option<Vec<f64>>) {
        let c = &self.config;
        let (c1, k1, s1) = (c.conv1_channels, c.conv1_kernel, c.conv1_stride);
        let (c2, k2, s2) = (c.conv2_channels, c.conv2_kernel, c.conv2_stride);
        let (n1, n2) = (cache.n1, cache.n2);
        let x = &cache.input;

        let gw3: Vec<f64> = cache.pooled.iter().map(|p| dlogit * p).collect();
        let gb3 = vec![dlogit];

        let mut gw2 = vec![0.0; self.w2.len()];
        let mut gb2 = vec![0.0; c2];
        let mut dr1 = vec![0.0; c1 * n1];
        for d in 0..c2 {
            let scale = dlogit * self.w3[d] / n2 as f64;
            for j in 0..n2 {
                if cache.a2[d * n2 + j] <= 0.0 {
                    continue;
                }
                gb2[d] += scale;
                for ch in 0..c1 {
                    let base = (d * c1 + ch) * k2;
                    let off = ch * n1 + j * s2;
                    for k in 0..k2 {
                        gw2[base + k] += scale * cache.a1[off + k].max(0.0);
                        dr1[off + k] += scale * self.w2[base + k];
                    }
                }
            }
        }

        let mut gw1 = vec![0.0; self.w1.len()];
        let mut dx = want_input.then(|| vec![0.0; x.len()]);
        for ch in 0..c1 {
            for j in 0..n1 {
                let i = ch * n1 + j;
                if cache.a1[i] <= 0.0 || dr1[i] == 0.0 {
                    continue;
                }
                let g = dr1[i];
                let seg = &x[j * s1..j * s1 + k1];
                let gw = &mut gw1[ch * k1..(ch + 1) * k1];
                for k in 0..k1 {
                    gw[k] += g * seg[k];
                }
                if let Some(dx) = dx.as_mut() {
                    let w = &self.w1[ch * k1..(ch + 1) * k1];
                    for k in 0..k1 {
                        dx[j * s1 + k] += g * w[k];
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            for (d, &v) in dx.iter_mut().zip(raw) {
                *d *= c.compand_slope(v);
            }
        }
        (vec![gw1, gw2, gb2, gw3, gb3], dx)
    }

    /// Gradient of the binary cross-entropy toward `target` (1 = deepfake)
    /// with respect to the input samples.
    pub fn input_gradient(&self, x: &[f64], target: f64) -> Result<Vec<f64>, AdversaryError> {
        let cache = self.forward(x)?;
        let (_, dx) = self.backward(x, &cache, cache.prob - target, true);
        Ok(dx.unwrap_or_default())
    }

    pub fn to_json(&self) -> Result<String, AdversaryError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, AdversaryError> {
        let m: Self = serde_json::from_str(s)?;
        if m.format_version != SURROGATE_FORMAT_VERSION {
            return Err(AdversaryError::InvalidConfig(format!(
                "unsupported surrogate format version {}",
                m.format_version
            )));
        }
        m.config.validate()?;
        let c = &m.config;
        let ok = m.w1.len() == c.conv1_channels * c.conv1_kernel
            && m.w2.len() == c.conv2_channels * c.conv1_channels * c.conv2_kernel
            && m.b2.len() == c.conv2_channels
            && m.w3.len() == c.conv2_channels
            && m.b3.len() == 1;
        if !ok {
            return Err(AdversaryError::InvalidConfig("surrogate tensor sizes do not match config".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AdversaryError> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AdversaryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn target_of(label: Label) -> Result<f64, AdversaryError> {
    label.target().ok_or(AdversaryError::Unlabeled)
}

/// Decision accuracy over labelled waveforms.
pub fn accuracy(model: &Surrogate, data: &[(&[f64], Label)]) -> Result<f64, AdversaryError> {
    if data.is_empty() {
        return Err(AdversaryError::EmptyData);
    }
    let mut correct = 0usize;
    for (x, label) in data {
        target_of(*label)?;
        if model.decide(x)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Training settings that work for the bundled corpus.
pub fn default_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        learning_rate: 3e-3,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

/// Mini-batch ADAM on mean BCE. Keeps the parameters of the epoch with the
/// best validation accuracy (earliest on ties).
pub fn train_surrogate(
    config: SurrogateConfig,
    train: &[(&[f64], Label)],
    val: &[(&[f64], Label)],
    tc: &TrainConfig,
) -> Result<(Surrogate, SurrogateReport), AdversaryError> {
    tc.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(AdversaryError::EmptyData);
    }
    let mut model = Surrogate::new(config, tc.seed)?;
    let mut state = AdamState::for_sizes(model.params().iter().map(|p| p.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, Surrogate)> = None;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
            for &i in chunk {
                let (x, label) = train[i];
                let y = target_of(label)?;
                let cache = model.forward(x)?;
                total += bce(cache.prob, y);
                let (g, _) = model.backward(x, &cache, (cache.prob - y) / chunk.len() as f64, false);
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                }
            }
            adam_update(model.params_mut(), &grads, &mut state, tc)?;
        }
        let val_accuracy = accuracy(&model, val)?;
        history.push(SurrogateEpoch {
            epoch,
            loss: total / train.len() as f64,
            val_accuracy,
        });
        log::debug!("surrogate epoch {epoch}: val accuracy {val_accuracy:.3}");
        if best.as_ref().is_none_or(|(a, _, _)| val_accuracy > *a) {
            best = Some((val_accuracy, epoch, model.clone()));
        }
    }
    let (val_accuracy, best_epoch, mut model) = best.expect("at least one epoch");
    model.trained = true;
    Ok((
        model,
        SurrogateReport {
            history,
            best_epoch,
            val_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SurrogateConfig {
        SurrogateConfig {
            mu_law: 15.0,
            conv1_channels: 3,
            conv1_kernel: 5,
            conv1_stride: 2,
            conv2_channels: 2,
            conv2_kernel: 3,
            conv2_stride: 2,
        }
    }

    fn signal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.9..0.9)).collect()
    }

    fn loss(m: &Surrogate, x: &[f64], y: f64) -> f64 {
        let p = m.score(x).unwrap();
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = Surrogate::new(small(), 4).unwrap();
        m.b2 = vec![0.05, -0.02];
        m.b3 = vec![0.1];
        let x = signal(40, 9);
        let y = 1.0;
        let cache = m.forward(&x).unwrap();
        let (grads, dx) = m.backward(&x, &cache, cache.prob - y, true);
        let h = 1e-6;
        let check = |num: f64, ana: f64| {
            assert!((num - ana).abs() <= 1e-5 * num.abs().max(ana.abs()) + 1e-8, "{num} vs {ana}");
        };
        for (pi, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let mut plus = m.clone();
                plus.params_mut()[pi][i] += h;
                let mut minus = m.clone();
                minus.params_mut()[pi][i] -= h;
                check((loss(&plus, &x, y) - loss(&minus, &x, y)) / (2.0 * h), g[i]);
            }
        }
        let dx = dx.unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            check((loss(&m, &xp, y) - loss(&m, &xm, y)) / (2.0 * h), dx[i]);
        }
    }

    #[test]
    fn zero_head_gives_zero_input_gradient() {
        let mut m = Surrogate::new(small(), 1).unwrap();
        m.w3.iter_mut().for_each(|w| *w = 0.0);
        let g = m.input_gradient(&signal(40, 2), 1.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_sign_flips_with_target() {
        let m = Surrogate::new(small(), 3).unwrap();
        let x = signal(60, 5);
        let a = m.input_gradient(&x, 1.0).unwrap();
        let b = m.input_gradient(&x, 0.0).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!(*u == 0.0 && *v == 0.0 || u.signum() == -v.signum());
        }
    }

    #[test]
    fn short_input_is_rejected() {
        let m = Surrogate::new(small(), 0).unwrap();
        let min = small().min_len();
        assert!(m.score(&vec![0.1; min]).is_ok());
        assert!(matches!(
            m.score(&vec![0.1; min - 1]),
            Err(AdversaryError::TooShort { .. })
        ));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = Surrogate::new(SurrogateConfig::default(), 8).unwrap();
        let back = Surrogate::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let x = signal(4000, 1);
        assert_eq!(m.score(&x).unwrap().to_bits(), back.score(&x).unwrap().to_bits());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let xs: Vec<(Vec<f64>, Label)> = (0..6)
            .map(|i| (signal(60, i), if i % 2 == 0 { Label::Bonafide } else { Label::Deepfake }))
            .collect();
        let refs: Vec<(&[f64], Label)> = xs.iter().map(|(x, l)| (x.as_slice(), *l)).collect();
        let tc = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let (m, _) = train_surrogate(small(), &refs[..4], &refs[4..], &tc).unwrap();
        let fresh = Surrogate::new(small(), 5).unwrap();
        assert_eq!(m.params(), fresh.params());
    }

    #[test]
    fn empty_data_is_rejected() {
        let x = signal(60, 1);
        let one = [(x.as_slice(), Label::Bonafide)];
        assert!(matches!(
            train_surrogate(small(), &[], &one, &TrainConfig::default()),
            Err(AdversaryError::EmptyData)
        ));
    }

    #[test]
    fn learns_loud_versus_quiet_noise() {
        let make = |i: usize, loud: bool| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let a = if loud { 0.5 } else { 0.02 };
            (0..400).map(|_| rng.random_range(-a..a)).collect()
        };
        let xs: Vec<(Vec<f64>, Label)> = (0..40)
            .map(|i| (make(i, i % 2 == 0), if i % 2 == 0 { Label::Bonafide } else { Label::Deepfake }))
            .collect();
        let refs: Vec<(&[f64], Label)> = xs.iter().map(|(x, l)| (x.as_slice(), *l)).collect();
        let tc = TrainConfig {
            epochs: 30,
            learning_rate: 1e-2,
            batch_size: 8,
            seed: 1,
            ..TrainConfig::default()
        };
        let (m, report) = train_surrogate(small(), &refs[..30], &refs[30..], &tc).unwrap();
        assert!(m.trained);
        assert!(report.val_accuracy >= 0.9, "{report:?}");
    }
}
