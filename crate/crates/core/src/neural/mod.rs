//! Sequence classifiers: LSTM, batch normalization, dense, dropout and
//! self-attention layers trained with binary cross-entropy and ADAM.

pub mod layers;

use std::fs;
use std::path::Path;

use log::info;
use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioBuffer;
use crate::features::{
    apply_scaler, extract_features, pad_batch, Batch, FeatureError, FeatureSequence, Label, ScalerParams,
    N_FEATURES,
};
use crate::metrics::{self, ScoredTrial};
use crate::pitch::PitchParams;
use layers::{
    mean_pool, mean_pool_backward, orthogonal, uniform, Activation, AttentionCache, BatchNorm, BatchNormCache,
    Dense, DenseCache, Dropout, Lstm, LstmCache, SelfAttention, Tensor,
};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("backward called with a cache from different weights")]
    StaleCache,
    #[error("no training data")]
    EmptyData,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model has no self-attention layer")]
    NoAttentionLayer,
    #[error("training sequence '{0}' has no usable label")]
    Unlabeled(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Lstm {
        units: usize,
        dropout: f64,
        return_sequences: bool,
    },
    BatchNorm,
    Dense {
        units: usize,
        activation: Activation,
    },
    Dropout {
        rate: f64,
    },
    SelfAttention {
        units: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    A,
    B,
    C,
    D,
    E,
}

impl std::str::FromStr for Preset {
    type Err = NeuralError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Preset::A),
            "B" => Ok(Preset::B),
            "C" => Ok(Preset::C),
            "D" => Ok(Preset::D),
            "E" => Ok(Preset::E),
            _ => Err(NeuralError::InvalidConfig(format!("unknown architecture '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

fn lstm(units: usize, return_sequences: bool) -> LayerSpec {
    LayerSpec::Lstm {
        units,
        dropout: 0.2,
        return_sequences,
    }
}

fn head(units: usize) -> [LayerSpec; 3] {
    [
        LayerSpec::Dense {
            units,
            activation: Activation::Relu,
        },
        LayerSpec::Dropout { rate: 0.2 },
        LayerSpec::Dense {
            units: 1,
            activation: Activation::Sigmoid,
        },
    ]
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let bn = || LayerSpec::BatchNorm;
        let mut layers = match p {
            Preset::A => vec![lstm(64, true), bn(), lstm(32, false), bn()],
            Preset::B => vec![lstm(100, true), bn(), lstm(50, false), bn()],
            Preset::C => vec![
                lstm(64, true),
                bn(),
                lstm(32, true),
                bn(),
                lstm(16, true),
                bn(),
                lstm(8, false),
                bn(),
            ],
            Preset::D => vec![lstm(100, true), bn()],
            Preset::E => vec![lstm(16, true), bn(), lstm(16, false), bn()],
        };
        let dense = match p {
            Preset::A => 32,
            Preset::B => 50,
            Preset::C => 8,
            Preset::D => 100,
            Preset::E => 16,
        };
        layers.extend(head(dense));
        Self {
            input_dim: N_FEATURES,
            layers,
        }
    }

    pub fn has_attention(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::SelfAttention { .. }))
    }

    /// Attention variant: the first LSTM feeds a self-attention layer whose
    /// context vector goes through batch normalization into the dense head.
    pub fn with_attention(&self) -> Result<Self, NeuralError> {
        if self.has_attention() {
            return Ok(self.clone());
        }
        let first = self
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Lstm { .. }))
            .ok_or_else(|| NeuralError::InvalidConfig("attention needs an LSTM layer".into()))?;
        let LayerSpec::Lstm { units, dropout, .. } = self.layers[first] else {
            unreachable!()
        };
        let head_start = self
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Dense { .. }))
            .ok_or_else(|| NeuralError::InvalidConfig("no dense head".into()))?;
        let mut layers = self.layers[..first].to_vec();
        layers.push(LayerSpec::Lstm {
            units,
            dropout,
            return_sequences: true,
        });
        layers.push(LayerSpec::SelfAttention { units });
        layers.push(LayerSpec::BatchNorm);
        layers.extend_from_slice(&self.layers[head_start..]);
        Ok(Self {
            input_dim: self.input_dim,
            layers,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate >= 0.0) {
            return Err(NeuralError::InvalidConfig(
                "epochs and batch size must be positive and the learning rate non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Lstm(Lstm),
    BatchNorm(BatchNorm),
    Dense(Dense),
    Dropout(Dropout),
    Attention(SelfAttention),
    MeanPool,
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Lstm(_) => "lstm",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Dense(_) => "dense",
            Layer::Dropout(_) => "dropout",
            Layer::Attention(_) => "self_attention",
            Layer::MeanPool => "mean_pool",
        }
    }

    /// Named arrays; trainable ones first, in gradient order.
    fn arrays(&self) -> Vec<(&'static str, Vec<usize>, &[f64], bool)> {
        fn s1(a: &Array1<f64>) -> &[f64] {
            a.as_slice().unwrap()
        }
        fn s2(a: &Array2<f64>) -> &[f64] {
            a.as_slice().unwrap()
        }
        match self {
            Layer::Lstm(l) => vec![
                ("w", l.w.shape().to_vec(), s2(&l.w), true),
                ("u", l.u.shape().to_vec(), s2(&l.u), true),
                ("b", l.b.shape().to_vec(), s1(&l.b), true),
            ],
            Layer::BatchNorm(l) => vec![
                ("gamma", l.gamma.shape().to_vec(), s1(&l.gamma), true),
                ("beta", l.beta.shape().to_vec(), s1(&l.beta), true),
                ("running_mean", l.running_mean.shape().to_vec(), s1(&l.running_mean), false),
                ("running_var", l.running_var.shape().to_vec(), s1(&l.running_var), false),
            ],
            Layer::Dense(l) => vec![
                ("w", l.w.shape().to_vec(), s2(&l.w), true),
                ("b", l.b.shape().to_vec(), s1(&l.b), true),
            ],
            Layer::Attention(l) => vec![
                ("w", l.w.shape().to_vec(), s2(&l.w), true),
                ("v", l.v.shape().to_vec(), s1(&l.v), true),
            ],
            Layer::Dropout(_) | Layer::MeanPool => vec![],
        }
    }

    fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64], bool)> {
        fn m1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().unwrap()
        }
        fn m2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().unwrap()
        }
        match self {
            Layer::Lstm(l) => vec![("w", m2(&mut l.w), true), ("u", m2(&mut l.u), true), ("b", m1(&mut l.b), true)],
            Layer::BatchNorm(l) => vec![
                ("gamma", m1(&mut l.gamma), true),
                ("beta", m1(&mut l.beta), true),
                ("running_mean", m1(&mut l.running_mean), false),
                ("running_var", m1(&mut l.running_var), false),
            ],
            Layer::Dense(l) => vec![("w", m2(&mut l.w), true), ("b", m1(&mut l.b), true)],
            Layer::Attention(l) => vec![("w", m2(&mut l.w), true), ("v", m1(&mut l.v), true)],
            Layer::Dropout(_) | Layer::MeanPool => vec![],
        }
    }
}

enum Cache {
    Lstm(LstmCache),
    BatchNorm(BatchNormCache),
    Dense(DenseCache),
    Dropout(Option<Vec<f64>>),
    Attention(AttentionCache),
    MeanPool,
}

/// Everything a training-mode forward pass leaves for `backward`.
pub struct ForwardCache {
    version: u64,
    mask: Array2<f64>,
    caches: Vec<Cache>,
    probs: Array1<f64>,
}

impl ForwardCache {
    pub fn probabilities(&self) -> &Array1<f64> {
        &self.probs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Array1<f64>,
    /// `B x T` weights, present when the model has a self-attention layer.
    pub attention: Option<Array2<f64>>,
}

/// Gradients in the order of `Model::params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    version: u64,
}

fn mask_f64(batch: &Batch) -> Array2<f64> {
    batch.mask.mapv(|m| if m { 1.0 } else { 0.0 })
}

impl Model {
    /// Seeded initialization: fan-in uniform input kernels, orthogonal
    /// recurrent kernels, zero biases except an LSTM forget-gate bias of 1.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, NeuralError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut width = config.input_dim;
        let mut is_seq = true;
        let mut layers = Vec::new();
        if config.input_dim == 0 {
            return Err(NeuralError::InvalidConfig("input width must be positive".into()));
        }
        for spec in &config.layers {
            match *spec {
                LayerSpec::Lstm {
                    units,
                    dropout,
                    return_sequences,
                } => {
                    if !is_seq {
                        return Err(NeuralError::InvalidConfig(
                            "an LSTM must follow a sequence-returning layer".into(),
                        ));
                    }
                    if units == 0 || !(0.0..1.0).contains(&dropout) {
                        return Err(NeuralError::InvalidConfig("bad LSTM units or dropout".into()));
                    }
                    let w = uniform(width, 4 * units, 1.0 / (width as f64).sqrt(), &mut rng);
                    let u = orthogonal(units, 4 * units, &mut rng);
                    let mut b = Array1::zeros(4 * units);
                    b.slice_mut(ndarray::s![units..2 * units]).fill(1.0);
                    layers.push(Layer::Lstm(Lstm {
                        units,
                        dropout,
                        return_sequences,
                        w,
                        u,
                        b,
                    }));
                    width = units;
                    is_seq = return_sequences;
                }
                LayerSpec::BatchNorm => layers.push(Layer::BatchNorm(BatchNorm::new(width))),
                LayerSpec::Dense { units, activation } => {
                    if units == 0 {
                        return Err(NeuralError::InvalidConfig("dense layer needs units".into()));
                    }
                    if is_seq {
                        layers.push(Layer::MeanPool);
                        is_seq = false;
                    }
                    layers.push(Layer::Dense(Dense {
                        activation,
                        w: uniform(width, units, 1.0 / (width as f64).sqrt(), &mut rng),
                        b: Array1::zeros(units),
                    }));
                    width = units;
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(NeuralError::InvalidConfig("dropout rate must be in [0, 1)".into()));
                    }
                    layers.push(Layer::Dropout(Dropout { rate }));
                }
                LayerSpec::SelfAttention { units } => {
                    if !is_seq || units == 0 {
                        return Err(NeuralError::InvalidConfig(
                            "self-attention needs a sequence input and positive units".into(),
                        ));
                    }
                    layers.push(Layer::Attention(SelfAttention {
                        w: uniform(width, units, 1.0 / (width as f64).sqrt(), &mut rng),
                        v: Array1::from_iter(
                            uniform(1, units, 1.0 / (units as f64).sqrt(), &mut rng).iter().copied(),
                        ),
                    }));
                    is_seq = false;
                }
            }
        }
        match config.layers.last() {
            Some(LayerSpec::Dense {
                units: 1,
                activation: Activation::Sigmoid,
            }) => {}
            _ => {
                return Err(NeuralError::InvalidConfig(
                    "the last layer must be Dense(1, sigmoid)".into(),
                ))
            }
        }
        Ok(Self {
            config: config.clone(),
            layers,
            version: 0,
        })
    }

    pub fn has_attention(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Attention(_)))
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| l.arrays().into_iter().filter(|a| a.3).map(|a| a.2))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| l.arrays_mut().into_iter().filter(|a| a.2).map(|a| a.1))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), NeuralError> {
        let f = batch.data.dim().2;
        if f != self.config.input_dim {
            return Err(NeuralError::ShapeMismatch(format!(
                "batch has {f} features, model expects {}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        batch: &Batch,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array1<f64>, Option<Array2<f64>>, Vec<Cache>, Array2<f64>), NeuralError> {
        self.check_batch(batch)?;
        let train = mode == Mode::Train;
        let mask = mask_f64(batch);
        let mut x = Tensor::Seq(batch.data.clone());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut attention = None;
        for layer in &self.layers {
            let (y, cache) = match (layer, &x) {
                (Layer::Lstm(l), Tensor::Seq(a)) => {
                    let (y, c) = l.forward(a, &mask, train, rng);
                    (y, Cache::Lstm(c))
                }
                (Layer::BatchNorm(l), _) => {
                    let (y, c) = l.forward(&x, &mask, train);
                    (y, Cache::BatchNorm(c))
                }
                (Layer::Dense(l), Tensor::Flat(a)) => {
                    let (y, c) = l.forward(a);
                    (Tensor::Flat(y), Cache::Dense(c))
                }
                (Layer::Dropout(l), _) => {
                    let (y, m) = l.forward(&x, train, rng);
                    (y, Cache::Dropout(m))
                }
                (Layer::Attention(l), Tensor::Seq(a)) => {
                    let (y, c) = l.forward(a, &mask);
                    attention = Some(c.alpha.clone());
                    (Tensor::Flat(y), Cache::Attention(c))
                }
                (Layer::MeanPool, Tensor::Seq(a)) => (Tensor::Flat(mean_pool(a, &mask)), Cache::MeanPool),
                (l, _) => {
                    return Err(NeuralError::ShapeMismatch(format!(
                        "layer {} received the wrong tensor rank",
                        l.kind()
                    )))
                }
            };
            caches.push(cache);
            x = y;
        }
        let Tensor::Flat(out) = x else {
            return Err(NeuralError::ShapeMismatch("model output is a sequence".into()));
        };
        Ok((out.column(0).to_owned(), attention, caches, mask))
    }

    /// Training-mode forward pass (batch statistics, dropout active) that keeps a cache for `backward`.
    pub fn forward_train(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<ForwardCache, NeuralError> {
        let (probs, _, caches, mask) = self.run(batch, Mode::Train, rng)?;
        for (layer, cache) in self.layers.iter_mut().zip(&caches) {
            if let (Layer::BatchNorm(l), Cache::BatchNorm(c)) = (layer, cache) {
                l.update_running(c);
            }
        }
        Ok(ForwardCache {
            version: self.version,
            mask,
            caches,
            probs,
        })
    }

    /// Inference-mode forward pass: a pure function of weights and input.
    pub fn predict(&self, batch: &Batch) -> Result<Prediction, NeuralError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (probs, attention, _, _) = self.run(batch, Mode::Infer, &mut rng)?;
        Ok(Prediction { probs, attention })
    }

    /// Exact gradient of the mean binary cross-entropy through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, labels: &[f64]) -> Result<(f64, Gradients), NeuralError> {
        if cache.version != self.version {
            return Err(NeuralError::StaleCache);
        }
        let loss = bce_loss(cache.probs.as_slice().unwrap(), labels)?;
        let n = labels.len() as f64;
        let dp: Array2<f64> = Array2::from_shape_fn((labels.len(), 1), |(b, _)| {
            let p = cache.probs[b];
            if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                0.0
            } else {
                -(labels[b] / p - (1.0 - labels[b]) / (1.0 - p)) / n
            }
        });
        let mut grad = Tensor::Flat(dp);
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        for (i, (layer, c)) in self.layers.iter().zip(&cache.caches).enumerate().rev() {
            grad = match (layer, c, &grad) {
                (Layer::Lstm(l), Cache::Lstm(c), g) => {
                    let (dx, gs) = l.backward(c, &cache.mask, g);
                    per_layer[i] = gs;
                    Tensor::Seq(dx)
                }
                (Layer::BatchNorm(l), Cache::BatchNorm(c), g) => {
                    let (dx, gs) = l.backward(c, g);
                    per_layer[i] = gs;
                    dx
                }
                (Layer::Dense(l), Cache::Dense(c), Tensor::Flat(g)) => {
                    let (dx, gs) = l.backward(c, g);
                    per_layer[i] = gs;
                    Tensor::Flat(dx)
                }
                (Layer::Dropout(_), Cache::Dropout(m), g) => Dropout::backward(m, g),
                (Layer::Attention(l), Cache::Attention(c), Tensor::Flat(g)) => {
                    let (dx, gs) = l.backward(c, g);
                    per_layer[i] = gs;
                    Tensor::Seq(dx)
                }
                (Layer::MeanPool, Cache::MeanPool, Tensor::Flat(g)) => {
                    Tensor::Seq(mean_pool_backward(g, &cache.mask))
                }
                _ => return Err(NeuralError::ShapeMismatch("cache does not match layers".into())),
            };
        }
        Ok((loss, Gradients(per_layer.into_iter().flatten().collect())))
    }
}

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64, NeuralError> {
    if probs.len() != labels.len() {
        return Err(NeuralError::LengthMismatch(probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(NeuralError::EmptyData);
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        Self::for_sizes(model.params().iter().map(|p| p.len()))
    }

    pub fn for_sizes(sizes: impl Iterator<Item = usize>) -> Self {
        let zeros: Vec<Vec<f64>> = sizes.map(|n| vec![0.0; n]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected ADAM update.
pub fn adam_step(
    model: &mut Model,
    grads: &Gradients,
    state: &mut AdamState,
    tc: &TrainConfig,
) -> Result<(), NeuralError> {
    adam_update(model.params_mut(), &grads.0, state, tc)
}

/// ADAM over any list of parameter slices with matching gradients and state.
pub fn adam_update(
    mut params: Vec<&mut [f64]>,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    tc: &TrainConfig,
) -> Result<(), NeuralError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NeuralError::ShapeMismatch("gradient list does not match parameters".into()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(NeuralError::ShapeMismatch("gradient tensor size differs".into()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - tc.beta1.powi(t);
    let c2 = 1.0 - tc.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g[i];
            v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= tc.learning_rate * mhat / (vhat.sqrt() + tc.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub val_eer: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_model: Model,
    pub best_model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn targets(seqs: &[FeatureSequence]) -> Result<Vec<f64>, NeuralError> {
    seqs.iter()
        .map(|s| s.label.target().ok_or_else(|| NeuralError::Unlabeled(s.utterance_id.clone())))
        .collect()
}

/// Scores for many sequences, batched to bound padding.
pub fn predict_sequences(model: &Model, seqs: &[FeatureSequence], batch_size: usize) -> Result<Vec<f64>, NeuralError> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let p = model.predict(&pad_batch(chunk)?)?;
        out.extend(p.probs.iter().copied());
    }
    Ok(out)
}

fn evaluate_split(model: &Model, seqs: &[FeatureSequence], batch_size: usize) -> Result<(f64, Option<f64>, f64), NeuralError> {
    let probs = predict_sequences(model, seqs, batch_size)?;
    let y = targets(seqs)?;
    let loss = bce_loss(&probs, &y)?;
    let trials: Vec<ScoredTrial> = seqs
        .iter()
        .zip(&probs)
        .map(|(s, &p)| ScoredTrial::new(s.utterance_id.clone(), p, s.label))
        .collect();
    let eer = metrics::eer(&trials).ok().map(|e| e.eer);
    let acc = metrics::confusion_metrics(&trials, 0.5)?.accuracy;
    Ok((loss, eer, acc))
}

/// Mini-batch ADAM training with a seeded shuffle; keeps the final model and the
/// model with the lowest validation EER (earliest on ties).
pub fn train(
    config: &ModelConfig,
    train_set: &[FeatureSequence],
    val_set: &[FeatureSequence],
    tc: &TrainConfig,
) -> Result<TrainOutcome, NeuralError> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(NeuralError::EmptyData);
    }
    let y = targets(train_set)?;
    let mut model = Model::new(config, tc.seed)?;
    let mut state = AdamState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(tc.batch_size) {
            let seqs: Vec<FeatureSequence> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let labels: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let batch = pad_batch(&seqs)?;
            let cache = model.forward_train(&batch, &mut rng)?;
            let (loss, grads) = model.backward(&cache, &labels)?;
            adam_step(&mut model, &grads, &mut state, tc)?;
            loss_sum += loss * idx.len() as f64;
        }
        let mut record = EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            val_loss: None,
            val_eer: None,
            val_accuracy: None,
        };
        if !val_set.is_empty() {
            let (vl, veer, vacc) = evaluate_split(&model, val_set, tc.batch_size)?;
            record.val_loss = Some(vl);
            record.val_eer = veer;
            record.val_accuracy = Some(vacc);
            if let Some(e) = veer {
                if best.as_ref().is_none_or(|b| e < b.0) {
                    best = Some((e, epoch, model.clone()));
                }
            }
        }
        if epoch == 1 || epoch % 20 == 0 || epoch == tc.epochs {
            info!(
                "epoch {epoch}: loss {:.4} val_eer {:?} val_acc {:?}",
                record.loss, record.val_eer, record.val_accuracy
            );
        }
        history.push(record);
    }
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (tc.epochs, model.clone()),
    };
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_epoch,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A trained model plus everything needed to score raw audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub config: ModelConfig,
    pub attention: bool,
    pub window_ms: u32,
    pub pitch: PitchParams,
    pub scaler: ScalerParams,
    pub seed: u64,
    pub tensors: Vec<TensorRecord>,
}

impl ModelBundle {
    pub fn new(model: &Model, scaler: ScalerParams, pitch: PitchParams, window_ms: u32, seed: u64) -> Self {
        let tensors = model
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.arrays().into_iter().map(move |(name, shape, data, _)| TensorRecord {
                    name: format!("{i}.{}.{name}", l.kind()),
                    shape,
                    data: data.to_vec(),
                })
            })
            .collect();
        Self {
            format_version: BUNDLE_FORMAT_VERSION,
            config: model.config.clone(),
            attention: model.has_attention(),
            window_ms,
            pitch,
            scaler,
            seed,
            tensors,
        }
    }

    pub fn model(&self) -> Result<Model, NeuralError> {
        if self.format_version != BUNDLE_FORMAT_VERSION {
            return Err(NeuralError::InvalidConfig(format!(
                "unsupported bundle format {}",
                self.format_version
            )));
        }
        let mut model = Model::new(&self.config, self.seed)?;
        let mut records = self.tensors.iter();
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            for (name, slot, _) in layer.arrays_mut() {
                let expected = format!("{i}.{kind}.{name}");
                let rec = records
                    .next()
                    .filter(|r| r.name == expected)
                    .ok_or_else(|| NeuralError::ShapeMismatch(format!("missing tensor {expected}")))?;
                if rec.data.len() != slot.len() || rec.shape.iter().product::<usize>() != slot.len() {
                    return Err(NeuralError::ShapeMismatch(format!("tensor {expected} has the wrong size")));
                }
                slot.copy_from_slice(&rec.data);
            }
        }
        if records.next().is_some() {
            return Err(NeuralError::ShapeMismatch("bundle has extra tensors".into()));
        }
        model.version = 0;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String, NeuralError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, NeuralError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NeuralError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NeuralError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilePrediction {
    pub score: f64,
    pub label: Label,
    pub features: FeatureSequence,
    pub attention: Option<Vec<f64>>,
}

/// Scores one clip with the bundle's scaler and window size; deepfake when score ≥ 0.5.
pub fn predict_file(
    model: &Model,
    bundle: &ModelBundle,
    buffer: &AudioBuffer,
    params: &PitchParams,
) -> Result<FilePrediction, NeuralError> {
    let raw = extract_features(buffer, params, bundle.window_ms)?;
    let scaled = apply_scaler(&raw, &bundle.scaler)?;
    let p = model.predict(&pad_batch(std::slice::from_ref(&scaled))?)?;
    let score = p.probs[0];
    Ok(FilePrediction {
        score,
        label: if score >= 0.5 { Label::Deepfake } else { Label::Bonafide },
        features: raw,
        attention: p.attention.map(|a| a.row(0).to_vec()),
    })
}

#[doc(hidden)]
pub fn batch_from_array(data: Array3<f64>, lengths: &[usize]) -> Batch {
    let (b, t, _) = data.dim();
    let mask = Array2::from_shape_fn((b, t), |(i, j)| j < lengths[i]);
    Batch { data, mask }
}
