//! Weighted cross-entropy, Adam with L2 decay, and a deterministic training
//! loop over a [`DatasetAdapter`].

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{make_batch, DataError, DatasetAdapter, Normalization};
use crate::engine::{EngineError, Executor, Mode, ModelParams, Tensor, BN_MOMENTUM};
use crate::meta_arch::SegmentationModel;

pub const DEFAULT_WEIGHT_CONSTANT: f64 = 1.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("class weight domain error: ln({arg}) <= 0 for class {class}")]
    WeightDomain { class: usize, arg: f64 },
    #[error("invalid frequencies: {0}")]
    Frequencies(String),
    #[error("invalid loss config: {0}")]
    LossConfig(String),
    #[error("invalid optimizer spec: {0}")]
    OptimSpec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} at pixel {pixel} is neither a weighted class nor the ignore index")]
    LabelOutOfRange { label: u8, pixel: usize },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("tensor `{name}` has shape {got:?}, state has {expected:?}")]
    ShapeConflict {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// `w_k = 1 / ln(c + p_k)` for pixel frequencies `p` summing to 1.
pub fn compute_class_weights(freqs: &[f64], c: f64) -> Result<Vec<f64>> {
    if freqs.is_empty() {
        return Err(TrainError::Frequencies("no classes".into()));
    }
    if let Some(p) = freqs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(TrainError::Frequencies(format!("frequency {p} is not a probability")));
    }
    let sum: f64 = freqs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(TrainError::Frequencies(format!("frequencies sum to {sum}")));
    }
    freqs
        .iter()
        .enumerate()
        .map(|(class, p)| {
            let arg = c + p;
            if arg <= 1.0 || !arg.is_finite() {
                Err(TrainError::WeightDomain { class, arg })
            } else {
                Ok(1.0 / arg.ln())
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// One weight per evaluated class; logit channels beyond these are not
    /// supervised.
    pub class_weights: Vec<f64>,
    pub ignore_index: u8,
    pub weight_constant_c: f64,
}

impl LossConfig {
    pub fn uniform(num_classes: usize, ignore_index: u8) -> Self {
        Self {
            class_weights: vec![1.0; num_classes],
            ignore_index,
            weight_constant_c: DEFAULT_WEIGHT_CONSTANT,
        }
    }

    /// Weights from the class histogram of `dataset`.
    pub fn from_dataset(dataset: &dyn DatasetAdapter, c: f64) -> Result<Self> {
        let freqs = crate::data::class_histogram(dataset)?;
        Ok(Self {
            class_weights: compute_class_weights(&freqs, c)?,
            ignore_index: dataset.ignore_index(),
            weight_constant_c: c,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.class_weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(TrainError::LossConfig(format!("weight {w} is not finite and non-negative")));
        }
        if (self.ignore_index as usize) < self.class_weights.len() {
            return Err(TrainError::LossConfig(format!(
                "ignore index {} collides with a weighted class",
                self.ignore_index
            )));
        }
        Ok(())
    }
}

/// Mean over non-ignored pixels of `w[label] * -log softmax(logits)[label]`,
/// and its gradient with respect to the logits.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[u8], config: &LossConfig) -> Result<(f64, Tensor)> {
    config.validate()?;
    let (n, k, h, w) = logits.dims4();
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(TrainError::Shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if config.class_weights.len() > k {
        return Err(TrainError::Shape(format!(
            "{} class weights for {k} logit channels",
            config.class_weights.len()
        )));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let valid = labels.iter().filter(|&&l| l != config.ignore_index).count();
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / valid as f64;
    let x = logits.data();
    let mut loss = 0.0;
    let mut probs = vec![0.0; k];
    for b in 0..n {
        for p in 0..plane {
            let pix = b * plane + p;
            let label = labels[pix];
            if label == config.ignore_index {
                continue;
            }
            let wl = *config
                .class_weights
                .get(label as usize)
                .ok_or(TrainError::LabelOutOfRange { label, pixel: pix })?;
            let at = |c: usize| (b * k + c) * plane + p;
            let max = (0..k).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (x[at(c)] - max).exp();
                z += *pr;
            }
            loss += wl * (z.ln() - (x[at(label as usize)] - max));
            let g = grad.data_mut();
            for (c, pr) in probs.iter().enumerate() {
                let onehot = if c == label as usize { 1.0 } else { 0.0 };
                g[at(c)] = wl * scale * (pr / z - onehot);
            }
        }
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimMethod {
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimSpec {
    pub method: OptimMethod,
    pub learning_rate: f64,
    /// Coupled L2 coefficient added to conv weight gradients.
    pub l2_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self {
            method: OptimMethod::Adam,
            learning_rate: 1e-4,
            l2_decay: 5e-4,
            batch_size: 4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::OptimSpec(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.l2_decay >= 0.0 && self.l2_decay.is_finite()) {
            return bad("l2_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("betas must lie in [0, 1) and epsilon be > 0");
        }
        Ok(())
    }
}

/// Whether L2 decay applies: conv and transposed-conv weights only.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: usize,
    pub params: ModelParams,
    pub first_moments: BTreeMap<String, Tensor>,
    pub second_moments: BTreeMap<String, Tensor>,
    /// Loss of each completed step, before its update.
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let zeros = |p: &ModelParams| {
            p.parameters
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            step: 0,
            first_moments: zeros(&params),
            second_moments: zeros(&params),
            params,
            loss_history: Vec::new(),
        }
    }

    /// One Adam update with bias correction.
    pub fn apply_gradients(&mut self, grads: &BTreeMap<String, Tensor>, spec: &OptimSpec) {
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - spec.beta1.powi(t);
        let c2 = 1.0 - spec.beta2.powi(t);
        for (name, p) in self.params.parameters.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let decay = if is_decayed(name) { spec.l2_decay } else { 0.0 };
            let m = self.first_moments.get_mut(name).expect("moments track parameters");
            let v = self.second_moments.get_mut(name).expect("moments track parameters");
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi + decay * *w;
                *mi = spec.beta1 * *mi + (1.0 - spec.beta1) * gi;
                *vi = spec.beta2 * *vi + (1.0 - spec.beta2) * gi * gi;
                *w -= spec.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + spec.epsilon);
            }
        }
        self.step += 1;
    }
}

/// Names matched and left untouched by [`load_weights`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub matched: Vec<String>,
    /// State tensors absent from the supplied map.
    pub unmatched: Vec<String>,
    /// Supplied tensors with no counterpart in the state.
    pub unused: Vec<String>,
}

/// Replaces parameters and buffers whose names appear in `tensors`.
pub fn load_weights(state: &TrainState, tensors: &BTreeMap<String, Tensor>) -> Result<(TrainState, LoadReport)> {
    let mut next = state.clone();
    let mut report = LoadReport::default();
    for store in [&mut next.params.parameters, &mut next.params.buffers] {
        for (name, t) in store.iter_mut() {
            match tensors.get(name) {
                Some(new) if new.shape() != t.shape() => {
                    return Err(TrainError::ShapeConflict {
                        name: name.clone(),
                        expected: t.shape().to_vec(),
                        got: new.shape().to_vec(),
                    })
                }
                Some(new) => {
                    *t = new.clone();
                    report.matched.push(name.clone());
                }
                None => report.unmatched.push(name.clone()),
            }
        }
    }
    report.unused = tensors
        .keys()
        .filter(|k| !next.params.parameters.contains_key(*k) && !next.params.buffers.contains_key(*k))
        .cloned()
        .collect();
    Ok((next, report))
}

/// Dataset indices of the `step`-th batch: the dataset is walked in a
/// per-epoch seeded permutation, so batch contents depend only on
/// `(seed, step)` and resumed runs see the same sequence.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|j| {
            let pos = step * batch_size + j;
            let epoch = pos / len;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..len).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch as u64);
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("set above").1[pos % len]
        })
        .collect()
}

/// Bundles everything a training run needs.
pub struct Trainer<'a> {
    pub model: &'a SegmentationModel,
    pub dataset: &'a dyn DatasetAdapter,
    pub optim: OptimSpec,
    pub loss: LossConfig,
    pub normalization: Normalization,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a SegmentationModel, dataset: &'a dyn DatasetAdapter, optim: OptimSpec, loss: LossConfig) -> Self {
        Self {
            model,
            dataset,
            optim,
            loss,
            normalization: Normalization::default(),
        }
    }

    pub fn initial_state(&self) -> Result<TrainState> {
        Ok(TrainState::new(ModelParams::for_model(self.model, self.optim.seed)?))
    }

    /// Runs `steps` further steps from `state`.
    pub fn resume(&self, mut state: TrainState, steps: usize) -> Result<TrainState> {
        self.optim.validate()?;
        self.loss.validate()?;
        if self.dataset.is_empty() {
            return Err(DataError::Empty.into());
        }
        state.params.check(&self.model.graph)?;
        let ex = Executor::new(&self.model.graph)?;
        for _ in 0..steps {
            let idx = batch_indices(self.dataset.len(), self.optim.batch_size, self.optim.seed, state.step);
            let batch = make_batch(self.dataset, &idx, &self.normalization)?;
            let tape = ex.forward(&state.params, std::slice::from_ref(&batch.images), Mode::Train)?;
            let (loss, dlogits) = weighted_cross_entropy(tape.outputs()[0], &batch.labels, &self.loss)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: state.step, loss });
            }
            let grads = ex.backward(&state.params, &tape, &[dlogits])?;
            state.params.update_running_stats(&tape, BN_MOMENTUM);
            state.apply_gradients(&grads.parameters, &self.optim);
            state.loss_history.push(loss);
        }
        Ok(state)
    }

    pub fn run(&self, steps: usize) -> Result<TrainState> {
        self.resume(self.initial_state()?, steps)
    }
}

pub fn train(
    model: &SegmentationModel,
    dataset: &dyn DatasetAdapter,
    optim: &OptimSpec,
    loss: &LossConfig,
    steps: usize,
) -> Result<TrainState> {
    Trainer::new(model, dataset, optim.clone(), loss.clone()).run(steps)
}

/// Per-pixel argmax over the first `num_classes` channels of `(N, K, H, W)`.
pub fn argmax_labels(logits: &Tensor, num_classes: usize) -> Vec<u8> {
    let (n, k, h, w) = logits.dims4();
    let k = k.min(num_classes);
    let plane = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let base = b * logits.shape()[1] * plane + p;
            let mut best = 0;
            for c in 1..k {
                if x[base + c * plane] > x[base + best * plane] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Eval-mode predictions for dataset `indices`, one label plane per image.
pub fn predict(
    model: &SegmentationModel,
    params: &ModelParams,
    dataset: &dyn DatasetAdapter,
    indices: &[usize],
    norm: &Normalization,
) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
    let ex = Executor::new(&model.graph)?;
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let batch = make_batch(dataset, &[i], norm)?;
        let logits = ex.infer(params, std::slice::from_ref(&batch.images))?;
        out.push((argmax_labels(&logits[0], dataset.num_classes()), batch.labels));
    }
    Ok(out)
}

/// Fraction of non-ignored pixels predicted correctly.
pub fn pixel_accuracy(pairs: &[(Vec<u8>, Vec<u8>)], ignore_index: u8) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (pred, label) in pairs {
        for (p, l) in pred.iter().zip(label) {
            if *l != ignore_index {
                total += 1;
                hit += usize::from(p == l);
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}
