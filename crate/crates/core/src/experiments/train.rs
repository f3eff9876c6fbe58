//! Mini-batch Adam training of [`ResNetModel`] on cross-entropy plus a
//! weight-difference penalty.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::resnet::{penalty_with_grad, weight_lipschitz, ModelGradients, PenaltyKind, ResNetModel, WeightTensor};

/// Samples per deterministic work unit in batch reductions.
const CHUNK: usize = 32;

/// Bias-corrected Adam over one flat parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

pub(crate) mod lambda_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => super::parse_lambda(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// Parses a penalty factor; `inf`/`infinity` select the weight-tied model.
pub fn parse_lambda(text: &str) -> Result<f64> {
    let t = text.trim().to_ascii_lowercase();
    let v = match t.as_str() {
        "inf" | "infinity" | "+inf" => f64::INFINITY,
        _ => t
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("cannot parse lambda `{text}`")))?,
    };
    if !(v >= 0.0) {
        return Err(Error::invalid(format!("lambda must be nonnegative, got {text}")));
    }
    Ok(v)
}

pub fn format_lambda(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Penalty factor; infinity trains the weight-tied model.
    #[serde(with = "lambda_serde")]
    pub lambda: f64,
    pub penalty_kind: PenaltyKind,
    pub train_projections: bool,
    /// Seeds the shuffling order only.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 0.02,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 0.0,
            penalty_kind: PenaltyKind::FrobL2,
            train_projections: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn weight_tied(&self) -> bool {
        self.lambda.is_infinite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0 for the untrained model.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub gap: f64,
    pub weight_lipschitz: f64,
    pub penalty: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub initial: EpochMetrics,
    pub epochs: Vec<EpochMetrics>,
}

impl RunRecord {
    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().unwrap_or(&self.initial)
    }

    /// Equality of every recorded metric except wall time.
    pub fn same_metrics(&self, other: &RunRecord) -> bool {
        let strip = |e: &EpochMetrics| EpochMetrics {
            wall_time_s: 0.0,
            ..e.clone()
        };
        self.config == other.config
            && strip(&self.initial) == strip(&other.initial)
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| strip(a) == strip(b))
    }
}

/// `(log Σ_j e^{z_j} − z_y, softmax(z) − e_y)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn check_shapes(model: &ResNetModel, data: &Dataset) -> Result<()> {
    if model.input_dim() != data.dim() {
        return Err(Error::invalid(format!(
            "model input dimension {} does not match data dimension {}",
            model.input_dim(),
            data.dim()
        )));
    }
    if model.output_dim() < data.classes() {
        return Err(Error::invalid(format!(
            "model has {} outputs for {} classes",
            model.output_dim(),
            data.classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy over `data`.
pub fn mean_loss(model: &ResNetModel, data: &Dataset) -> Result<f64> {
    check_shapes(model, data)?;
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let partial: Vec<f64> = indices
        .par_chunks(CHUNK * 8)
        .map(|chunk| {
            chunk.iter().try_fold(0.0, |acc, &i| {
                let out = model.predict(data.input(i))?;
                Ok::<_, Error>(acc + cross_entropy(&out, data.label(i)).0)
            })
        })
        .collect::<Result<_>>()?;
    Ok(partial.iter().sum::<f64>() / data.len() as f64)
}

pub fn accuracy(model: &ResNetModel, data: &Dataset) -> Result<f64> {
    check_shapes(model, data)?;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let out = model.predict(data.input(i))?;
        let best = (0..out.len())
            .max_by(|&a, &b| out[a].total_cmp(&out[b]))
            .unwrap_or(0);
        correct += usize::from(best == data.label(i));
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean test cross-entropy minus mean train cross-entropy, both unpenalized.
pub fn generalization_gap(model: &ResNetModel, train: &Dataset, test: &Dataset) -> Result<f64> {
    Ok(mean_loss(model, test)? - mean_loss(model, train)?)
}

/// Mean cross-entropy over the batch `indices` and its gradient.
///
/// Chunks are reduced in a fixed order, so the result does not depend on
/// thread scheduling.
pub fn batch_gradient(
    model: &ResNetModel,
    data: &Dataset,
    indices: &[usize],
) -> Result<(f64, ModelGradients)> {
    check_shapes(model, data)?;
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let q = model.output_dim();
    let partial: Vec<(f64, ModelGradients)> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = ModelGradients::zeros_like(model);
            let mut loss = 0.0;
            for &i in chunk {
                let trace = model.forward(data.input(i))?;
                let (l, mut g) = cross_entropy(&trace.output, data.label(i));
                g.resize(q, 0.0);
                loss += l;
                model.backward_into(&trace, &g, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut iter = partial.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / indices.len() as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// Loss gradient plus `λ` times the penalty (sub)gradient; the penalty is
/// skipped for weight-tied models and `λ ∈ {0, ∞}`.
pub fn penalized_gradient(
    model: &ResNetModel,
    data: &Dataset,
    indices: &[usize],
    lambda: f64,
    kind: PenaltyKind,
) -> Result<(f64, ModelGradients)> {
    let (loss, mut grads) = batch_gradient(model, data, indices)?;
    if lambda > 0.0 && lambda.is_finite() && !model.core.is_tied() {
        let (_, pg) = penalty_with_grad(&model.core, kind);
        for (g, p) in grads.core.iter_mut().zip(&pg) {
            *g += lambda * p;
        }
    }
    Ok((loss, grads))
}

/// Ties every layer to `W_1`.
pub fn tie_weights(model: &ResNetModel) -> Result<ResNetModel> {
    let mut tied = model.clone();
    tied.core = WeightTensor::tied(model.core.depth(), &model.core.layer_matrix(0))?;
    Ok(tied)
}

/// What the epoch observer sees after each completed epoch.
pub struct EpochEvent<'a> {
    pub model: &'a ResNetModel,
    pub metrics: &'a EpochMetrics,
}

pub fn train(
    model: &ResNetModel,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ResNetModel, RunRecord)> {
    train_observed(model, train_data, test_data, cfg, |_| Ok(()))
}

/// [`train`] with a callback after every epoch (checkpointing, progress).
pub fn train_observed<F>(
    model: &ResNetModel,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(ResNetModel, RunRecord)>
where
    F: FnMut(&EpochEvent<'_>) -> Result<()>,
{
    cfg.validate()?;
    check_shapes(model, train_data)?;
    check_shapes(model, test_data)?;
    if train_data.is_empty() || test_data.is_empty() {
        return Err(Error::invalid("train and test sets must be non-empty"));
    }
    let started = Instant::now();
    let mut model = if cfg.weight_tied() && !model.core.is_tied() {
        tie_weights(model)?
    } else {
        model.clone()
    };
    model.train_projections = cfg.train_projections;

    let measure = |model: &ResNetModel, epoch: usize| -> Result<EpochMetrics> {
        let train_loss = mean_loss(model, train_data)?;
        let test_loss = mean_loss(model, test_data)?;
        Ok(EpochMetrics {
            epoch,
            train_loss,
            test_loss,
            gap: test_loss - train_loss,
            weight_lipschitz: weight_lipschitz(&model.core),
            penalty: penalty_with_grad(&model.core, cfg.penalty_kind).0,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    };
    let initial = measure(&model, 0)?;

    let adam = |len| Adam::new(len, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut opt_core = adam(model.core.params().len());
    let mut opt_a = model.input_proj.as_ref().map(|a| adam(a.as_slice().len()));
    let mut opt_b = model.output_proj.as_ref().map(|b| adam(b.as_slice().len()));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (batch, indices) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = Error::TrainingDivergence { epoch, batch };
            let (loss, grads) =
                penalized_gradient(&model, train_data, indices, cfg.lambda, cfg.penalty_kind).map_err(
                    |e| match e {
                        Error::Divergence { .. } => Error::TrainingDivergence { epoch, batch },
                        other => other,
                    },
                )?;
            if !loss.is_finite() {
                return Err(diverged);
            }
            opt_core.update(model.core.params_mut(), &grads.core);
            if cfg.train_projections {
                if let (Some(a), Some(opt), Some(g)) = (&mut model.input_proj, &mut opt_a, &grads.input_proj) {
                    opt.update(a.as_mut_slice(), g);
                }
                if let (Some(b), Some(opt), Some(g)) = (&mut model.output_proj, &mut opt_b, &grads.output_proj) {
                    opt.update(b.as_mut_slice(), g);
                }
            }
            if model.core.params().iter().any(|v| !v.is_finite()) {
                return Err(diverged);
            }
        }
        let metrics = measure(&model, epoch).map_err(|e| match e {
            Error::Divergence { .. } => Error::TrainingDivergence { epoch, batch: 0 },
            other => other,
        })?;
        observer(&EpochEvent {
            model: &model,
            metrics: &metrics,
        })?;
        epochs.push(metrics);
    }
    Ok((
        model,
        RunRecord {
            config: cfg.clone(),
            initial,
            epochs,
        },
    ))
}
