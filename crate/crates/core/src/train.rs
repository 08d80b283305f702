//! Surrogate-gradient BPTT training: loss, Nadam, step schedule, epoch driver
//! and split evaluation.

use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PseudoFrame;
use crate::labels::{ClassMap, IGNORE_LABEL};
use crate::metrics::{
    layer_firing_rate, mean_iou, model_firing_rate, pixel_accuracy, ClassIou, ConfusionMatrix, LayerRate,
    MetricsError, MetricsReport, MiouMode,
};
use crate::model::{EvSegSnn, ModelError};
use crate::tensor::{softmax_ce, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite values in {tensor} at epoch {epoch}, step {step}")]
    NonFinite { tensor: String, epoch: usize, step: u64 },
    #[error("sample {index}: {message}")]
    Sample { index: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs at which the learning rate is divided by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global L2 norm bound on the gradient; off when `None`.
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<u64>,
    /// Label value excluded from loss and metrics.
    pub ignore_label: Option<u8>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Worker threads per batch; `None` uses the available parallelism.
    /// Results do not depend on it.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            milestones: vec![8, 16, 24, 50],
            decay: 10.0,
            batch_size: 16,
            epochs: 70,
            seed: 0,
            grad_clip: None,
            max_steps: None,
            ignore_label: Some(IGNORE_LABEL),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing, got {:?}", self.milestones));
        }
        if !(self.decay > 1.0) {
            return bad(format!("decay must exceed 1, got {}", self.decay));
        }
        if self.batch_size == 0 || self.threads == Some(0) {
            return bad("batch_size and threads must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("need 0 <= beta1, beta2 < 1 and eps > 0".into());
        }
        Ok(())
    }
}

/// Step schedule: the base rate divided by `decay` once per milestone reached.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let crossed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.learning_rate / cfg.decay.powi(crossed as i32)
}

/// Loss of one sample scaled by `1 / batch`, with the matching logit gradient.
///
/// Summed over scored pixels, so a uniform `C`-way prediction costs `ln C` per pixel.
pub fn compute_loss<F: Real>(
    logits: &Tensor<F>,
    label: &ClassMap,
    ignore: Option<u8>,
    batch: usize,
) -> Result<(F, Tensor<F>)> {
    let mut out = softmax_ce(logits, label, ignore)?;
    let inv = F::one() / F::from_usize(batch.max(1)).expect("batch fits in a float");
    out.grad.scale(inv);
    Ok((out.loss * inv, out.grad))
}

/// Adam with Nesterov momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Zero moments mirroring `shapes` (one element count per parameter).
    pub fn new(sizes: impl IntoIterator<Item = usize>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn for_model<F: Real>(model: &EvSegSnn<F>, cfg: &TrainConfig) -> Self {
        Self::new(model.named_params().iter().map(|(_, p)| p.len()), cfg.beta1, cfg.beta2, cfg.eps)
    }
}

/// One Nadam update of every parameter.
///
/// With `m̂`, `v̂` the bias-corrected moments the step is
/// `lr * (β1 m̂ + (1 - β1) g) / (sqrt(v̂) + ε)`; at `t = 1` both momentum
/// terms reduce to `g`.
pub fn nadam_step<F: Real>(params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>], state: &mut OptimizerState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        assert_eq!(p.len(), g.len(), "parameter/gradient shape mismatch");
        assert_eq!(p.len(), m.len(), "optimizer moment shape mismatch");
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = gi.to_f64().expect("finite gradient");
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            let update = lr * (b1 * m_hat + (1.0 - b1) * g) / (v_hat.sqrt() + eps);
            *pi = F::from_f64(pi.to_f64().expect("finite parameter") - update).expect("representable parameter");
        }
    }
}

/// One optimizer step's log entry, serialized as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far (1-based).
    pub step: u64,
    /// Batch index within the epoch.
    pub batch: usize,
    /// Mean over the batch of per-sample pixel-summed loss.
    pub loss: f64,
    pub lr: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

/// Callbacks observed by [`train_epochs`]; returning `Break` ends training.
pub trait TrainHooks {
    fn on_step(&mut self, _record: &StepRecord, _model: &EvSegSnn<f32>) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _model: &EvSegSnn<f32>) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

/// Hooks that never interrupt.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Train `model` in place over `dataset` and return the per-step log.
///
/// Each epoch shuffles the sample order with a generator seeded once from
/// `cfg.seed`; the last short batch is kept and its loss normalised by its
/// own size. Gradients are reduced in batch order.
pub fn train_epochs(
    model: &mut EvSegSnn<f32>,
    dataset: &[PseudoFrame],
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut state = OptimizerState::for_model(model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainingLog::default();
    let start = Instant::now();
    let mut step = 0u64;
    let workers = cfg
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .min(cfg.batch_size)
        .max(1);
    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut rng);
        for (batch, indices) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let nonfinite = |tensor: String| TrainError::NonFinite {
                tensor,
                epoch,
                step: step + 1,
            };
            let mut grads = model.zeros_like();
            let mut loss = 0.0f64;
            for chunk in indices.chunks(workers) {
                let results = sample_gradients(model, dataset, chunk, indices.len(), cfg.ignore_label);
                for (&i, result) in chunk.iter().zip(results) {
                    let (l, g) = result.map_err(|e| match e {
                        SampleFailure::NonFinite(what) => nonfinite(format!("{what} of sample {i}")),
                        SampleFailure::Error(e) => e,
                    })?;
                    loss += l;
                    for (acc, part) in grads.params_mut().into_iter().zip(g.named_params()) {
                        acc.add_assign(part.1)?;
                    }
                }
            }
            if let Some((name, _)) = grads.named_params().into_iter().find(|(_, g)| !g.all_finite()) {
                return Err(nonfinite(format!("gradient of {name}")));
            }
            if let Some(limit) = cfg.grad_clip {
                clip_global_norm(&mut grads, limit);
            }
            {
                let g: Vec<&Tensor<f32>> = grads.named_params().into_iter().map(|(_, t)| t).collect();
                let mut p = model.params_mut();
                nadam_step(&mut p, &g, &mut state, lr);
            }
            step += 1;
            let record = StepRecord {
                epoch,
                step,
                batch,
                loss,
                lr,
                wall_time: start.elapsed().as_secs_f64(),
            };
            log::debug!("epoch {epoch} step {step} loss {loss:.5} lr {lr:e}");
            let flow = hooks.on_step(&record, model);
            log.records.push(record);
            if flow.is_break() {
                break 'epochs;
            }
        }
        if hooks.on_epoch_end(epoch, model).is_break() {
            break;
        }
    }
    Ok(log)
}

enum SampleFailure {
    NonFinite(&'static str),
    Error(TrainError),
}

/// Loss and parameter gradient of each listed sample, one thread per sample.
fn sample_gradients(
    model: &EvSegSnn<f32>,
    dataset: &[PseudoFrame],
    indices: &[usize],
    batch: usize,
    ignore: Option<u8>,
) -> Vec<std::result::Result<(f64, EvSegSnn<f32>), SampleFailure>> {
    let one = |i: usize| -> std::result::Result<(f64, EvSegSnn<f32>), SampleFailure> {
        let sample = &dataset[i];
        let fail = |e: TrainError| SampleFailure::Error(e);
        let (logits, cache) = model.forward_sequence(&sample.spikes).map_err(|e| fail(e.into()))?;
        if !logits.all_finite() {
            return Err(SampleFailure::NonFinite("logits"));
        }
        let (loss, grad) = compute_loss(&logits, &sample.label, ignore, batch).map_err(|e| {
            fail(TrainError::Sample {
                index: i,
                message: e.to_string(),
            })
        })?;
        if !loss.is_finite() {
            return Err(SampleFailure::NonFinite("loss"));
        }
        let mut grads = model.zeros_like();
        model.backward(&cache, &grad, &mut grads).map_err(|e| fail(e.into()))?;
        Ok((loss as f64, grads))
    };
    if indices.len() == 1 {
        return vec![one(indices[0])];
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = indices.iter().map(|&i| scope.spawn(move || one(i))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    })
}

fn clip_global_norm(grads: &mut EvSegSnn<f32>, limit: f64) {
    let norm = grads
        .named_params()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let s = (limit / norm) as f32;
        grads.params_mut().into_iter().for_each(|t| t.scale(s));
    }
}

/// Per-pixel argmax over the class axis of `[C, H, W]` logits; ties go to
/// the lowest class.
pub fn argmax_classes<F: Real>(logits: &Tensor<F>) -> ClassMap {
    let [c, h, w] = logits.shape().try_into().expect("logits are [C, H, W]");
    let plane = h * w;
    let z = logits.data();
    let data = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if z[k * plane + p] > z[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    ClassMap::new(h, w, data).expect("length matches shape")
}

/// Options for [`evaluate_split`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub ignore_label: Option<u8>,
    pub miou_mode: MiouMode,
    /// Column names; defaults to `class{i}`.
    pub class_names: Option<Vec<String>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ignore_label: Some(IGNORE_LABEL),
            miou_mode: MiouMode::default(),
            class_names: None,
        }
    }
}

/// Inference over `dataset` aggregated into one confusion matrix, plus
/// firing rates from the spike counts of every layer.
pub fn evaluate_split<F: Real>(model: &EvSegSnn<F>, dataset: &[PseudoFrame], opts: &EvalOptions) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cfg = model.config();
    let classes = cfg.num_classes;
    let mut confusion = ConfusionMatrix::new(classes);
    let mut layer_counts: Vec<(String, usize, Vec<u64>)> = Vec::new();
    for (i, sample) in dataset.iter().enumerate() {
        let (logits, activity) = model.infer(&sample.spikes.cast::<F>())?;
        let pred = argmax_classes(&logits);
        confusion
            .add_maps(&pred, &sample.label, opts.ignore_label)
            .map_err(|e| TrainError::Sample {
                index: i,
                message: e.to_string(),
            })?;
        if layer_counts.is_empty() {
            layer_counts = activity.iter().map(|a| (a.name.clone(), a.neurons(), Vec::new())).collect();
        }
        for (acc, a) in layer_counts.iter_mut().zip(activity) {
            acc.2.extend(a.counts_per_step);
        }
    }
    let accuracy = pixel_accuracy(&confusion)?;
    let iou = mean_iou(&confusion, opts.miou_mode)?;
    let names: Vec<String> = match &opts.class_names {
        Some(n) if n.len() == classes => n.clone(),
        _ => (0..classes).map(|c| format!("class{c}")).collect(),
    };
    let per_class_iou = names
        .into_iter()
        .zip(&iou.per_class)
        .map(|(name, v)| ClassIou {
            name,
            iou: v.unwrap_or(0.0),
            valid: v.is_some(),
        })
        .collect();
    let layer_firing_rates: Vec<LayerRate> = layer_counts
        .into_iter()
        .map(|(name, neurons, counts)| LayerRate {
            rate: layer_firing_rate(&counts, neurons, dataset.len(), cfg.timesteps),
            name,
            neurons,
        })
        .collect();
    let per_layer: Vec<(usize, f64)> = layer_firing_rates.iter().map(|l| (l.neurons, l.rate)).collect();
    Ok(MetricsReport {
        samples: dataset.len(),
        accuracy,
        miou: iou.miou,
        miou_mode: opts.miou_mode,
        per_class_iou,
        model_firing_rate: model_firing_rate(&per_layer),
        layer_firing_rates,
        param_count: model.count_parameters(),
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchors() {
        let cfg = TrainConfig::default();
        for (epoch, lr) in [(0, 2e-3), (7, 2e-3), (8, 2e-4), (16, 2e-5), (24, 2e-6), (50, 2e-7), (60, 2e-7)] {
            let got = lr_at_epoch(&cfg, epoch);
            assert!((got - lr).abs() <= 1e-15 * lr.max(1e-300) * 10.0, "epoch {epoch}: {got} vs {lr}");
        }
        let lrs: Vec<f64> = (0..80).map(|e| lr_at_epoch(&cfg, e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                milestones: vec![8, 8],
                ..Default::default()
            },
            TrainConfig {
                milestones: vec![16, 8],
                ..Default::default()
            },
            TrainConfig {
                decay: 1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                grad_clip: Some(0.0),
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))), "{cfg:?}");
        }
        let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1e-3, "bogus": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn loss_examples() {
        let label = ClassMap::filled(2, 3, 4);
        let (loss, grad) = compute_loss(&Tensor::<f64>::zeros(&[6, 2, 3]), &label, None, 1).unwrap();
        assert!((loss / 6.0 - 6f64.ln()).abs() < 1e-12);
        assert_eq!(grad.shape(), &[6, 2, 3]);

        let ignored = ClassMap::filled(2, 3, IGNORE_LABEL);
        let (loss, grad) = compute_loss(&Tensor::<f64>::full(&[6, 2, 3], 0.3), &ignored, Some(IGNORE_LABEL), 1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));

        // a batch of two identical samples: the 1/N cancels the doubling
        let mut rng = crate::tensor::testutil::rng(3);
        let logits = crate::tensor::testutil::random(&[6, 2, 3], &mut rng);
        let (single, _) = compute_loss(&logits, &label, None, 1).unwrap();
        let (half, _) = compute_loss(&logits, &label, None, 2).unwrap();
        assert!((2.0 * half - single).abs() < 1e-12);
    }

    fn scalar_step(theta: f64, grads: &[f64], lr: f64) -> (f64, OptimizerState) {
        let mut p = Tensor::new(vec![1], vec![theta]).unwrap();
        let mut state = OptimizerState::new([1], 0.9, 0.999, 1e-8);
        for &g in grads {
            let g = Tensor::new(vec![1], vec![g]).unwrap();
            nadam_step(&mut [&mut p], &[&g], &mut state, lr);
        }
        (p.data()[0], state)
    }

    #[test]
    fn nadam_first_step_by_hand() {
        let (theta, state) = scalar_step(0.0, &[1.0], 0.1);
        assert!((theta - (-0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(state.step, 1);
        assert!((state.m[0][0] - 0.1).abs() < 1e-15);
        assert!((state.v[0][0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn nadam_zero_gradient_is_identity() {
        let (theta, state) = scalar_step(0.75, &[0.0; 5], 0.1);
        assert_eq!(theta, 0.75);
        assert!(state.v[0].iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn nadam_updates_are_bounded_under_constant_gradient() {
        let lr = 0.01;
        for g in [1e-6, 0.3, 1.0, 250.0, -7.0] {
            let mut p = Tensor::new(vec![1], vec![0.0f64]).unwrap();
            let mut state = OptimizerState::new([1], 0.9, 0.999, 1e-8);
            let gt = Tensor::new(vec![1], vec![g]).unwrap();
            for _ in 0..100 {
                let before = p.data()[0];
                nadam_step(&mut [&mut p], &[&gt], &mut state, lr);
                let delta = (p.data()[0] - before).abs();
                assert!(delta <= lr * (1.0 + 1e-9), "g={g}: step {delta}");
            }
        }
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        let logits = Tensor::new(vec![3, 1, 2], vec![1.0f32, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_classes(&logits).data(), &[0, 1]);
    }
}
