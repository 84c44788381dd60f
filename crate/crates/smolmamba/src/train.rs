//! Surrogate-gradient training: label-smoothed cross-entropy, AdamW with
//! decoupled weight decay, cosine learning-rate schedule with linear
//! warmup, seeded shuffling, and per-epoch metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::init::SeededRng;
use crate::model::{
    forward_on_tape, update_running_stats, Diagnostics, ForwardOptions, ModelConfig,
    ModelError, ParamStore,
};
use crate::neuron::SpikeMode;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{DenseTensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimization hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of the training set held out for validation when the
    /// dataset ships none.
    pub val_fraction: f64,
    /// Stop once validation accuracy reaches this level (1.01 disables).
    pub early_stop_accuracy: f64,
    /// Global-norm gradient clipping; 0 disables.
    pub grad_clip: f64,
    /// Basic input/target mixup strength; 0 disables.
    pub mixup_alpha: f64,
    /// Report wall time as 0.0 in the metrics stream so identical runs
    /// produce byte-identical files.
    pub deterministic_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 50,
            base_lr: 1e-3,
            weight_decay: 0.06,
            warmup_epochs: 10,
            label_smoothing: 0.1,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.1,
            early_stop_accuracy: 1.01,
            grad_clip: 0.0,
            mixup_alpha: 0.0,
            deterministic_timing: false,
        }
    }
}

/// One metrics row. Per-layer vectors are per block.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub keep_ratio_per_layer: Vec<f64>,
    pub firing_rate_per_layer: Vec<f64>,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,split,loss,top1,mean_keep_ratio_per_layer,mean_firing_rate_per_layer,wall_seconds";

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.6}"))
                .collect::<Vec<_>>()
                .join(";")
        };
        format!(
            "{},{},{:.6},{:.6},{},{},{:.3}",
            self.epoch,
            self.split,
            self.loss,
            self.top1,
            join(&self.keep_ratio_per_layer),
            join(&self.firing_rate_per_layer),
            self.wall_seconds
        )
    }
}

/// Label-smoothed cross-entropy on the tape. `targets` is a `(B, M)`
/// distribution (rows sum to 1).
pub fn smoothed_cross_entropy_tape(
    tape: &mut Tape,
    logits: Var,
    targets: &DenseTensor,
) -> Result<Var, TrainError> {
    let logits_value = tape.value(logits).clone();
    if !logits_value.all_finite() {
        return Err(TrainError::NonFiniteLogits);
    }
    let (b_n, m) = (logits_value.shape()[0], logits_value.shape()[1]);
    if targets.shape() != [b_n, m] {
        return Err(TrainError::ShapeMismatch(format!(
            "targets {:?} vs logits {:?}",
            targets.shape(),
            logits_value.shape()
        )));
    }
    // log-softmax with a detached max shift for stability
    let max = logits_value.max_axis(1)?.reshape(&[b_n, 1])?;
    let max_leaf = tape.leaf(max);
    let shifted = tape.sub(logits, max_leaf)?;
    let exp = tape.exp(shifted);
    let denom = tape.sum_axis(exp, 1)?;
    let log_denom = tape.ln(denom);
    let log_denom = tape.reshape(log_denom, &[b_n, 1])?;
    let log_probs = tape.sub(shifted, log_denom)?;
    let t = tape.leaf(targets.clone());
    let weighted = tape.mul(log_probs, t)?;
    let per_sample = tape.sum_axis(weighted, 1)?;
    let neg = tape.neg(per_sample);
    Ok(tape.mean_axis(neg, 0)?)
}

/// Uniform label smoothing: `(1 - s)` on the true class plus `s / M`
/// spread over all classes.
pub fn smooth_targets(labels: &[usize], num_classes: usize, smoothing: f64) -> DenseTensor {
    assert!((0.0..1.0).contains(&smoothing));
    let b_n = labels.len();
    let mut t = DenseTensor::full(&[b_n, num_classes], smoothing / num_classes as f64);
    for (b, &label) in labels.iter().enumerate() {
        t.data_mut()[b * num_classes + label] += 1.0 - smoothing;
    }
    t
}

/// Label-smoothed cross-entropy, value domain.
pub fn smoothed_cross_entropy(
    logits: &DenseTensor,
    labels: &[usize],
    smoothing: f64,
) -> Result<f64, TrainError> {
    let mut tape = Tape::no_grad();
    let l = tape.leaf(logits.clone());
    let targets = smooth_targets(labels, logits.shape()[1], smoothing);
    let loss = smoothed_cross_entropy_tape(&mut tape, l, &targets)?;
    Ok(tape.value(loss).item())
}

/// Per-parameter AdamW state.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, DenseTensor>,
    pub v: BTreeMap<String, DenseTensor>,
    pub step: usize,
}

/// One AdamW update with decoupled weight decay and bias-corrected
/// moments. Parameters without a gradient still decay.
pub fn adamw_step(
    params: &mut BTreeMap<String, DenseTensor>,
    grads: &BTreeMap<String, DenseTensor>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    for (name, p) in params.iter_mut() {
        let g = match grads.get(name) {
            Some(g) => {
                if g.shape() != p.shape() {
                    return Err(TrainError::ShapeMismatch(format!(
                        "gradient {:?} vs parameter {:?} for {name}",
                        g.shape(),
                        p.shape()
                    )));
                }
                Some(g)
            }
            None => None,
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| DenseTensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| DenseTensor::zeros(p.shape()));
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let pv = p.data()[i];
            p.data_mut()[i] = pv - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * pv);
        }
    }
    Ok(())
}

/// Linear warmup from zero to `base_lr`, then cosine decay to zero.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_epochs;
    if epoch < w {
        return cfg.base_lr * epoch as f64 / w as f64;
    }
    if cfg.epochs <= w {
        return cfg.base_lr;
    }
    let progress = (epoch - w) as f64 / (cfg.epochs - w) as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn global_grad_norm(grads: &BTreeMap<String, DenseTensor>) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

struct EpochStats {
    loss_sum: f64,
    correct: usize,
    samples: usize,
    keep_sums: Vec<f64>,
    fr_sums: Vec<f64>,
    batches: usize,
}

impl EpochStats {
    fn new(depth: usize) -> Self {
        Self {
            loss_sum: 0.0,
            correct: 0,
            samples: 0,
            keep_sums: vec![0.0; depth],
            fr_sums: vec![0.0; depth],
            batches: 0,
        }
    }

    fn add(&mut self, loss: f64, logits: &DenseTensor, labels: &[usize], diag: &Diagnostics) {
        let b_n = labels.len();
        self.loss_sum += loss * b_n as f64;
        self.samples += b_n;
        self.correct += top1_correct(logits, labels);
        for (i, b) in diag.blocks.iter().enumerate() {
            self.keep_sums[i] += b.keep_ratio_mean;
            self.fr_sums[i] += b.input_firing_rate;
        }
        self.batches += 1;
    }

    fn record(&self, epoch: usize, split: &str, wall: f64) -> MetricsRecord {
        let n = self.batches.max(1) as f64;
        MetricsRecord {
            epoch,
            split: split.to_string(),
            loss: self.loss_sum / self.samples.max(1) as f64,
            top1: self.correct as f64 / self.samples.max(1) as f64,
            keep_ratio_per_layer: self.keep_sums.iter().map(|s| s / n).collect(),
            firing_rate_per_layer: self.fr_sums.iter().map(|s| s / n).collect(),
            wall_seconds: wall,
        }
    }
}

/// Argmax prediction count; ties break toward the smaller class index.
pub fn top1_correct(logits: &DenseTensor, labels: &[usize]) -> usize {
    let (b_n, m) = (logits.shape()[0], logits.shape()[1]);
    let mut correct = 0;
    for b in 0..b_n {
        let row = &logits.data()[b * m..(b + 1) * m];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == labels[b] {
            correct += 1;
        }
    }
    correct
}

/// Evaluate a split, eval mode (running statistics, pruning active).
pub fn evaluate(
    split: &Split,
    indices: &[usize],
    cfg: &ModelConfig,
    store: &ParamStore,
    train_cfg: &TrainConfig,
) -> Result<(EpochMetrics, Diagnostics), TrainError> {
    let mut stats = EpochStats::new(cfg.depth);
    let mut last_diag = Diagnostics::default();
    for chunk in indices.chunks(train_cfg.batch_size.max(1)) {
        let (images, labels) = split.batch(chunk, cfg.timesteps);
        let mut tape = Tape::no_grad();
        let out = forward_on_tape(&mut tape, &images, cfg, store, ForwardOptions::default())?;
        let logits = tape.value(out.logits).clone();
        let targets = smooth_targets(&labels, cfg.num_classes, train_cfg.label_smoothing);
        let loss = {
            let mut t2 = Tape::no_grad();
            let lv = t2.leaf(logits.clone());
            let l = smoothed_cross_entropy_tape(&mut t2, lv, &targets)?;
            t2.value(l).item()
        };
        stats.add(loss, &logits, &labels, &out.diagnostics);
        last_diag = out.diagnostics;
    }
    Ok((
        EpochMetrics {
            loss: stats.loss_sum / stats.samples.max(1) as f64,
            top1: stats.correct as f64 / stats.samples.max(1) as f64,
            keep_ratio_per_layer: stats
                .keep_sums
                .iter()
                .map(|s| s / stats.batches.max(1) as f64)
                .collect(),
            firing_rate_per_layer: stats
                .fr_sums
                .iter()
                .map(|s| s / stats.batches.max(1) as f64)
                .collect(),
        },
        last_diag,
    ))
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub loss: f64,
    pub top1: f64,
    pub keep_ratio_per_layer: Vec<f64>,
    pub firing_rate_per_layer: Vec<f64>,
}

/// Products of a completed training run.
pub struct TrainOutcome {
    pub store: ParamStore,
    pub best_store: ParamStore,
    pub best_val_top1: f64,
    pub metrics: Vec<MetricsRecord>,
    pub epochs_run: usize,
}

/// The full training loop. Pruning stays active in training and
/// evaluation passes; gradients flow only through surviving tokens.
/// A non-finite loss aborts with the epoch and batch recorded.
pub fn train_loop(
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    mut store: ParamStore,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome, TrainError> {
    let started = Instant::now();
    let wall = |cfg: &TrainConfig, t0: Instant| {
        if cfg.deterministic_timing {
            0.0
        } else {
            t0.elapsed().as_secs_f64()
        }
    };
    let mut metrics = Vec::new();
    let mut emit = |rec: MetricsRecord, metrics: &mut Vec<MetricsRecord>| {
        on_record(&rec);
        metrics.push(rec);
    };

    // deterministic validation split from the training set
    let n_train_total = dataset.train_len();
    let mut order: Vec<usize> = (0..n_train_total).collect();
    SeededRng::new(train_cfg.seed ^ 0x5157).shuffle(&mut order);
    let n_val = ((n_train_total as f64 * train_cfg.val_fraction) as usize).min(n_train_total);
    let val_indices: Vec<usize> = order[..n_val].to_vec();
    let train_indices: Vec<usize> = order[n_val..].to_vec();
    let test_indices: Vec<usize> = (0..dataset.test_len()).collect();

    // initial evaluation record at epoch 0
    let (val0, _) = evaluate(&dataset.train, &val_indices, cfg, &store, train_cfg)?;
    emit(
        MetricsRecord {
            epoch: 0,
            split: "val".into(),
            loss: val0.loss,
            top1: val0.top1,
            keep_ratio_per_layer: val0.keep_ratio_per_layer,
            firing_rate_per_layer: val0.firing_rate_per_layer,
            wall_seconds: wall(train_cfg, started),
        },
        &mut metrics,
    );

    let mut adam = AdamState::default();
    let mut best_val_top1 = val0.top1;
    let mut best_store = store.clone();
    let mut epochs_run = 0;
    let mut prev_keep: Option<Vec<f64>> = None;

    for epoch in 1..=train_cfg.epochs {
        let lr = lr_schedule(epoch - 1, train_cfg);
        let mut shuffled = train_indices.clone();
        SeededRng::new(train_cfg.seed.wrapping_add(epoch as u64 * 0x9E37)).shuffle(&mut shuffled);
        let mut stats = EpochStats::new(cfg.depth);
        let mut mix_rng = SeededRng::new(train_cfg.seed ^ (epoch as u64) << 17);

        for (batch_idx, chunk) in shuffled.chunks(train_cfg.batch_size.max(1)).enumerate() {
            let (mut images, labels) = dataset.train.batch(chunk, cfg.timesteps);
            let mut targets =
                smooth_targets(&labels, cfg.num_classes, train_cfg.label_smoothing);
            if train_cfg.mixup_alpha > 0.0 && chunk.len() > 1 {
                mixup(&mut images, &mut targets, train_cfg.mixup_alpha, &mut mix_rng);
            }
            let mut tape = Tape::new();
            let opts = ForwardOptions {
                training: true,
                spike_mode: SpikeMode::Hard,
                ..ForwardOptions::default()
            };
            let out = forward_on_tape(&mut tape, &images, cfg, &store, opts)?;
            let loss_var = smoothed_cross_entropy_tape(&mut tape, out.logits, &targets)?;
            let loss = tape.value(loss_var).item();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let grads = tape.backward(loss_var).map_err(|e| match e {
                TensorError::NonFiniteLoss => TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                },
                other => TrainError::Tensor(other),
            })?;
            let mut named: BTreeMap<String, DenseTensor> = BTreeMap::new();
            for (name, var) in &out.vars {
                if let Some(g) = grads.get(*var) {
                    named.insert(name.clone(), g.clone());
                }
            }
            if train_cfg.grad_clip > 0.0 {
                let norm = global_grad_norm(&named);
                if norm > train_cfg.grad_clip {
                    let scale = train_cfg.grad_clip / norm;
                    for g in named.values_mut() {
                        *g = g.scale(scale);
                    }
                }
            }
            adamw_step(
                &mut store.params,
                &named,
                &mut adam,
                lr,
                train_cfg.weight_decay,
                (train_cfg.beta1, train_cfg.beta2),
                train_cfg.adam_eps,
            )?;
            update_running_stats(&mut store, &out.diagnostics, cfg.bn_momentum);
            let logits = tape.value(out.logits).clone();
            stats.add(loss, &logits, &labels, &out.diagnostics);
        }
        epochs_run = epoch;
        let train_rec = stats.record(epoch, "train", wall(train_cfg, started));
        // keep-ratio trajectories move smoothly in a healthy run
        if let Some(prev) = &prev_keep {
            for (a, b) in prev.iter().zip(&train_rec.keep_ratio_per_layer) {
                debug_assert!(
                    (a - b).abs() < 0.5,
                    "keep ratio jumped {a:.3} -> {b:.3} in one epoch"
                );
            }
        }
        prev_keep = Some(train_rec.keep_ratio_per_layer.clone());
        emit(train_rec, &mut metrics);

        let (val, _) = evaluate(&dataset.train, &val_indices, cfg, &store, train_cfg)?;
        emit(
            MetricsRecord {
                epoch,
                split: "val".into(),
                loss: val.loss,
                top1: val.top1,
                keep_ratio_per_layer: val.keep_ratio_per_layer.clone(),
                firing_rate_per_layer: val.firing_rate_per_layer.clone(),
                wall_seconds: wall(train_cfg, started),
            },
            &mut metrics,
        );
        if !test_indices.is_empty() {
            let (test, _) = evaluate(&dataset.test, &test_indices, cfg, &store, train_cfg)?;
            emit(
                MetricsRecord {
                    epoch,
                    split: "test".into(),
                    loss: test.loss,
                    top1: test.top1,
                    keep_ratio_per_layer: test.keep_ratio_per_layer,
                    firing_rate_per_layer: test.firing_rate_per_layer,
                    wall_seconds: wall(train_cfg, started),
                },
                &mut metrics,
            );
        }
        if val.top1 >= best_val_top1 {
            best_val_top1 = val.top1;
            best_store = store.clone();
        }
        if val.top1 >= train_cfg.early_stop_accuracy {
            break;
        }
    }
    Ok(TrainOutcome {
        store,
        best_store,
        best_val_top1,
        metrics,
        epochs_run,
    })
}

/// Convex input/target mixing with a seeded uniform coefficient.
fn mixup(
    images: &mut DenseTensor,
    targets: &mut DenseTensor,
    alpha: f64,
    rng: &mut SeededRng,
) {
    let lam = 1.0 - rng.uniform(0.0, alpha.min(1.0));
    let b_n = images.shape()[0];
    let per = images.len() / b_n;
    let m = targets.shape()[1];
    let src: Vec<usize> = {
        let mut idx: Vec<usize> = (0..b_n).collect();
        rng.shuffle(&mut idx);
        idx
    };
    let img_copy = images.clone();
    let tgt_copy = targets.clone();
    for b in 0..b_n {
        let o = src[b];
        for i in 0..per {
            images.data_mut()[b * per + i] =
                lam * img_copy.data()[b * per + i] + (1.0 - lam) * img_copy.data()[o * per + i];
        }
        for i in 0..m {
            targets.data_mut()[b * m + i] =
                lam * tgt_copy.data()[b * m + i] + (1.0 - lam) * tgt_copy.data()[o * m + i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_loss_is_ln_m() {
        let logits = DenseTensor::zeros(&[1, 2]);
        let loss = smoothed_cross_entropy(&logits, &[0], 0.0).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smoothed_loss_matches_direct_formula_at_large_margin() {
        // perfect prediction at large margin: loss approaches the
        // smoothing floor given by the direct formula
        let m = 10;
        let s = 0.1;
        let margin = 30.0;
        let mut logits = DenseTensor::zeros(&[1, m]);
        logits.data_mut()[0] = margin;
        let loss = smoothed_cross_entropy(&logits, &[0], s).unwrap();
        // direct oracle: -sum_k q_k log p_k with p from softmax
        let exps: Vec<f64> = (0..m)
            .map(|k| if k == 0 { margin } else { 0.0 })
            .map(f64::exp)
            .collect();
        let z: f64 = exps.iter().sum();
        let mut expect = 0.0;
        for k in 0..m {
            let q = if k == 0 {
                1.0 - s + s / m as f64
            } else {
                s / m as f64
            };
            expect -= q * (exps[k] / z).ln();
        }
        assert!((loss - expect).abs() < 1e-10);
    }

    #[test]
    fn loss_invariant_to_constant_logit_shift() {
        let mut rng = SeededRng::new(31);
        let logits = rng.uniform_tensor(&[3, 5], -2.0, 2.0);
        let shifted = logits.map(|v| v + 7.3);
        let labels = [1usize, 4, 0];
        let a = smoothed_cross_entropy(&logits, &labels, 0.1).unwrap();
        let b = smoothed_cross_entropy(&shifted, &labels, 0.1).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn loss_at_least_smoothed_target_entropy() {
        // entropy of the smoothed target is the optimal-loss floor
        let m = 6;
        let s = 0.2;
        let mut rng = SeededRng::new(32);
        let mut floor = 0.0;
        for k in 0..m {
            let q = if k == 0 {
                1.0 - s + s / m as f64
            } else {
                s / m as f64
            };
            floor -= q * q.ln();
        }
        for _ in 0..50 {
            let logits = rng.uniform_tensor(&[1, m], -3.0, 3.0);
            let loss = smoothed_cross_entropy(&logits, &[0], s).unwrap();
            assert!(loss >= floor - 1e-9);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(33);
        let logits = rng.uniform_tensor(&[2, 4], -1.0, 1.0);
        let targets = smooth_targets(&[1, 3], 4, 0.1);
        let err = crate::tensor::gradcheck::check_gradients(
            |tape, vars| {
                smoothed_cross_entropy_tape(tape, vars[0], &targets)
                    .map_err(|_| TensorError::NonFiniteLoss)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    fn single_param(v: f64) -> BTreeMap<String, DenseTensor> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), DenseTensor::scalar(v));
        m
    }

    #[test]
    fn adamw_decay_only_path() {
        let mut params = single_param(2.0);
        let grads = BTreeMap::new();
        let mut state = AdamState::default();
        adamw_step(&mut params, &grads, &mut state, 0.1, 0.5, (0.9, 0.999), 1e-8).unwrap();
        // zero gradient: parameter shrinks by (1 - lr * wd)
        assert!((params["w"].item() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut params = single_param(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), DenseTensor::scalar(0.3));
        let mut state = AdamState::default();
        adamw_step(&mut params, &grads, &mut state, 0.01, 0.0, (0.9, 0.999), 1e-8).unwrap();
        // bias-corrected first step is -lr * g / (|g| + eps) ~ -lr * sign(g)
        assert!((params["w"].item() - (1.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adamw_fixed_point_with_no_gradient_no_decay() {
        let mut params = single_param(0.7);
        let grads = BTreeMap::new();
        let mut state = AdamState::default();
        adamw_step(&mut params, &grads, &mut state, 0.1, 0.0, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(params["w"].item(), 0.7);
    }

    #[test]
    fn schedule_warmup_and_cosine() {
        let cfg = TrainConfig {
            epochs: 110,
            warmup_epochs: 10,
            base_lr: 1e-3,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert!((lr_schedule(10, &cfg) - 1e-3).abs() < 1e-15);
        // cosine midpoint: (10 + 110) / 2 = 60
        assert!((lr_schedule(60, &cfg) - 5e-4).abs() < 1e-9);
    }
}
