//! Training loop for the keyword model: weighted BCE on frame targets,
//! Adam, plateau learning-rate decay and early stopping.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, spec_augment, AugmentConfig, Batch, LabeledExample, ManifestEntry};
use crate::error::{Error, Result};
use crate::mdtc::{features_to_tensor, MdtcModel};
use crate::nn::ops::sigmoid;
use crate::nn::{clip_grad_norm, Optimizer, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KwsTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub decay_factor: f64,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub loss_clamp: f64,
    /// Maximum global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    pub val_fraction: f64,
    /// Stop as soon as the training loss reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for KwsTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            batch_size: 150,
            decay_factor: 0.7,
            min_epochs: 15,
            max_epochs: 100,
            loss_clamp: 1e-7,
            grad_clip: 5.0,
            val_fraction: 0.1,
            target_loss: None,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl KwsTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr={} must be positive", self.lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay_factor={} outside (0, 1)", self.decay_factor));
        }
        if self.min_epochs == 0 || self.max_epochs < self.min_epochs {
            return bad(format!(
                "need 1 <= min_epochs ({}) <= max_epochs ({})",
                self.min_epochs, self.max_epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.loss_clamp > 0.0 && self.loss_clamp < 0.5) {
            return bad(format!("loss_clamp={} outside (0, 0.5)", self.loss_clamp));
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip={} is negative", self.grad_clip));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction={} outside (0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

/// Weighted binary cross-entropy of one posterior. Returns the loss and
/// its derivative with respect to `y`, with `y` clamped to `[eps, 1 - eps]`.
pub fn bce_loss(y: f64, y_star: f64, weight: f64, eps: f64) -> (f64, f64) {
    let y = y.clamp(eps, 1.0 - eps);
    let loss = -y_star * y.ln() - (1.0 - y_star) * (1.0 - y).ln();
    let grad = -y_star / y + (1.0 - y_star) / (1.0 - y);
    (weight * loss, weight * grad)
}

/// Loss of a padded batch of logits.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss_sum: f64,
    pub weight_sum: f64,
    /// Gradient of the weighted mean loss with respect to each logit.
    pub dlogits: Vec<f32>,
}

impl BatchLoss {
    pub fn mean(&self) -> f64 {
        if self.weight_sum > 0.0 {
            self.loss_sum / self.weight_sum
        } else {
            0.0
        }
    }
}

/// Weighted mean BCE over frames with positive weight. The logit gradient
/// `w * (sigmoid(z) - y*) / sum(w)` is taken before clamping so confident
/// mistakes still receive a gradient.
pub fn weighted_bce(logits: &[f32], targets: &[f32], weights: &[f32], eps: f64) -> BatchLoss {
    let weight_sum: f64 = weights.iter().map(|&w| w as f64).sum();
    let mut loss_sum = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    if weight_sum == 0.0 {
        return BatchLoss {
            loss_sum,
            weight_sum,
            dlogits,
        };
    }
    for i in 0..logits.len() {
        let w = weights[i] as f64;
        if w == 0.0 {
            continue;
        }
        let y = sigmoid(logits[i] as f64);
        loss_sum += bce_loss(y, targets[i] as f64, w, eps).0;
        dlogits[i] = (w * (y - targets[i] as f64) / weight_sum) as f32;
    }
    BatchLoss {
        loss_sum,
        weight_sum,
        dlogits,
    }
}

/// Learning rate after observing the latest validation loss: decayed when
/// it is no better than the best earlier loss.
pub fn plateau_lr(val_history: &[f64], lr: f64, factor: f64) -> f64 {
    if plateaued(val_history) {
        lr * factor
    } else {
        lr
    }
}

fn plateaued(val_history: &[f64]) -> bool {
    match val_history.split_last() {
        Some((last, earlier)) if !earlier.is_empty() => {
            let best = earlier.iter().copied().fold(f64::INFINITY, f64::min);
            *last >= best
        }
        _ => false,
    }
}

/// True once `epoch` (1-based) has reached `min_epochs` and the latest
/// validation loss did not improve on the best earlier one.
pub fn early_stop(val_history: &[f64], epoch: usize, min_epochs: usize) -> bool {
    epoch >= min_epochs && plateaued(val_history)
}

/// Splits items by speaker: a seeded `fraction` of the speakers (at least
/// one) goes to validation with all of their items.
pub fn split_by_speaker<T: Clone>(
    items: &[T],
    speaker: impl Fn(&T) -> &str,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    let speakers: BTreeSet<&str> = items.iter().map(&speaker).collect();
    if speakers.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "speaker split needs at least 2 speakers, found {}",
            speakers.len()
        )));
    }
    let mut order: Vec<&str> = speakers.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((fraction * order.len() as f64).round_ties_even() as usize)
        .max(1)
        .min(order.len() - 1);
    let val: BTreeSet<&str> = order[..n_val].iter().copied().collect();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for it in items {
        if val.contains(speaker(it)) {
            held.push(it.clone());
        } else {
            train.push(it.clone());
        }
    }
    Ok((train, held))
}

pub fn split_train_val(
    manifest: &[ManifestEntry],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    split_by_speaker(manifest, |e| e.speaker_id.as_str(), fraction, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Training phase for multi-phase schedules (1-based).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<u8>,
    /// Classification part of a composite loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// One optimizer step on a batch. Batches without any weighted frame are
/// skipped and return `None`.
pub fn train_step(
    model: &mut MdtcModel<f32>,
    batch: &Batch,
    opt: &mut Optimizer<f32>,
    cfg: &KwsTrainConfig,
) -> Result<Option<BatchLoss>> {
    if batch.weights.iter().all(|&w| w == 0.0) {
        return Ok(None);
    }
    let (logits, cache) = model.forward_train(&batch.features, Some(&batch.mask))?;
    let loss = weighted_bce(logits.data(), &batch.targets, &batch.weights, cfg.loss_clamp);
    if !loss.loss_sum.is_finite() {
        return Ok(Some(loss));
    }
    model.params.zero_grad();
    let dz = Tensor::new(logits.shape(), loss.dlogits.clone())?;
    model.backward(&cache, &dz, Some(&batch.mask));
    if cfg.grad_clip > 0.0 {
        clip_grad_norm(&mut model.params, cfg.grad_clip);
    }
    opt.step(&mut model.params)?;
    Ok(Some(loss))
}

/// One pass over `examples` in a seeded order. Returns the weighted mean
/// training loss.
pub fn train_epoch(
    model: &mut MdtcModel<f32>,
    examples: &[LabeledExample],
    opt: &mut Optimizer<f32>,
    cfg: &KwsTrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (mut loss_sum, mut weight_sum) = (0.0, 0.0);
    for chunk in epoch_order(examples.len(), cfg.batch_size, rng)? {
        let augmented: Vec<LabeledExample>;
        let batch = if cfg.augment.spec_augment {
            augmented = chunk
                .iter()
                .map(|&i| LabeledExample {
                    features: spec_augment(&examples[i].features, &cfg.augment, rng).0,
                    targets: examples[i].targets.clone(),
                })
                .collect();
            Batch::from_examples(chunk.iter().copied().zip(augmented.iter()))?
        } else {
            Batch::from_examples(chunk.iter().map(|&i| (i, &examples[i])))?
        };
        if let Some(l) = train_step(model, &batch, opt, cfg)? {
            if !l.loss_sum.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: format!(
                        "batch of utterances {:?} produced loss {}",
                        batch.indices, l.loss_sum
                    ),
                });
            }
            loss_sum += l.loss_sum;
            weight_sum += l.weight_sum;
        }
    }
    Ok(if weight_sum > 0.0 {
        loss_sum / weight_sum
    } else {
        0.0
    })
}

/// Eval-mode weighted mean BCE, one utterance at a time.
pub fn evaluate_loss(model: &MdtcModel<f32>, examples: &[LabeledExample], eps: f64) -> Result<f64> {
    let dim = model.config().input_dim;
    let parts: Vec<(f64, f64)> = examples
        .par_iter()
        .map(|ex| {
            let x = features_to_tensor::<f32>(std::slice::from_ref(&ex.features), dim)?;
            let z = model.logits(&x)?;
            let targets: Vec<f32> = ex.targets.iter().map(|t| t.value()).collect();
            let weights: Vec<f32> = ex.targets.iter().map(|t| t.weight()).collect();
            let l = weighted_bce(z.data(), &targets, &weights, eps);
            Ok((l.loss_sum, l.weight_sum))
        })
        .collect::<Result<_>>()?;
    let (l, w) = parts
        .iter()
        .fold((0.0, 0.0), |(a, b), &(l, w)| (a + l, b + w));
    Ok(if w > 0.0 { l / w } else { 0.0 })
}

/// Full training run. The returned model holds the parameters of the
/// epoch with the lowest validation loss.
pub fn train_kws(
    model: &mut MdtcModel<f32>,
    train: &[LabeledExample],
    val: &[LabeledExample],
    cfg: &KwsTrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    cfg.augment.validate(model.config().input_dim)?;
    if val.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(cfg.lr, &model.params);
    let mut report = TrainReport::default();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, model.params.clone(), 0);
    let mut lr = cfg.lr;
    for epoch in 1..=cfg.max_epochs {
        opt.lr = lr;
        let train_loss = train_epoch(model, train, &mut opt, cfg, epoch, &mut rng)?;
        let val_loss = evaluate_loss(model, val, cfg.loss_clamp)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        log::info!("kws epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.6}");
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: Some(val_loss),
            lr,
            accuracy: None,
            phase: None,
            class_loss: None,
        });
        history.push(val_loss);
        report.stopped_epoch = epoch;
        if val_loss < best.0 {
            best = (val_loss, model.params.clone(), epoch);
        }
        if cfg.target_loss.is_some_and(|t| train_loss <= t) {
            break;
        }
        if early_stop(&history, epoch, cfg.min_epochs) {
            break;
        }
        lr = plateau_lr(&history, lr, cfg.decay_factor);
    }
    model.params.copy_values_from(&best.1)?;
    report.best_epoch = best.2;
    Ok(report)
}
