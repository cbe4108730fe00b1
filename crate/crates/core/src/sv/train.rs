//! Speaker-classification pretraining and two-phase finetuning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{arcface_loss, supcon_loss, sv_total_loss};
use super::model::{features_to_image, SvModel, TrainScope};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::kws_train::{EpochRecord, TrainReport};
use crate::nn::{clip_grad_norm, Optimizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvTrainConfig {
    pub lr: f64,
    /// Multiplier applied every `lr_step_epochs`.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Training crops are this many frames; shorter utterances are tiled.
    pub crop_frames: usize,
    /// 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for SvTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            lr_decay: 0.1,
            lr_step_epochs: 5,
            epochs: 30,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            crop_frames: 200,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl SvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("sv.train: {m}")));
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr must be positive and lr_decay in (0, 1]");
        }
        if self.lr_step_epochs == 0 || self.batch_size == 0 || self.crop_frames == 0 {
            return bad("lr_step_epochs, batch_size and crop_frames must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("momentum must be in [0, 1); weight_decay and grad_clip non-negative");
        }
        Ok(())
    }
}

/// Parameters trained before the switch to full finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    ClassifierOnly,
    ClassifierAndProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub policy: FreezePolicy,
    /// Unfreeze everything once an epoch's classification loss is at or
    /// below this value.
    pub switch_loss: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            policy: FreezePolicy::ClassifierAndProjection,
            switch_loss: 0.2,
            epochs: 20,
            lr: 0.01,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.switch_loss >= 0.0) {
            return Err(Error::InvalidConfig(
                "sv.finetune: lr must be positive and switch_loss non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One labelled training utterance.
#[derive(Debug, Clone)]
pub struct SvExample {
    pub features: FeatureMatrix,
    pub label: usize,
}

/// `lr * decay^floor(epoch / step)` for a 0-based epoch.
pub fn step_lr(lr: f64, decay: f64, step: usize, epoch: usize) -> f64 {
    lr * decay.powi((epoch / step) as i32)
}

/// A random `len`-frame window; utterances shorter than `len` are tiled.
pub fn crop_features(feat: &FeatureMatrix, len: usize, rng: &mut impl Rng) -> Result<FeatureMatrix> {
    let n = feat.n_frames();
    if n == 0 {
        return Err(Error::TooShort("cannot crop an utterance with no frames".into()));
    }
    if n >= len {
        let start = rng.gen_range(0..=n - len);
        return Ok(feat.slice_frames(start, start + len));
    }
    let d = feat.dim();
    let data = (0..len).flat_map(|t| feat.frame(t % n).to_vec()).collect();
    FeatureMatrix::new(data, len, d)
}

struct StepStats {
    loss: f64,
    class_loss: f64,
    correct: f64,
}

fn sv_step(
    model: &mut SvModel<f32>,
    feats: &[FeatureMatrix],
    labels: &[usize],
    scope: TrainScope,
) -> Result<StepStats> {
    let cfg = model.config().clone();
    let e = cfg.embedding_dim;
    let x = features_to_image::<f32>(feats, cfg.input_dim)?;
    let (emb, cache) = model.forward_train(&x, scope)?;
    let emb64: Vec<f64> = emb.data().iter().map(|&v| v as f64).collect();
    let w64: Vec<f64> = model.class_weights().0.iter().map(|&v| v as f64).collect();
    let arc = arcface_loss(&emb64, labels, &w64, e, cfg.arcface.scale, cfg.arcface.margin)?;
    let mut d_emb = arc.d_emb.clone();
    let mut sup_loss = 0.0;
    if cfg.supcon.weight > 0.0 {
        // batches without any same-speaker pair carry no contrastive term
        if let Ok(sup) = supcon_loss(&emb64, labels, e, cfg.supcon.temperature) {
            sup_loss = sup.loss;
            for (d, g) in d_emb.iter_mut().zip(&sup.d_emb) {
                *d += cfg.supcon.weight * g;
            }
        }
    }
    let loss = sv_total_loss(arc.loss, sup_loss, cfg.supcon.weight);
    if loss.is_finite() {
        model.params.zero_grad();
        let d_emb: Vec<f32> = d_emb.iter().map(|&v| v as f32).collect();
        let d_class: Vec<f32> = arc.d_weight.iter().map(|&v| v as f32).collect();
        model.backward(&cache, &d_emb, Some(&d_class));
    }
    Ok(StepStats {
        loss,
        class_loss: arc.loss,
        correct: arc.accuracy * labels.len() as f64,
    })
}

fn check_labels(model: &SvModel<f32>, data: &[SvExample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("speaker training set".into()));
    }
    let n = model.n_classes();
    match data.iter().find(|ex| ex.label >= n) {
        Some(ex) => Err(Error::InvalidArgument(format!(
            "label {} outside {n} classes",
            ex.label
        ))),
        None => Ok(()),
    }
}

struct EpochStats {
    loss: f64,
    class_loss: f64,
    accuracy: f64,
}

fn run_epoch(
    model: &mut SvModel<f32>,
    data: &[SvExample],
    opt: &mut Optimizer<f32>,
    tcfg: &SvTrainConfig,
    scope: TrainScope,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let (mut loss, mut class_loss, mut correct) = (0.0, 0.0, 0.0);
    for chunk in order.chunks(tcfg.batch_size) {
        let feats = chunk
            .iter()
            .map(|&i| crop_features(&data[i].features, tcfg.crop_frames, rng))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
        let s = sv_step(model, &feats, &labels, scope)?;
        if !s.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("speaker batch {chunk:?} produced loss {}", s.loss),
            });
        }
        if tcfg.grad_clip > 0.0 {
            clip_grad_norm(&mut model.params, tcfg.grad_clip);
        }
        opt.step(&mut model.params)?;
        let n = chunk.len() as f64;
        loss += s.loss * n;
        class_loss += s.class_loss * n;
        correct += s.correct;
    }
    let n = data.len() as f64;
    Ok(EpochStats {
        loss: loss / n,
        class_loss: class_loss / n,
        accuracy: correct / n,
    })
}

/// Pretraining with SGD and a step-decayed learning rate.
pub fn train_sv(model: &mut SvModel<f32>, data: &[SvExample], cfg: &SvTrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_labels(model, data)?;
    model.params.set_trainable(|_| true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::sgd(cfg.lr, cfg.momentum, cfg.weight_decay, &model.params);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        opt.lr = step_lr(cfg.lr, cfg.lr_decay, cfg.lr_step_epochs, epoch);
        let s = run_epoch(model, data, &mut opt, cfg, TrainScope::Full, epoch + 1, &mut rng)?;
        log::info!(
            "sv epoch {}: loss {:.4} acc {:.3} lr {}",
            epoch + 1,
            s.loss,
            s.accuracy,
            opt.lr
        );
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: s.loss,
            val_loss: None,
            lr: opt.lr,
            accuracy: Some(s.accuracy),
            phase: None,
            class_loss: Some(s.class_loss),
        });
    }
    report.stopped_epoch = cfg.epochs;
    report.best_epoch = cfg.epochs;
    Ok(report)
}

/// Finetunes a pretrained model on `data`. Phase 1 trains only the
/// parameters selected by the freeze policy, with the extractor and
/// pooling in eval mode; after the first epoch whose classification loss
/// reaches `switch_loss` every parameter is trained. A classifier with the
/// wrong number of classes is re-initialized first.
pub fn finetune(
    model: &mut SvModel<f32>,
    data: &[SvExample],
    cfg: &FinetuneConfig,
    tcfg: &SvTrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    tcfg.validate()?;
    let n = data.iter().map(|ex| ex.label + 1).max().unwrap_or(0);
    if n != model.n_classes() {
        model.reset_classifier(n, tcfg.seed ^ 0x5eed)?;
    }
    check_labels(model, data)?;
    let policy = cfg.policy;
    model.params.set_trainable(|name| {
        SvModel::<f32>::is_classifier_param(name)
            || (policy == FreezePolicy::ClassifierAndProjection && SvModel::<f32>::is_projection_param(name))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut opt = Optimizer::sgd(cfg.lr, tcfg.momentum, tcfg.weight_decay, &model.params);
    let mut report = TrainReport::default();
    let mut phase = 1u8;
    for epoch in 1..=cfg.epochs {
        let scope = if phase == 1 { TrainScope::Head } else { TrainScope::Full };
        let s = run_epoch(model, data, &mut opt, tcfg, scope, epoch, &mut rng)?;
        log::info!("sv finetune epoch {epoch} phase {phase}: loss {:.4} class {:.4}", s.loss, s.class_loss);
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: s.loss,
            val_loss: None,
            lr: cfg.lr,
            accuracy: Some(s.accuracy),
            phase: Some(phase),
            class_loss: Some(s.class_loss),
        });
        if phase == 1 && s.class_loss <= cfg.switch_loss {
            phase = 2;
            model.params.set_trainable(|_| true);
        }
    }
    model.params.set_trainable(|_| true);
    report.stopped_epoch = cfg.epochs;
    report.best_epoch = cfg.epochs;
    Ok(report)
}
