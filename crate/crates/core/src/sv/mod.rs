//! Speaker verification: a residual SE convolutional extractor, attentive
//! statistics pooling, a projection to a unit-norm embedding, ArcFace plus
//! supervised contrastive training, enrollment and cosine scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod loss;
pub mod model;
pub mod pooling;
pub mod train;

pub use loss::{arcface_loss, supcon_loss, sv_total_loss, LossGrad};
pub use model::{ResBlock, SvCache, SvModel, TrainScope};
pub use pooling::{AttentivePooling, PoolingKind};
pub use train::{
    crop_features, finetune, step_lr, train_sv, FinetuneConfig, FreezePolicy, SvExample,
    SvTrainConfig,
};

/// One stage of residual blocks; the first block applies `stride` to both
/// the frequency and time axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

impl StageSpec {
    pub fn new(channels: usize, blocks: usize, stride: usize) -> Self {
        Self { channels, blocks, stride }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcFaceConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        Self { scale: 32.0, margin: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupConConfig {
    pub temperature: f64,
    pub weight: f64,
}

impl Default for SupConConfig {
    fn default() -> Self {
        Self { temperature: 0.07, weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvConfig {
    pub input_dim: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub se_reduction: usize,
    pub pooling: PoolingKind,
    /// Hidden width of the attention scorer.
    pub attention_dim: usize,
    /// Variance floor in the pooled standard deviation.
    pub pool_eps: f64,
    pub embedding_dim: usize,
    pub n_classes: usize,
    pub arcface: ArcFaceConfig,
    pub supcon: SupConConfig,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub train: SvTrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for SvConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl SvConfig {
    /// Desk-scale extractor: two single-block stages.
    pub fn tiny() -> Self {
        Self {
            input_dim: 80,
            stem_channels: 8,
            stages: vec![StageSpec::new(8, 1, 2), StageSpec::new(16, 1, 2)],
            se_reduction: 4,
            pooling: PoolingKind::Asp,
            attention_dim: 32,
            pool_eps: 1e-5,
            embedding_dim: 128,
            n_classes: 8,
            arcface: ArcFaceConfig::default(),
            supcon: SupConConfig::default(),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            train: SvTrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }

    /// ResNet34 layout (3/4/6/3 blocks) at half width, with SE in every block.
    pub fn resnet34se() -> Self {
        Self {
            stem_channels: 32,
            stages: vec![
                StageSpec::new(32, 3, 1),
                StageSpec::new(64, 4, 2),
                StageSpec::new(128, 6, 2),
                StageSpec::new(256, 3, 2),
            ],
            se_reduction: 8,
            attention_dim: 128,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "resnet34se" => Ok(Self::resnet34se()),
            other => Err(Error::InvalidConfig(format!("unknown sv preset {other:?}"))),
        }
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// Frequency bins left after all strided stages.
    pub fn folded_freq(&self) -> usize {
        self.stages
            .iter()
            .fold(self.input_dim, |f, s| (f - 1) / s.stride + 1)
    }

    /// Channels times remaining frequency bins: the per-frame vector size
    /// seen by pooling.
    pub fn frame_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels) * self.folded_freq()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("sv: {m}")));
        if self.input_dim == 0 || self.stem_channels == 0 {
            return bad("input_dim and stem_channels must be positive");
        }
        if self.stages.is_empty() {
            return bad("need at least one stage");
        }
        for s in &self.stages {
            if s.channels == 0 || s.blocks == 0 || s.stride == 0 {
                return bad("stage channels, blocks and stride must be positive");
            }
            if s.channels % self.se_reduction.max(1) != 0 || self.se_reduction == 0 {
                return bad("se_reduction must divide every stage width");
            }
        }
        if self.attention_dim == 0 || self.embedding_dim == 0 {
            return bad("attention_dim and embedding_dim must be positive");
        }
        if self.pool_eps <= 0.0 {
            return bad("pool_eps must be positive");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.arcface.scale <= 0.0 {
            return bad("arcface scale must be positive");
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.arcface.margin) {
            return bad("arcface margin must lie in [0, pi/2)");
        }
        if self.supcon.temperature <= 0.0 || self.supcon.weight < 0.0 {
            return bad("supcon temperature must be positive and weight non-negative");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("bn_momentum must be in [0, 1] and bn_eps positive");
        }
        self.train.validate()?;
        self.finetune.validate()
    }
}

/// Speaker embedding; `normalized` embeddings have unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub normalized: bool,
}

impl Embedding {
    /// Normalizes `v`; a zero vector stays unnormalized.
    pub fn from_raw(v: Vec<f32>) -> Self {
        let n = norm(&v);
        if n <= f64::EPSILON {
            return Self { vector: v, normalized: false };
        }
        Self {
            vector: v.iter().map(|&x| (x as f64 / n) as f32).collect(),
            normalized: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.vector)
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentProfile {
    pub speaker_id: String,
    pub vector: Vec<f32>,
}

/// Mean of the (normalized) enrollment embeddings, renormalized.
pub fn enroll(speaker_id: &str, embeddings: &[Embedding]) -> Result<EnrollmentProfile> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Empty(format!("no enrollment embeddings for {speaker_id}")))?;
    let d = first.dim();
    let mut mean = vec![0.0f64; d];
    for e in embeddings {
        if e.dim() != d {
            return Err(Error::Shape(format!("embedding dims {d} and {} differ", e.dim())));
        }
        let n = e.norm();
        if n <= f64::EPSILON {
            return Err(Error::InvalidArgument("zero enrollment embedding".into()));
        }
        for (m, &x) in mean.iter_mut().zip(&e.vector) {
            *m += x as f64 / n;
        }
    }
    let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Cancelling embeddings leave no direction to score against.
    if n < 1e-6 * embeddings.len() as f64 {
        return Err(Error::InvalidArgument(format!(
            "enrollment embeddings for {speaker_id} cancel out"
        )));
    }
    Ok(EnrollmentProfile {
        speaker_id: speaker_id.to_string(),
        vector: mean.iter().map(|&x| (x / n) as f32).collect(),
    })
}

/// Cosine similarity; both sides are normalized first, so any positive
/// rescaling leaves the score unchanged. Zero vectors score 0.
pub fn cosine_score(profile: &EnrollmentProfile, test: &Embedding) -> f64 {
    let (a, b) = (&profile.vector, &test.vector);
    let (na, nb) = (norm(a), norm(b));
    if na <= f64::EPSILON || nb <= f64::EPSILON {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Equal-weight mean of two systems' cosine scores.
pub fn fuse_scores(a: f64, b: f64) -> f64 {
    0.5 * (a + b)
}
