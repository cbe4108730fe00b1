//! Residual SE extractor, pooling, projection and ArcFace class weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pooling::{AttentivePooling, PoolCache};
use super::{Embedding, SvConfig};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::mdtc::features_to_tensor;
use crate::nn::layers::{BnCache, Se2dCache};
use crate::nn::ops::{l2_normalize_rows, l2_normalize_rows_backward, relu, relu_backward};
use crate::nn::params::he_uniform;
use crate::nn::{BatchNorm, Conv2d, Dense, ParamId, ParamStore, Real, Se2d, Tensor};

const NORM_EPS: f64 = 1e-12;

/// `conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> SE -> (+ shortcut) -> ReLU`.
/// The shortcut is a 1x1 conv + BN whenever shape changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub se: Se2d,
    pub shortcut: Option<(Conv2d, BatchNorm)>,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<T> {
    x: Tensor<T>,
    bn1: BnCache<T>,
    r1: Tensor<T>,
    bn2: BnCache<T>,
    n2: Tensor<T>,
    se: Se2dCache<T>,
    short_bn: Option<BnCache<T>>,
    y: Tensor<T>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        cfg: &SvConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bn = |ps: &mut ParamStore<T>, n: &str| {
            BatchNorm::new(ps, &format!("{name}.{n}"), cout, cfg.bn_eps, cfg.bn_momentum)
        };
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, stride, 1, rng);
        let bn1 = bn(ps, "bn1");
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng);
        let bn2 = bn(ps, "bn2");
        let se = Se2d::new(ps, &format!("{name}.se"), cout, cfg.se_reduction, rng)?;
        let shortcut = (cin != cout || stride != 1).then(|| {
            let conv = Conv2d::new(ps, &format!("{name}.short"), cin, cout, 1, stride, 0, rng);
            (conv, bn(ps, "short_bn"))
        });
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            se,
            shortcut,
        })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let r1 = relu(&self.bn1.forward(ps, &self.conv1.forward(ps, x)?)?);
        let n2 = self.bn2.forward(ps, &self.conv2.forward(ps, &r1)?)?;
        let mut s = self.se.forward(ps, &n2)?;
        match &self.shortcut {
            Some((conv, bn)) => s.add_assign(&bn.forward(ps, &conv.forward(ps, x)?)?),
            None => s.add_assign(x),
        }
        Ok(relu(&s))
    }

    pub fn forward_train<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ResBlockCache<T>)> {
        let a1 = self.conv1.forward(ps, x)?;
        let (n1, bn1) = self.bn1.forward_train(ps, &a1, None)?;
        let r1 = relu(&n1);
        let a2 = self.conv2.forward(ps, &r1)?;
        let (n2, bn2) = self.bn2.forward_train(ps, &a2, None)?;
        let (mut s, se) = self.se.forward_cached(ps, &n2)?;
        let short_bn = match &self.shortcut {
            Some((conv, bn)) => {
                let (sc, cache) = bn.forward_train(ps, &conv.forward(ps, x)?, None)?;
                s.add_assign(&sc);
                Some(cache)
            }
            None => {
                s.add_assign(x);
                None
            }
        };
        let y = relu(&s);
        let cache = ResBlockCache {
            x: x.clone(),
            bn1,
            r1,
            bn2,
            n2,
            se,
            short_bn,
            y: y.clone(),
        };
        Ok((y, cache))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &ResBlockCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let ds = relu_backward(&cache.y, dy);
        let dn2 = self.se.backward(ps, &cache.n2, &cache.se, &ds);
        let da2 = self.bn2.backward(ps, &cache.bn2, &dn2, None);
        let dr1 = self.conv2.backward(ps, &cache.r1, &da2);
        let dn1 = relu_backward(&cache.r1, &dr1);
        let da1 = self.bn1.backward(ps, &cache.bn1, &dn1, None);
        let mut dx = self.conv1.backward(ps, &cache.x, &da1);
        match (&self.shortcut, &cache.short_bn) {
            (Some((conv, bn)), Some(bc)) => {
                let dsc = bn.backward(ps, bc, &ds, None);
                dx.add_assign(&conv.backward(ps, &cache.x, &dsc));
            }
            _ => dx.add_assign(&ds),
        }
        dx
    }
}

/// Which parameters a training pass updates. `Head` keeps the extractor
/// and pooling in eval mode and skips their backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    Full,
    Head,
}

#[derive(Debug, Clone)]
pub struct SvModel<T: Real = f32> {
    cfg: SvConfig,
    pub params: ParamStore<T>,
    pub stem_conv: Conv2d,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<ResBlock>,
    pub pooling: AttentivePooling,
    pub projection: Dense,
    /// ArcFace class weights `[n_classes, embedding_dim]`.
    pub classifier: ParamId,
}

/// Forward state for [`SvModel::backward`].
#[derive(Debug, Clone)]
pub struct SvCache<T> {
    scope: TrainScope,
    input: Tensor<T>,
    stem_bn: Option<BnCache<T>>,
    stem_out: Option<Tensor<T>>,
    blocks: Vec<ResBlockCache<T>>,
    /// `[B, C, F', T']` extractor output shape.
    ext_shape: Vec<usize>,
    frames: Tensor<T>,
    pool: Option<PoolCache<T>>,
    pooled: Tensor<T>,
    emb: Vec<T>,
    emb_norms: Vec<T>,
}

impl<T: Real> SvModel<T> {
    pub fn build(cfg: &SvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let stem_conv = Conv2d::new(&mut ps, "stem.conv", 1, cfg.stem_channels, 3, 1, 1, &mut rng);
        let stem_bn = BatchNorm::new(&mut ps, "stem.bn", cfg.stem_channels, cfg.bn_eps, cfg.bn_momentum);
        let mut blocks = Vec::with_capacity(cfg.block_count());
        let mut cin = cfg.stem_channels;
        for (si, stage) in cfg.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.stride } else { 1 };
                let name = format!("stage{si}.block{bi}");
                blocks.push(ResBlock::new(&mut ps, &name, cin, stage.channels, stride, cfg, &mut rng)?);
                cin = stage.channels;
            }
        }
        let d = cfg.frame_dim();
        let pooling = AttentivePooling::new(
            &mut ps,
            "pool",
            cfg.pooling,
            d,
            cfg.attention_dim,
            cfg.pool_eps,
            &mut rng,
        );
        let projection = Dense::new(&mut ps, "embed", pooling.out_dim(), cfg.embedding_dim, &mut rng);
        let classifier = ps.add_param(
            "classifier.weight",
            he_uniform(&[cfg.n_classes, cfg.embedding_dim], cfg.embedding_dim, &mut rng),
        );
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            stem_conv,
            stem_bn,
            blocks,
            pooling,
            projection,
            classifier,
        })
    }

    pub fn config(&self) -> &SvConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn n_classes(&self) -> usize {
        self.params.value(self.classifier).dim(0)
    }

    pub fn cast<U: Real>(&self) -> SvModel<U> {
        SvModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            stem_conv: self.stem_conv.clone(),
            stem_bn: self.stem_bn.clone(),
            blocks: self.blocks.clone(),
            pooling: self.pooling.clone(),
            projection: self.projection.clone(),
            classifier: self.classifier,
        }
    }

    /// Replaces the class-weight matrix with a fresh one for `n` classes.
    pub fn reset_classifier(&mut self, n: usize, seed: u64) -> Result<()> {
        if n < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = self.cfg.embedding_dim;
        self.params.reshape_param(self.classifier, he_uniform(&[n, e], e, &mut rng));
        self.cfg.n_classes = n;
        Ok(())
    }

    /// Names of the parameters `ClassifierOnly` / `ClassifierAndProjection`
    /// finetuning touch.
    pub fn is_classifier_param(name: &str) -> bool {
        name.starts_with("classifier.")
    }

    pub fn is_projection_param(name: &str) -> bool {
        name.starts_with("embed.")
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        x.expect_rank(4, "sv input")?;
        if x.dim(1) != 1 || x.dim(2) != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "sv expects [B, 1, {}, T], got {:?}",
                self.cfg.input_dim,
                x.shape()
            )));
        }
        if x.dim(3) == 0 {
            return Err(Error::TooShort("sv input has no frames".into()));
        }
        Ok(())
    }

    /// Folds `[B, C, F, T]` into `[B, C*F, T]`; the memory layout already
    /// matches, so this only relabels the shape.
    fn fold(h: Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, f, t) = (h.dim(0), h.dim(1), h.dim(2), h.dim(3));
        h.reshape(&[b, c * f, t])
    }

    /// Eval-mode frame sequence `[B, C*F', T']` for `[B, 1, F, T]` input.
    pub fn extract(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let ps = &self.params;
        let mut h = relu(&self.stem_bn.forward(ps, &self.stem_conv.forward(ps, x)?)?);
        for block in &self.blocks {
            h = block.forward(ps, &h)?;
        }
        Self::fold(h)
    }

    /// Eval-mode unit-norm embeddings `[B, E]`.
    pub fn embed_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let frames = self.extract(x)?;
        let pooled = self.pooling.forward(&self.params, &frames)?;
        let z = self.projection.forward(&self.params, &pooled)?;
        let e = self.cfg.embedding_dim;
        let (y, _) = l2_normalize_rows(z.data(), e, T::c(NORM_EPS));
        Tensor::new(z.shape(), y)
    }

    pub fn embed_utterance(&self, feat: &FeatureMatrix) -> Result<Embedding> {
        if feat.n_frames() == 0 {
            return Err(Error::TooShort("cannot embed an utterance with no frames".into()));
        }
        let x = features_to_image::<T>(std::slice::from_ref(feat), self.cfg.input_dim)?;
        let e = self.embed_batch(&x)?;
        Ok(Embedding {
            vector: e.data().iter().map(|v| v.as_f64() as f32).collect(),
            normalized: true,
        })
    }

    /// L2-normalized class rows and their norms.
    pub fn class_weights(&self) -> (Vec<T>, Vec<T>) {
        l2_normalize_rows(
            self.params.value(self.classifier).data(),
            self.cfg.embedding_dim,
            T::c(NORM_EPS),
        )
    }

    /// Training forward pass returning unit-norm embeddings `[B, E]`.
    pub fn forward_train(&mut self, x: &Tensor<T>, scope: TrainScope) -> Result<(Tensor<T>, SvCache<T>)> {
        self.check_input(x)?;
        let (stem_bn, stem_out, blocks, frames) = match scope {
            TrainScope::Head => (None, None, Vec::new(), self.extract(x)?),
            TrainScope::Full => {
                let ps = &mut self.params;
                let a0 = self.stem_conv.forward(ps, x)?;
                let (n0, bn) = self.stem_bn.forward_train(ps, &a0, None)?;
                let r0 = relu(&n0);
                let mut h = r0.clone();
                let mut caches = Vec::with_capacity(self.blocks.len());
                for block in &self.blocks {
                    let (out, c) = block.forward_train(ps, &h)?;
                    h = out;
                    caches.push(c);
                }
                (Some(bn), Some(r0), caches, h)
            }
        };
        let ext_shape = frames.shape().to_vec();
        let frames = if frames.rank() == 4 { Self::fold(frames)? } else { frames };
        let (pooled, pool) = match scope {
            TrainScope::Full => {
                let (p, c) = self.pooling.forward_cached(&self.params, &frames)?;
                (p, Some(c))
            }
            TrainScope::Head => (self.pooling.forward(&self.params, &frames)?, None),
        };
        let z = self.projection.forward(&self.params, &pooled)?;
        let (emb, emb_norms) = l2_normalize_rows(z.data(), self.cfg.embedding_dim, T::c(NORM_EPS));
        let out = Tensor::new(z.shape(), emb.clone())?;
        Ok((
            out,
            SvCache {
                scope,
                input: x.clone(),
                stem_bn,
                stem_out,
                blocks,
                ext_shape,
                frames,
                pool,
                pooled,
                emb,
                emb_norms,
            },
        ))
    }

    /// Accumulates gradients for dL/d(embedding) `[B, E]` and for
    /// dL/d(normalized class rows) `[C, E]` when given. Returns the input
    /// gradient for a full-scope pass.
    pub fn backward(
        &mut self,
        cache: &SvCache<T>,
        d_emb: &[T],
        d_class: Option<&[T]>,
    ) -> Option<Tensor<T>> {
        let e = self.cfg.embedding_dim;
        let ps = &mut self.params;
        if let Some(dc) = d_class {
            let w = ps.value(self.classifier).data().to_vec();
            let (wn, norms) = l2_normalize_rows(&w, e, T::c(NORM_EPS));
            let dw = l2_normalize_rows_backward(&wn, &norms, dc, e, T::c(NORM_EPS));
            for (g, d) in ps.grad_mut(self.classifier).data_mut().iter_mut().zip(dw) {
                *g += d;
            }
        }
        let dz = l2_normalize_rows_backward(&cache.emb, &cache.emb_norms, d_emb, e, T::c(NORM_EPS));
        let b = cache.pooled.dim(0);
        let dz = Tensor::new(&[b, e], dz).expect("embedding gradient shape");
        let dpooled = self.projection.backward(ps, &cache.pooled, &dz);
        if cache.scope == TrainScope::Head {
            return None;
        }
        let pool = cache.pool.as_ref().expect("full-scope cache has pooling state");
        let dframes = self.pooling.backward(ps, &cache.frames, pool, &dpooled);
        let mut dh = dframes.reshape(&cache.ext_shape).expect("fold shape");
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = block.backward(ps, c, &dh);
        }
        let r0 = cache.stem_out.as_ref().expect("stem output");
        let dn0 = relu_backward(r0, &dh);
        let da0 = self
            .stem_bn
            .backward(ps, cache.stem_bn.as_ref().expect("stem bn cache"), &dn0, None);
        Some(self.stem_conv.backward(ps, &cache.input, &da0))
    }
}

/// Packs equal-dimension utterances into a zero-padded `[B, 1, D, T_max]`
/// image (frequency rows, time columns).
pub fn features_to_image<T: Real>(feats: &[FeatureMatrix], dim: usize) -> Result<Tensor<T>> {
    let x = features_to_tensor::<T>(feats, dim)?;
    let (b, d, t) = (x.dim(0), x.dim(1), x.dim(2));
    x.reshape(&[b, 1, d, t])
}
