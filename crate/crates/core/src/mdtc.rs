//! Multi-scale dilated temporal convolution (MDTC) keyword detector.
//!
//! Input fbank frames pass through a pointwise projection to `C` channels,
//! then `S` stacks of DTC blocks with dilations `1, 2, 4, 8`. The outputs
//! of all stacks are summed and fed to a per-frame classifier that emits
//! the wake-word posterior.
//!
//! A DTC block is
//!
//! ```text
//! x -> dilated depthwise conv -> BN -> ReLU
//!   -> pointwise -> BN -> ReLU
//!   -> pointwise -> BN -> SE gate -> (+ x) -> ReLU
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::layers::{BnCache, SeCache};
use crate::nn::ops::{relu, relu_backward, sigmoid};
use crate::nn::{BatchNorm, DepthwiseConv1d, ParamStore, Pointwise, Real, SeTemporal, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdtcConfig {
    pub input_dim: usize,
    pub channels: usize,
    pub stacks: usize,
    /// One entry per block in a stack.
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub se_reduction: usize,
    /// Frames averaged by each SE squeeze.
    pub se_window: usize,
    pub causal: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for MdtcConfig {
    fn default() -> Self {
        Self {
            input_dim: 80,
            channels: 64,
            stacks: 4,
            dilations: vec![1, 2, 4, 8],
            kernel: 5,
            se_reduction: 8,
            se_window: 1,
            causal: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl MdtcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("mdtc: {m}")));
        if self.input_dim == 0 || self.channels == 0 {
            return bad("input_dim and channels must be positive");
        }
        if self.stacks == 0 {
            return bad("need at least one stack");
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilations must be non-empty and positive");
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd");
        }
        if self.se_reduction == 0 || !self.channels.is_multiple_of(self.se_reduction) {
            return bad("se_reduction must divide channels");
        }
        if self.se_window == 0 {
            return bad("se_window must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("bn_momentum must be in [0, 1] and bn_eps positive");
        }
        Ok(())
    }

    pub fn blocks_per_stack(&self) -> usize {
        self.dilations.len()
    }

    /// Frames of context added by one block: the dilated taps plus the SE
    /// moving-average window.
    fn block_context(&self, dilation: usize) -> usize {
        (self.kernel - 1) * dilation + (self.se_window - 1)
    }

    /// Input frames that can influence one output frame:
    /// `1 + S * sum_blocks((K - 1) * d + (se_window - 1))`.
    pub fn receptive_field(&self) -> usize {
        1 + self.stacks * self.stack_context()
    }

    /// Context added by one stack (receptive field of a single stack is
    /// this plus one).
    pub fn stack_context(&self) -> usize {
        self.dilations.iter().map(|&d| self.block_context(d)).sum()
    }

    /// Closed-form parameter count (BN gamma/beta included, running
    /// statistics excluded).
    pub fn analytic_param_count(&self) -> usize {
        let c = self.channels;
        let h = c / self.se_reduction;
        let input = self.input_dim * c + c + 2 * c;
        let se = h * c + h + c * h + c;
        let block = c * self.kernel + 2 * c * c + 3 * 2 * c + se;
        input + self.stacks * self.blocks_per_stack() * block + c + 1
    }
}

/// `receptive_field` as a free function for symmetry with the model API.
pub fn receptive_field(cfg: &MdtcConfig) -> usize {
    cfg.receptive_field()
}

#[derive(Debug, Clone)]
pub struct DtcBlock {
    pub depthwise: DepthwiseConv1d,
    pub bn1: BatchNorm,
    pub pw1: Pointwise,
    pub bn2: BatchNorm,
    pub pw2: Pointwise,
    pub bn3: BatchNorm,
    pub se: SeTemporal,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    x: Tensor<T>,
    bn1: BnCache<T>,
    r1: Tensor<T>,
    bn2: BnCache<T>,
    r2: Tensor<T>,
    bn3: BnCache<T>,
    n3: Tensor<T>,
    se: SeCache<T>,
    out: Tensor<T>,
}

impl DtcBlock {
    fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        cfg: &MdtcConfig,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = cfg.channels;
        let bn = |ps: &mut ParamStore<T>, n: &str| {
            BatchNorm::new(ps, &format!("{name}.{n}"), c, cfg.bn_eps, cfg.bn_momentum)
        };
        let depthwise = DepthwiseConv1d::new(
            ps,
            &format!("{name}.dw"),
            c,
            cfg.kernel,
            dilation,
            cfg.causal,
            rng,
        );
        let bn1 = bn(ps, "bn1");
        let pw1 = Pointwise::new(ps, &format!("{name}.pw1"), c, c, false, rng);
        let bn2 = bn(ps, "bn2");
        let pw2 = Pointwise::new(ps, &format!("{name}.pw2"), c, c, false, rng);
        let bn3 = bn(ps, "bn3");
        let se = SeTemporal::new(
            ps,
            &format!("{name}.se"),
            c,
            cfg.se_reduction,
            cfg.se_window,
            rng,
        )?;
        Ok(Self {
            depthwise,
            bn1,
            pw1,
            bn2,
            pw2,
            bn3,
            se,
        })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.depthwise.forward(ps, x)?;
        let r1 = relu(&self.bn1.forward(ps, &a)?);
        let r2 = relu(&self.bn2.forward(ps, &self.pw1.forward(ps, &r1)?)?);
        let n3 = self.bn3.forward(ps, &self.pw2.forward(ps, &r2)?)?;
        let s = self.se.forward(ps, &n3)?;
        Ok(relu(&s.add(x)))
    }

    pub fn forward_train<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        x: &Tensor<T>,
        mask: Option<&[T]>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let a1 = self.depthwise.forward(ps, x)?;
        let (n1, bn1) = self.bn1.forward_train(ps, &a1, mask)?;
        let r1 = relu(&n1);
        let a2 = self.pw1.forward(ps, &r1)?;
        let (n2, bn2) = self.bn2.forward_train(ps, &a2, mask)?;
        let r2 = relu(&n2);
        let a3 = self.pw2.forward(ps, &r2)?;
        let (n3, bn3) = self.bn3.forward_train(ps, &a3, mask)?;
        let (s, se) = self.se.forward_cached(ps, &n3)?;
        let out = relu(&s.add(x));
        Ok((
            out.clone(),
            BlockCache {
                x: x.clone(),
                bn1,
                r1,
                bn2,
                r2,
                bn3,
                n3,
                se,
                out,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &BlockCache<T>,
        dout: &Tensor<T>,
        mask: Option<&[T]>,
    ) -> Tensor<T> {
        let dz = relu_backward(&cache.out, dout);
        let dn3 = self.se.backward(ps, &cache.n3, &cache.se, &dz);
        let da3 = self.bn3.backward(ps, &cache.bn3, &dn3, mask);
        let dr2 = self.pw2.backward(ps, &cache.r2, &da3);
        let da2 = self
            .bn2
            .backward(ps, &cache.bn2, &relu_backward(&cache.r2, &dr2), mask);
        let dr1 = self.pw1.backward(ps, &cache.r1, &da2);
        let da1 = self
            .bn1
            .backward(ps, &cache.bn1, &relu_backward(&cache.r1, &dr1), mask);
        let mut dx = self.depthwise.backward(ps, &cache.x, &da1);
        dx.add_assign(&dz);
        dx
    }
}

/// Per-frame wake-word posteriors, each in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTrack {
    pub posteriors: Vec<f32>,
}

impl PosteriorTrack {
    pub fn len(&self) -> usize {
        self.posteriors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posteriors.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct MdtcModel<T: Real = f32> {
    cfg: MdtcConfig,
    pub params: ParamStore<T>,
    pub input_proj: Pointwise,
    pub input_bn: BatchNorm,
    pub stacks: Vec<Vec<DtcBlock>>,
    pub classifier: Pointwise,
}

/// Everything the training backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct MdtcCache<T> {
    input: Tensor<T>,
    input_bn: BnCache<T>,
    input_out: Tensor<T>,
    blocks: Vec<Vec<BlockCache<T>>>,
    summed: Tensor<T>,
}

impl<T: Real> MdtcModel<T> {
    /// He-uniform weights, BN gamma = 1 and beta = 0; deterministic in `seed`.
    pub fn build(cfg: &MdtcConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let c = cfg.channels;
        let input_proj = Pointwise::new(&mut ps, "input.proj", cfg.input_dim, c, true, &mut rng);
        let input_bn = BatchNorm::new(&mut ps, "input.bn", c, cfg.bn_eps, cfg.bn_momentum);
        let mut stacks = Vec::with_capacity(cfg.stacks);
        for s in 0..cfg.stacks {
            let mut blocks = Vec::with_capacity(cfg.dilations.len());
            for (b, &d) in cfg.dilations.iter().enumerate() {
                blocks.push(DtcBlock::new(
                    &mut ps,
                    &format!("stack{s}.block{b}"),
                    cfg,
                    d,
                    &mut rng,
                )?);
            }
            stacks.push(blocks);
        }
        let classifier = Pointwise::new(&mut ps, "classifier", c, 1, true, &mut rng);
        // The summed stack outputs are large at initialization; a small
        // classifier keeps the first posteriors away from saturation.
        let w = ps.value_mut(classifier.weight);
        *w = w.map(|v| v * T::c(0.1));
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            input_proj,
            input_bn,
            stacks,
            classifier,
        })
    }

    pub fn config(&self) -> &MdtcConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn receptive_field(&self) -> usize {
        self.cfg.receptive_field()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> MdtcModel<U> {
        MdtcModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            input_proj: self.input_proj.clone(),
            input_bn: self.input_bn.clone(),
            stacks: self.stacks.clone(),
            classifier: self.classifier.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        x.expect_rank(3, "mdtc input")?;
        if x.dim(1) != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "mdtc expects {}-dim frames, got {}",
                self.cfg.input_dim,
                x.dim(1)
            )));
        }
        Ok(())
    }

    /// Eval-mode logits for `[B, D, T]` input; returns `[B, T]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let ps = &self.params;
        let mut h = relu(&self.input_bn.forward(ps, &self.input_proj.forward(ps, x)?)?);
        let mut summed = Tensor::zeros(h.shape());
        for blocks in &self.stacks {
            for block in blocks {
                h = block.forward(ps, &h)?;
            }
            summed.add_assign(&h);
        }
        let z = self.classifier.forward(ps, &summed)?;
        let (b, t) = (z.dim(0), z.dim(2));
        z.reshape(&[b, t])
    }

    /// Eval-mode posteriors for `[B, D, T]` input; returns `[B, T]`.
    pub fn posteriors(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.logits(x)?.map(posterior))
    }

    /// Train-mode forward (batch statistics in BN, running statistics
    /// updated). `mask` is `[B, T]` with 1 for real frames and 0 for
    /// padding. Returns logits `[B, T]`.
    pub fn forward_train(
        &mut self,
        x: &Tensor<T>,
        mask: Option<&[T]>,
    ) -> Result<(Tensor<T>, MdtcCache<T>)> {
        self.check_input(x)?;
        let ps = &mut self.params;
        let a0 = self.input_proj.forward(ps, x)?;
        let (n0, input_bn) = self.input_bn.forward_train(ps, &a0, mask)?;
        let input_out = relu(&n0);
        let mut h = input_out.clone();
        let mut summed = Tensor::zeros(h.shape());
        let mut caches = Vec::with_capacity(self.stacks.len());
        for blocks in &self.stacks {
            let mut sc = Vec::with_capacity(blocks.len());
            for block in blocks {
                let (out, cache) = block.forward_train(ps, &h, mask)?;
                h = out;
                sc.push(cache);
            }
            summed.add_assign(&h);
            caches.push(sc);
        }
        let z = self.classifier.forward(ps, &summed)?;
        let (b, t) = (z.dim(0), z.dim(2));
        Ok((
            z.reshape(&[b, t])?,
            MdtcCache {
                input: x.clone(),
                input_bn,
                input_out,
                blocks: caches,
                summed,
            },
        ))
    }

    /// Accumulates parameter gradients given dL/dlogits `[B, T]` and
    /// returns the gradient with respect to the input features.
    pub fn backward(
        &mut self,
        cache: &MdtcCache<T>,
        dlogits: &Tensor<T>,
        mask: Option<&[T]>,
    ) -> Tensor<T> {
        let ps = &mut self.params;
        let (b, t) = (dlogits.dim(0), dlogits.dim(1));
        let dz = dlogits.clone().reshape(&[b, 1, t]).expect("logit shape");
        let dsum = self.classifier.backward(ps, &cache.summed, &dz);
        let mut dh = Tensor::zeros(dsum.shape());
        for (blocks, bcache) in self.stacks.iter().zip(&cache.blocks).rev() {
            dh.add_assign(&dsum);
            for (block, c) in blocks.iter().zip(bcache).rev() {
                dh = block.backward(ps, c, &dh, mask);
            }
        }
        let dn0 = relu_backward(&cache.input_out, &dh);
        let da0 = self.input_bn.backward(ps, &cache.input_bn, &dn0, mask);
        self.input_proj.backward(ps, &cache.input, &da0)
    }

    /// Eval-mode posterior track for one utterance.
    pub fn forward(&self, feat: &FeatureMatrix) -> Result<PosteriorTrack> {
        let x = features_to_tensor::<T>(std::slice::from_ref(feat), self.cfg.input_dim)?;
        let p = self.posteriors(&x)?;
        Ok(PosteriorTrack {
            posteriors: p.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
    }

    pub fn new_stream(&self) -> Result<StreamState<T>> {
        StreamState::new(self)
    }

    /// Pushes one frame and returns its posterior; identical to the batch
    /// output at the same frame index.
    pub fn stream_push(&self, state: &mut StreamState<T>, frame: &[T]) -> Result<T> {
        state.push(self, frame)
    }
}

/// Sigmoid kept strictly inside (0, 1) at the working precision.
pub fn posterior<T: Real>(logit: T) -> T {
    let eps = T::epsilon();
    sigmoid(logit).max(eps).min(T::one() - eps)
}

/// Packs utterances into a zero-padded `[B, D, T_max]` tensor.
pub fn features_to_tensor<T: Real>(feats: &[FeatureMatrix], dim: usize) -> Result<Tensor<T>> {
    let b = feats.len();
    let t_max = feats.iter().map(FeatureMatrix::n_frames).max().unwrap_or(0);
    let mut x = Tensor::zeros(&[b, dim, t_max]);
    for (bi, f) in feats.iter().enumerate() {
        if f.dim() != dim {
            return Err(Error::Shape(format!(
                "expected {dim}-dim features, got {}",
                f.dim()
            )));
        }
        let slab = &mut x.data_mut()[bi * dim * t_max..(bi + 1) * dim * t_max];
        for t in 0..f.n_frames() {
            for (d, &v) in f.frame(t).iter().enumerate() {
                slab[d * t_max + t] = T::c(v as f64);
            }
        }
    }
    Ok(x)
}

/// Fixed-size history of the most recent frames, oldest first on read.
#[derive(Debug, Clone)]
struct FrameRing<T> {
    data: Vec<T>,
    width: usize,
    len: usize,
    head: usize,
}

impl<T: Real> FrameRing<T> {
    fn new(len: usize, width: usize) -> Self {
        Self {
            data: vec![T::zero(); len * width],
            width,
            len,
            head: 0,
        }
    }

    fn push(&mut self, frame: &[T]) {
        let w = self.width;
        self.data[self.head * w..(self.head + 1) * w].copy_from_slice(frame);
        self.head = (self.head + 1) % self.len;
    }

    /// Frame `age` steps back from the newest (0 = newest).
    fn back(&self, age: usize) -> &[T] {
        let idx = (self.head + self.len - 1 - age) % self.len;
        &self.data[idx * self.width..(idx + 1) * self.width]
    }
}

#[derive(Debug, Clone)]
struct BlockStream<T> {
    /// Block inputs, sized to the depthwise left context plus the current frame.
    inputs: FrameRing<T>,
    /// SE squeeze inputs, `se_window` frames.
    se: FrameRing<T>,
}

/// Per-stream left context for [`MdtcModel::stream_push`]. Never shared
/// between streams.
#[derive(Debug, Clone)]
pub struct StreamState<T> {
    cfg: MdtcConfig,
    blocks: Vec<BlockStream<T>>,
    frames: usize,
}

impl<T: Real> StreamState<T> {
    pub fn new(model: &MdtcModel<T>) -> Result<Self> {
        if !model.cfg.causal {
            return Err(Error::InvalidConfig(
                "streaming needs a causal model".into(),
            ));
        }
        let c = model.cfg.channels;
        let blocks = model
            .stacks
            .iter()
            .flatten()
            .map(|b| BlockStream {
                inputs: FrameRing::new(b.depthwise.left_context() + 1, c),
                se: FrameRing::new(b.se.window, c),
            })
            .collect();
        Ok(Self {
            cfg: model.cfg.clone(),
            blocks,
            frames: 0,
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.frames
    }

    fn push(&mut self, model: &MdtcModel<T>, frame: &[T]) -> Result<T> {
        if self.cfg != model.cfg {
            return Err(Error::InvalidArgument(
                "stream state was built for a different model".into(),
            ));
        }
        if frame.len() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "expected {}-dim frame, got {}",
                self.cfg.input_dim,
                frame.len()
            )));
        }
        let ps = &model.params;
        let t = self.frames;
        let mut h = pointwise_column(ps, &model.input_proj, frame);
        bn_relu_column(ps, &model.input_bn, &mut h, true);
        let mut summed = vec![T::zero(); h.len()];
        let mut slot = 0;
        for blocks in &model.stacks {
            for block in blocks {
                h = block_column(ps, block, &mut self.blocks[slot], &h, t);
                slot += 1;
            }
            for (s, &v) in summed.iter_mut().zip(&h) {
                *s += v;
            }
        }
        let z = pointwise_column(ps, &model.classifier, &summed)[0];
        self.frames += 1;
        Ok(posterior(z))
    }
}

fn pointwise_column<T: Real>(ps: &ParamStore<T>, layer: &Pointwise, x: &[T]) -> Vec<T> {
    let w = ps.value(layer.weight).data();
    (0..layer.cout)
        .map(|o| {
            let mut s = layer.bias.map_or(T::zero(), |b| ps.value(b).data()[o]);
            for (&wv, &xv) in w[o * layer.cin..(o + 1) * layer.cin].iter().zip(x) {
                s += wv * xv;
            }
            s
        })
        .collect()
}

fn bn_relu_column<T: Real>(ps: &ParamStore<T>, bn: &BatchNorm, x: &mut [T], relu: bool) {
    let (scale, shift) = bn.eval_affine(ps);
    for ((v, &a), &b) in x.iter_mut().zip(&scale).zip(&shift) {
        *v = *v * a + b;
        if relu {
            *v = v.max(T::zero());
        }
    }
}

fn block_column<T: Real>(
    ps: &ParamStore<T>,
    block: &DtcBlock,
    state: &mut BlockStream<T>,
    x: &[T],
    t: usize,
) -> Vec<T> {
    state.inputs.push(x);
    let dw = &block.depthwise;
    let w = ps.value(dw.weight).data();
    let mut a: Vec<T> = (0..dw.channels)
        .map(|c| {
            let mut s = T::zero();
            for k in 0..dw.kernel {
                let age = (dw.kernel - 1 - k) * dw.dilation;
                if age <= t {
                    s += w[c * dw.kernel + k] * state.inputs.back(age)[c];
                }
            }
            s
        })
        .collect();
    bn_relu_column(ps, &block.bn1, &mut a, true);
    let mut a = pointwise_column(ps, &block.pw1, &a);
    bn_relu_column(ps, &block.bn2, &mut a, true);
    let mut n3 = pointwise_column(ps, &block.pw2, &a);
    bn_relu_column(ps, &block.bn3, &mut n3, false);

    state.se.push(&n3);
    let window = block.se.window;
    let inv = T::one() / T::c(window as f64);
    let pooled: Vec<T> = (0..n3.len())
        .map(|c| {
            let mut s = T::zero();
            for j in (0..window).rev() {
                if t >= j {
                    s += state.se.back(j)[c];
                }
            }
            s * inv
        })
        .collect();
    let gate = block.se.gate_column(ps, &pooled);
    n3.iter()
        .zip(&gate)
        .zip(x)
        .map(|((&v, &g), &r)| (v * g + r).max(T::zero()))
        .collect()
}
