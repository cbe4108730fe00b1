//! Manifests, frame labels, composition of training utterances and
//! augmentation.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{AudioBuffer, FeatureMatrix, HOP_SAMPLES};
use crate::nn::Tensor;

/// Frames on each side of the keyword midpoint that receive a positive
/// label: the window is `[m - 20, m + 19]`.
pub const LABEL_HALF_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UttLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub wav_path: PathBuf,
    pub speaker_id: String,
    pub label: UttLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_start_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_end_s: Option<f64>,
}

impl ManifestEntry {
    /// Keyword span in seconds, required for positives.
    pub fn keyword_span_s(&self) -> Result<Option<(f64, f64)>> {
        match (self.label, self.keyword_start_s, self.keyword_end_s) {
            (UttLabel::Negative, _, _) => Ok(None),
            (UttLabel::Positive, Some(s), Some(e)) => {
                if !(s >= 0.0 && s < e) {
                    return Err(Error::InvalidArgument(format!(
                        "{}: keyword span [{s}, {e}) is empty or negative",
                        self.utt_id
                    )));
                }
                Ok(Some((s, e)))
            }
            (UttLabel::Positive, _, _) => Err(Error::InvalidArgument(format!(
                "{}: positive entry missing keyword times",
                self.utt_id
            ))),
        }
    }

    /// Keyword span as frame indices `[start, end)` at a 10 ms hop.
    pub fn keyword_frames(&self) -> Result<Option<Range<usize>>> {
        Ok(self
            .keyword_span_s()?
            .map(|(s, e)| seconds_to_frame(s)..seconds_to_frame(e)))
    }
}

pub fn seconds_to_frame(s: f64) -> usize {
    (s * 100.0).round().max(0.0) as usize
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: i + 1,
            detail: e.to_string(),
        })?;
        entry.keyword_span_s().map_err(|e| Error::Manifest {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

/// Reads a JSON-Lines manifest. Relative wav paths are resolved against
/// the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in std::io::BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = parse_manifest(&text)?;
    for e in &mut entries {
        if e.wav_path.is_relative() {
            e.wav_path = base.join(&e.wav_path);
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(path, err))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameTarget {
    Keyword,
    Background,
    /// Excluded from the loss.
    Ambiguous,
}

impl FrameTarget {
    pub fn value(self) -> f32 {
        match self {
            FrameTarget::Keyword => 1.0,
            _ => 0.0,
        }
    }

    pub fn weight(self) -> f32 {
        match self {
            FrameTarget::Ambiguous => 0.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub features: FeatureMatrix,
    pub targets: Vec<FrameTarget>,
}

impl LabeledExample {
    pub fn n_frames(&self) -> usize {
        self.targets.len()
    }

    pub fn is_positive(&self) -> bool {
        self.targets.contains(&FrameTarget::Keyword)
    }
}

/// Frame targets for `n_frames` frames. With a keyword span, the frames in
/// `[m - 20, m + 19]` within the span are positive (m = span midpoint) and
/// every other frame is ambiguous; without one, all frames are background.
pub fn frame_targets(n_frames: usize, keyword: Option<Range<usize>>) -> Result<Vec<FrameTarget>> {
    let Some(span) = keyword else {
        return Ok(vec![FrameTarget::Background; n_frames]);
    };
    if span.start >= span.end {
        return Err(Error::InvalidArgument(format!(
            "empty keyword span {}..{}",
            span.start, span.end
        )));
    }
    let m = (span.start + span.end) / 2;
    let lo = m.saturating_sub(LABEL_HALF_WINDOW).max(span.start);
    let hi = (m + LABEL_HALF_WINDOW).min(span.end).min(n_frames);
    if lo >= hi {
        return Err(Error::InvalidArgument(format!(
            "keyword span {}..{} lies outside {n_frames} frames",
            span.start, span.end
        )));
    }
    let mut t = vec![FrameTarget::Ambiguous; n_frames];
    t[lo..hi].fill(FrameTarget::Keyword);
    Ok(t)
}

pub fn label_utterance(entry: &ManifestEntry, features: FeatureMatrix) -> Result<LabeledExample> {
    let targets = frame_targets(features.n_frames(), entry.keyword_frames()?)?;
    Ok(LabeledExample { features, targets })
}

/// An utterance assembled from pieces with the keyword's sample range
/// tracked through the concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub audio: AudioBuffer,
    pub keyword: Range<usize>,
}

impl Composition {
    /// Keyword span in 10 ms frames.
    pub fn keyword_frames(&self) -> Range<usize> {
        let f = |s: usize| (s as f64 / HOP_SAMPLES as f64).round() as usize;
        f(self.keyword.start)..f(self.keyword.end)
    }

    /// The keyword midpoint frame.
    pub fn midpoint_frame(&self) -> usize {
        let r = self.keyword_frames();
        (r.start + r.end) / 2
    }

    pub fn keyword_samples(&self) -> &[f32] {
        &self.audio.samples[self.keyword.clone()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The keyword segment on its own.
    KeywordOnly,
    /// filler, then keyword.
    Prefixed,
    /// filler, keyword, filler.
    Wrapped,
}

/// Cuts the keyword segment out of a positive utterance.
pub fn keyword_segment(entry: &ManifestEntry, audio: &AudioBuffer) -> Result<AudioBuffer> {
    let (s, e) = entry.keyword_span_s()?.ok_or_else(|| {
        Error::InvalidArgument(format!("{}: not a positive entry", entry.utt_id))
    })?;
    let sr = audio.sample_rate as f64;
    let a = (s * sr).round() as usize;
    let b = ((e * sr).round() as usize).min(audio.len());
    if a >= b {
        return Err(Error::InvalidArgument(format!(
            "{}: keyword span beyond audio end",
            entry.utt_id
        )));
    }
    Ok(AudioBuffer::new(audio.samples[a..b].to_vec(), audio.sample_rate))
}

pub fn compose(
    variant: Variant,
    keyword: &AudioBuffer,
    fillers: &[AudioBuffer],
    rng: &mut impl Rng,
) -> Result<Composition> {
    let mut pick = || {
        fillers.choose(rng).ok_or_else(|| {
            Error::Empty(format!("filler pool is empty but {variant:?} needs one"))
        })
    };
    let (before, after): (Option<&AudioBuffer>, Option<&AudioBuffer>) = match variant {
        Variant::KeywordOnly => (None, None),
        Variant::Prefixed => (Some(pick()?), None),
        Variant::Wrapped => (Some(pick()?), Some(pick()?)),
    };
    let mut samples = Vec::new();
    if let Some(f) = before {
        samples.extend_from_slice(&f.samples);
    }
    let start = samples.len();
    samples.extend_from_slice(&keyword.samples);
    let end = samples.len();
    if let Some(f) = after {
        samples.extend_from_slice(&f.samples);
    }
    Ok(Composition {
        audio: AudioBuffer::new(samples, keyword.sample_rate),
        keyword: start..end,
    })
}

/// All three positive compositions of one keyword segment.
pub fn build_positive_variants(
    keyword: &AudioBuffer,
    fillers: &[AudioBuffer],
    rng: &mut impl Rng,
) -> Result<Vec<Composition>> {
    [Variant::KeywordOnly, Variant::Prefixed, Variant::Wrapped]
        .into_iter()
        .map(|v| compose(v, keyword, fillers, rng))
        .collect()
}

/// Splits a composition at the keyword midpoint into two negatives.
pub fn build_negative_cuts(comp: &Composition) -> Result<(AudioBuffer, AudioBuffer)> {
    let cut = comp.midpoint_frame() * HOP_SAMPLES;
    if cut == 0 || cut >= comp.audio.len() {
        return Err(Error::InvalidArgument(format!(
            "keyword midpoint at sample {cut} is on a boundary of {} samples",
            comp.audio.len()
        )));
    }
    let sr = comp.audio.sample_rate;
    Ok((
        AudioBuffer::new(comp.audio.samples[..cut].to_vec(), sr),
        AudioBuffer::new(comp.audio.samples[cut..].to_vec(), sr),
    ))
}

/// Frame targets for the two halves of a negative cut with
/// `left_frames` and `right_frames` frames.
///
/// Both halves are negatives, except that the left half's trailing frames
/// that carry a positive label in the uncut composition are ambiguous: a
/// causal model sees the same history there in both utterances, so
/// labelling them 0 would contradict the positive.
pub fn cut_targets(
    comp: &Composition,
    left_frames: usize,
    right_frames: usize,
) -> (Vec<FrameTarget>, Vec<FrameTarget>) {
    let span = comp.keyword_frames();
    let m = (span.start + span.end) / 2;
    let lo = m.saturating_sub(LABEL_HALF_WINDOW).max(span.start);
    let left = (0..left_frames)
        .map(|i| if i >= lo { FrameTarget::Ambiguous } else { FrameTarget::Background })
        .collect();
    (left, vec![FrameTarget::Background; right_frames])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub spec_augment: bool,
    pub time_mask_max: usize,
    pub freq_mask_max: usize,
    pub n_time_masks: usize,
    pub n_freq_masks: usize,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    /// Relative frequency of keyword-only, prefixed, wrapped and cut
    /// examples in the training mix.
    pub variant_weights: [f64; 4],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            spec_augment: true,
            time_mask_max: 20,
            freq_mask_max: 30,
            n_time_masks: 1,
            n_freq_masks: 1,
            snr_db_min: 5.0,
            snr_db_max: 20.0,
            variant_weights: [1.0; 4],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.freq_mask_max > feature_dim {
            return Err(Error::InvalidConfig(format!(
                "freq_mask_max={} exceeds feature dim {feature_dim}",
                self.freq_mask_max
            )));
        }
        if !(self.snr_db_min <= self.snr_db_max) {
            return Err(Error::InvalidConfig(format!(
                "snr_db_min={} > snr_db_max={}",
                self.snr_db_min, self.snr_db_max
            )));
        }
        if self.variant_weights.iter().any(|&w| !(w >= 0.0)) || self.variant_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig(
                "variant_weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }
}

/// Where masks were placed, for inspection and tests.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppliedMasks {
    pub time: Vec<Range<usize>>,
    pub freq: Vec<Range<usize>>,
}

fn sample_mask(max_len: usize, extent: usize, rng: &mut impl Rng) -> Range<usize> {
    let len = rng.gen_range(0..=max_len.min(extent));
    let start = rng.gen_range(0..=extent - len);
    start..start + len
}

/// Zeroes random runs of frames and of mel bins.
pub fn spec_augment(
    feat: &FeatureMatrix,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (FeatureMatrix, AppliedMasks) {
    let mut out = feat.clone();
    let mut masks = AppliedMasks::default();
    let (t, d) = (feat.n_frames(), feat.dim());
    for _ in 0..cfg.n_time_masks {
        let r = sample_mask(cfg.time_mask_max, t, rng);
        for f in r.clone() {
            out.frame_mut(f).fill(0.0);
        }
        masks.time.push(r);
    }
    for _ in 0..cfg.n_freq_masks {
        let r = sample_mask(cfg.freq_mask_max, d, rng);
        for f in 0..t {
            out.frame_mut(f)[r.clone()].fill(0.0);
        }
        masks.freq.push(r);
    }
    (out, masks)
}

fn power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// Adds `noise`, looped or truncated to the speech length, scaled to the
/// requested signal-to-noise ratio. An infinite SNR returns the speech.
pub fn mix_noise_snr(speech: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<AudioBuffer> {
    if snr_db == f64::INFINITY {
        return Ok(speech.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db={snr_db}")));
    }
    if noise.is_empty() {
        return Err(Error::Empty("noise buffer".into()));
    }
    let looped: Vec<f32> = noise.samples.iter().copied().cycle().take(speech.len()).collect();
    let pn = power(&looped);
    if pn == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise has zero power, cannot reach {snr_db} dB"
        )));
    }
    let scale = (power(&speech.samples) / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = speech
        .samples
        .iter()
        .zip(&looped)
        .map(|(&s, &n)| (s as f64 + scale * n as f64) as f32)
        .collect();
    Ok(AudioBuffer::new(samples, speech.sample_rate))
}

fn peak(x: &[f32]) -> f32 {
    x.iter().fold(0.0f32, |a, &v| a.max(v.abs()))
}

/// Reverberates `speech` with a room impulse response: linear convolution
/// truncated to the input length, rescaled to the input's peak.
pub fn convolve_rir(speech: &AudioBuffer, rir: &AudioBuffer) -> Result<AudioBuffer> {
    if rir.is_empty() {
        return Err(Error::Empty("impulse response".into()));
    }
    if rir.len() > speech.len() {
        return Err(Error::InvalidArgument(format!(
            "impulse response ({} samples) longer than speech ({})",
            rir.len(),
            speech.len()
        )));
    }
    let x = &speech.samples;
    let mut y = vec![0f64; x.len()];
    for (k, &h) in rir.samples.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        for (yv, &xv) in y[k..].iter_mut().zip(x) {
            *yv += h as f64 * xv as f64;
        }
    }
    let mut out: Vec<f32> = y.into_iter().map(|v| v as f32).collect();
    let (pin, pout) = (peak(x), peak(&out));
    if pout > 0.0 {
        let g = pin / pout;
        out.iter_mut().for_each(|v| *v *= g);
    }
    Ok(AudioBuffer::new(out, speech.sample_rate))
}

/// A padded mini-batch laid out for the keyword model.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, D, T_max]`, zero-padded.
    pub features: Tensor<f32>,
    /// `[B * T_max]` targets, weights and validity mask.
    pub targets: Vec<f32>,
    pub weights: Vec<f32>,
    pub mask: Vec<f32>,
    /// Indices of the examples in the source slice.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_examples<'a>(
        examples: impl IntoIterator<Item = (usize, &'a LabeledExample)>,
    ) -> Result<Self> {
        let items: Vec<(usize, &LabeledExample)> = examples.into_iter().collect();
        let first = items.first().ok_or_else(|| Error::Empty("batch".into()))?;
        let dim = first.1.features.dim();
        let b = items.len();
        let t_max = items.iter().map(|(_, e)| e.n_frames()).max().unwrap_or(0);
        let mut features = Tensor::zeros(&[b, dim, t_max]);
        let mut targets = vec![0.0; b * t_max];
        let mut weights = vec![0.0; b * t_max];
        let mut mask = vec![0.0; b * t_max];
        let fd = features.data_mut();
        for (i, (_, ex)) in items.iter().enumerate() {
            if ex.features.dim() != dim {
                return Err(Error::Shape(format!(
                    "mixed feature dims {} and {dim} in one batch",
                    ex.features.dim()
                )));
            }
            for t in 0..ex.n_frames() {
                for (d, &v) in ex.features.frame(t).iter().enumerate() {
                    fd[(i * dim + d) * t_max + t] = v;
                }
                targets[i * t_max + t] = ex.targets[t].value();
                weights[i * t_max + t] = ex.targets[t].weight();
                mask[i * t_max + t] = 1.0;
            }
        }
        Ok(Self {
            features,
            targets,
            weights,
            mask,
            indices: items.iter().map(|(i, _)| *i).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// One epoch's batch order: a seeded shuffle cut into `batch_size` chunks.
pub fn epoch_order(n: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Empty("dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Shuffled, padded batches covering every example once.
pub fn batch_iterator<'a, R: Rng>(
    examples: &'a [LabeledExample],
    batch_size: usize,
    rng: &mut R,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let order = epoch_order(examples.len(), batch_size, rng)?;
    Ok(order
        .into_iter()
        .map(move |chunk| Batch::from_examples(chunk.into_iter().map(|i| (i, &examples[i])))))
}
