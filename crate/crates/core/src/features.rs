//! Audio input and the 80-band log-mel filterbank frontend.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate required for all pipeline audio.
pub const SAMPLE_RATE: u32 = 16_000;

/// Samples per 10 ms frame hop at [`SAMPLE_RATE`].
pub const HOP_SAMPLES: usize = 160;

/// Mono PCM audio, amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16 kHz, 16-bit, mono RIFF/WAVE file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes))
        .map_err(|e| Error::WavHeader(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::WavFormat(format!(
            "channels={}, expected mono",
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::WavFormat(format!(
            "sample_rate={}, expected {SAMPLE_RATE}",
            spec.sample_rate
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::WavFormat(format!(
            "bits_per_sample={} ({:?}), expected 16-bit PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::WavHeader(format!("{}: {e}", path.display())))?;
    Ok(AudioBuffer::new(samples, SAMPLE_RATE))
}

/// Writes 16-bit mono PCM. Samples are clipped to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavFormat(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &audio.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub preemphasis: f64,
    /// Per-utterance cepstral mean normalization.
    pub cmn: bool,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            win_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            fmin: 20.0,
            fmax: 7600.0,
            log_floor: 1e-10,
            preemphasis: 0.97,
            cmn: true,
        }
    }
}

impl FbankConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_mels == 0 {
            return bad("n_mels must be >= 1".into());
        }
        if !(self.hop_ms > 0.0 && self.win_ms > self.hop_ms) {
            return bad(format!(
                "need win_ms > hop_ms > 0, got win {} hop {}",
                self.win_ms, self.hop_ms
            ));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= sample_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {}, got {}..{}",
                sample_rate as f64 / 2.0,
                self.fmin,
                self.fmax
            ));
        }
        if self.log_floor <= 0.0 {
            return bad("log_floor must be positive".into());
        }
        if self.fft_size < self.win_samples(sample_rate) {
            return bad(format!(
                "fft_size {} shorter than window {}",
                self.fft_size,
                self.win_samples(sample_rate)
            ));
        }
        Ok(())
    }

    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.win_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }
}

/// Frame count for non-padded framing.
pub fn num_frames(n_samples: usize, win: usize, hop: usize) -> usize {
    if n_samples < win {
        0
    } else {
        1 + (n_samples - win) / hop
    }
}

/// T x D row-major feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    n_frames: usize,
    dim: usize,
    pub frame_hop_ms: f64,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f32>, n_frames: usize, dim: usize) -> Result<Self> {
        if data.len() != n_frames * dim {
            return Err(Error::Shape(format!(
                "{} values for {n_frames}x{dim} features",
                data.len()
            )));
        }
        Ok(Self {
            data,
            n_frames,
            dim,
            frame_hop_ms: 10.0,
        })
    }

    pub fn zeros(n_frames: usize, dim: usize) -> Self {
        Self {
            data: vec![0.0; n_frames * dim],
            n_frames,
            dim,
            frame_hop_ms: 10.0,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn get(&self, t: usize, d: usize) -> f32 {
        self.data[t * self.dim + d]
    }

    /// Frames `[start, end)` as a new matrix.
    pub fn slice_frames(&self, start: usize, end: usize) -> FeatureMatrix {
        let end = end.min(self.n_frames);
        let start = start.min(end);
        FeatureMatrix {
            data: self.data[start * self.dim..end * self.dim].to_vec(),
            n_frames: end - start,
            dim: self.dim,
            frame_hop_ms: self.frame_hop_ms,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the `fft_size / 2 + 1` power-spectrum bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// n_mels x n_bins, row-major.
    pub weights: Vec<f64>,
    pub n_bins: usize,
    /// Center frequency of each band in Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let n_bins = fft_size / 2 + 1;
        let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let step = (mhi - mlo) / (n_mels + 1) as f64;
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mlo + step * i as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for b in 0..n_bins {
                let f = b as f64 * bin_hz;
                let up = (f - lo) / (c - lo);
                let down = (hi - f) / (hi - c);
                weights[m * n_bins + b] = up.min(down).max(0.0);
            }
        }
        Self {
            weights,
            n_bins,
            centers: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn n_mels(&self) -> usize {
        self.centers.len()
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// Precomputed window, filterbank and FFT plan for one configuration.
pub struct Fbank {
    cfg: FbankConfig,
    sample_rate: u32,
    win: usize,
    hop: usize,
    window: Vec<f64>,
    mel: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl Fbank {
    pub fn new(cfg: &FbankConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let win = cfg.win_samples(sample_rate);
        let hop = cfg.hop_samples(sample_rate);
        let window = (0..win)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win as f64 - 1.0)).cos()
            })
            .collect();
        let mel = MelFilterbank::new(cfg.n_mels, cfg.fft_size, sample_rate, cfg.fmin, cfg.fmax);
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            win,
            hop,
            window,
            mel,
            fft,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.mel
    }

    /// Log-mel energies without normalization.
    pub fn compute(&self, audio: &AudioBuffer) -> Result<FeatureMatrix> {
        if audio.sample_rate != self.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "audio at {} Hz, frontend built for {} Hz",
                audio.sample_rate, self.sample_rate
            )));
        }
        if audio.len() < self.win {
            return Err(Error::TooShort(format!(
                "{} samples, need at least one {}-sample window",
                audio.len(),
                self.win
            )));
        }
        let n_frames = num_frames(audio.len(), self.win, self.hop);
        let n_mels = self.cfg.n_mels;
        let floor = self.cfg.log_floor;
        let coef = self.cfg.preemphasis;
        let mut out = vec![0f32; n_frames * n_mels];
        let mut frame = vec![0f64; self.win];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut power = vec![0f64; self.mel.n_bins];
        for t in 0..n_frames {
            let src = &audio.samples[t * self.hop..t * self.hop + self.win];
            for (dst, &s) in frame.iter_mut().zip(src) {
                *dst = s as f64;
            }
            for i in (1..self.win).rev() {
                frame[i] -= coef * frame[i - 1];
            }
            frame[0] -= coef * frame[0];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < self.win {
                    Complex::new(frame[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = &mut out[t * n_mels..(t + 1) * n_mels];
            for (m, v) in row.iter_mut().enumerate() {
                let e: f64 = self
                    .mel
                    .filter(m)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                *v = e.max(floor).ln() as f32;
            }
        }
        FeatureMatrix::new(out, n_frames, n_mels).map(|mut f| {
            f.frame_hop_ms = self.cfg.hop_ms;
            f
        })
    }

    /// Log-mel energies followed by CMN when the config asks for it.
    pub fn extract(&self, audio: &AudioBuffer) -> Result<FeatureMatrix> {
        let feat = self.compute(audio)?;
        Ok(if self.cfg.cmn { apply_cmn(&feat) } else { feat })
    }
}

/// Pre-emphasis, Hamming window, power spectrum, mel filterbank, natural log.
pub fn compute_log_fbank(audio: &AudioBuffer, cfg: &FbankConfig) -> Result<FeatureMatrix> {
    Fbank::new(cfg, audio.sample_rate)?.compute(audio)
}

/// Subtracts the per-dimension mean over frames.
pub fn apply_cmn(feat: &FeatureMatrix) -> FeatureMatrix {
    let (t_len, dim) = (feat.n_frames(), feat.dim());
    let mut out = feat.clone();
    if t_len == 0 {
        return out;
    }
    let mut mean = vec![0f64; dim];
    for t in 0..t_len {
        for (m, &v) in mean.iter_mut().zip(feat.frame(t)) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= t_len as f64;
    }
    for t in 0..t_len {
        for (v, m) in out.frame_mut(t).iter_mut().zip(&mean) {
            *v = (*v as f64 - m) as f32;
        }
    }
    out
}
