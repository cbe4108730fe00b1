//! Deterministic synthetic speech for tests and demos.
//!
//! Each speaker gets a voice (pitch, formant scaling, spectral tilt and a
//! fixed extra resonance) and speaks vowel-like syllables built from
//! harmonics shaped by Gaussian formant envelopes. The keyword is a fixed
//! syllable sequence with rising pitch shared by all speakers; filler
//! speech draws from a disjoint set of vowels and falls in pitch.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, ManifestEntry, UttLabel};
use crate::error::{Error, Result};
use crate::eval::{write_trials, Trial, TrialLabel};
use crate::features::{write_wav, AudioBuffer, SAMPLE_RATE};

/// First three formants (Hz) of the synthetic vowel inventory.
const VOWELS: [[f64; 3]; 8] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
    [440.0, 1020.0, 2240.0],
    [490.0, 1350.0, 1690.0],
];

pub const KEYWORD_VOWELS: [usize; 6] = [0, 1, 3, 2, 1, 0];
pub const FILLER_VOWELS: [usize; 4] = [4, 5, 6, 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub f0: f64,
    pub formant_scale: f64,
    /// Harmonic `k` is attenuated by `k^-tilt`.
    pub tilt: f64,
    pub resonance_hz: f64,
    pub resonance_gain: f64,
}

const F0_RANGE: (f64, f64) = (90.0, 260.0);
const FORMANT_SCALE_RANGE: (f64, f64) = (0.85, 1.2);
const TILT_RANGE: (f64, f64) = (0.4, 1.4);
const RESONANCE_HZ_RANGE: (f64, f64) = (2600.0, 4200.0);
const RESONANCE_GAIN_RANGE: (f64, f64) = (0.3, 0.9);

impl Voice {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut draw = |(lo, hi): (f64, f64)| rng.gen_range(lo..hi);
        Self {
            f0: draw(F0_RANGE),
            formant_scale: draw(FORMANT_SCALE_RANGE),
            tilt: draw(TILT_RANGE),
            resonance_hz: draw(RESONANCE_HZ_RANGE),
            resonance_gain: draw(RESONANCE_GAIN_RANGE),
        }
    }

    /// `n` voices from a Latin hypercube: every parameter range is split
    /// into `n` strata, each voice takes a different stratum per
    /// parameter and is drawn from the middle half of it, so no two
    /// voices share any parameter value closely.
    pub fn distinct(n: usize, rng: &mut impl Rng) -> Vec<Self> {
        let mut column = |(lo, hi): (f64, f64)| -> Vec<f64> {
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(rng);
            strata
                .into_iter()
                .map(|k| lo + (hi - lo) * (k as f64 + rng.gen_range(0.25..0.75)) / n as f64)
                .collect()
        };
        let f0 = column(F0_RANGE);
        let formant_scale = column(FORMANT_SCALE_RANGE);
        let tilt = column(TILT_RANGE);
        let resonance_hz = column(RESONANCE_HZ_RANGE);
        let resonance_gain = column(RESONANCE_GAIN_RANGE);
        (0..n)
            .map(|i| Self {
                f0: f0[i],
                formant_scale: formant_scale[i],
                tilt: tilt[i],
                resonance_hz: resonance_hz[i],
                resonance_gain: resonance_gain[i],
            })
            .collect()
    }

    fn harmonic_gain(&self, freq: f64, vowel: usize, k: usize) -> f64 {
        let formants = VOWELS[vowel];
        let mut g = 0.0;
        for (i, &f) in formants.iter().enumerate() {
            let centre = f * self.formant_scale;
            let bw = 80.0 + 40.0 * i as f64;
            g += [1.0, 0.7, 0.4][i] * (-(freq - centre).powi(2) / (2.0 * bw * bw)).exp();
        }
        g += self.resonance_gain * (-(freq - self.resonance_hz).powi(2) / (2.0 * 150.0f64.powi(2))).exp();
        g * (k as f64).powf(-self.tilt)
    }
}

/// Relative pitch change across a keyword syllable.
pub const KEYWORD_GLIDE: f64 = 0.3;
/// Relative pitch change across a filler syllable.
pub const FILLER_GLIDE: f64 = -0.08;

/// One syllable of `dur_s` seconds with a raised-cosine envelope; pitch
/// moves linearly by `glide` times its starting value.
fn syllable(voice: &Voice, vowel: usize, dur_s: f64, glide: f64, rng: &mut impl Rng) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let n = (dur_s * sr) as usize;
    let f0 = voice.f0 * rng.gen_range(0.95..1.05);
    let n_harm = ((7000.0 / (f0 * (1.0 + glide.max(0.0)))) as usize).max(1);
    let gains: Vec<f64> = (1..=n_harm)
        .map(|k| voice.harmonic_gain(k as f64 * f0, vowel, k))
        .collect();
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pos = i as f64 / n as f64;
        let f = f0 * (1.0 + glide * pos);
        phase += 2.0 * PI * f / sr;
        let env = 0.5 - 0.5 * (2.0 * PI * pos).cos();
        let v: f64 = gains
            .iter()
            .enumerate()
            .map(|(k, g)| g * ((k + 1) as f64 * phase).sin())
            .sum();
        out.push((env * v) as f32);
    }
    out
}

/// Syllables separated by short pauses, scaled to a 0.3 peak, over a
/// faint noise floor.
pub fn speak(voice: &Voice, vowels: &[usize], glide: f64, rng: &mut impl Rng) -> AudioBuffer {
    let gap = (0.03 * SAMPLE_RATE as f64) as usize;
    let mut samples = Vec::new();
    for &v in vowels {
        let dur = rng.gen_range(0.16..0.24);
        samples.extend(syllable(voice, v, dur, glide, rng));
        samples.extend(std::iter::repeat_n(0.0, gap));
    }
    let peak = samples.iter().fold(0f32, |a, &v| a.max(v.abs())).max(1e-9);
    for s in &mut samples {
        *s = *s * 0.3 / peak + rng.gen_range(-0.002..0.002);
    }
    AudioBuffer::new(samples, SAMPLE_RATE)
}

pub fn keyword(voice: &Voice, rng: &mut impl Rng) -> AudioBuffer {
    speak(voice, &KEYWORD_VOWELS, KEYWORD_GLIDE, rng)
}

pub fn filler(voice: &Voice, n_syllables: usize, rng: &mut impl Rng) -> AudioBuffer {
    let vowels: Vec<usize> = (0..n_syllables)
        .map(|_| *FILLER_VOWELS.choose(rng).expect("non-empty"))
        .collect();
    speak(voice, &vowels, FILLER_GLIDE, rng)
}

/// An utterance with the keyword at its end, as in the challenge layout.
/// Returns the audio and the keyword span in seconds.
pub fn positive_utterance(voice: &Voice, rng: &mut impl Rng) -> (AudioBuffer, f64, f64) {
    let n = rng.gen_range(1..=3);
    let lead = filler(voice, n, rng);
    let kw = keyword(voice, rng);
    let sr = SAMPLE_RATE as f64;
    let start = lead.len() as f64 / sr;
    let end = (lead.len() + kw.len()) as f64 / sr;
    let mut samples = lead.samples;
    samples.extend(kw.samples);
    (AudioBuffer::new(samples, SAMPLE_RATE), start, end)
}

pub fn negative_utterance(voice: &Voice, rng: &mut impl Rng) -> AudioBuffer {
    let n = rng.gen_range(3..=7);
    filler(voice, n, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub train_positive: usize,
    pub train_negative: usize,
    /// Keyword-only utterances per speaker for enrollment.
    pub enroll: usize,
    pub dev_positive: usize,
    pub dev_negative: usize,
    pub eval_positive: usize,
    pub eval_negative: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            train_positive: 8,
            train_negative: 8,
            enroll: 3,
            dev_positive: 3,
            dev_negative: 3,
            eval_positive: 3,
            eval_negative: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub entry: ManifestEntry,
    pub audio: AudioBuffer,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub voices: BTreeMap<String, Voice>,
    pub train: Vec<Utterance>,
    pub enroll: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub eval: Vec<Utterance>,
}

impl SyntheticCorpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        if cfg.n_speakers < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_speakers={} but at least 2 are needed",
                cfg.n_speakers
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut corpus = SyntheticCorpus {
            voices: BTreeMap::new(),
            train: Vec::new(),
            enroll: Vec::new(),
            dev: Vec::new(),
            eval: Vec::new(),
        };
        let voices = Voice::distinct(cfg.n_speakers, &mut rng);
        for (s, voice) in voices.into_iter().enumerate() {
            let spk = format!("spk{s:02}");
            let mut make = |split: &str, i: usize, positive: bool, kw_only: bool| {
                let utt_id = format!("{spk}_{split}_{}{i:02}", if positive { "p" } else { "n" });
                let (audio, span) = if kw_only {
                    let a = keyword(&voice, &mut rng);
                    let d = a.duration_s();
                    (a, Some((0.0, d)))
                } else if positive {
                    let (a, s, e) = positive_utterance(&voice, &mut rng);
                    (a, Some((s, e)))
                } else {
                    (negative_utterance(&voice, &mut rng), None)
                };
                Utterance {
                    entry: ManifestEntry {
                        wav_path: format!("wav/{utt_id}.wav").into(),
                        utt_id,
                        speaker_id: spk.clone(),
                        label: if positive { UttLabel::Positive } else { UttLabel::Negative },
                        keyword_start_s: span.map(|s| s.0),
                        keyword_end_s: span.map(|s| s.1),
                    },
                    audio,
                }
            };
            let mut batch = |split: &str, pos: usize, neg: usize, kw_only: bool| {
                let mut v: Vec<Utterance> = (0..pos).map(|i| make(split, i, true, kw_only)).collect();
                v.extend((0..neg).map(|i| make(split, i, false, false)));
                v
            };
            let train = batch("train", cfg.train_positive, cfg.train_negative, false);
            let enroll = batch("enroll", cfg.enroll, 0, true);
            let dev = batch("dev", cfg.dev_positive, cfg.dev_negative, false);
            let eval = batch("eval", cfg.eval_positive, cfg.eval_negative, false);
            corpus.train.extend(train);
            corpus.enroll.extend(enroll);
            corpus.dev.extend(dev);
            corpus.eval.extend(eval);
            corpus.voices.insert(spk, voice);
        }
        Ok(corpus)
    }

    pub fn speakers(&self) -> Vec<String> {
        self.voices.keys().cloned().collect()
    }

    /// Every enrolled speaker against every utterance of a test split.
    pub fn trials(&self, split: &[Utterance]) -> Vec<Trial> {
        let mut out = Vec::new();
        for spk in self.voices.keys() {
            for u in split {
                let target = u.entry.label == UttLabel::Positive && &u.entry.speaker_id == spk;
                let label = if target { TrialLabel::Target } else { TrialLabel::Nontarget };
                out.push(Trial::new(spk, &u.entry.utt_id, label));
            }
        }
        out
    }

    /// Writes `wav/`, `{train,enroll,dev,eval}.jsonl` and
    /// `{dev,eval}_trials.txt` under `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let wav_dir = dir.join("wav");
        std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
        for (name, split) in [
            ("train", &self.train),
            ("enroll", &self.enroll),
            ("dev", &self.dev),
            ("eval", &self.eval),
        ] {
            for u in split {
                write_wav(dir.join(&u.entry.wav_path), &u.audio)?;
            }
            let entries: Vec<ManifestEntry> = split.iter().map(|u| u.entry.clone()).collect();
            write_manifest(dir.join(format!("{name}.jsonl")), &entries)?;
        }
        for (name, split) in [("dev", &self.dev), ("eval", &self.eval)] {
            write_trials(dir.join(format!("{name}_trials.txt")), &self.trials(split))?;
        }
        Ok(())
    }
}
