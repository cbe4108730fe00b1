//! Trial scoring and the detection metrics: FAR/FRR, DET sweep, EER,
//! detection cost, its minimum over thresholds, threshold transfer and
//! real-time factors.
//!
//! A trial only reaches the speaker-verification stage when the keyword
//! detector fires. Unfired target trials are false rejections at every
//! threshold; unfired nontarget trials are correct rejections.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::detector::{detect, extract_segment, DetectorConfig};
use crate::error::{Error, Result};
use crate::features::{AudioBuffer, Fbank};
use crate::mdtc::MdtcModel;
use crate::sv::{cosine_score, EnrollmentProfile, SvModel};

/// Weight of the false-alarm rate in the detection cost.
pub const ALPHA: f64 = 19.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
        })
    }
}

impl FromStr for TrialLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::Nontarget),
            other => Err(Error::InvalidArgument(format!("unknown trial label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll_speaker: String,
    pub test_utt: String,
    pub label: TrialLabel,
}

impl Trial {
    pub fn new(enroll_speaker: &str, test_utt: &str, label: TrialLabel) -> Self {
        Self {
            enroll_speaker: enroll_speaker.to_string(),
            test_utt: test_utt.to_string(),
            label,
        }
    }

    pub fn is_target(&self) -> bool {
        self.label == TrialLabel::Target
    }
}

/// Parses whitespace-separated `enroll_speaker test_utt label` lines.
/// Blank lines and `#` comments are skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [spk, utt, label] = f[..] else {
            return Err(Error::Manifest {
                line: i + 1,
                detail: format!("expected 3 fields, got {}", f.len()),
            });
        };
        let label = label.parse().map_err(|e: Error| Error::Manifest {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(Trial::new(spk, utt, label));
    }
    Ok(out)
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    parse_trials(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_trials(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for t in trials {
        s.push_str(&format!("{} {} {}\n", t.enroll_speaker, t.test_utt, t.label));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// A trial after the two-stage pipeline. `sv_score` is present exactly
/// when the detector fired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub kws_fired: bool,
    pub sv_score: Option<f64>,
}

impl ScoredTrial {
    pub fn fired(trial: Trial, score: f64) -> Self {
        Self {
            trial,
            kws_fired: true,
            sv_score: Some(score),
        }
    }

    pub fn unfired(trial: Trial) -> Self {
        Self {
            trial,
            kws_fired: false,
            sv_score: None,
        }
    }

    /// Accepted at threshold `delta`: fired and scored at least `delta`.
    pub fn accepted(&self, delta: f64) -> bool {
        self.kws_fired && self.sv_score.is_some_and(|s| s >= delta)
    }
}

/// Writes `enroll_id test_utt score` lines; unfired trials carry `-`.
pub fn write_scores(path: impl AsRef<Path>, scored: &[ScoredTrial]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in scored {
        let score = s.sv_score.map_or_else(|| "-".to_string(), |v| format!("{v}"));
        writeln!(f, "{} {} {score}", s.trial.enroll_speaker, s.trial.test_utt)
            .map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Reads a score file and attaches labels from `trials` (matched on
/// speaker and utterance).
pub fn read_scores(path: impl AsRef<Path>, trials: &[Trial]) -> Result<Vec<ScoredTrial>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labels: BTreeMap<(&str, &str), TrialLabel> = trials
        .iter()
        .map(|t| ((t.enroll_speaker.as_str(), t.test_utt.as_str()), t.label))
        .collect();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Manifest { line: i + 1, detail };
        let [spk, utt, score] = f[..] else {
            return Err(bad(format!("expected 3 fields, got {}", f.len())));
        };
        let label = *labels
            .get(&(spk, utt))
            .ok_or_else(|| bad(format!("no trial for {spk} {utt}")))?;
        let trial = Trial::new(spk, utt, label);
        out.push(if score == "-" {
            ScoredTrial::unfired(trial)
        } else {
            let v: f64 = score.parse().map_err(|_| bad(format!("bad score {score:?}")))?;
            ScoredTrial::fired(trial, v)
        });
    }
    Ok(out)
}

fn class_counts(trials: &[ScoredTrial]) -> Result<(usize, usize)> {
    let targets = trials.iter().filter(|t| t.trial.is_target()).count();
    let nontargets = trials.len() - targets;
    if targets == 0 || nontargets == 0 {
        return Err(Error::Empty(format!(
            "need target and nontarget trials, got {targets} and {nontargets}"
        )));
    }
    Ok((targets, nontargets))
}

/// `(FAR, FRR)` at threshold `delta`.
pub fn far_frr(trials: &[ScoredTrial], delta: f64) -> Result<(f64, f64)> {
    let (nt, nn) = class_counts(trials)?;
    let fa = trials
        .iter()
        .filter(|t| !t.trial.is_target() && t.accepted(delta))
        .count();
    let fr = trials
        .iter()
        .filter(|t| t.trial.is_target() && !t.accepted(delta))
        .count();
    Ok((fa as f64 / nn as f64, fr as f64 / nt as f64))
}

pub fn detection_cost(frr: f64, far: f64, alpha: f64) -> f64 {
    frr + alpha * far
}

/// One row of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Sweep over `-inf`, every distinct score in increasing order, and
/// `+inf`. FAR is non-increasing and FRR non-decreasing along the table.
pub fn det_curve(trials: &[ScoredTrial]) -> Result<Vec<DetPoint>> {
    let (nt, nn) = class_counts(trials)?;
    // (score, is_target) of every fired trial, ascending
    let mut fired: Vec<(f64, bool)> = trials
        .iter()
        .filter_map(|t| t.sv_score.filter(|_| t.kws_fired).map(|s| (s, t.trial.is_target())))
        .collect();
    if let Some((s, _)) = fired.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {s}")));
    }
    fired.sort_by(|a, b| a.0.total_cmp(&b.0));
    let unfired_targets = trials
        .iter()
        .filter(|t| t.trial.is_target() && !t.kws_fired)
        .count();
    // below the threshold: rejected; at or above: accepted
    let mut rejected_targets = unfired_targets;
    let mut accepted_nontargets = fired.iter().filter(|(_, t)| !t).count();
    let point = |delta: f64, rt: usize, an: usize| DetPoint {
        threshold: delta,
        far: an as f64 / nn as f64,
        frr: rt as f64 / nt as f64,
    };
    let mut out = vec![point(f64::NEG_INFINITY, rejected_targets, accepted_nontargets)];
    let mut i = 0;
    while i < fired.len() {
        let delta = fired[i].0;
        out.push(point(delta, rejected_targets, accepted_nontargets));
        while i < fired.len() && fired[i].0 == delta {
            if fired[i].1 {
                rejected_targets += 1;
            } else {
                accepted_nontargets -= 1;
            }
            i += 1;
        }
    }
    out.push(point(f64::INFINITY, rejected_targets, accepted_nontargets));
    Ok(out)
}

/// Equal error rate from a sweep table: the smallest `max(FAR, FRR)` along
/// the piecewise-linear curve through the sweep points. Where the curves
/// cross this is the crossing value (interpolated between neighbouring
/// points when no sweep point lands on it); where they never cross it is
/// the closest approach.
pub fn eer_from_curve(curve: &[DetPoint]) -> f64 {
    let mut best = f64::INFINITY;
    for w in curve.windows(2) {
        let (a, b) = (w[0], w[1]);
        best = best.min(a.far.max(a.frr)).min(b.far.max(b.frr));
        let (da, db) = (a.far - a.frr, b.far - b.frr);
        if da > 0.0 && db < 0.0 {
            let t = da / (da - db);
            best = best.min(a.far + t * (b.far - a.far));
        }
    }
    if let [only] = curve {
        best = only.far.max(only.frr);
    }
    best
}

pub fn eer(trials: &[ScoredTrial]) -> Result<f64> {
    let distinct = {
        let mut s: Vec<f64> = trials.iter().filter_map(|t| t.sv_score).collect();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s.len()
    };
    if distinct < 2 {
        return Err(Error::InvalidArgument(format!(
            "equal error rate needs at least 2 distinct scores, got {distinct}"
        )));
    }
    Ok(eer_from_curve(&det_curve(trials)?))
}

/// Minimum detection cost over the sweep and the threshold achieving it
/// (the smallest such threshold on ties).
pub fn min_cd(trials: &[ScoredTrial]) -> Result<(f64, f64)> {
    let curve = det_curve(trials)?;
    Ok(min_cost_point(&curve, ALPHA))
}

fn min_cost_point(curve: &[DetPoint], alpha: f64) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in curve {
        let c = detection_cost(p.frr, p.far, alpha);
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub alpha: f64,
    pub table: Vec<CostRow>,
    pub min_cd: f64,
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    /// Absent when fewer than two distinct scores exist.
    pub eer: Option<f64>,
}

impl CostReport {
    pub fn new(trials: &[ScoredTrial], alpha: f64) -> Result<Self> {
        let curve = det_curve(trials)?;
        let (min_cd, threshold) = min_cost_point(&curve, alpha);
        let eer = eer(trials).ok();
        let table = curve
            .iter()
            .map(|p| CostRow {
                threshold: p.threshold,
                far: p.far,
                frr: p.frr,
                cost: detection_cost(p.frr, p.far, alpha),
            })
            .collect();
        Ok(Self {
            alpha,
            table,
            min_cd,
            threshold,
            eer,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Detection cost on `trials` at the threshold tuned on another set.
pub fn threshold_transfer(dev: &CostReport, trials: &[ScoredTrial]) -> Result<f64> {
    let (far, frr) = far_frr(trials, dev.threshold)?;
    Ok(detection_cost(frr, far, dev.alpha))
}

/// Writes the sweep as CSV with header `threshold,far,frr`.
pub fn write_det_csv(path: impl AsRef<Path>, curve: &[DetPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("threshold,far,frr\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_det_csv(path: impl AsRef<Path>) -> Result<Vec<DetPoint>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Manifest {
            line: i + 1,
            detail: format!("bad DET row {line:?}"),
        };
        let f: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [threshold, far, frr] = f[..] else {
            return Err(bad());
        };
        out.push(DetPoint { threshold, far, frr });
    }
    Ok(out)
}

/// Processing time divided by audio duration.
pub fn measure_rtf(processing_s: f64, audio_s: f64) -> Result<f64> {
    if !(audio_s > 0.0) || !(processing_s >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "real-time factor of {processing_s} s over {audio_s} s of audio"
        )));
    }
    Ok(processing_s / audio_s)
}

/// Speaker-verification time normalized by the whole evaluation set's
/// duration, not just the triggered segments.
pub fn sv_normalized_rtf(sv_processing_s: f64, total_audio_s: f64) -> Result<f64> {
    measure_rtf(sv_processing_s, total_audio_s)
}

/// Timing of the two-stage pipeline over a set of utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub utterances: usize,
    pub fired: usize,
    pub audio_s: f64,
    pub kws_s: f64,
    pub sv_s: f64,
    pub kws_rtf: f64,
    pub sv_normalized_rtf: f64,
}

/// One speaker-verification system and its enrolled speakers.
#[derive(Debug, Clone, Copy)]
pub struct SvSystem<'a> {
    pub model: &'a SvModel,
    pub profiles: &'a BTreeMap<String, EnrollmentProfile>,
}

/// Everything needed to score trials end to end.
#[derive(Clone)]
pub struct Scorer<'a> {
    pub fbank: &'a Fbank,
    pub kws: &'a MdtcModel,
    pub detector: &'a DetectorConfig,
    pub sv: Vec<SvSystem<'a>>,
    /// Segments shorter than this many samples are extended backwards.
    pub min_segment_samples: usize,
}

/// Per test utterance: whether the detector fired and, if so, the
/// triggered segment's embedding under each system.
#[derive(Debug, Clone)]
pub struct UttOutcome {
    pub fired: bool,
    pub embeddings: Vec<crate::sv::Embedding>,
}

impl Scorer<'_> {
    /// Runs the detector; when it fires, returns the triggered segment,
    /// extended backwards to the minimum length where possible.
    pub fn trigger(&self, audio: &AudioBuffer) -> Result<Option<AudioBuffer>> {
        let feat = self.fbank.extract(audio)?;
        let event = detect(&self.kws.forward(&feat)?, self.detector)?;
        if !event.fired {
            return Ok(None);
        }
        let hop = crate::features::HOP_SAMPLES;
        let end = event.end_frame;
        let min_frames = self.min_segment_samples.div_ceil(hop);
        let start = event.start_frame.min(end.saturating_sub(min_frames));
        extract_segment(audio, start, end).map(Some)
    }

    /// The segment's embedding under each system.
    pub fn embed_segment(&self, segment: &AudioBuffer) -> Result<Vec<crate::sv::Embedding>> {
        let feat = self.fbank.extract(segment)?;
        self.sv.iter().map(|s| s.model.embed_utterance(&feat)).collect()
    }

    pub fn process(&self, audio: &AudioBuffer) -> Result<UttOutcome> {
        Ok(match self.trigger(audio)? {
            None => UttOutcome {
                fired: false,
                embeddings: Vec::new(),
            },
            Some(segment) => UttOutcome {
                fired: true,
                embeddings: self.embed_segment(&segment)?,
            },
        })
    }

    /// Times both stages sequentially over `audio`. The SV stage runs
    /// only on triggered segments, yet its time is divided by the total
    /// duration like the detector's.
    pub fn measure_rtf<'b>(&self, audio: impl IntoIterator<Item = &'b AudioBuffer>) -> Result<RtfReport> {
        let (mut audio_s, mut kws_s, mut sv_s, mut utterances, mut fired) = (0.0, 0.0, 0.0, 0, 0);
        for a in audio {
            audio_s += a.duration_s();
            utterances += 1;
            let t = Instant::now();
            let segment = self.trigger(a)?;
            kws_s += t.elapsed().as_secs_f64();
            if let Some(seg) = segment {
                fired += 1;
                let t = Instant::now();
                self.embed_segment(&seg)?;
                sv_s += t.elapsed().as_secs_f64();
            }
        }
        Ok(RtfReport {
            utterances,
            fired,
            audio_s,
            kws_s,
            sv_s,
            kws_rtf: measure_rtf(kws_s, audio_s)?,
            sv_normalized_rtf: sv_normalized_rtf(sv_s, audio_s)?,
        })
    }

    /// Scores every trial; each test utterance is processed once. With two
    /// or more systems the scores are averaged.
    pub fn score_trials(
        &self,
        trials: &[Trial],
        audio: &BTreeMap<String, AudioBuffer>,
    ) -> Result<Vec<ScoredTrial>> {
        if self.sv.is_empty() {
            return Err(Error::InvalidArgument("no speaker-verification system".into()));
        }
        for t in trials {
            for s in &self.sv {
                if !s.profiles.contains_key(&t.enroll_speaker) {
                    return Err(Error::MissingProfile(t.enroll_speaker.clone()));
                }
            }
        }
        let mut utts: Vec<&str> = trials.iter().map(|t| t.test_utt.as_str()).collect();
        utts.sort_unstable();
        utts.dedup();
        let outcomes: BTreeMap<&str, UttOutcome> = utts
            .par_iter()
            .map(|&u| {
                let a = audio
                    .get(u)
                    .ok_or_else(|| Error::InvalidArgument(format!("no audio for utterance {u}")))?;
                Ok((u, self.process(a)?))
            })
            .collect::<Result<_>>()?;
        Ok(trials
            .iter()
            .map(|t| {
                let o = &outcomes[t.test_utt.as_str()];
                if !o.fired {
                    return ScoredTrial::unfired(t.clone());
                }
                let scores: Vec<f64> = self
                    .sv
                    .iter()
                    .zip(&o.embeddings)
                    .map(|(s, e)| cosine_score(&s.profiles[&t.enroll_speaker], e))
                    .collect();
                ScoredTrial::fired(t.clone(), fuse(&scores))
            })
            .collect())
    }
}

fn fuse(scores: &[f64]) -> f64 {
    match scores {
        [a, b] => crate::sv::fuse_scores(*a, *b),
        _ => scores.iter().sum::<f64>() / scores.len() as f64,
    }
}

/// Thresholds serialize as numbers, with the sweep sentinels as the
/// strings `"-inf"` and `"inf"` (JSON has no infinities).
mod threshold_serde {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else {
            Repr::Text(v.to_string()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}
