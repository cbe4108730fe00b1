//! Trigger decisions on posterior tracks, keyword location and segment
//! extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{AudioBuffer, HOP_SAMPLES};
use crate::mdtc::PosteriorTrack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub gamma: f64,
    /// Trailing moving-average length in frames; 1 disables smoothing.
    pub smoothing_window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            smoothing_window: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma={} outside (0, 1)",
                self.gamma
            )));
        }
        if self.smoothing_window == 0 {
            return Err(Error::InvalidConfig("smoothing_window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of scanning one utterance. `end_frame` is exclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub fired: bool,
    pub fire_frame: Option<usize>,
    pub middle_frame: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    pub peak_posterior: f32,
}

/// Trailing moving average; frame `t` averages frames `t+1-w ..= t`
/// that exist.
pub fn smooth_posteriors(track: &[f32], window: usize) -> Vec<f32> {
    if window <= 1 {
        return track.to_vec();
    }
    let mut out = Vec::with_capacity(track.len());
    let mut sum = 0.0f64;
    for t in 0..track.len() {
        sum += track[t] as f64;
        if t >= window {
            sum -= track[t - window] as f64;
        }
        out.push((sum / (t + 1).min(window) as f64) as f32);
    }
    out
}

/// Earliest index of the maximum.
fn argmax(track: &[f32]) -> usize {
    let mut best = 0;
    for (t, &v) in track.iter().enumerate() {
        if v > track[best] {
            best = t;
        }
    }
    best
}

/// `(start, middle)`: middle is the peak frame and start mirrors
/// `end_frame` around it.
pub fn estimate_location(track: &[f32], end_frame: usize) -> (usize, usize) {
    let middle = argmax(track);
    let start = (2 * middle).saturating_sub(end_frame);
    (start, middle)
}

/// Scans a posterior track with the keyword assumed to end at the
/// utterance end.
pub fn detect(track: &PosteriorTrack, cfg: &DetectorConfig) -> Result<TriggerEvent> {
    if track.is_empty() {
        return Err(Error::Empty("posterior track".into()));
    }
    let y = smooth_posteriors(&track.posteriors, cfg.smoothing_window);
    let fire_frame = y.iter().position(|&v| v as f64 >= cfg.gamma);
    let end_frame = y.len();
    let (start_frame, middle_frame) = estimate_location(&y, end_frame);
    Ok(TriggerEvent {
        fired: fire_frame.is_some(),
        fire_frame,
        middle_frame,
        start_frame,
        end_frame,
        peak_posterior: y[middle_frame],
    })
}

/// Samples `[start * 160, min(end * 160, len))`.
pub fn extract_segment(audio: &AudioBuffer, start_frame: usize, end_frame: usize) -> Result<AudioBuffer> {
    let a = (start_frame * HOP_SAMPLES).min(audio.len());
    let b = (end_frame * HOP_SAMPLES).min(audio.len());
    if a >= b {
        return Err(Error::Empty(format!(
            "segment frames {start_frame}..{end_frame} of a {}-sample buffer",
            audio.len()
        )));
    }
    Ok(AudioBuffer::new(audio.samples[a..b].to_vec(), audio.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(v: Vec<f32>) -> PosteriorTrack {
        PosteriorTrack { posteriors: v }
    }

    #[test]
    fn quiet_track_does_not_fire() {
        let e = detect(&track(vec![0.005; 50]), &DetectorConfig::default()).unwrap();
        assert!(!e.fired);
        assert_eq!(e.fire_frame, None);
        assert_eq!(e.peak_posterior, 0.005);
        assert_eq!(DetectorConfig::default().gamma, 0.01);
    }

    #[test]
    fn first_crossing_is_fire_frame() {
        let mut v = vec![0.001; 100];
        v[37] = 0.02;
        v[60] = 0.9;
        let e = detect(&track(v), &DetectorConfig::default()).unwrap();
        assert_eq!(e.fire_frame, Some(37));
        assert_eq!(e.middle_frame, 60);
        assert_eq!(e.end_frame, 100);
        assert_eq!(e.start_frame, 20);
        assert!(detect(&track(vec![]), &DetectorConfig::default()).is_err());
    }

    #[test]
    fn location_rules() {
        let mut v = vec![0.1; 500];
        v[450] = 0.9;
        assert_eq!(estimate_location(&v, 500), (400, 450));
        assert_eq!(estimate_location(&[0.3; 20], 500), (0, 0));
        let mut v = vec![0.1; 500];
        v[10] = 0.9;
        assert_eq!(estimate_location(&v, 500), (0, 10));
    }

    #[test]
    fn segment_extraction() {
        let audio = AudioBuffer::new((0..100_000).map(|i| i as f32).collect(), 16000);
        let s = extract_segment(&audio, 400, 500).unwrap();
        assert_eq!(s.samples.first(), Some(&64000.0));
        assert_eq!(s.len(), 16000);
        assert_eq!(extract_segment(&audio, 0, 10_000).unwrap(), audio);
        assert!(extract_segment(&audio, 30, 30).is_err());
    }

    #[test]
    fn unit_window_smoothing_is_identity() {
        let v = vec![0.1, 0.5, 0.2];
        assert_eq!(smooth_posteriors(&v, 1), v);
        let s = smooth_posteriors(&v, 2);
        assert!((s[0] - 0.1).abs() < 1e-7 && (s[1] - 0.3).abs() < 1e-7 && (s[2] - 0.35).abs() < 1e-7);
    }
}
