//! Glue between manifests on disk and the training, enrollment and
//! scoring entry points.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{
    Composition,
    build_negative_cuts, compose, cut_targets, frame_targets, FrameTarget, keyword_segment, label_utterance, AugmentConfig,
    LabeledExample, ManifestEntry, UttLabel, Variant,
};
use crate::error::{Error, Result};
use crate::features::{read_wav, AudioBuffer, Fbank};
use crate::sv::{enroll, EnrollmentProfile, SvExample, SvModel};

pub type AudioMap = BTreeMap<String, AudioBuffer>;

/// Reads every entry's wav, keyed by utterance id.
pub fn load_audio(entries: &[ManifestEntry]) -> Result<AudioMap> {
    let loaded: Result<Vec<(String, AudioBuffer)>> = entries
        .par_iter()
        .map(|e| Ok((e.utt_id.clone(), read_wav(&e.wav_path)?)))
        .collect();
    let mut map = AudioMap::new();
    for (id, audio) in loaded? {
        if map.insert(id.clone(), audio).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate utt_id {id}")));
        }
    }
    Ok(map)
}

fn audio_for<'a>(audio: &'a AudioMap, e: &ManifestEntry) -> Result<&'a AudioBuffer> {
    audio
        .get(&e.utt_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no audio loaded for {}", e.utt_id)))
}

/// How many copies of a variant to make: the integer part of the weight
/// plus one more with probability equal to the fraction.
fn copies(weight: f64, rng: &mut impl Rng) -> usize {
    let whole = weight.floor();
    whole as usize + usize::from(rng.gen::<f64>() < weight - whole)
}

/// Frame-labelled KWS examples: every manifest utterance as is, plus for
/// each positive the keyword-only, prefixed and wrapped compositions and
/// the two halves of a wrapped composition cut at the keyword midpoint,
/// drawn according to `augment.variant_weights`. Fillers come from the
/// negative utterances. Cut halves are labelled by [`cut_targets`].
pub fn kws_examples(
    entries: &[ManifestEntry],
    audio: &AudioMap,
    fbank: &Fbank,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let fillers: Vec<AudioBuffer> = entries
        .iter()
        .filter(|e| e.label == UttLabel::Negative)
        .map(|e| audio_for(audio, e).cloned())
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A job is audio plus either a keyword span or explicit cut targets.
    enum Labels {
        Span(Option<std::ops::Range<usize>>),
        CutLeft(Composition),
        CutRight,
    }
    let mut jobs: Vec<(AudioBuffer, Labels)> = Vec::new();
    for e in entries {
        let a = audio_for(audio, e)?;
        let span = e.keyword_frames()?;
        jobs.push((a.clone(), Labels::Span(span)));
        if e.label != UttLabel::Positive {
            continue;
        }
        let kw = keyword_segment(e, a)?;
        let [w_only, w_pre, w_wrap, w_cut] = augment.variant_weights;
        for (variant, w) in [
            (Variant::KeywordOnly, w_only),
            (Variant::Prefixed, w_pre),
            (Variant::Wrapped, w_wrap),
        ] {
            for _ in 0..copies(w, &mut rng) {
                let c = compose(variant, &kw, &fillers, &mut rng)?;
                let span = c.keyword_frames();
                jobs.push((c.audio, Labels::Span(Some(span))));
            }
        }
        for _ in 0..copies(w_cut, &mut rng) {
            let c = compose(Variant::Wrapped, &kw, &fillers, &mut rng)?;
            let (left, right) = build_negative_cuts(&c)?;
            jobs.push((left, Labels::CutLeft(c)));
            jobs.push((right, Labels::CutRight));
        }
    }
    jobs.into_par_iter()
        .map(|(a, labels)| {
            let features = fbank.extract(&a)?;
            let n = features.n_frames();
            let targets: Vec<FrameTarget> = match labels {
                Labels::Span(span) => frame_targets(n, span)?,
                Labels::CutLeft(c) => cut_targets(&c, n, 0).0,
                Labels::CutRight => vec![FrameTarget::Background; n],
            };
            Ok(LabeledExample { features, targets })
        })
        .collect()
}

/// Labels manifest utterances without augmentation.
pub fn labeled_examples(entries: &[ManifestEntry], audio: &AudioMap, fbank: &Fbank) -> Result<Vec<LabeledExample>> {
    entries
        .par_iter()
        .map(|e| label_utterance(e, fbank.extract(audio_for(audio, e)?)?))
        .collect()
}

/// The audio an SV model should embed for an entry: the keyword segment
/// of a positive, the whole utterance otherwise.
pub fn sv_audio(e: &ManifestEntry, audio: &AudioBuffer) -> Result<AudioBuffer> {
    match e.label {
        UttLabel::Positive => keyword_segment(e, audio),
        UttLabel::Negative => Ok(audio.clone()),
    }
}

/// Speaker-labelled SV examples. Positives contribute the whole
/// utterance and the keyword segment; labels index the sorted speaker
/// list returned alongside.
pub fn sv_examples(
    entries: &[ManifestEntry],
    audio: &AudioMap,
    fbank: &Fbank,
) -> Result<(Vec<SvExample>, Vec<String>)> {
    let speakers: Vec<String> = entries
        .iter()
        .map(|e| e.speaker_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let per_entry: Vec<Vec<SvExample>> = entries
        .par_iter()
        .map(|e| {
            let a = audio_for(audio, e)?;
            let label = index[e.speaker_id.as_str()];
            let mut out = vec![SvExample {
                features: fbank.extract(a)?,
                label,
            }];
            if e.label == UttLabel::Positive {
                out.push(SvExample {
                    features: fbank.extract(&keyword_segment(e, a)?)?,
                    label,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((per_entry.into_iter().flatten().collect(), speakers))
}

/// One profile per speaker, averaging the embeddings of their
/// enrollment utterances.
pub fn enroll_speakers(
    model: &SvModel,
    fbank: &Fbank,
    entries: &[ManifestEntry],
    audio: &AudioMap,
) -> Result<BTreeMap<String, EnrollmentProfile>> {
    let embedded: Vec<(String, crate::sv::Embedding)> = entries
        .par_iter()
        .map(|e| {
            let a = sv_audio(e, audio_for(audio, e)?)?;
            Ok((e.speaker_id.clone(), model.embed_utterance(&fbank.extract(&a)?)?))
        })
        .collect::<Result<_>>()?;
    let mut by_speaker: BTreeMap<String, Vec<crate::sv::Embedding>> = BTreeMap::new();
    for (spk, emb) in embedded {
        by_speaker.entry(spk).or_default().push(emb);
    }
    by_speaker
        .into_iter()
        .map(|(spk, embs)| Ok((spk.clone(), enroll(&spk, &embs)?)))
        .collect()
}
