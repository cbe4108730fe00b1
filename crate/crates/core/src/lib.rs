//! Personalized voice trigger toolkit.
//!
//! A multi-scale dilated temporal convolution (MDTC) keyword detector
//! produces a per-frame wake-word posterior; when it fires, the triggered
//! segment is passed to a speaker-verification network and scored against
//! the enrolled speaker. The crate covers the fbank frontend, both
//! networks with hand-written backward passes, training loops, streaming
//! inference, and the detection-cost evaluation used to pick thresholds.

// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod detector;
pub mod features;
pub mod kws_train;
pub mod mdtc;
pub mod nn;
pub mod pipeline;
pub mod sv;
pub mod synthetic;

pub use error::{Error, Result};

/// The guide's chapters, compiled and run as doc-tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/features.md")]
    struct Features;
    #[doc = include_str!("../../../book/src/mdtc.md")]
    struct Mdtc;
    #[doc = include_str!("../../../book/src/streaming.md")]
    struct Streaming;
    #[doc = include_str!("../../../book/src/training-data.md")]
    struct TrainingData;
    #[doc = include_str!("../../../book/src/detection.md")]
    struct Detection;
    #[doc = include_str!("../../../book/src/speaker-verification.md")]
    struct SpeakerVerification;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    struct Checkpoints;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
