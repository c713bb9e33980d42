//! Reward-guided decoding for grounded image captioning.
//!
//! The engine drives an external caption generator through rounds of
//! sample, score and select. Each candidate continuation is scored by a
//! weighted mix of a hallucination reward (object precision) and a recall
//! reward (coverage of detected objects), and the best one is appended to
//! the response. The [`eval`] module measures the resulting precision and
//! recall over annotated corpora and sweeps the guidance weight, candidate
//! count and evaluation period.
//!
//! Candidate scoring inside a round and episodes inside a benchmark run on
//! rayon when the `parallel` feature is enabled (the default). Without it
//! every [`Execution`] mode runs sequentially.

pub mod backends;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod par;
pub mod rewards;
pub mod rng;
pub mod segmenter;

pub use config::{
    EngineConfig, GenerationParams, GuidanceConfig, HalNormalization, HalScope, SentencePeriod,
    VisualContext,
};
pub use decoder::{DecodeResult, Decoder, EpisodeTrace, Termination};
pub use error::{Error, Result};
pub use par::Execution;
pub use rng::SeedStream;
