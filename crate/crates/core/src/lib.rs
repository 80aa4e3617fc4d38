//! Two-speaker dialogue feature synthesis via conditional flow matching.
//!
//! The library is organized around a frame-synchronous representation of
//! dialogue: a timed transcript is disentangled into two parallel token
//! streams (one per speaker), a flow-matching model learns to generate
//! per-frame feature vectors conditioned on those streams plus acoustic
//! prompts, and a deterministic, invertible token-to-feature oracle stands
//! in for real spectrograms so the whole pipeline can be verified
//! end-to-end on a CPU in minutes.
//!
//! Main pieces:
//!
//! - [`transcript`] / [`tokens`] / [`streams`]: timed transcripts, the token
//!   vocabulary, and the two-stream frame-aligned encoding (plus its inverse).
//! - [`prompt`]: prompt-candidate discovery, prompt-prefixed training
//!   examples, and the loss mask that keeps prompts out of the objective.
//! - [`flow`]: the flow-matching interpolation, masked L2 objective,
//!   classifier-free guidance, and the ODE sampler.
//! - [`model`]: a small time-conditioned transformer with paired-layer skip
//!   connections and exact manual reverse-mode gradients (f64).
//! - [`oracle`]: the synthetic codebook that maps token streams to feature
//!   sequences and decodes them back.
//! - [`sim`] / [`corpus`]: dialogue simulation with controlled overlap or
//!   silence, clip segmentation, and seeded corpus generation.
//! - [`train`]: Adam, the linear-decay schedule, and the two-stage
//!   curriculum training loop.
//! - [`eval`]: token error rate, speaker-attributed token error rate,
//!   speaker similarity, overlap fidelity, and real-time factor.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod flow;
pub mod model;
pub mod oracle;
pub mod prompt;
pub mod rng;
pub mod sim;
pub mod streams;
pub mod tokens;
pub mod train;
pub mod transcript;

pub use error::{Error, Result};
pub use features::FeatureSequence;
pub use tokens::{Token, TokenId, TokenScheme};
pub use transcript::{DialogueTranscript, FrameGrid, Speaker, TranscriptSegment};
