//! Speaking-rate-controllable non-autoregressive TTS at desk scale.
//!
//! A FastSpeech-style encoder/decoder whose duration predictor can be
//! conditioned on a scalar speaking rate (seconds per token) through a
//! cross-attention block, plus the corpus, training, synthesis and
//! evaluation machinery around it:
//!
//! - [`corpus`]: utterance records, speaking-rate statistics, factor
//!   derivation, SR-based data selection (RS/TS/NS), synthetic corpus
//!   generation, manifest + mel file I/O.
//! - [`model`]: the transformer backbone with three duration-predictor
//!   variants (baseline, SRA-e, SRA-b), forward and backward passes,
//!   checkpoints.
//! - [`training`]: losses, Adam, the training loop, freeze presets
//!   (FT1-FT3) and fine-tuning from a baseline checkpoint.
//! - [`inference`]: pace and SRA rate control, Griffin-Lim vocoding,
//!   WAV output.
//! - [`evaluation`]: SR-error curves, pitch trends, token-duration
//!   linearity, CSV/JSON/SVG reports.
//! - [`cli`]: subcommands binding the modules into reproducible
//!   experiment pipelines.

pub mod cli;
pub mod corpus;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod training;
