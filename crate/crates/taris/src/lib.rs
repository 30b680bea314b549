//! Online speech recognition by learning to count words.
//!
//! The model encodes audio (and optionally video) with windowed-attention
//! transformer stacks, predicts a per-frame gating signal whose cumulative
//! sum estimates the number of word boundaries heard so far, and restricts
//! decoder-encoder attention to a dynamic window of gate-derived segments.
//! Because every representation depends on a bounded look-ahead, the decoder
//! can emit words while frames are still arriving.
//!
//! Crate layout:
//! - [`diff`]: a small deterministic reverse-mode autodiff engine over dense
//!   f64 arrays; everything trainable goes through it.
//! - [`mask`]: connectivity windows, word/segment indices, the validity mask,
//!   and the audio-video window mapping.
//! - [`transformer`]: stock encoder/decoder blocks parameterized by additive
//!   attention biases.
//! - [`model`]: model assembly — gating, fusion, losses, greedy decoding.
//! - [`streaming`]: the incremental inference engine with latency accounting.
//! - [`synth`]: a deterministic synthetic audio-visual corpus generator.
//! - [`metrics`], [`checkpoint`], [`train`], [`config`]: evaluation metrics,
//!   persistence, the training loop, and presets/CLI config plumbing.

pub mod alphabet;
pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod streaming;
pub mod synth;
pub mod train;
pub mod transformer;

pub use config::{Preset, TrainConfig};
pub use diff::{DiffArray, Gradients, NodeId, Tape};
pub use mask::{AttentionBias, ConnectivitySpec, Extent, GateTrace, SegmentSpec};
pub use model::{ModelConfig, TarisModel};
pub use streaming::{DecodeMode, LatencyReport, StreamEvent, StreamState};
pub use train::{evaluate, EvalMode, Trainer};

/// Crate-wide error type. The CLI maps variants to exit codes:
/// config errors exit 2, data errors 3, numerical errors 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Corpus/checkpoint format problems and I/O failures (with path context).
    #[error("data error: {0}")]
    Data(String),
    /// Shape mismatch between arrays.
    #[error("shape error: {0}")]
    Shape(String),
    /// NaN/Inf, empty attention rows, non-scalar losses and the like.
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Shape(_) | Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
