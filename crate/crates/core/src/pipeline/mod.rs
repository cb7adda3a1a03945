//! End-to-end orchestration: model assembly, streaming inference, training
//! and evaluation.

pub mod config;
pub mod model;

pub use config::ModelConfig;
pub use model::{FrameOutput, Model, Phase, StepStats, StreamState};
pub mod train;
pub mod infer;
pub mod eval;
pub mod suite;
