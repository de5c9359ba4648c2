//! Masked diffusion language modeling at desk scale.
//!
//! A bidirectional transformer mask predictor is trained by corrupting text
//! with a random fraction of mask tokens and learning to recover them. The
//! crate covers the forward process and its loss estimators, exact enumeration
//! oracles for the likelihood bound, the family of reverse-process samplers,
//! likelihood-based multiple choice, training loops and benchmark harnesses.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod likelihood;
pub mod model;
pub mod predictor;
pub mod recipes;
pub mod rng;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
pub use model::{AttentionMode, Model, ModelConfig, ParameterSet};
pub use predictor::{MaskPredictor, Prediction, SpecialTokens};
