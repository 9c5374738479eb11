//! Position-aware encoder-decoder transformer for document-level
//! translation, with position probes, separator-based document pipeline,
//! BLEU metrics and a training loop.

pub mod attention;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod positional;
pub mod probing;
pub mod tensor;
pub mod training;

pub use attention::{AttentionFlags, AttentionParams, Mask};
pub use config::{KvText, RunConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{ModelConfig, Seq2SeqModel};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
