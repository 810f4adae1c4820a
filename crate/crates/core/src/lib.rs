//! Desk-scale decoder-only transformer with grouped-query attention, rotary
//! embeddings, SwiGLU, sliding-window KV caching, 4/5-bit block quantization,
//! and a three-stage training pipeline (pretraining, supervised fine-tuning,
//! direct preference optimization).

pub mod bench;
pub mod corpus;
pub mod error;
pub mod kvcache;
pub mod layers;
pub mod model;
pub mod persist;
pub mod quant;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use kvcache::KVCache;
pub use model::{init_model, param_count, Model, ModelConfig, SamplingMode};
pub use persist::{load_checkpoint, save_checkpoint, AnyModel};
pub use quant::{QFormat, QModel, QTensor};
pub use tensor::{Rng, Tensor, Width};
