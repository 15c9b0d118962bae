//! Tensor and reverse-mode differentiation core for small transformer
//! encoders: embeddings, linear maps, multi-head self-attention, layer
//! normalization, mean pooling and cross-entropy, in `f32` for training and
//! `f64` for gradient checking.

pub mod error;
pub mod graph;
pub mod layers;
pub mod linalg;
pub mod par;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Bags, Gradients, Graph, SeqLayout, Var};
pub use layers::{DropoutRng, Embedding, EncoderLayer, LayerNorm, Linear};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
