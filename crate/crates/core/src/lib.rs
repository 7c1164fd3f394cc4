//! Exemplar-free class-agnostic counting.
//!
//! A pseudo-Siamese pair of convolutional branches feeds a pseudo exemplar
//! simulator and a dual-attention self-similarity block; a location-aware
//! counter regresses the object count from the resulting similarity map.
//! Training uses image-level counts only.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod counter;
pub mod data;
pub mod dass;
pub mod error;
pub mod exemplar_sim;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train_eval;
pub mod viz;

pub use config::{AblationFlags, ModelConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{AblationRow, Model};
pub use params::{Mode, ParamStore, Session};
pub use tensor::Tensor;
