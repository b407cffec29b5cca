//! Image report generation with a patch vision encoder, a query-Transformer
//! bridge, and a decoder-only language model adapted with soft prompts.

pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod image;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod qformer;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vision;
pub mod vocab;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use image::ImageTensor;
pub use model::{AblationSpec, CaptionModel, LmMode, ModelConfig};
pub use tensor::{Float, Tape, Tensor, Var};
