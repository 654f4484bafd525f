//! Per-class grouped Gaussian models and the scores built on them.

mod gaussian;
mod io;
mod model;

pub use gaussian::{GroupGaussian, RidgePolicy};
pub use io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use model::{ClassModel, Decision, Embedding, HvcmModel, ModelConfig, SampleScore};
