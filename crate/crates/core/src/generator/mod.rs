//! Feature-to-image generator with row masking and condition fill-in.

mod checkpoint;
mod config;
mod loss;
mod mask;
mod model;
pub mod toy;
mod train;

pub use checkpoint::{decode_model, encode_model, load_model, save_model, Section, LORA_TAG, MODEL_MAGIC, MODEL_VERSION};
pub use config::{GeneratorConfig, ImageShape, DECODER_STAGES};
pub use loss::{loss_graph, losses, LossTerms, LossWeights, PerceptualBank, PerceptualConfig};
pub use mask::{sample_mask_ratio, MaskConfig, RowMask};
pub use model::{Condition, GeneratorModel, MixAdapter};
pub use train::{evaluate, train, write_trace_csv, LossRecord, TrainConfig, TrainingPair};
#[allow(unused_imports)]
pub(crate) use train::{draw_batch, fan_out, mean_terms, BatchOutput, Draw};
