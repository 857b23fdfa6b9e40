//! Model configuration and weight storage.

mod config;
mod weights;

pub use config::{
    model_config_from_kv, parse_kv_text, ModelConfig, STAGE1_CHANNELS, STAGE2_CHANNELS,
    STEM_CHANNELS,
};
pub use weights::{
    load_weights, parameter_count, required_tensors, Tensor, TensorSpec, WeightMetadata,
    WeightStore, BLOB_FILE, MANIFEST_FILE,
};
