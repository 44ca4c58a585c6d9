//! Architecture descriptors, parameter layout, and the image / text / shared encoders.

pub mod checkpoint;
mod forward;
mod spec;
mod store;

pub use forward::{
    embed_images, embed_texts, similarity_matrix, similarity_values, ForwardOptions, Gradients,
    ModelView, ParamGrad, Session, Temperature, TokenBatch, BOS, EOS, PAD,
};
pub use spec::{ArchSpec, GrowthFactor, MLP_RATIO};
pub use store::{
    build_model, init_tensor, param_count, param_layout, Init, ParamSpec, WeightStore,
    INIT_TEMPERATURE, MAX_TEMPERATURE,
};
