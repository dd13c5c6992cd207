//! Token embedding, transformer encoder and decoder, and prediction heads.

pub mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{HeadKind, ModelConfig};
pub use model::{
    param_count, param_specs, MaskSurfNet, PeKind, Stage, CLASSIFIER_PREFIX, ENCODER_PREFIXES, LAYER_NORM_EPS,
};
pub use params::{Binder, Init, ParamSpec, ParamStore};
