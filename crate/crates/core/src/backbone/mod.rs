//! Joint noise-prediction backbone and its parameter machinery.

pub mod checkpoint;
pub mod embed;
pub mod layers;
pub mod model;
pub mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
pub use embed::FrozenTextEmbedding;
pub use model::{InitMode, JointNoisePredictor, ModelConfig, IMG_CHANNELS};
pub use params::{Grads, ParamId, ParamSet};
