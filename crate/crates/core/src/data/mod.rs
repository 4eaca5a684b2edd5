//! Datasets: the synthetic ShapeTalk-lite corpus, JSONL corpus IO, and the
//! image codec.

pub mod image;
pub mod photochat;
pub mod shapetalk;

pub use image::{read_image, write_image, IMG_SIZE};
pub use photochat::{load_photochat, write_jsonl, LoadReport, SplitManifest};
pub use shapetalk::{
    class_color, class_count, class_shape, gen_shapetalk, render_scene, Color, Position,
    SceneSpec, Shape, ShapeTalkSample,
};
