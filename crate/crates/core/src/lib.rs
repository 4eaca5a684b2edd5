//! Dialog-to-image diffusion at desk scale.
//!
//! The pipeline: multi-turn dialogs are concatenated into a single
//! conditioning string, tokenized against a word-level vocabulary and
//! embedded with a frozen table; a transformer predicts the noise jointly
//! added to the image and text branches; ancestral and log-SNR ODE
//! samplers generate images conditioned on clean text; a small trained
//! classifier backs Fréchet-distance and inception-score style metrics.

pub mod backbone;
pub mod data;
pub mod dialog;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
