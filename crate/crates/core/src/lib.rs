//! MissFormer: an encoder-only transformer that reconstructs, filters and
//! predicts 2D trajectories from noisy inputs with explicitly flagged
//! missing observations.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with a dynamic reverse-mode tape
//! - [`trajgen`]: synthetic object and pedestrian trajectories
//! - [`corrupt`]: observation noise, missing tokens, offsets, tail masking
//! - [`model`]: embedding, positional encoding, encoder stack, output head
//! - [`training`]: MSE loss, AdamW and the task curriculum
//! - [`eval`]: ADE/FDE, the least-squares linear baseline, leave-one-out
//! - [`ingest`]: ETH/UCY style annotation files and fixed-length windows
//! - [`plot`]: SVG attention filters and trajectory overlays with sidecar dumps
//! - [`cli`]: the `missformer` command line

pub mod checkpoint;
pub mod cli;
pub mod corrupt;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod trajgen;

pub use corrupt::{CorruptionConfig, InputMode, ObservedSequence};
pub use error::{Error, Result};
pub use eval::{EvalReport, Predictor};
pub use model::{AttentionRecord, MissFormer, ModelConfig};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub use training::{Task, TrainConfig, TrainRun};
pub use trajgen::{GeneratorConfig, Point, Trajectory};
