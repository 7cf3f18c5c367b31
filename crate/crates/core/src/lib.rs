//! Cascaded block-wise training of early-exit networks.
//!
//! A [`QuickNet`] is a stack of blocks. Each block adds a backbone subnet, a
//! classifier exit and a commitment head that predicts whether the exit is
//! right. Blocks are trained one at a time, each on the samples the earlier
//! blocks have not yet learned, then frozen. At inference a sample leaves at
//! the first exit that is both confident and committed.

pub mod cost;
pub mod data;
pub mod error;
pub mod exit;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use cost::{layer_flops, CostLedger, ExitCosts};
pub use data::{load_idx, synth_blobs, synth_images, write_idx, Dataset};
pub use error::{Error, Result};
pub use exit::{confidence, decide_and_infer, evaluate, threshold_sweep, ExitDecision, ExitMode, SweepRow};
pub use layers::LayerSpec;
pub use model::{Architecture, BlockSpec, ExitOutput, QuickNet};
pub use numerics::{RandomStream, Tensor};
pub use trainer::{train_end_to_end, train_quicknet, CascadeObserver, Sampling, TrainConfig, TrainingPool};
