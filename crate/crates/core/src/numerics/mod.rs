//! Dense tensors, reverse-mode gradients, Adam, and the checkpoint format.

pub mod checkpoint;
mod gemm;
mod param;
mod rng;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use param::{adam_step, Adam, ParamId, Parameter};
pub use rng::RandomStream;
pub use tape::{conv_extent, logistic, Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};
