//! Minimal reverse-mode tensor engine: a define-by-run [`Graph`] of dense tensors,
//! the layers needed by a spectrogram U-Net with cross-modal attention, an Adam
//! optimizer, a binary checkpoint format, and finite-difference gradient checks.

mod conv;
mod error;
mod float;
mod graph;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use float::Float;
pub use graph::{BatchStats, CustomOp, Gradients, Graph, Var};
pub use layers::{attention, BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Linear, MultiHeadAttention};
pub use optim::Adam;
pub use params::{kaiming_uniform, Bindings, Ctx, Param, ParamStore};
pub use tensor::Tensor;
