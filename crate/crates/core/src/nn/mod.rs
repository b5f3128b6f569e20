//! Minimal tensor engine: dense `f64` tensors, 1-D (transposed) convolutions,
//! and a reverse-mode tape covering the operations the autoencoder uses.

pub mod conv;
pub mod tape;
pub mod tensor;

pub use conv::{
    bce, conv1d, sigmoid, sigmoid_scalar, transposed_conv1d, Activation, LayerKind, ParamLayer,
    BCE_EPS,
};
pub use tape::{off_diagonal_l1, Gradients, Tape, Var};
pub use tensor::{concat_channels, stack_batch, Tensor};
