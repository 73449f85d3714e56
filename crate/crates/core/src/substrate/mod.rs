//! Tensors, differentiable operations, random streams and the optimizer.

mod adam;
mod cells;
mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use adam::{adam_update, exp_decay_lr, AdamConfig, AdamState};
pub use cells::{convlstm_step, lstm_step, ConvLstmWeights, LstmWeights};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{conv2d, dropout, layer_norm, transposed_conv2d, ConvGeometry, Padding};
pub use params::{ParamEntry, ParamId, ParamSet};
pub use rng::RngStream;
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
