//! Dense tensors with exact reverse-mode derivatives for the image-pipeline
//! kernels: convolution, bilinear rotation/crop, Gaussian blur, pooling,
//! ReLU and linear maps.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_components, grad_check_refined, grad_check_tape, tape_value_and_grad,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
