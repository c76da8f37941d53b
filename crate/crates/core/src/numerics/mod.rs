//! Dense differentiable kernels, parameter storage with Adam, finite-difference
//! verification, and the checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, ParamCheck};
pub use ops::{
    affine, affine_backward, elementwise, elementwise_backward, masked_softmax, sigmoid, softmax_backward,
    softmax_in_place, Activation, AdditiveMask, AffineGrad, MASKED,
};
pub use params::{AdamConfig, Gradients, ParamId, ParameterStore};
pub use tensor::{axpy, dot, Tensor};
