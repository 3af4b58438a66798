//! Dense tensor algebra with reverse-mode differentiation.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{
    central_difference, grad_check, max_relative_error, relative_error, GradCheckReport, REL_ERR_FLOOR,
};
pub use kernels::{gemm_nn, permute as permute_data};
pub use tape::{activate_scalar, Activation, Gradients, Tape, Var};
pub use tensor::{numel, Tensor};
