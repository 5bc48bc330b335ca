//! Dense tensors, kernels and the reverse-mode tape everything else is built on.

mod conv;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use conv::{conv1d, conv1d_backward, ConvSpec, PaddingMode};
pub use gradcheck::{finite_diff_check, finite_diff_check_masked, param_finite_diff_check};
pub use kernels::{
    gelu, gelu_scalar, global_avg_pool, layer_norm, linear, sigmoid, sigmoid_scalar, snake,
    LAYER_NORM_EPS,
};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
