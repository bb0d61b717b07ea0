//! Dense NCHW tensors with an eager reverse-mode tape, the kernels the
//! network needs, parameters and the SGD optimizer.

mod graph;
mod kernels;
mod optim;
mod param;
mod tensor;

pub mod gradcheck;

pub use graph::{Activation, GatherTaps, Graph, NormStats, StatUpdate, Var, NORM_EPS};
pub use kernels::{bilinear_taps, conv2d_shape, ConvSpec, ResizeAxis};
pub use optim::{Sgd, SgdConfig};
pub use param::{Buffer, BufferId, Builder, Init, Param, ParamId, ParamStore};
pub use tensor::{DType, Real, Shape, Tensor};

/// Plain (non-differentiated) kernels, for oracles and inference helpers.
pub mod eval {
    pub use super::kernels::{conv2d_forward, resize_forward, softmax_channels};
}
