//! Small differentiable-layer toolkit with hand-written backward passes.
//!
//! Layers expose a pure `forward(&self, ..)` for inference and a
//! `forward_train(&mut self, ..)` that caches what `backward` needs. Calling
//! `backward` without a cached forward is an error. Gradients accumulate into
//! each [`Param`] until [`zero_grads`] is called.

mod activation;
mod block;
mod checkpoint;
mod conv;
mod linear;
mod loss;
mod norm;
mod param;
mod rng;
mod tensor;

pub use activation::{global_average_pool, global_average_pool_backward, relu, sigmoid, softmax, Relu};
pub use block::DepthwiseSeparableBlock;
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use activation::softmax_f64;
pub(crate) use checkpoint::Reader;
pub use conv::{conv2d, Conv2d, DepthwiseConv2d};
pub use linear::Linear;
pub use loss::{binary_focal, cross_entropy_loss, smooth_l1_loss};
pub use norm::{normalize, InstanceNorm, NORM_EPS};
pub use param::{
    architecture_signature, has_any_grad, param_count, param_hash, scale_grads, sgd_step, sgd_update, zero_grads,
    Param, Parameterized,
};
pub(crate) use param::join;
pub use rng::Rng;
pub use tensor::Tensor;
