//! Dense tensors with a tape-style reverse-mode differentiation graph.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{ConvOptions, Gradients, Graph, Var};
pub use kernels::log_add_exp;
pub use tensor::Tensor;

pub(crate) use graph::argmax;

/// Output length of a strided, unpadded convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (len >= kernel && stride > 0).then(|| (len - kernel) / stride + 1)
}
