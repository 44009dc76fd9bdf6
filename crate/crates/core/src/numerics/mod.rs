//! Dense tensors, parameter storage and reverse-mode differentiation.

pub mod gradcheck;
pub mod ops;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tape::{AttnSpec, SeqLayout, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{expand_gamma, log_softmax_probs, scan_forward, similarity_logits};
