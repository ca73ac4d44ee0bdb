//! Dense double-precision tensors, a reverse-mode tape with hand-derived
//! backward rules, finite-difference checking and AdamW.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tape;
mod tensor;

pub use gradcheck::{check_gradient, check_param_gradient, GradCheckReport};
pub use ops::{gelu, layer_norm, masked_softmax_attention, matmul, AttentionMask, PairRotation};
pub use optim::AdamW;
pub use param::{normal_init, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
