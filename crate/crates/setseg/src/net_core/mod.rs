//! Differentiable compute kernel: tensors, a reverse-mode tape, parameter
//! storage, binary checkpoints, and a finite-difference gradient checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tape::{bce_logit_scalar, sigmoid_scalar, AttnMask, Gradients, Tape, ValueId};
pub use tensor::Tensor;
