//! Dense float64 tensors, a reverse-mode tape, AdamW, and finite-difference
//! gradient checking.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, grad_check, rel_error, GradCheckReport, REL_ERROR_FLOOR};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{Binder, Grads, ParamId, ParamStore};
pub use tape::{AttentionMask, Tape, Var};
pub use tensor::{matmul_plain, Tensor};

