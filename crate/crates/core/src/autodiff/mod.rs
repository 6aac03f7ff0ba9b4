//! Small reverse-mode differentiation engine with exactly the ops the
//! detector needs.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{sgd_momentum_step, SgdConfig, StepStats};
pub use param::{ParamId, ParamStore, Parameter, StageTag};
pub use tape::{Gradients, OpKind, RoiRef, Tape, Var};
pub use tensor::{Real, Tensor};
