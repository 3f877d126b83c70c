//! Dense `f64` arrays, a reverse-mode tape over them, AdamW, and a
//! finite-difference gradient checker.

mod array;
mod gemm;
pub mod gradcheck;
pub mod nn;
pub mod optim;
mod param;
mod tape;

pub use array::{Array, BoolArray};
pub use gradcheck::{grad_check, grad_check_floored, grad_check_strided, relative_error, GradCheckReport};
pub use optim::{AdamWConfig, OptimizerState};
pub use param::{ParamId, ParamInit, ParamStore, Parameter};
pub use tape::{AttnSegment, Grads, Tape, Var};
pub mod suite;
