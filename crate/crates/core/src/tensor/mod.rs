//! Dense row-major tensors, a gradient tape, and the optimizer.

mod array;
pub mod ops;
pub mod optim;
mod params;
mod tape;

pub use array::{Scalar, ShapeError, Tensor};
pub use optim::{lr_at_step, AdamW, AdamWConfig, OptimState, ScheduleError};
pub use params::{Gradients, Param, ParamGroup, ParamId, ParamStore};
pub use tape::{sigmoid, Dropout, Tape, Var};
