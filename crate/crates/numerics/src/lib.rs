//! Dense tensors with reverse-mode automatic differentiation, plus the
//! layers, optimizers, schedules and checkpoint container used to train the
//! radio encoders.

pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod opcheck;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NumericsError, Result};
pub use exec::Exec;
pub use init::Init;
pub use layers::{BatchNorm, Conv1d, GroupNorm, Linear, Mode, Norm, NormKind};
pub use optim::{lars_trust_ratio, lars_update, Optimizer, OptimizerConfig, OptimizerKind};
pub use param::{Module, Param, ParamId};
pub use scalar::Scalar;
pub use schedule::{ScheduleConfig, ScheduleKind};
pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;
