//! Transfer of pretrained backbones to angle-of-arrival regression and
//! modulation classification.

pub mod head;
pub mod matrix;
pub mod metrics;
pub mod train;

pub use head::{attach_head, HeadConfig, Standardizer, Task, TaskHead, TaskModel, AOA_OUTPUT_SCALE};
pub use matrix::{run_matrix, CellResult, CellSpec, ComparisonSpec, MatrixContext, MatrixReport, MatrixSpec};
pub use metrics::{
    angular_mae, classification_metrics, improvement_pct, per_angle_errors, AngleError, EvalReport, MaeConvention,
};
pub use train::{
    default_encoder_lr_factor, evaluate, extract_features, head_outputs, input_batch, predict, report_from_outputs,
    train_head_on_features, train_task, FineTuneConfig, FineTuneMode, InitKind, ReportOptions, Targets, TrainCurves,
};
