//! Losses, optimizer, training loop, metrics, gradient checks and the
//! ablation runner.

pub mod ablation;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod train;

pub use ablation::{ablation_csv, run_ablation, AblationResult};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, GradModule};
pub use loss::{loss_exemplar_variant, loss_l1, loss_l2, LossKind};
pub use metrics::{mae_rmse, EvalReport};
pub use optim::{AdamW, OptimizerState};
pub use train::{evaluate, predict_samples, train, LrSchedule, TrainConfig, TrainOutcome};
