//! The training engine: per-step gradient bundle, weight and mask updates,
//! gradient balancing, optimizer and schedules, and the epoch loop for every
//! run mode.

mod balance;
mod config;
mod optim;
mod step;
mod trainer;

pub use balance::balance_mask_gradients;
pub use config::{
    BalanceConfig, BalanceReference, GradientToggles, NormScope, OptimizerConfig, PruneRunConfig, RunMode,
    ScheduleConfig,
};
pub use optim::{lr_schedule, sgd_momentum_step, OptimizerState};
pub use step::{
    apply_updates, compute_bundle, mask_update_gradient, prune_step, resource_penalty, theta_update_gradient,
    D1Graph, DecouplingAudit, GradientBundle, StepLosses, StepOutput,
};
pub use trainer::{
    check_feasible, evaluate, predict, run_experiment, train_supervised, Evaluation, ExperimentResult,
    TrajectoryRecord, Trainer,
};
