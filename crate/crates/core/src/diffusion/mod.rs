//! Diffusion machinery: schedules, the joint training objective, AdamW,
//! and the two samplers.

pub mod adamw;
pub mod loss;
pub mod sample;
pub mod schedule;
pub mod train;

pub use adamw::{adamw_step, AdamWState, TrainConfig};
pub use loss::{joint_residual_loss, loss_joint, TrainSample};
pub use sample::{
    sample_ancestral, sample_dpm_solver, DpmOrder, GaussianOracle, ModelPredictor, NoisePredictor,
    SigmaMode,
};
pub use schedule::{forward_noise, make_schedule, NoiseSchedule, ScheduleConfig};
pub use train::{StepStats, Trainer};
