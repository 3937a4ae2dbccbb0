//! Noise schedules, forward/reverse kernels and the reverse-process driver.

mod inference;
mod process;
mod schedule;
mod steps;

pub use inference::{rollout, rollout_images, run_inference, InferenceOutput, PredictionSequenceSet, Trajectory};
pub use process::{estimate_x0, forward_sample, forward_with_alpha_bar, reverse_jump, reverse_step};
pub use schedule::{make_schedule, NoiseSchedule, ReverseTerm, ScheduleKind};
pub use steps::{part_bounds, StepSubsequence};
