//! Diffusion schedule, forward and reverse chains, the diffusion filter and
//! a small noise-prediction trainer.

mod chain;
mod denoiser;
mod schedule;
mod train;

pub use chain::{denoise_step, diffuse, filter, filter_seeded, forward_diffuse};
pub use denoiser::{Denoiser, DenoiserArch, DenoiserHeader, DenoiserOutput, EpsDenoiser, EpsNetwork};
pub use schedule::{build_schedule, NoiseSchedule, RespacedSchedule, ScheduleKind, Timesteps};
pub use train::{train_denoiser, DenoiserTrainConfig, TrainReport};

pub(crate) use train::lr_at;
