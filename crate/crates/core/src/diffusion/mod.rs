//! Toy conditional diffusion: schedule, MLP noise predictor, losses, samplers,
//! pretraining and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod pretrain;
pub mod sampler;
pub mod schedule;

pub use checkpoint::{Checkpoint, RngCounters};
pub use loss::{denoising_loss, denoising_loss_value, Example, LossGrad};
pub use model::{denoiser_forward, BaseSnapshot, DenoiserModel, ModelConfig, NoisePredictor, TokenInit};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};
pub use sampler::{respaced_timesteps, sample_batch, SamplerKind};
pub use schedule::{forward_noise, make_schedule, recover_noise, NoiseSchedule, ScheduleKind};
