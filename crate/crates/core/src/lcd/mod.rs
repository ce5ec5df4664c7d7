//! Point-wise local diffusion for completing sparse scans.

mod chamfer;
mod denoiser;
mod sampler;
mod schedule;
mod train;

pub use chamfer::{chamfer, directed_chamfer};
pub use denoiser::{features, time_embedding, Condition, Denoiser, MlpDenoiser, OracleDenoiser, ZeroDenoiser, FEATURES};
pub use sampler::{reverse_from, reverse_sample, seed_points, visited_steps, SampleMode, SamplerConfig};
pub use schedule::{forward_perturb, perturb_with, standard_normal3, NoiseSchedule, DEFAULT_BETA0, DEFAULT_BETA_T, DEFAULT_T};
pub use train::{
    batch_loss, diffusion_loss, diffusion_loss_var, draw_batch, train_denoiser, DiffusionBatch, LcdTrainConfig,
    TrainingPair,
};
