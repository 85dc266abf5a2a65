//! Toy block-structured denoising diffusion model: noise schedule, denoiser
//! graph with per-block weights, deterministic sampler and training loop.

mod denoiser;
mod fit;
mod sampler;
mod schedule;

pub use denoiser::{
    sinusoidal_time_embedding, BlockKind, BlockSpec, BlockWeights, BoundBlock, DataShape,
    DenoiserSpec, DenoiserWeights, Producer, SharedWeights, TIME_EMBED_DIM,
};
pub use fit::{fit_toy_denoiser, shapes_dataset, FitConfig, FitLog};
pub use sampler::{draw_initial_noise, reverse_coeffs, reverse_update, sample, SampleTrace};
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule};
