//! Differentiable block pruning for unrolled diffusion samplers.
//!
//! The crate builds a SuperNet over every (timestep, block) pair of a small
//! denoising diffusion model, trains a plugin pruner network that scores each
//! block with straight-through gates, and extracts pruned SubNets that meet a
//! target flops-pruning ratio via bisection thresholding. Random, genetic and
//! static interval-caching baselines plus an evaluation toolkit round out the
//! laboratory.
//!
//! Module map:
//! - [`diffusion`]: noise schedule, toy block-structured denoiser, sampler, fit
//! - [`graph`]: SuperNet construction, gate legality, flops profiles
//! - [`exec`]: SubNet execution with a feature cache (hard and soft-blended)
//! - [`pruner`]: learnable queries, query encoder, prediction head, ST gates
//! - [`loss`]: SSIM/L1/L2 consistency, flops-weighted sparse loss, phase latch
//! - [`train`]: few-step gradient optimization with gradient checkpointing
//! - [`post`]: bisection thresholding to a requested pruning ratio
//! - [`baselines`]: random search, genetic search, interval caching gate
//! - [`toolkit`]: MACs reports, similarity matrices, heatmaps, run directories
//! - [`artifact`]: gate/score JSON artifacts and the weight archive format
//! - [`autodiff`]: the tape-based reverse-mode engine backing training

pub mod artifact;
pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod diffusion;
pub mod exec;
pub mod graph;
pub mod loss;
pub mod post;
pub mod pruner;
pub mod toolkit;
pub mod train;
pub mod error;

pub use error::{Error, Result};
