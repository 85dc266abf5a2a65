//! Deterministic reverse-process sampler.
//!
//! Runs the full denoiser at every timestep with zero injected noise so that
//! full and pruned traces are directly comparable. Timesteps execute from
//! t = T down to t = 1; "execution step" s = T - t + 1 is the 1-based index
//! used everywhere gates and features are keyed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::denoiser::{sinusoidal_time_embedding, DenoiserWeights, Producer, TIME_EMBED_DIM};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

/// Record of one sampler run.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub x_init: Vec<f64>,
    pub x_out: Vec<f64>,
    /// (execution step, block) -> block output, present only for executed blocks.
    pub per_step_features: Option<BTreeMap<(usize, usize), Vec<f64>>>,
    pub seed: u64,
}

/// Draws the initial noise for a seed. Shared by the sampler, the SubNet
/// executor and the trainer so that identical seeds mean identical x_T.
pub fn draw_initial_noise(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| rand::Rng::sample(&mut rng, rand_distr::StandardNormal))
        .collect()
}

/// One deterministic reverse update: consumes x_t and the predicted noise,
/// returns x_{t-1} (with alpha_bar(0) = 1 finishing at the clean sample).
pub fn reverse_update(x: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar_or_one(t - 1);
    let c_x = ab_prev.sqrt() / ab_t.sqrt();
    let c_eps = (1.0 - ab_prev).sqrt() - ab_prev.sqrt() * (1.0 - ab_t).sqrt() / ab_t.sqrt();
    x.iter()
        .zip(eps)
        .map(|(xi, ei)| c_x * xi + c_eps * ei)
        .collect()
}

/// Coefficients (c_x, c_eps) of [`reverse_update`], exposed for the tape path.
pub fn reverse_coeffs(t: usize, schedule: &NoiseSchedule) -> (f64, f64) {
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar_or_one(t - 1);
    let c_x = ab_prev.sqrt() / ab_t.sqrt();
    let c_eps = (1.0 - ab_prev).sqrt() - ab_prev.sqrt() * (1.0 - ab_t).sqrt() / ab_t.sqrt();
    (c_x, c_eps)
}

fn check_finite(v: &[f64], step: usize, block: usize) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { step, block });
    }
    Ok(())
}

/// Full inference from seeded noise down to the clean sample.
pub fn sample(
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    seed: u64,
    retain_features: bool,
) -> Result<SampleTrace> {
    let spec = &weights.spec;
    let dim = spec.data.len();
    let x_init = draw_initial_noise(dim, seed);
    let mut features = retain_features.then(BTreeMap::new);

    let mut x = x_init.clone();
    let t_max = schedule.t_max;
    for t in (1..=t_max).rev() {
        let step = t_max - t + 1;
        let temb = sinusoidal_time_embedding(t, TIME_EMBED_DIM);
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(spec.n_blocks());
        for b in 0..spec.n_blocks() {
            let inputs: Vec<&[f64]> = spec.blocks[b]
                .inputs
                .iter()
                .map(|p| match p {
                    Producer::StepInput => x.as_slice(),
                    Producer::Block(i) => outs[*i].as_slice(),
                })
                .collect();
            let out = weights.block_forward(b, &inputs, &temb);
            check_finite(&out, step, b)?;
            outs.push(out);
        }
        if let Some(f) = features.as_mut() {
            for (b, out) in outs.iter().enumerate() {
                f.insert((step, b), out.clone());
            }
        }
        let eps = &outs[spec.output_block()];
        x = reverse_update(&x, eps, t, schedule);
    }
    Ok(SampleTrace {
        x_init,
        x_out: x,
        per_step_features: features,
        seed,
    })
}
