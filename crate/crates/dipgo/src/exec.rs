//! SubNet execution over the SuperNet.
//!
//! Hard mode skips removed blocks entirely: consumers of a removed block read
//! the block's most recently published output (the feature cache, initialized
//! by the mandatory first step and overwritten whenever the block executes).
//! A kept block therefore consumes its producer's fresh output exactly when
//! the producer is kept this step, and the cached backup otherwise.
//!
//! Soft mode runs on the autodiff tape for training and gradient checks:
//! every block computes, and its published output is blended between fresh
//! compute and cache by a per-node coefficient. With hard 0/1 coefficients it
//! reproduces hard routing; with free coefficients its gradient is exactly
//! what the straight-through estimator routes back to the scores.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::diffusion::{
    draw_initial_noise, reverse_coeffs, reverse_update, sinusoidal_time_embedding, BoundBlock,
    DenoiserWeights, NoiseSchedule, Producer, SampleTrace, TIME_EMBED_DIM,
};
use crate::error::{Error, Result};
use crate::graph::{GateVector, SuperNet};

/// Result of a hard SubNet execution.
#[derive(Debug, Clone)]
pub struct SubnetRun {
    pub trace: SampleTrace,
    /// MACs actually performed, counted at each block execution site.
    pub executed_macs: f64,
    pub total_macs: f64,
}

impl SubnetRun {
    pub fn keep_ratio(&self) -> f64 {
        self.executed_macs / self.total_macs
    }
}

fn check_compat(net: &SuperNet, weights: &DenoiserWeights, schedule: &NoiseSchedule) -> Result<()> {
    if weights.spec != net.spec {
        return Err(Error::Config(
            "denoiser weights and supernet were built from different specs".into(),
        ));
    }
    if schedule.t_max != net.t_steps {
        return Err(Error::Shape {
            expected: format!("{} timesteps", net.t_steps),
            got: format!("{}", schedule.t_max),
        });
    }
    Ok(())
}

/// Executes the SubNet selected by a legal gate.
pub fn run_subnet(
    net: &SuperNet,
    gate: &GateVector,
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    seed: u64,
    retain_features: bool,
) -> Result<SubnetRun> {
    check_compat(net, weights, schedule)?;
    net.validate_gate(gate)?;
    let spec = &net.spec;
    let n = spec.n_blocks();
    let dim = spec.data.len();
    let x_init = draw_initial_noise(dim, seed);
    let mut features = retain_features.then(BTreeMap::new);

    // Feature cache: last published output per block. The mandatory first
    // step fills every slot before any removal can occur.
    let mut published: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut executed_macs = 0.0;
    let mut x = x_init.clone();
    let t_max = schedule.t_max;
    for t in (1..=t_max).rev() {
        let step = t_max - t + 1;
        let temb = sinusoidal_time_embedding(t, TIME_EMBED_DIM);
        for b in 0..n {
            if gate.gate[net.node_of(step, b)] == 0 {
                continue;
            }
            let inputs: Vec<&[f64]> = spec.blocks[b]
                .inputs
                .iter()
                .map(|p| match p {
                    Producer::StepInput => x.as_slice(),
                    Producer::Block(i) => {
                        debug_assert!(
                            !published[*i].is_empty(),
                            "cache miss for block {i} at step {step}: first step is mandatory"
                        );
                        published[*i].as_slice()
                    }
                })
                .collect();
            let out = weights.block_forward(b, &inputs, &temb);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step, block: b });
            }
            executed_macs += spec.block_mac_count(b);
            if let Some(f) = features.as_mut() {
                f.insert((step, b), out.clone());
            }
            published[b] = out;
        }
        let eps = &published[spec.output_block()];
        x = reverse_update(&x, eps, t, schedule);
    }
    Ok(SubnetRun {
        trace: SampleTrace {
            x_init,
            x_out: x,
            per_step_features: features,
            seed,
        },
        executed_macs,
        total_macs: net.total_flops(),
    })
}

/// Per-node blend coefficients for soft execution: one tape variable per
/// (step, block) in step-major order. First-step entries are ignored (the
/// mandatory step always computes).
pub struct SoftBlends {
    pub vars: Vec<Var>,
}

/// Tape state carried across soft execution steps.
pub struct SoftState {
    pub x: Var,
    pub published: Vec<Var>,
}

/// Builds one execution step on a tape. `state` is `None` at the first step
/// (fresh cache, blends ignored); otherwise every block blends its fresh
/// output with its cache slot through the step's blend variable.
#[allow(clippy::too_many_arguments)]
pub fn build_soft_step(
    tape: &mut Tape,
    net: &SuperNet,
    weights: &DenoiserWeights,
    bound: &[BoundBlock],
    schedule: &NoiseSchedule,
    step: usize,
    x: Var,
    published_in: Option<&[Var]>,
    blends: Option<&[Var]>,
) -> SoftState {
    let spec = &net.spec;
    let n = spec.n_blocks();
    let t = schedule.t_max - step + 1;
    let temb = tape.constant(sinusoidal_time_embedding(t, TIME_EMBED_DIM));
    let mut published: Vec<Var> = Vec::with_capacity(n);
    for b in 0..n {
        let inputs: Vec<Var> = spec.blocks[b]
            .inputs
            .iter()
            .map(|p| match p {
                Producer::StepInput => x,
                Producer::Block(i) => published[*i],
            })
            .collect();
        let fresh = weights.block_forward_tape(tape, bound, b, &inputs, temb);
        let out = match published_in {
            None => fresh,
            Some(prev) => {
                // cache + blend * (fresh - cache)
                let cache = prev[b];
                let blend = blends.expect("blends required after the first step")[b];
                let delta = tape.sub(fresh, cache);
                let scaled = tape.scale_by(delta, blend);
                tape.add(cache, scaled)
            }
        };
        published.push(out);
    }
    let eps = published[spec.output_block()];
    let (c_x, c_eps) = reverse_coeffs(t, schedule);
    let x_next = tape.axpby(c_x, x, c_eps, eps);
    SoftState {
        x: x_next,
        published,
    }
}

/// Soft execution of the whole chain on one tape. Blend values are the hard
/// gate in straight-through training and the raw scores in gradient checks;
/// `free_mask` marks blends that receive gradients (false on mandatory or
/// cascade-forced nodes, which stay gradient-transparent).
pub struct SoftRun {
    pub tape: Tape,
    pub x0: Var,
    pub blend_vars: Vec<Var>,
}

pub fn run_subnet_soft(
    net: &SuperNet,
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    blend_values: &[f64],
    free_mask: &[bool],
    seed: u64,
) -> Result<SoftRun> {
    check_compat(net, weights, schedule)?;
    if blend_values.len() != net.node_count() || free_mask.len() != net.node_count() {
        return Err(Error::Shape {
            expected: format!("{}", net.node_count()),
            got: format!("{} / {}", blend_values.len(), free_mask.len()),
        });
    }
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let blend_vars: Vec<Var> = blend_values
        .iter()
        .zip(free_mask)
        .map(|(v, free)| tape.scalar_leaf(*v, *free))
        .collect();
    let x_init = draw_initial_noise(net.spec.data.len(), seed);
    let mut x = tape.constant(x_init);
    let mut published: Option<Vec<Var>> = None;
    for step in 1..=net.t_steps {
        let step_blends: Vec<Var> =
            blend_vars[(step - 1) * net.n_blocks..step * net.n_blocks].to_vec();
        let state = build_soft_step(
            &mut tape,
            net,
            weights,
            &bound,
            schedule,
            step,
            x,
            published.as_deref(),
            published.is_some().then_some(&step_blends),
        );
        x = state.x;
        published = Some(state.published);
    }
    Ok(SoftRun {
        tape,
        x0: x,
        blend_vars,
    })
}
