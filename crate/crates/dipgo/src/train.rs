//! Few-step gradient optimization of the pruner over the unrolled sampler.
//!
//! Every step draws a fresh condition seed, runs full inference for the
//! reference output, runs the soft-blended SubNet with the hard gate as blend
//! values, and backpropagates the total loss. Gradients reach the scores
//! through the straight-through identity (forced assignments pass nothing)
//! and continue through the pruner network; only pruner weights update.
//!
//! The unrolled backward can retain activations for every timestep at once
//! (`Off`), per-timestep segments, or per-block segments. Segmented modes
//! save boundary states during a value-only forward sweep and rebuild one
//! segment tape at a time in reverse, trading recomputation for memory; a
//! [`MemoryMeter`] counts retained values either way.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{MemoryMeter, Tape, Var};
use crate::diffusion::{
    draw_initial_noise, reverse_coeffs, sample, sinusoidal_time_embedding, DenoiserWeights,
    NoiseSchedule, Producer, SharedWeights, TIME_EMBED_DIM,
};
use crate::error::{Error, Result};
use crate::exec::build_soft_step;
use crate::graph::{FlopsProfile, SuperNet};
use crate::loss::{consistency_tape, sparse_loss, sparse_tape, LossConfig, PhaseState, SparseMode};
use crate::pruner::{pruner_forward, st_gate, PrunerWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointGranularity {
    Off,
    PerTimestep,
    PerBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    Full,
    Half,
}

/// Stream of per-step condition seeds (the toy stand-in for prompt inputs),
/// drawn without replacement for one epoch and cycled afterwards.
#[derive(Debug, Clone)]
pub struct ConditionSource {
    seeds: Vec<u64>,
}

impl ConditionSource {
    pub fn new(master_seed: u64, count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed ^ 0xc0de_5eed_0001);
        Self {
            seeds: (0..count.max(1)).map(|_| rng.gen()).collect(),
        }
    }

    pub fn seed_for(&self, draw: usize) -> u64 {
        self.seeds[draw % self.seeds.len()]
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Gradient accumulation count per optimizer step.
    pub batch_size: usize,
    pub checkpoint: CheckpointGranularity,
    pub precision: Precision,
    /// Retained-activation budget for the non-checkpointed backward.
    pub memory_limit_elems: Option<usize>,
    pub master_seed: u64,
    /// Size of the condition pool (one epoch of fresh seeds).
    pub condition_count: usize,
    /// Snapshot cadence for the checkpoint callback.
    pub snapshot_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.1,
            weight_decay: 1e-4,
            batch_size: 1,
            checkpoint: CheckpointGranularity::PerTimestep,
            precision: Precision::Full,
            memory_limit_elems: None,
            master_seed: 0,
            condition_count: 1000,
            snapshot_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 && self.snapshot_every == Some(0) {
            return Err(Error::Config("snapshot_every must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if matches!(self.precision, Precision::Half) {
            return Err(Error::Unsupported(
                "half-precision training is not available in this build; use full".into(),
            ));
        }
        Ok(())
    }

    /// Cosine decay from `lr` to zero over the configured steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return self.lr;
        }
        let frac = step as f64 / self.steps as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub consistency_loss: f64,
    pub sparse_loss_value: f64,
    pub keep_ratio_flops: f64,
    /// "joint" while the sparse term is active, "consistency-only" after.
    pub phase: String,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: PrunerWeights,
    pub log: Vec<TrainLogRow>,
    pub phase: PhaseState,
    /// Peak retained activation count across the run (sampler side).
    pub peak_retained: usize,
}

/// Boundary snapshot between unrolled segments.
struct Boundary {
    x: Vec<f64>,
    published: Vec<Vec<f64>>,
}

impl Boundary {
    fn elems(&self) -> usize {
        self.x.len() + self.published.iter().map(Vec::len).sum::<usize>()
    }
}

struct SoftPassResult {
    total: f64,
    consistency: f64,
    d_blends: Vec<f64>,
}

struct SoftPassCtx<'a> {
    net: &'a SuperNet,
    denoiser: &'a DenoiserWeights,
    shared: &'a SharedWeights,
    schedule: &'a NoiseSchedule,
    profile: &'a FlopsProfile,
    loss_cfg: &'a LossConfig,
    meter: Rc<MemoryMeter>,
}

impl<'a> SoftPassCtx<'a> {
    /// Loss-head tape: consistency against the reference plus the sparse term
    /// when active. Returns (tape, x0 leaf, blend leaves, total node).
    fn build_loss_head(
        &self,
        x0_vals: &[f64],
        x0_grad: bool,
        blends: &[f64],
        free: &[bool],
        x0_gt: &[f64],
        sparse_active: bool,
    ) -> Result<(Tape, Var, Vec<Var>, Var)> {
        let mut tape = Tape::with_meter(self.meter.clone());
        let x0 = tape.leaf(x0_vals.to_vec(), x0_grad);
        let blend_vars: Vec<Var> = blends
            .iter()
            .zip(free)
            .map(|(v, f)| tape.scalar_leaf(*v, *f))
            .collect();
        let lc = consistency_tape(
            &mut tape,
            x0,
            x0_gt,
            self.loss_cfg.consistency,
            &self.net.spec.data,
        )?;
        let total = if sparse_active {
            let ls = sparse_tape(
                &mut tape,
                &blend_vars,
                self.profile,
                self.loss_cfg.sparse_normalization,
            );
            tape.lin_comb(vec![lc, ls], vec![1.0, self.loss_cfg.alpha_s])
        } else {
            lc
        };
        Ok((tape, x0, blend_vars, total))
    }

    /// Non-checkpointed pass: one tape for the whole unrolled chain and loss.
    fn pass_monolithic(
        &self,
        blends: &[f64],
        free: &[bool],
        seed: u64,
        x0_gt: &[f64],
        sparse_active: bool,
        memory_limit: Option<usize>,
    ) -> Result<SoftPassResult> {
        let net = self.net;
        let mut tape = Tape::with_meter(self.meter.clone());
        let bound = self.shared.bind(&mut tape);
        let blend_vars: Vec<Var> = blends
            .iter()
            .zip(free)
            .map(|(v, f)| tape.scalar_leaf(*v, *f))
            .collect();
        let x_init = draw_initial_noise(net.spec.data.len(), seed);
        let mut x = tape.constant(x_init);
        let mut published: Option<Vec<Var>> = None;
        for step in 1..=net.t_steps {
            let step_blends =
                blend_vars[(step - 1) * net.n_blocks..step * net.n_blocks].to_vec();
            let state = build_soft_step(
                &mut tape,
                net,
                self.denoiser,
                &bound,
                self.schedule,
                step,
                x,
                published.as_deref(),
                published.is_some().then_some(&step_blends),
            );
            x = state.x;
            published = Some(state.published);
        }
        let x0_vals = tape.value(x).to_vec();
        let lc = consistency_tape(
            &mut tape,
            x,
            x0_gt,
            self.loss_cfg.consistency,
            &net.spec.data,
        )?;
        let total = if sparse_active {
            let ls = sparse_tape(
                &mut tape,
                &blend_vars,
                self.profile,
                self.loss_cfg.sparse_normalization,
            );
            tape.lin_comb(vec![lc, ls], vec![1.0, self.loss_cfg.alpha_s])
        } else {
            lc
        };
        if let Some(limit) = memory_limit {
            let used = self.meter.live();
            if used > limit {
                return Err(Error::MemoryBudget { used, limit });
            }
        }
        let total_val = tape.scalar_value(total);
        let consistency = tape.scalar_value(lc);
        let grads = tape.backward_from(&[(total, vec![1.0])]);
        let d_blends = blend_vars.iter().map(|v| grads.scalar(*v)).collect();
        let _ = x0_vals;
        Ok(SoftPassResult {
            total: total_val,
            consistency,
            d_blends,
        })
    }

    /// Value-only forward sweep saving segment boundaries.
    fn forward_boundaries(&self, blends: &[f64], seed: u64) -> Vec<Boundary> {
        let net = self.net;
        let mut boundaries = Vec::with_capacity(net.t_steps + 1);
        let first = Boundary {
            x: draw_initial_noise(net.spec.data.len(), seed),
            published: Vec::new(),
        };
        self.meter.acquire(first.elems());
        boundaries.push(first);
        for step in 1..=net.t_steps {
            let prev = &boundaries[step - 1];
            let mut tape = Tape::with_meter(self.meter.clone());
            let bound = self.shared.bind(&mut tape);
            let x = tape.constant(prev.x.clone());
            let published_in: Option<Vec<Var>> = (step > 1).then(|| {
                prev.published
                    .iter()
                    .map(|p| tape.constant(p.clone()))
                    .collect()
            });
            let step_blends: Vec<Var> = blends
                [(step - 1) * net.n_blocks..step * net.n_blocks]
                .iter()
                .map(|v| tape.scalar_leaf(*v, false))
                .collect();
            let state = build_soft_step(
                &mut tape,
                net,
                self.denoiser,
                &bound,
                self.schedule,
                step,
                x,
                published_in.as_deref(),
                (step > 1).then_some(&step_blends),
            );
            let next = Boundary {
                x: tape.value(state.x).to_vec(),
                published: state
                    .published
                    .iter()
                    .map(|v| tape.value(*v).to_vec())
                    .collect(),
            };
            self.meter.acquire(next.elems());
            boundaries.push(next);
        }
        boundaries
    }

    /// Checkpointed pass: forward sweep, then one segment tape at a time in
    /// reverse with adjoints carried across boundaries.
    fn pass_segmented(
        &self,
        blends: &[f64],
        free: &[bool],
        seed: u64,
        x0_gt: &[f64],
        sparse_active: bool,
        per_block: bool,
    ) -> Result<SoftPassResult> {
        let net = self.net;
        let n = net.n_blocks;
        let boundaries = self.forward_boundaries(blends, seed);
        let x0_vals = &boundaries[net.t_steps].x;

        // Loss head segment.
        let (loss_tape, x0_leaf, blend_leaves, total) =
            self.build_loss_head(x0_vals, true, blends, free, x0_gt, sparse_active)?;
        let total_val = loss_tape.scalar_value(total);
        let consistency = {
            // The consistency node is total minus the sparse term; recompute
            // the reported value directly from the pruned output instead.
            let raw = crate::loss::consistency_loss(
                x0_vals,
                x0_gt,
                self.loss_cfg.consistency,
                &net.spec.data,
            )?;
            raw + self.loss_cfg.consistency.training_offset()
        };
        let grads = loss_tape.backward_from(&[(total, vec![1.0])]);
        let mut d_blends: Vec<f64> = blend_leaves.iter().map(|v| grads.scalar(*v)).collect();
        let mut adj_x: Vec<f64> = grads
            .get(x0_leaf)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; x0_vals.len()]);
        drop(loss_tape);

        let mut adj_pub: Vec<Option<Vec<f64>>> = vec![None; n];
        for step in (2..=net.t_steps).rev() {
            let boundary_in = &boundaries[step - 1];
            let needs_input_grads = step > 2;
            let (step_d_blends, new_adj_x, new_adj_pub) = if per_block {
                self.backward_step_per_block(
                    boundary_in,
                    blends,
                    free,
                    step,
                    needs_input_grads,
                    &adj_x,
                    &adj_pub,
                )
            } else {
                self.backward_step_whole(
                    boundary_in,
                    blends,
                    free,
                    step,
                    needs_input_grads,
                    &adj_x,
                    &adj_pub,
                )
            };
            for (b, g) in step_d_blends.into_iter().enumerate() {
                d_blends[(step - 1) * n + b] += g;
            }
            self.meter.release(boundaries[step].elems());
            adj_x = new_adj_x;
            adj_pub = new_adj_pub;
        }
        for step in 0..=1.min(net.t_steps) {
            self.meter.release(boundaries[step].elems());
        }
        Ok(SoftPassResult {
            total: total_val,
            consistency,
            d_blends,
        })
    }

    /// One whole timestep as a single segment tape.
    #[allow(clippy::too_many_arguments)]
    fn backward_step_whole(
        &self,
        boundary_in: &Boundary,
        blends: &[f64],
        free: &[bool],
        step: usize,
        needs_input_grads: bool,
        adj_x: &[f64],
        adj_pub: &[Option<Vec<f64>>],
    ) -> (Vec<f64>, Vec<f64>, Vec<Option<Vec<f64>>>) {
        let net = self.net;
        let n = net.n_blocks;
        let mut tape = Tape::with_meter(self.meter.clone());
        let bound = self.shared.bind(&mut tape);
        let x_in = tape.leaf(boundary_in.x.clone(), needs_input_grads);
        let pub_in: Vec<Var> = boundary_in
            .published
            .iter()
            .map(|p| tape.leaf(p.clone(), needs_input_grads))
            .collect();
        let step_blends: Vec<Var> = (0..n)
            .map(|b| {
                let k = (step - 1) * n + b;
                tape.scalar_leaf(blends[k], free[k])
            })
            .collect();
        let state = build_soft_step(
            &mut tape,
            net,
            self.denoiser,
            &bound,
            self.schedule,
            step,
            x_in,
            Some(&pub_in),
            Some(&step_blends),
        );
        let mut seeds: Vec<(Var, Vec<f64>)> = vec![(state.x, adj_x.to_vec())];
        for (b, adj) in adj_pub.iter().enumerate() {
            if let Some(a) = adj {
                seeds.push((state.published[b], a.clone()));
            }
        }
        let grads = tape.backward_from(&seeds);
        let step_d: Vec<f64> = step_blends.iter().map(|v| grads.scalar(*v)).collect();
        let new_adj_x = grads
            .get(x_in)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; boundary_in.x.len()]);
        let new_adj_pub: Vec<Option<Vec<f64>>> = pub_in
            .iter()
            .map(|v| grads.get(*v).map(|g| g.to_vec()))
            .collect();
        (step_d, new_adj_x, new_adj_pub)
    }

    /// One micro tape per block within the step; the reverse update and the
    /// adjoint bookkeeping happen outside any tape.
    #[allow(clippy::too_many_arguments)]
    fn backward_step_per_block(
        &self,
        boundary_in: &Boundary,
        blends: &[f64],
        free: &[bool],
        step: usize,
        needs_input_grads: bool,
        adj_x_out: &[f64],
        adj_pub_out: &[Option<Vec<f64>>],
    ) -> (Vec<f64>, Vec<f64>, Vec<Option<Vec<f64>>>) {
        let net = self.net;
        let spec = &net.spec;
        let n = net.n_blocks;
        let t = self.schedule.t_max - step + 1;
        let temb = sinusoidal_time_embedding(t, TIME_EMBED_DIM);

        // Recompute this step's published outputs (values only).
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(n);
        for b in 0..n {
            let inputs: Vec<&[f64]> = spec.blocks[b]
                .inputs
                .iter()
                .map(|p| match p {
                    Producer::StepInput => boundary_in.x.as_slice(),
                    Producer::Block(i) => outs[*i].as_slice(),
                })
                .collect();
            let fresh = self.denoiser.block_forward(b, &inputs, &temb);
            let blend = blends[(step - 1) * n + b];
            let cache = &boundary_in.published[b];
            let out: Vec<f64> = cache
                .iter()
                .zip(&fresh)
                .map(|(c, f)| c + blend * (f - c))
                .collect();
            outs.push(out);
        }

        // Reverse-update unit backward.
        let (c_x, c_eps) = reverse_coeffs(t, self.schedule);
        let mut adj_x_in: Vec<f64> = adj_x_out.iter().map(|a| c_x * a).collect();
        let mut adj_out: Vec<Option<Vec<f64>>> = adj_pub_out.to_vec();
        {
            let ob = spec.output_block();
            let slot = adj_out[ob].get_or_insert_with(|| vec![0.0; outs[ob].len()]);
            for (s, a) in slot.iter_mut().zip(adj_x_out) {
                *s += c_eps * a;
            }
        }

        let mut step_d = vec![0.0; n];
        let mut adj_pub_in: Vec<Option<Vec<f64>>> = vec![None; n];
        for b in (0..n).rev() {
            let Some(adj) = adj_out[b].take() else {
                continue;
            };
            let k = (step - 1) * n + b;
            let mut tape = Tape::with_meter(self.meter.clone());
            let bound = self.shared.bind(&mut tape);
            let x_leaf = tape.leaf(boundary_in.x.clone(), needs_input_grads);
            let producer_leaves: Vec<(usize, Var)> = spec.blocks[b]
                .inputs
                .iter()
                .filter_map(|p| match p {
                    Producer::StepInput => None,
                    Producer::Block(i) => Some(*i),
                })
                .map(|i| (i, tape.leaf(outs[i].clone(), true)))
                .collect();
            let inputs: Vec<Var> = spec.blocks[b]
                .inputs
                .iter()
                .map(|p| match p {
                    Producer::StepInput => x_leaf,
                    Producer::Block(i) => {
                        producer_leaves
                            .iter()
                            .find(|(idx, _)| idx == i)
                            .expect("producer leaf bound")
                            .1
                    }
                })
                .collect();
            let temb_leaf = tape.constant(temb.clone());
            let fresh = self
                .denoiser
                .block_forward_tape(&mut tape, &bound, b, &inputs, temb_leaf);
            let cache = tape.leaf(boundary_in.published[b].clone(), needs_input_grads);
            let blend = tape.scalar_leaf(blends[k], free[k]);
            let delta = tape.sub(fresh, cache);
            let scaled = tape.scale_by(delta, blend);
            let out = tape.add(cache, scaled);
            let grads = tape.backward_from(&[(out, adj)]);
            step_d[b] = grads.scalar(blend);
            if let Some(g) = grads.get(x_leaf) {
                for (a, gi) in adj_x_in.iter_mut().zip(g) {
                    *a += gi;
                }
            }
            for (i, leaf) in &producer_leaves {
                if let Some(g) = grads.get(*leaf) {
                    let slot = adj_out[*i].get_or_insert_with(|| vec![0.0; outs[*i].len()]);
                    for (a, gi) in slot.iter_mut().zip(g) {
                        *a += gi;
                    }
                }
            }
            if let Some(g) = grads.get(cache) {
                let slot = adj_pub_in[b].get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, gi) in slot.iter_mut().zip(g) {
                    *a += gi;
                }
            }
        }
        (step_d, adj_x_in, adj_pub_in)
    }
}

/// Trains the pruner against a frozen denoiser. The optional callback
/// receives periodic weight snapshots (for checkpoint artifacts).
#[allow(clippy::too_many_arguments)]
pub fn train_pruner(
    mut pruner: PrunerWeights,
    denoiser: &DenoiserWeights,
    net: &SuperNet,
    profile: &FlopsProfile,
    schedule: &NoiseSchedule,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut on_snapshot: Option<&mut dyn FnMut(usize, &PrunerWeights)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if pruner.config.n_blocks != net.n_blocks || pruner.config.t_steps != net.t_steps {
        return Err(Error::Config(
            "pruner config dimensions do not match the supernet".into(),
        ));
    }
    let shared = denoiser.to_shared();
    let meter = MemoryMeter::new();
    let conditions = ConditionSource::new(cfg.master_seed, cfg.condition_count);
    let mut phase = PhaseState::default();
    let mut log = Vec::with_capacity(cfg.steps);
    let n_params = pruner.param_tensors().len();
    let param_shapes: Vec<usize> = pruner.param_tensors().iter().map(|(_, t)| t.len()).collect();

    let ctx = SoftPassCtx {
        net,
        denoiser,
        shared: &shared,
        schedule,
        profile,
        loss_cfg,
        meter: meter.clone(),
    };

    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        let fwd = pruner_forward(&pruner, true);
        let st = st_gate(&fwd.scores.s, net)?;
        let blends: Vec<f64> = st.gate.gate.iter().map(|&g| g as f64).collect();
        let free: Vec<bool> = st.forced.iter().map(|f| !f).collect();

        // Latch update happens on the hard-gate sparse value, before the
        // backward decides whether the sparse term participates.
        let sparse_value = sparse_loss(&blends, profile, SparseMode::GammaNormalized);
        if !phase.sparse_dropped && sparse_value <= loss_cfg.tau {
            phase.sparse_dropped = true;
        }
        let sparse_active = !phase.sparse_dropped;

        let mut ds = vec![0.0; net.node_count()];
        let mut mean_total = 0.0;
        let mut mean_consistency = 0.0;
        for draw in 0..cfg.batch_size {
            let seed = conditions.seed_for(step * cfg.batch_size + draw);
            let reference = sample(denoiser, schedule, seed, false)?;
            let pass = match cfg.checkpoint {
                CheckpointGranularity::Off => ctx.pass_monolithic(
                    &blends,
                    &free,
                    seed,
                    &reference.x_out,
                    sparse_active,
                    cfg.memory_limit_elems,
                )?,
                CheckpointGranularity::PerTimestep => ctx.pass_segmented(
                    &blends,
                    &free,
                    seed,
                    &reference.x_out,
                    sparse_active,
                    false,
                )?,
                CheckpointGranularity::PerBlock => ctx.pass_segmented(
                    &blends,
                    &free,
                    seed,
                    &reference.x_out,
                    sparse_active,
                    true,
                )?,
            };
            if !pass.total.is_finite() {
                return Err(Error::Diverged { step });
            }
            let scale = 1.0 / cfg.batch_size as f64;
            for (acc, d) in ds.iter_mut().zip(&pass.d_blends) {
                *acc += scale * d;
            }
            mean_total += scale * pass.total;
            mean_consistency += scale * pass.consistency;
        }
        let _ = mean_total;

        // Straight-through: seed score adjoints with the blend gradients.
        let seeds: Vec<(Var, Vec<f64>)> = fwd
            .score_vars
            .iter()
            .zip(&ds)
            .map(|(v, d)| (*v, vec![*d]))
            .collect();
        let grads = fwd.tape.backward_from(&seeds);
        let mut grad_bufs: Vec<Vec<f64>> = Vec::with_capacity(n_params);
        for (i, var) in fwd.param_vars.iter().enumerate() {
            grad_bufs.push(match grads.get(*var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; param_shapes[i]],
            });
        }
        drop(fwd);
        for (param, grad) in pruner.param_tensors_mut().into_iter().zip(&grad_bufs) {
            for (p, g) in param.iter_mut().zip(grad) {
                *p -= lr * (g + cfg.weight_decay * *p);
            }
        }

        log.push(TrainLogRow {
            step,
            consistency_loss: mean_consistency,
            sparse_loss_value: sparse_value,
            keep_ratio_flops: net.executed_flops(&st.gate) / net.total_flops(),
            phase: if sparse_active { "joint" } else { "consistency-only" }.to_string(),
            lr,
        });
        if let Some(every) = cfg.snapshot_every {
            if every > 0 && (step + 1) % every == 0 {
                if let Some(cb) = on_snapshot.as_mut() {
                    cb(step + 1, &pruner);
                }
            }
        }
    }
    Ok(TrainOutcome {
        weights: pruner,
        log,
        phase,
        peak_retained: meter.peak(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, DenoiserSpec};
    use crate::graph::{build_supernet, gamma_profile};
    use crate::loss::ConsistencyKind;
    use crate::pruner::{init_pruner, predict_scores, EncoderKind, PrunerConfig};

    fn tiny_setup() -> (
        SuperNet,
        DenoiserWeights,
        NoiseSchedule,
        FlopsProfile,
        PrunerConfig,
    ) {
        let spec = DenoiserSpec::chain2();
        let weights = DenoiserWeights::init(&spec, 1);
        let schedule = make_schedule(4, 1e-3, 0.05).unwrap();
        let net = build_supernet(&spec, 4).unwrap();
        let profile = gamma_profile(&net).unwrap();
        let cfg = PrunerConfig {
            embed_dim: 8,
            depth: 1,
            encoder: EncoderKind::LinearStack,
            head_hidden: 4,
            n_blocks: net.n_blocks,
            t_steps: net.t_steps,
        };
        (net, weights, schedule, profile, cfg)
    }

    fn tiny_loss_cfg() -> LossConfig {
        LossConfig {
            consistency: ConsistencyKind::L2,
            ..LossConfig::default()
        }
    }

    #[test]
    fn zero_alpha_keeps_all_gates_for_the_whole_run() {
        let (net, denoiser, schedule, profile, pcfg) = tiny_setup();
        let pruner = init_pruner(&pcfg, 3).unwrap();
        let loss_cfg = LossConfig {
            alpha_s: 0.0,
            ..tiny_loss_cfg()
        };
        let cfg = TrainConfig {
            steps: 25,
            condition_count: 25,
            ..TrainConfig::default()
        };
        let out = train_pruner(
            pruner, &denoiser, &net, &profile, &schedule, &loss_cfg, &cfg, None,
        )
        .unwrap();
        for row in &out.log {
            assert_eq!(row.keep_ratio_flops, 1.0, "step {}", row.step);
        }
        let scores = predict_scores(&out.weights);
        assert!(scores.s.iter().all(|s| *s >= 0.5));
        assert!(!out.phase.sparse_dropped);
    }

    #[test]
    fn denoiser_stays_frozen() {
        let (net, denoiser, schedule, profile, pcfg) = tiny_setup();
        let before = denoiser.content_hash();
        let pruner = init_pruner(&pcfg, 3).unwrap();
        let cfg = TrainConfig {
            steps: 10,
            condition_count: 10,
            ..TrainConfig::default()
        };
        train_pruner(
            pruner, &denoiser, &net, &profile, &schedule, &tiny_loss_cfg(), &cfg, None,
        )
        .unwrap();
        assert_eq!(denoiser.content_hash(), before);
    }

    #[test]
    fn cosine_schedule_decays_monotonically_to_zero() {
        let cfg = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        let mut prev = f64::INFINITY;
        for step in 0..cfg.steps {
            let lr = cfg.lr_at(step);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(cfg.lr_at(0), cfg.lr);
        assert!(cfg.lr_at(cfg.steps) < 1e-12);
    }

    #[test]
    fn training_log_is_reproducible() {
        let (net, denoiser, schedule, profile, pcfg) = tiny_setup();
        let cfg = TrainConfig {
            steps: 8,
            condition_count: 8,
            master_seed: 77,
            ..TrainConfig::default()
        };
        let run = |_| {
            let pruner = init_pruner(&pcfg, 3).unwrap();
            train_pruner(
                pruner, &denoiser, &net, &profile, &schedule, &tiny_loss_cfg(), &cfg, None,
            )
            .unwrap()
        };
        let a = run(());
        let b = run(());
        assert_eq!(a.log.len(), b.log.len());
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.consistency_loss, rb.consistency_loss);
            assert_eq!(ra.sparse_loss_value, rb.sparse_loss_value);
            assert_eq!(ra.keep_ratio_flops, rb.keep_ratio_flops);
        }
        assert_eq!(a.weights.content_hash(), b.weights.content_hash());
    }

    #[test]
    fn checkpoint_granularities_agree_and_save_memory() {
        let (net, denoiser, schedule, profile, pcfg) = tiny_setup();
        let cfg_base = TrainConfig {
            steps: 6,
            condition_count: 6,
            master_seed: 5,
            ..TrainConfig::default()
        };
        let run = |granularity| {
            let pruner = init_pruner(&pcfg, 3).unwrap();
            let cfg = TrainConfig {
                checkpoint: granularity,
                ..cfg_base.clone()
            };
            train_pruner(
                pruner, &denoiser, &net, &profile, &schedule, &tiny_loss_cfg(), &cfg, None,
            )
            .unwrap()
        };
        let off = run(CheckpointGranularity::Off);
        let per_step = run(CheckpointGranularity::PerTimestep);
        let per_block = run(CheckpointGranularity::PerBlock);

        let max_weight_diff = |a: &PrunerWeights, b: &PrunerWeights| {
            a.param_tensors()
                .iter()
                .zip(b.param_tensors())
                .flat_map(|((_, ta), (_, tb))| ta.iter().zip(tb).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max)
        };
        assert!(max_weight_diff(&off.weights, &per_step.weights) < 1e-6);
        assert!(max_weight_diff(&off.weights, &per_block.weights) < 1e-6);
        assert!(
            per_step.peak_retained < off.peak_retained,
            "per-timestep {} vs off {}",
            per_step.peak_retained,
            off.peak_retained
        );
        assert!(
            per_block.peak_retained < per_step.peak_retained,
            "per-block {} vs per-timestep {}",
            per_block.peak_retained,
            per_step.peak_retained
        );
    }

    #[test]
    fn memory_budget_error_suggests_checkpointing() {
        let (net, denoiser, schedule, profile, pcfg) = tiny_setup();
        let pruner = init_pruner(&pcfg, 3).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            condition_count: 1,
            checkpoint: CheckpointGranularity::Off,
            memory_limit_elems: Some(10),
            ..TrainConfig::default()
        };
        match train_pruner(
            pruner, &denoiser, &net, &profile, &schedule, &tiny_loss_cfg(), &cfg, None,
        ) {
            Err(Error::MemoryBudget { used, limit }) => {
                assert!(used > limit);
            }
            other => panic!("expected MemoryBudget, got {other:?}"),
        }
    }

    #[test]
    fn half_precision_flag_is_rejected() {
        let cfg = TrainConfig {
            precision: Precision::Half,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn snapshot_callback_fires_on_cadence() {
        let (net, denoiser, schedule, profile, pcfg) = tiny_setup();
        let pruner = init_pruner(&pcfg, 3).unwrap();
        let cfg = TrainConfig {
            steps: 9,
            condition_count: 9,
            snapshot_every: Some(3),
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        let mut cb = |step: usize, _w: &PrunerWeights| seen.push(step);
        train_pruner(
            pruner,
            &denoiser,
            &net,
            &profile,
            &schedule,
            &tiny_loss_cfg(),
            &cfg,
            Some(&mut cb),
        )
        .unwrap();
        assert_eq!(seen, vec![3, 6, 9]);
    }

    #[test]
    fn condition_source_cycles_after_one_epoch() {
        let c = ConditionSource::new(4, 5);
        assert_eq!(c.len(), 5);
        assert_eq!(c.seed_for(0), c.seed_for(5));
        let distinct: std::collections::HashSet<u64> = (0..5).map(|i| c.seed_for(i)).collect();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn gradient_accumulation_averages_draw_gradients() {
        let (net, denoiser, schedule, profile, pcfg) = tiny_setup();
        // Push a couple of non-mandatory gates off so the consistency
        // gradient is nonzero and depends on the condition seed.
        let mut base = init_pruner(&pcfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        base.heads[5].b2 = vec![1.0, 0.0];
        base.heads[7].b2 = vec![1.0, 0.0];
        for head in &mut base.heads {
            for v in head.w2.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        let run = |batch_size: usize, condition_count: usize| {
            let cfg = TrainConfig {
                steps: 1,
                batch_size,
                condition_count,
                master_seed: 21,
                weight_decay: 0.0,
                ..TrainConfig::default()
            };
            train_pruner(
                base.clone(),
                &denoiser,
                &net,
                &profile,
                &schedule,
                &tiny_loss_cfg(),
                &cfg,
                None,
            )
            .unwrap()
        };
        // A one-seed pool makes both accumulated draws identical: averaging
        // must reproduce the single-draw update exactly (summing would not).
        let acc_same = run(2, 1);
        let single_same = run(1, 1);
        assert_eq!(
            acc_same.weights.content_hash(),
            single_same.weights.content_hash()
        );
        // With distinct seeds the second draw must influence the update.
        let acc_mixed = run(2, 8);
        let single_first = run(1, 8);
        assert_ne!(
            acc_mixed.weights.content_hash(),
            single_first.weights.content_hash()
        );
    }
}
