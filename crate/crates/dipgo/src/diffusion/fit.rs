//! Denoiser training on synthetic data.
//!
//! Standard denoising objective: draw a sample, a timestep and Gaussian
//! noise, form x_t in closed form, and regress the block graph's output onto
//! the noise. Adam keeps the toy model trainable in a few thousand steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::denoiser::{
    sinusoidal_time_embedding, DataShape, DenoiserSpec, DenoiserWeights, Producer, TIME_EMBED_DIM,
};
use super::schedule::{forward_diffuse, NoiseSchedule};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            lr: 2e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitLog {
    /// (step, training loss) pairs.
    pub losses: Vec<(usize, f64)>,
}

impl FitLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|(_, l)| *l)
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().map(|(_, l)| *l)
    }

    pub fn min_loss(&self) -> Option<f64> {
        self.losses
            .iter()
            .map(|(_, l)| *l)
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Trains denoiser weights on a dataset of clean samples.
pub fn fit_toy_denoiser(
    spec: &DenoiserSpec,
    dataset: &[Vec<f64>],
    schedule: &NoiseSchedule,
    config: &FitConfig,
) -> Result<(DenoiserWeights, FitLog)> {
    if dataset.is_empty() {
        return Err(Error::Config("fit dataset must be non-empty".into()));
    }
    let dim = spec.data.len();
    if dataset.iter().any(|s| s.len() != dim) {
        return Err(Error::Shape {
            expected: format!("{dim}"),
            got: "mixed-shape dataset".into(),
        });
    }
    let mut weights = DenoiserWeights::init(spec, config.seed);
    let mut log = FitLog::default();
    if config.steps == 0 {
        return Ok((weights, log));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let n_tensors = weights.param_tensors().len();
    let shapes: Vec<usize> = weights.param_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(&shapes);

    for step in 0..config.steps {
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, true);
        let mut item_losses: Vec<Var> = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let sample = &dataset[rng.gen_range(0..dataset.len())];
            let t = rng.gen_range(1..=schedule.t_max);
            let noise: Vec<f64> = (0..dim)
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect();
            let x_t = forward_diffuse(sample, t, &noise, schedule)?;
            let temb = sinusoidal_time_embedding(t, TIME_EMBED_DIM);
            let xv = tape.constant(x_t);
            let tv = tape.constant(temb);
            let mut outs: Vec<Var> = Vec::with_capacity(spec.n_blocks());
            for b in 0..spec.n_blocks() {
                let inputs: Vec<Var> = spec.blocks[b]
                    .inputs
                    .iter()
                    .map(|p| match p {
                        Producer::StepInput => xv,
                        Producer::Block(i) => outs[*i],
                    })
                    .collect();
                outs.push(weights.block_forward_tape(&mut tape, &bound, b, &inputs, tv));
            }
            let eps_pred = outs[spec.output_block()];
            let target = tape.constant(noise);
            let diff = tape.sub(eps_pred, target);
            let sq = tape.mul(diff, diff);
            item_losses.push(tape.mean(sq));
        }
        let k = item_losses.len();
        let loss = tape.lin_comb(item_losses, vec![1.0 / k as f64; k]);
        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Diverged { step });
        }
        log.losses.push((step, loss_val));

        let grads = tape.backward_scalar(loss);
        let mut grad_bufs: Vec<Vec<f64>> = Vec::with_capacity(n_tensors);
        let mut var_iter = bound.iter().flat_map(|bb| {
            bb.in_mats
                .iter()
                .copied()
                .chain([bb.bias, bb.time, bb.proj, bb.shortcut, bb.bias2])
        });
        for len in &shapes {
            let v = var_iter.next().expect("bound vars align with tensors");
            grad_bufs.push(match grads.get(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; *len],
            });
        }
        drop(tape);
        let mut params = weights.param_tensors_mut();
        adam.step(&mut params, &grad_bufs, config.lr);
    }
    Ok((weights, log))
}

/// Procedural 16x16-style dataset: axis-aligned rectangles, discs and
/// crosses on a flat background, deterministic in the seed.
pub fn shapes_dataset(count: usize, shape: DataShape, seed: u64) -> Vec<Vec<f64>> {
    let (h, w) = match shape {
        DataShape::Image { h, w } => (h, w),
        DataShape::Vector { dim } => {
            // Degenerate testbed: points on a small circle plus jitter.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            return (0..count)
                .map(|_| {
                    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    (0..dim)
                        .map(|d| {
                            let base = if d % 2 == 0 { angle.cos() } else { angle.sin() };
                            0.8 * base + rng.gen_range(-0.05..0.05)
                        })
                        .collect()
                })
                .collect();
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut img = vec![-0.5; h * w];
            let value: f64 = rng.gen_range(0.4..1.0);
            let kind = rng.gen_range(0..3u8);
            let cy = rng.gen_range(h / 4..3 * h / 4) as i64;
            let cx = rng.gen_range(w / 4..3 * w / 4) as i64;
            let r = rng.gen_range(2..=(h / 3).max(2)) as i64;
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let inside = match kind {
                        0 => (y - cy).abs() <= r && (x - cx).abs() <= r,
                        1 => (y - cy).pow(2) + (x - cx).pow(2) <= r * r,
                        _ => (y - cy).abs() <= 1 || (x - cx).abs() <= 1,
                    };
                    if inside {
                        img[(y as usize) * w + x as usize] = value;
                    }
                }
            }
            img
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    #[test]
    fn zero_steps_returns_initialization() {
        let spec = DenoiserSpec::chain2();
        let schedule = make_schedule(4, 1e-4, 0.05).unwrap();
        let data = shapes_dataset(4, spec.data, 3);
        let cfg = FitConfig {
            steps: 0,
            seed: 9,
            ..FitConfig::default()
        };
        let (w, log) = fit_toy_denoiser(&spec, &data, &schedule, &cfg).unwrap();
        assert_eq!(w.content_hash(), DenoiserWeights::init(&spec, 9).content_hash());
        assert!(log.losses.is_empty());
    }

    #[test]
    fn rejects_empty_or_ragged_dataset() {
        let spec = DenoiserSpec::chain2();
        let schedule = make_schedule(4, 1e-4, 0.05).unwrap();
        let cfg = FitConfig::default();
        assert!(fit_toy_denoiser(&spec, &[], &schedule, &cfg).is_err());
        let ragged = vec![vec![0.0; 2], vec![0.0; 3]];
        assert!(fit_toy_denoiser(&spec, &ragged, &schedule, &cfg).is_err());
    }

    /// Denoising loss of fixed (t, noise) probes, evaluated out of band.
    fn probe_loss(w: &DenoiserWeights, schedule: &NoiseSchedule, x0: &[f64]) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut total = 0.0;
        let probes = 16;
        for _ in 0..probes {
            let t = rng.gen_range(1..=schedule.t_max);
            let noise: Vec<f64> = (0..x0.len())
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect();
            let x_t = forward_diffuse(x0, t, &noise, schedule).unwrap();
            let temb = sinusoidal_time_embedding(t, TIME_EMBED_DIM);
            let mut outs: Vec<Vec<f64>> = Vec::new();
            for b in 0..w.spec.n_blocks() {
                let inputs: Vec<&[f64]> = w.spec.blocks[b]
                    .inputs
                    .iter()
                    .map(|p| match p {
                        Producer::StepInput => x_t.as_slice(),
                        Producer::Block(i) => outs[*i].as_slice(),
                    })
                    .collect();
                outs.push(w.block_forward(b, &inputs, &temb));
            }
            let eps = &outs[w.spec.output_block()];
            total += eps
                .iter()
                .zip(&noise)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / x0.len() as f64;
        }
        total / probes as f64
    }

    #[test]
    fn overfits_a_single_sample_close_to_its_floor() {
        // The per-step training loss is stochastic in (t, noise); measure a
        // fixed probe set at training prefixes instead (the seeded RNG makes
        // a longer run an exact continuation of a shorter one).
        let spec = DenoiserSpec::chain2();
        let schedule = make_schedule(4, 1e-4, 0.05).unwrap();
        let data = vec![vec![0.6, -0.3]];
        let x0 = data[0].clone();
        let mut evals = Vec::new();
        for steps in (1..=8).map(|k| k * 150) {
            let cfg = FitConfig {
                steps,
                lr: 5e-3,
                batch_size: 4,
                seed: 2,
            };
            let (w, _) = fit_toy_denoiser(&spec, &data, &schedule, &cfg).unwrap();
            evals.push(probe_loss(&w, &schedule, &x0));
        }
        let floor = evals.iter().cloned().fold(f64::INFINITY, f64::min);
        let final_loss = *evals.last().unwrap();
        assert!(
            final_loss <= 10.0 * floor + 1e-9,
            "final {final_loss} vs floor {floor}"
        );
        let init = DenoiserWeights::init(&spec, 2);
        assert!(final_loss < probe_loss(&init, &schedule, &x0));
    }

    #[test]
    fn monitored_toy_run_decreases_loss() {
        let spec = DenoiserSpec::toy_unet6();
        let schedule = make_schedule(6, 1e-4, 0.05).unwrap();
        let data = shapes_dataset(16, spec.data, 1);
        let cfg = FitConfig {
            steps: 60,
            lr: 2e-3,
            batch_size: 4,
            seed: 4,
        };
        let (_, log) = fit_toy_denoiser(&spec, &data, &schedule, &cfg).unwrap();
        assert!(log.final_loss().unwrap() < log.initial_loss().unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let spec = DenoiserSpec::chain2();
        let schedule = make_schedule(4, 1e-4, 0.05).unwrap();
        let data = vec![vec![f64::MAX / 2.0, f64::MAX / 2.0]];
        let cfg = FitConfig {
            steps: 5,
            lr: 1e-2,
            batch_size: 1,
            seed: 0,
        };
        match fit_toy_denoiser(&spec, &data, &schedule, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn shapes_dataset_is_deterministic_and_in_range() {
        let a = shapes_dataset(5, DataShape::Image { h: 16, w: 16 }, 7);
        let b = shapes_dataset(5, DataShape::Image { h: 16, w: 16 }, 7);
        assert_eq!(a, b);
        assert!(a
            .iter()
            .flatten()
            .all(|v| (-0.5..=1.0).contains(v)));
    }
}
