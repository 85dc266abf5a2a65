//! Consistency and sparsity objectives.
//!
//! Consistency compares the pruned chain's output against full inference:
//! negative SSIM by default, with L1/L2/L1+SSIM alternatives. The sparse
//! loss charges each kept node its flops-reduction share gamma. The total
//! objective combines them until the gamma-normalized sparse value falls to
//! the threshold tau, after which the sparse term is dropped for the rest of
//! the run (a one-way latch).
//!
//! Inside the total objective the SSIM-kind consistency is offset by +1 so a
//! perfect reconstruction scores exactly zero; the raw [`consistency_loss`]
//! operation still returns plain negative SSIM (-1 on identical inputs) and
//! gradients are unchanged by the offset.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{filter2d_raw, Tape, Var};
use crate::diffusion::DataShape;
use crate::error::{Error, Result};
use crate::graph::FlopsProfile;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyKind {
    NegSsim,
    L1,
    L2,
    L1Ssim,
}

impl ConsistencyKind {
    /// Offset making the training-side consistency zero on identical inputs.
    pub fn training_offset(&self) -> f64 {
        match self {
            ConsistencyKind::NegSsim | ConsistencyKind::L1Ssim => 1.0,
            ConsistencyKind::L1 | ConsistencyKind::L2 => 0.0,
        }
    }

    pub fn needs_image(&self) -> bool {
        matches!(self, ConsistencyKind::NegSsim | ConsistencyKind::L1Ssim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparseMode {
    GammaNormalized,
    Eq3Literal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha_s: f64,
    pub tau: f64,
    pub consistency: ConsistencyKind,
    pub sparse_normalization: SparseMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_s: 1.0,
            tau: 0.2,
            consistency: ConsistencyKind::NegSsim,
            sparse_normalization: SparseMode::GammaNormalized,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_s >= 0.0) {
            return Err(Error::Config("alpha_s must be non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config("tau must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One-way latch dropping the sparse term once its normalized value reaches tau.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseState {
    pub sparse_dropped: bool,
}

/// Normalized 2D Gaussian window used by every SSIM evaluation.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Rc<Vec<f64>> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut one_d = Vec::with_capacity(size);
    for i in 0..size {
        let d = i as f64 - half;
        one_d.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let mut k = vec![0.0; size * size];
    let mut total = 0.0;
    for y in 0..size {
        for x in 0..size {
            let v = one_d[y] * one_d[x];
            k[y * size + x] = v;
            total += v;
        }
    }
    for v in k.iter_mut() {
        *v /= total;
    }
    Rc::new(k)
}

fn check_image(shape: &DataShape, len: usize) -> Result<(usize, usize)> {
    match shape {
        DataShape::Image { h, w } => {
            if h * w != len {
                return Err(Error::Shape {
                    expected: format!("{}x{}", h, w),
                    got: format!("{len}"),
                });
            }
            if *h < SSIM_WINDOW || *w < SSIM_WINDOW {
                return Err(Error::Config(format!(
                    "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
                )));
            }
            Ok((*h, *w))
        }
        DataShape::Vector { .. } => Err(Error::Config(
            "SSIM-based consistency requires image-shaped tensors".into(),
        )),
    }
}

/// Mean SSIM over Gaussian windows (valid positions only). `data_range` sets
/// the stability constants; passing the same range for either argument order
/// makes the measure symmetric.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> f64 {
    assert_eq!(a.len(), h * w);
    assert_eq!(b.len(), h * w);
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let l = data_range.max(1e-9);
    let c1 = (SSIM_K1 * l) * (SSIM_K1 * l);
    let c2 = (SSIM_K2 * l) * (SSIM_K2 * l);
    let mu1 = filter2d_raw(a, h, w, &kernel, SSIM_WINDOW, SSIM_WINDOW);
    let mu2 = filter2d_raw(b, h, w, &kernel, SSIM_WINDOW, SSIM_WINDOW);
    let sq1: Vec<f64> = a.iter().map(|x| x * x).collect();
    let sq2: Vec<f64> = b.iter().map(|x| x * x).collect();
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let e1 = filter2d_raw(&sq1, h, w, &kernel, SSIM_WINDOW, SSIM_WINDOW);
    let e2 = filter2d_raw(&sq2, h, w, &kernel, SSIM_WINDOW, SSIM_WINDOW);
    let e12 = filter2d_raw(&prod, h, w, &kernel, SSIM_WINDOW, SSIM_WINDOW);
    let n = mu1.len();
    let mut acc = 0.0;
    for i in 0..n {
        let m1 = mu1[i];
        let m2 = mu2[i];
        let v1 = e1[i] - m1 * m1;
        let v2 = e2[i] - m2 * m2;
        let cov = e12[i] - m1 * m2;
        let num = (2.0 * m1 * m2 + c1) * (2.0 * cov + c2);
        let den = (m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2);
        acc += num / den;
    }
    acc / n as f64
}

pub fn data_range(x: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in x {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if lo > hi {
        return 1.0;
    }
    hi - lo
}

/// Distance between the pruned and full outputs. The data range of SSIM is
/// taken from `x0_full`.
pub fn consistency_loss(
    x0_pruned: &[f64],
    x0_full: &[f64],
    kind: ConsistencyKind,
    shape: &DataShape,
) -> Result<f64> {
    if x0_pruned.len() != x0_full.len() {
        return Err(Error::Shape {
            expected: format!("{}", x0_full.len()),
            got: format!("{}", x0_pruned.len()),
        });
    }
    let l1 = || -> f64 {
        x0_pruned
            .iter()
            .zip(x0_full)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / x0_full.len() as f64
    };
    match kind {
        ConsistencyKind::L1 => Ok(l1()),
        ConsistencyKind::L2 => Ok(x0_pruned
            .iter()
            .zip(x0_full)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / x0_full.len() as f64),
        ConsistencyKind::NegSsim => {
            let (h, w) = check_image(shape, x0_full.len())?;
            Ok(-ssim(x0_pruned, x0_full, h, w, data_range(x0_full)))
        }
        ConsistencyKind::L1Ssim => {
            let (h, w) = check_image(shape, x0_full.len())?;
            Ok(l1() - ssim(x0_pruned, x0_full, h, w, data_range(x0_full)))
        }
    }
}

/// Flops-weighted sparse loss over gate values (hard bits or soft blends).
pub fn sparse_loss(values: &[f64], profile: &FlopsProfile, mode: SparseMode) -> f64 {
    assert_eq!(values.len(), profile.gamma.len(), "gate length mismatch");
    let mut num = 0.0;
    for (g, v) in profile.gamma.iter().zip(values) {
        num += g * v;
    }
    match mode {
        SparseMode::GammaNormalized => {
            let mut den = 0.0;
            for g in &profile.gamma {
                den += g;
            }
            num / den
        }
        SparseMode::Eq3Literal => num / values.len() as f64,
    }
}

/// Value breakdown of one total-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub total: f64,
    /// Training-side consistency (zero on identical outputs).
    pub consistency: f64,
    /// Gamma-normalized sparse value, always reported (it drives the latch).
    pub sparse_value: f64,
    /// Whether the sparse term entered the total at this evaluation.
    pub sparse_term_active: bool,
}

/// Combines consistency and sparse losses, updating the phase latch: the
/// evaluation whose gamma-normalized sparse value first reaches tau already
/// excludes the sparse term, and the exclusion is permanent.
pub fn total_loss(
    x0_pruned: &[f64],
    x0_full: &[f64],
    gate_values: &[f64],
    profile: &FlopsProfile,
    config: &LossConfig,
    shape: &DataShape,
    phase: &mut PhaseState,
) -> Result<TotalLoss> {
    config.validate()?;
    let raw = consistency_loss(x0_pruned, x0_full, config.consistency, shape)?;
    let consistency = raw + config.consistency.training_offset();
    let sparse_value = sparse_loss(gate_values, profile, SparseMode::GammaNormalized);
    if !phase.sparse_dropped && sparse_value <= config.tau {
        phase.sparse_dropped = true;
    }
    let sparse_term_active = !phase.sparse_dropped;
    let total = if sparse_term_active {
        let term = sparse_loss(gate_values, profile, config.sparse_normalization);
        consistency + config.alpha_s * term
    } else {
        consistency
    };
    Ok(TotalLoss {
        total,
        consistency,
        sparse_value,
        sparse_term_active,
    })
}

// ---------------------------------------------------------------------------
// Tape twins used during training.
// ---------------------------------------------------------------------------

/// SSIM of a tape variable against a constant reference.
pub fn ssim_tape(tape: &mut Tape, x: Var, reference: &[f64], h: usize, w: usize) -> Var {
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let l = data_range(reference).max(1e-9);
    let c1 = (SSIM_K1 * l) * (SSIM_K1 * l);
    let c2 = (SSIM_K2 * l) * (SSIM_K2 * l);
    let mu2_vals = filter2d_raw(reference, h, w, &kernel, SSIM_WINDOW, SSIM_WINDOW);
    let sq2: Vec<f64> = reference.iter().map(|v| v * v).collect();
    let e2_vals = filter2d_raw(&sq2, h, w, &kernel, SSIM_WINDOW, SSIM_WINDOW);
    let v2_vals: Vec<f64> = e2_vals
        .iter()
        .zip(&mu2_vals)
        .map(|(e, m)| e - m * m)
        .collect();

    let refv = tape.constant(reference.to_vec());
    let mu2 = tape.constant(mu2_vals.clone());
    let mu2sq = tape.constant(mu2_vals.iter().map(|m| m * m).collect());
    let v2 = tape.constant(v2_vals);

    let mu1 = tape.filter2d(x, h, w, kernel.clone(), SSIM_WINDOW, SSIM_WINDOW);
    let xsq = tape.mul(x, x);
    let e1 = tape.filter2d(xsq, h, w, kernel.clone(), SSIM_WINDOW, SSIM_WINDOW);
    let mu1sq = tape.mul(mu1, mu1);
    let v1 = tape.sub(e1, mu1sq);
    let xy = tape.mul(x, refv);
    let e12 = tape.filter2d(xy, h, w, kernel, SSIM_WINDOW, SSIM_WINDOW);
    let mu1mu2 = tape.mul(mu1, mu2);
    let cov = tape.sub(e12, mu1mu2);

    let num_a = tape.mul_scalar(mu1mu2, 2.0);
    let num_a = tape.add_scalar(num_a, c1);
    let num_b = tape.mul_scalar(cov, 2.0);
    let num_b = tape.add_scalar(num_b, c2);
    let num = tape.mul(num_a, num_b);

    let den_a = tape.add(mu1sq, mu2sq);
    let den_a = tape.add_scalar(den_a, c1);
    let den_b = tape.add(v1, v2);
    let den_b = tape.add_scalar(den_b, c2);
    let den = tape.mul(den_a, den_b);

    let map = tape.div(num, den);
    tape.mean(map)
}

/// Training-side consistency on the tape (zero at identical inputs for the
/// SSIM kinds, via the +1 offset).
pub fn consistency_tape(
    tape: &mut Tape,
    x0_pruned: Var,
    x0_full: &[f64],
    kind: ConsistencyKind,
    shape: &DataShape,
) -> Result<Var> {
    let l1 = |tape: &mut Tape| {
        let refv = tape.constant(x0_full.to_vec());
        let d = tape.sub(x0_pruned, refv);
        let a = tape.abs(d);
        tape.mean(a)
    };
    match kind {
        ConsistencyKind::L1 => Ok(l1(tape)),
        ConsistencyKind::L2 => {
            let refv = tape.constant(x0_full.to_vec());
            let d = tape.sub(x0_pruned, refv);
            let sq = tape.mul(d, d);
            Ok(tape.mean(sq))
        }
        ConsistencyKind::NegSsim => {
            let (h, w) = check_image(shape, x0_full.len())?;
            let s = ssim_tape(tape, x0_pruned, x0_full, h, w);
            let neg = tape.mul_scalar(s, -1.0);
            Ok(tape.add_scalar(neg, 1.0))
        }
        ConsistencyKind::L1Ssim => {
            let (h, w) = check_image(shape, x0_full.len())?;
            let s = ssim_tape(tape, x0_pruned, x0_full, h, w);
            let neg = tape.mul_scalar(s, -1.0);
            let shifted = tape.add_scalar(neg, 1.0);
            let l1v = l1(tape);
            Ok(tape.add(l1v, shifted))
        }
    }
}

/// Sparse loss over per-node blend variables.
pub fn sparse_tape(tape: &mut Tape, blends: &[Var], profile: &FlopsProfile, mode: SparseMode) -> Var {
    let den = match mode {
        SparseMode::GammaNormalized => profile.gamma.iter().sum::<f64>(),
        SparseMode::Eq3Literal => blends.len() as f64,
    };
    let coeffs: Vec<f64> = profile.gamma.iter().map(|g| g / den).collect();
    tape.lin_comb(blends.to_vec(), coeffs)
}
