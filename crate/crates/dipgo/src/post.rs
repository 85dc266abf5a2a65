//! Bisection thresholding of importance scores.
//!
//! A threshold removes every non-mandatory node whose score is strictly
//! below it (scores equal to the threshold stay), followed by cascade
//! closure. Because raising the threshold only grows the removed set, the
//! achieved flops-pruning ratio is non-decreasing in the threshold and a
//! binary search over [0, 1] finds the threshold matching a target ratio
//! within tolerance whenever the score granularity admits one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FlopsProfile, GateVector, SuperNet};

pub const DEFAULT_TOLERANCE: f64 = 0.0125;
pub const DEFAULT_MAX_ITERATIONS: usize = 64;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PruneRequest {
    /// Target flops fraction to remove, in [0, 1).
    pub target_ratio: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl PruneRequest {
    pub fn new(target_ratio: f64) -> Self {
        Self {
            target_ratio,
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio >= 0.0 && self.target_ratio < 1.0) {
            return Err(Error::Config(format!(
                "target ratio must lie in [0, 1), got {}",
                self.target_ratio
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one bisection run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub gate: GateVector,
    pub theta: f64,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub iterations: usize,
    /// Set when no threshold met the tolerance; the returned gate is the
    /// closest one the search evaluated.
    pub best_achievable: bool,
}

/// Removes non-mandatory nodes scoring strictly below `theta`, cascades, and
/// reports the achieved flops-pruning ratio.
pub fn apply_threshold(
    scores: &[f64],
    theta: f64,
    net: &SuperNet,
    profile: &FlopsProfile,
) -> Result<(GateVector, f64)> {
    if scores.len() != net.node_count() {
        return Err(Error::Shape {
            expected: format!("{}", net.node_count()),
            got: format!("{}", scores.len()),
        });
    }
    let raw: Vec<u8> = scores.iter().map(|s| u8::from(!(*s < theta))).collect();
    let gate = net.cascade_close(&raw);
    let executed = net.executed_flops(&gate);
    let achieved = 1.0 - executed / profile.total_flops;
    Ok((gate, achieved))
}

/// Binary search over the threshold for a requested pruning ratio.
pub fn bisect_threshold(
    scores: &[f64],
    request: &PruneRequest,
    net: &SuperNet,
    profile: &FlopsProfile,
) -> Result<PruneOutcome> {
    request.validate()?;
    let target = request.target_ratio;

    // theta = 0 removes nothing; it already answers targets at or near zero.
    let (gate0, p0) = apply_threshold(scores, 0.0, net, profile)?;
    if (p0 - target).abs() < request.tolerance {
        return Ok(PruneOutcome {
            gate: gate0,
            theta: 0.0,
            target_ratio: target,
            achieved_ratio: p0,
            iterations: 0,
            best_achievable: false,
        });
    }
    let mut best = (gate0, 0.0, p0);

    let mut left = 0.0f64;
    let mut right = 1.0f64;
    for iter in 1..=request.max_iterations {
        let theta = 0.5 * (left + right);
        let (gate, achieved) = apply_threshold(scores, theta, net, profile)?;
        if (achieved - target).abs() < (best.2 - target).abs() {
            best = (gate.clone(), theta, achieved);
        }
        if (achieved - target).abs() < request.tolerance {
            return Ok(PruneOutcome {
                gate,
                theta,
                target_ratio: target,
                achieved_ratio: achieved,
                iterations: iter,
                best_achievable: false,
            });
        }
        if achieved < target {
            left = theta;
        } else {
            right = theta;
        }
    }
    Ok(PruneOutcome {
        gate: best.0,
        theta: best.1,
        target_ratio: target,
        achieved_ratio: best.2,
        iterations: request.max_iterations,
        best_achievable: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserSpec;
    use crate::graph::{build_supernet, gamma_profile};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (SuperNet, FlopsProfile) {
        let net = build_supernet(&DenoiserSpec::toy_unet6(), 6).unwrap();
        let profile = gamma_profile(&net).unwrap();
        (net, profile)
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let (net, profile) = setup();
        let scores = vec![0.0; net.node_count()];
        // Strict less-than: score 0.0 survives theta 0.0.
        let (gate, p) = apply_threshold(&scores, 0.0, &net, &profile).unwrap();
        assert_eq!(gate.kept(), net.node_count());
        assert_eq!(p, 0.0);
    }

    #[test]
    fn above_one_threshold_keeps_only_mandatory() {
        let (net, profile) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..net.node_count()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (gate, p) = apply_threshold(&scores, 1.1, &net, &profile).unwrap();
        for (k, &g) in gate.gate.iter().enumerate() {
            assert_eq!(g == 1, net.mandatory_mask[k]);
        }
        // Summation oracle for the achieved ratio.
        let mandatory_flops: f64 = (0..net.node_count())
            .filter(|&k| net.mandatory_mask[k])
            .map(|k| net.node_flops[k])
            .sum();
        let expected = 1.0 - mandatory_flops / profile.total_flops;
        assert!((p - expected).abs() < 1e-15);
    }

    #[test]
    fn median_threshold_matches_prune_and_count_oracle() {
        let (net, profile) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..net.node_count()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let theta = sorted[sorted.len() / 2];
        let (gate, p) = apply_threshold(&scores, theta, &net, &profile).unwrap();
        // Oracle: explicit removal set, cascade via the supernet, flop count.
        let raw: Vec<u8> = scores.iter().map(|s| u8::from(*s >= theta)).collect();
        let closed = net.cascade_close(&raw);
        assert_eq!(gate, closed);
        let executed: f64 = closed
            .gate
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == 1)
            .map(|(k, _)| net.node_flops[k])
            .sum();
        assert_eq!(p, 1.0 - executed / profile.total_flops);
    }

    #[test]
    fn equal_scores_at_threshold_are_kept() {
        let (net, profile) = setup();
        let scores = vec![0.5; net.node_count()];
        let (gate, _) = apply_threshold(&scores, 0.5, &net, &profile).unwrap();
        assert_eq!(gate.kept(), net.node_count());
    }

    #[test]
    fn target_zero_returns_all_keep_immediately() {
        let (net, profile) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..net.node_count()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let out = bisect_threshold(&scores, &PruneRequest::new(0.0), &net, &profile).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.achieved_ratio, 0.0);
        assert_eq!(out.gate.kept(), net.node_count());
        assert!(!out.best_achievable);
    }

    #[test]
    fn bisection_hits_reachable_targets_within_tolerance() {
        let (net, profile) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let scores: Vec<f64> =
                (0..net.node_count()).map(|_| rng.gen_range(0.0..1.0)).collect();
            for target in [0.3, 0.5, 0.7] {
                let out =
                    bisect_threshold(&scores, &PruneRequest::new(target), &net, &profile).unwrap();
                net.validate_gate(&out.gate).unwrap();
                if !out.best_achievable {
                    assert!(
                        (out.achieved_ratio - target).abs() < DEFAULT_TOLERANCE,
                        "trial {trial} target {target}: got {}",
                        out.achieved_ratio
                    );
                }
            }
        }
    }

    #[test]
    fn unreachable_target_sets_best_achievable() {
        let (net, profile) = setup();
        // All scores high: only the all-keep plateau and the full-prune
        // plateau exist; a mid target cannot be met.
        let scores = vec![0.99; net.node_count()];
        let out = bisect_threshold(&scores, &PruneRequest::new(0.5), &net, &profile).unwrap();
        assert!(out.best_achievable);
        assert_eq!(out.iterations, DEFAULT_MAX_ITERATIONS);
        net.validate_gate(&out.gate).unwrap();
    }

    #[test]
    fn achieved_ratio_is_monotone_in_theta() {
        let (net, profile) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let scores: Vec<f64> =
                (0..net.node_count()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut prev = -1.0;
            for i in 0..64 {
                let theta = i as f64 / 63.0;
                let (_, p) = apply_threshold(&scores, theta, &net, &profile).unwrap();
                assert!(p >= prev, "p*({theta}) = {p} dropped below {prev}");
                prev = p;
            }
        }
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(PruneRequest::new(1.0).validate().is_err());
        assert!(PruneRequest::new(-0.1).validate().is_err());
        let mut r = PruneRequest::new(0.5);
        r.tolerance = 0.0;
        assert!(r.validate().is_err());
    }
}
