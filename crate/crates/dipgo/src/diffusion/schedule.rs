//! Linear beta schedule and the closed-form forward diffusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The beta/alpha/alpha-bar sequences driving both diffusion directions.
///
/// Index `t - 1` holds the values for timestep `t` (timesteps are 1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// alpha-bar extended with the convention alpha_bar(0) = 1.
    pub fn alpha_bar_or_one(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::TimestepRange { t, max: self.t_max });
        }
        Ok(())
    }
}

/// Builds a linear beta schedule from `beta_start` to `beta_end` over `t_max`
/// steps and derives the alpha products.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Schedule("need at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "beta endpoints must lie strictly inside (0,1), got [{beta_start}, {beta_end}]"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::Schedule(format!(
            "beta must be non-decreasing, got start {beta_start} > end {beta_end}"
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    for i in 0..t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            i as f64 / (t_max - 1) as f64
        };
        betas.push(beta_start + frac * (beta_end - beta_start));
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        t_max,
        betas,
        alphas,
        alpha_bars,
    })
}

/// Closed-form forward diffusion: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
pub fn forward_diffuse(
    x0: &[f64],
    t: usize,
    noise: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check_timestep(t)?;
    if x0.len() != noise.len() {
        return Err(Error::Shape {
            expected: format!("{}", x0.len()),
            got: format!("{}", noise.len()),
        });
    }
    let ab = schedule.alpha_bar(t);
    let signal = ab.sqrt();
    let sigma = (1.0 - ab).sqrt();
    Ok(x0
        .iter()
        .zip(noise)
        .map(|(x, n)| signal * x + sigma * n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_step_alpha_bar() {
        let s = make_schedule(1, 1e-4, 1e-4).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
    }

    #[test]
    fn alpha_bar_matches_running_product_oracle() {
        let s = make_schedule(20, 1e-4, 0.05).unwrap();
        // Independent loop oracle over the published betas.
        let mut prod = 1.0;
        for t in 1..=20 {
            prod *= 1.0 - s.beta(t);
        }
        assert!((s.alpha_bar(20) - prod).abs() < 1e-15);
    }

    #[test]
    fn construction_invariants_hold() {
        for (t_max, b0, b1) in [(1, 0.3, 0.3), (5, 1e-4, 0.02), (50, 1e-3, 0.2)] {
            let s = make_schedule(t_max, b0, b1).unwrap();
            for w in s.betas.windows(2) {
                assert!(w[0] <= w[1], "betas must be non-decreasing");
            }
            for w in s.alpha_bars.windows(2) {
                assert!(w[1] < w[0], "alpha_bars must be strictly decreasing");
            }
            for (i, b) in s.betas.iter().enumerate() {
                assert!(*b > 0.0 && *b < 1.0);
                let prev = if i == 0 { 1.0 } else { s.alpha_bars[i - 1] };
                assert!((s.alpha_bars[i] - s.alphas[i] * prev).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(5, 0.2, 0.1).is_err());
        assert!(make_schedule(5, 0.0, 0.1).is_err());
        assert!(make_schedule(5, 0.1, 1.0).is_err());
        assert!(make_schedule(5, -0.1, 0.5).is_err());
    }

    #[test]
    fn zero_noise_scales_signal_exactly() {
        let s = make_schedule(10, 1e-4, 0.05).unwrap();
        let x0 = vec![1.0, -2.0, 0.5];
        let noise = vec![0.0; 3];
        let xt = forward_diffuse(&x0, 7, &noise, &s).unwrap();
        let c = s.alpha_bar(7).sqrt();
        for (a, b) in xt.iter().zip(&x0) {
            assert_eq!(*a, c * b);
        }
    }

    #[test]
    fn unit_alpha_bar_is_identity() {
        // Hand-built schedule with abar = 1 exactly; noise must not leak in.
        let s = NoiseSchedule {
            t_max: 1,
            betas: vec![0.1],
            alphas: vec![0.9],
            alpha_bars: vec![1.0],
        };
        let x0 = vec![0.25, -0.75];
        let noise = vec![3.0, -4.0];
        let xt = forward_diffuse(&x0, 1, &noise, &s).unwrap();
        assert_eq!(xt, x0);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_timestep() {
        let s = make_schedule(4, 1e-4, 0.05).unwrap();
        assert!(forward_diffuse(&[1.0], 1, &[0.0, 0.0], &s).is_err());
        assert!(forward_diffuse(&[1.0], 0, &[0.0], &s).is_err());
        assert!(forward_diffuse(&[1.0], 5, &[0.0], &s).is_err());
    }

    #[test]
    fn monte_carlo_variance_matches_one_minus_alpha_bar() {
        let s = make_schedule(20, 1e-4, 0.05).unwrap();
        let t = 15;
        let x0 = vec![0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..draws {
            let n: f64 = rng.sample(StandardNormal);
            let xt = forward_diffuse(&x0, t, &[n], &s).unwrap();
            let resid = xt[0] - s.alpha_bar(t).sqrt() * x0[0];
            sum += resid;
            sumsq += resid * resid;
        }
        let mean = sum / draws as f64;
        let var = sumsq / draws as f64 - mean * mean;
        let expected = 1.0 - s.alpha_bar(t);
        assert!(
            (var - expected).abs() / expected < 0.05,
            "sample variance {var} vs expected {expected}"
        );
    }

    #[test]
    fn closed_form_matches_iterated_single_steps() {
        // Compose per-step transitions with matched noise and compare to the
        // alpha-bar form via the recursively accumulated effective noise.
        let s = make_schedule(12, 1e-3, 0.08).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 8;
        let x0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = x0.clone();
        let mut eff_noise = vec![0.0; dim];
        let mut prev_ab = 1.0;
        for t in 1..=s.t_max {
            let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let b = s.beta(t);
            for i in 0..dim {
                x[i] = (1.0 - b).sqrt() * x[i] + b.sqrt() * eps[i];
            }
            let ab = s.alpha_bar(t);
            let carry = (s.alphas[t - 1] * (1.0 - prev_ab)).sqrt();
            let denom = (1.0 - ab).sqrt();
            for i in 0..dim {
                eff_noise[i] = (carry * eff_noise[i] + b.sqrt() * eps[i]) / denom;
            }
            prev_ab = ab;
            let closed: Vec<f64> = x0
                .iter()
                .zip(&eff_noise)
                .map(|(x0i, n)| ab.sqrt() * x0i + denom * n)
                .collect();
            for i in 0..dim {
                let rel = (x[i] - closed[i]).abs() / x[i].abs().max(1e-6);
                assert!(rel < 1e-5, "t={t} i={i}: iterated {} closed {}", x[i], closed[i]);
            }
        }
    }
}
