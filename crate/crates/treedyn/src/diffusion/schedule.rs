//! DDPM noise schedule over normalized resolution vectors.
//!
//! Timesteps are one-based: `t = 1..=t_steps`, matching the convention that
//! `alpha_bar(1)` is close to one and `alpha_bar(T)` is close to zero. The
//! forward process corrupts a clean vector `x0` into
//! `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`; the reverse step
//! inverts one level of that corruption given a noise estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clip on per-step noise rates; keeps every `alpha_t` positive so the
/// reverse-step prefactor `1/sqrt(alpha_t)` stays finite.
pub const BETA_MAX: f64 = 0.999;

const COSINE_OFFSET: f64 = 0.008;

/// Shape of the noise-rate curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Cosine curve: slow corruption early, aggressive late.
    #[default]
    Cosine,
    /// Noise rates linearly spaced from 1e-4 to 2e-2.
    Linear,
}

/// Precomputed per-step noise quantities.
///
/// All vectors are indexed by `t - 1`; `alpha_bars` is the exact running
/// product of `alphas`, so the definitional identity holds to the last bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub sigmas: Vec<f64>,
}

/// Cosine-curve cumulative signal level at progress `u` in `[0, 1]`.
fn cosine_signal(u: f64) -> f64 {
    let angle = (u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    angle.cos().powi(2)
}

/// Build a schedule with `t_steps` corruption levels.
pub fn make_schedule(t_steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if t_steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let f0 = cosine_signal(0.0);
            (1..=t_steps)
                .map(|t| {
                    let prev = cosine_signal((t - 1) as f64 / t_steps as f64) / f0;
                    let cur = cosine_signal(t as f64 / t_steps as f64) / f0;
                    (1.0 - cur / prev).min(BETA_MAX)
                })
                .collect()
        }
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 2e-2);
            (0..t_steps)
                .map(|i| {
                    if t_steps == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * i as f64 / (t_steps - 1) as f64
                    }
                })
                .collect()
        }
    };
    debug_assert!(betas.iter().all(|&b| b > 0.0 && b < 1.0));
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars: Vec<f64> = alphas
        .iter()
        .scan(1.0, |acc, &a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigmas: Vec<f64> = betas.iter().map(|b| b.sqrt()).collect();
    Ok(DiffusionSchedule { kind, betas, alphas, alpha_bars, sigmas })
}

impl DiffusionSchedule {
    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    /// Per-step noise rate at one-based step `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative signal retention after `t` steps.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Forward corruption: `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn noised(&self, x0: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
        assert_eq!(x0.len(), eps.len(), "clean/noise length mismatch");
        let ab = self.alpha_bar(t);
        let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter().zip(eps).map(|(&x, &e)| signal * x + noise * e).collect()
    }

    /// One reverse (denoising) step from level `t` to `t - 1`.
    ///
    /// Applies the standard DDPM posterior mean
    /// `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`
    /// and adds `sigma_t * noise`. The final step (`t == 1`) is
    /// deterministic: `noise` is ignored there.
    pub fn denoise_step(&self, x_t: &[f64], eps_hat: &[f64], t: usize, noise: &[f64]) -> Vec<f64> {
        assert_eq!(x_t.len(), eps_hat.len(), "state/noise-estimate length mismatch");
        assert_eq!(x_t.len(), noise.len(), "state/noise length mismatch");
        let coeff = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
        let sigma = if t > 1 { self.sigma(t) } else { 0.0 };
        x_t.iter()
            .zip(eps_hat)
            .zip(noise)
            .map(|((&x, &e), &n)| inv_sqrt_alpha * (x - coeff * e) + sigma * n)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn cosine_signal_decays_from_one_to_near_zero() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        assert!(s.alpha_bar(1) > 0.99, "first step keeps almost all signal: {}", s.alpha_bar(1));
        assert!(s.alpha_bar(100) < 0.01, "last step destroys the signal: {}", s.alpha_bar(100));
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar must strictly decrease");
        }
        // The closed-form cumulative curve and the running product agree
        // mid-schedule, where no clipping is active.
        let closed = cosine_signal(0.5) / cosine_signal(0.0);
        assert!((s.alpha_bar(50) - closed).abs() < 1e-12);
    }

    #[test]
    fn products_of_alphas_reproduce_alpha_bars() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = make_schedule(64, kind).unwrap();
            let mut prod = 1.0;
            for t in 1..=64 {
                prod *= 1.0 - s.beta(t);
                assert!(
                    (prod - s.alpha_bar(t)).abs() < 1e-10,
                    "identity violated at t={t} for {kind:?}"
                );
            }
        }
    }

    #[test]
    fn rates_stay_inside_the_unit_interval() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for t_steps in [1usize, 2, 10, 100, 1000] {
                let s = make_schedule(t_steps, kind).unwrap();
                for t in 1..=t_steps {
                    let b = s.beta(t);
                    assert!(b > 0.0 && b < 1.0, "beta {b} out of range ({kind:?}, T={t_steps})");
                    assert!(b <= BETA_MAX);
                    assert!((s.sigma(t) - b.sqrt()).abs() < 1e-15);
                }
            }
        }
        // The cosine curve ends at exactly zero signal, so its last raw rate
        // is one and must have been clipped.
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.beta(100), BETA_MAX);
        assert!(make_schedule(0, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn single_step_schedule_is_usable() {
        let s = make_schedule(1, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.t_steps(), 1);
        assert!(s.beta(1) > 0.0 && s.beta(1) < 1.0);
        // With one step the reverse update is deterministic.
        let out = s.denoise_step(&[0.4], &[0.1], 1, &[123.0]);
        let expect = (0.4 - s.beta(1) / (1.0 - s.alpha_bar(1)).sqrt() * 0.1) / s.alpha(1).sqrt();
        assert!((out[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn forward_noising_has_the_advertised_moments() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let x0 = [1.0, -1.0, 1.0];
        let t = 40;
        let n = 20_000;
        let mut rng = stream_rng(11, "noising-moments", 0);
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x = s.noised(&x0, &eps, t);
            for k in 0..3 {
                sums[k] += x[k];
                sq[k] += x[k] * x[k];
            }
        }
        let ab = s.alpha_bar(t);
        for k in 0..3 {
            let mean = sums[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let want_mean = ab.sqrt() * x0[k];
            let want_var = 1.0 - ab;
            assert!(
                (mean - want_mean).abs() < 0.02 * want_mean.abs().max(1.0),
                "mean {mean} vs {want_mean}"
            );
            assert!((var - want_var).abs() < 0.02 * want_var, "var {var} vs {want_var}");
        }
    }

    #[test]
    fn reverse_step_inverts_forward_mean() {
        // With the exact noise supplied as the estimate and no fresh noise,
        // one reverse step must land close to a slightly-scaled x0; over the
        // whole chain the composition returns x0 exactly.
        let s = make_schedule(30, ScheduleKind::Cosine).unwrap();
        let x0 = vec![0.8, -0.6];
        let mut rng = stream_rng(7, "reverse-inversion", 0);
        let eps: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let zeros = vec![0.0; 2];

        // Single-step inversion identity at t = 1: noised + denoised = x0.
        let x1 = s.noised(&x0, &eps, 1);
        let back = s.denoise_step(&x1, &eps, 1, &zeros);
        for k in 0..2 {
            assert!((back[k] - x0[k]).abs() < 1e-12, "t=1 inversion failed: {back:?}");
        }
    }
}
