//! Noise schedules and the shared diffusion mechanics: forward noising,
//! deterministic DDIM partial reconstruction, and stochastic ancestral
//! sampling.
//!
//! Timesteps are training indices `t in [0, t_train]` with `t = 0` meaning
//! clean data. Inference runs on a strictly increasing sub-grid of training
//! indices; public entry points that talk about "grid positions" translate
//! through [`NoiseSchedule::inference_grid`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::{stage, substream};

/// The beta / alpha-bar / posterior-sigma arrays defining the forward
/// diffusion plus the DDIM inference sub-grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Number of training timesteps T.
    pub t_train: usize,
    /// Variance increments; `betas[i]` is beta at timestep `i + 1`.
    pub betas: Vec<f64>,
    /// Cumulative products; `alpha_bars[t]` with `alpha_bars[0] = 1`.
    pub alpha_bars: Vec<f64>,
    /// Posterior standard deviations; `posterior_sigmas[i]` is sigma at
    /// timestep `i + 1`. sigma_1 = 0 by construction.
    pub posterior_sigmas: Vec<f64>,
    /// Strictly increasing training indices used for DDIM inference.
    pub inference_grid: Vec<usize>,
}

/// Linear-beta schedule with an evenly spaced inference grid.
pub fn linear_schedule(
    t_train: usize,
    beta_start: f64,
    beta_end: f64,
    t_infer: usize,
) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(Error::InvalidArgument("t_train must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta endpoints must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    if t_infer == 0 || t_infer > t_train {
        return Err(Error::InvalidArgument(format!(
            "t_infer must be in [1, t_train], got {t_infer} with t_train {t_train}"
        )));
    }

    let mut betas = Vec::with_capacity(t_train);
    for i in 0..t_train {
        let frac = if t_train == 1 { 0.0 } else { i as f64 / (t_train - 1) as f64 };
        betas.push(beta_start + (beta_end - beta_start) * frac);
    }

    let mut alpha_bars = Vec::with_capacity(t_train + 1);
    alpha_bars.push(1.0);
    for &b in &betas {
        let next = alpha_bars.last().unwrap() * (1.0 - b);
        alpha_bars.push(next);
    }

    let mut posterior_sigmas = Vec::with_capacity(t_train);
    for t in 1..=t_train {
        let var = betas[t - 1] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]);
        posterior_sigmas.push(var.sqrt());
    }

    // Evenly spaced over [1, t_train]; spacing >= 1 keeps it strictly
    // increasing. A single inference step starts from full noise.
    let inference_grid: Vec<usize> = if t_infer == 1 {
        vec![t_train]
    } else {
        (0..t_infer)
            .map(|i| {
                let x = 1.0 + i as f64 * (t_train - 1) as f64 / (t_infer - 1) as f64;
                x.round() as usize
            })
            .collect()
    };
    debug_assert!(inference_grid.windows(2).all(|w| w[0] < w[1]));

    Ok(NoiseSchedule { t_train, betas, alpha_bars, posterior_sigmas, inference_grid })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn posterior_sigma(&self, t: usize) -> f64 {
        self.posterior_sigmas[t - 1]
    }

    /// Position of training index `t` on the inference grid, if any.
    pub fn grid_position(&self, t: usize) -> Option<usize> {
        self.inference_grid.binary_search(&t).ok()
    }

    pub fn validate_timestep(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.t_train {
            return Err(Error::TimestepRange { t, lo, hi: self.t_train });
        }
        Ok(())
    }
}

/// SNR(t) = alpha_bar / (1 - alpha_bar). Rejects t = 0 where it is infinite.
pub fn snr(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    schedule.validate_timestep(t, 1)?;
    let a = schedule.alpha_bar(t);
    Ok(a / (1.0 - a))
}

/// Inverse of the SNR boundary algebra: the alpha-bar with snr = gamma.
pub fn alpha_bar_for_snr(gamma: f64) -> f64 {
    gamma / (1.0 + gamma)
}

/// x_t = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps. `t = 0` returns x0.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::DimensionMismatch { expected: x0.len(), got: eps.len() });
    }
    schedule.validate_timestep(t, 0)?;
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect())
}

/// One deterministic DDIM update from `t_cur` down to `t_prev`:
/// reconstructs x0_hat from the noise prediction, then re-noises it to
/// the target level reusing the same prediction as the direction term.
pub fn ddim_step(
    x_t: &[f64],
    t_cur: usize,
    t_prev: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t_prev >= t_cur {
        return Err(Error::InvalidArgument(format!(
            "ddim_step requires t_prev < t_cur, got {t_prev} >= {t_cur}"
        )));
    }
    schedule.validate_timestep(t_cur, 1)?;
    if x_t.len() != eps_hat.len() {
        return Err(Error::DimensionMismatch { expected: x_t.len(), got: eps_hat.len() });
    }
    let a_cur = schedule.alpha_bar(t_cur);
    let a_prev = schedule.alpha_bar(t_prev);
    let (sac, snc) = (a_cur.sqrt(), (1.0 - a_cur).sqrt());
    let (sap, snp) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let x0_hat = (x - snc * e) / sac;
            sap * x0_hat + snp * e
        })
        .collect())
}

/// Walks the inference grid downward from `t` to 0 applying [`ddim_step`]
/// with the denoiser's prediction at each sub-step. `t` must be a grid
/// member.
pub fn ddim_reconstruct(
    x_t: &[f64],
    t: usize,
    class: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let pos = schedule.grid_position(t).ok_or(Error::OffGrid { t })?;
    if denoiser.dim() != x_t.len() {
        return Err(Error::DimensionMismatch { expected: x_t.len(), got: denoiser.dim() });
    }
    let mut x = x_t.to_vec();
    let mut eps_hat = vec![0.0; x_t.len()];
    for i in (0..=pos).rev() {
        let s = schedule.inference_grid[i];
        let s_prev = if i == 0 { 0 } else { schedule.inference_grid[i - 1] };
        denoiser.predict_into(&x, s, class, &mut eps_hat);
        x = ddim_step(&x, s, s_prev, &eps_hat, schedule)?;
    }
    Ok(x)
}

/// Ancestral sampling: draws x_T ~ N(0, I) and applies the stochastic
/// reverse update with the schedule's posterior sigmas down to t = 0.
///
/// The update is the sigma-parameterized family
/// `x_{t-1} = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps_hat + sigma z`,
/// which reduces to the DDPM posterior at sigma = posterior sigma and to
/// the deterministic DDIM map at sigma = 0.
pub fn ddpm_sample(
    class: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Vec<f64> {
    let d = denoiser.dim();
    let mut rng = substream(seed, &[stage::SAMPLER, class as u64]);
    let mut x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut eps_hat = vec![0.0; d];
    for t in (1..=schedule.t_train).rev() {
        denoiser.predict_into(&x, t, class, &mut eps_hat);
        let a_cur = schedule.alpha_bar(t);
        let a_prev = schedule.alpha_bar(t - 1);
        let sigma = schedule.posterior_sigma(t);
        let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
        let (sac, snc) = (a_cur.sqrt(), (1.0 - a_cur).sqrt());
        for i in 0..d {
            let x0_hat = (x[i] - snc * eps_hat[i]) / sac;
            let z: f64 = rng.sample(StandardNormal);
            x[i] = a_prev.sqrt() * x0_hat + dir * eps_hat[i] + sigma * z;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy() -> NoiseSchedule {
        linear_schedule(2, 0.1, 0.2, 2).unwrap()
    }

    #[test]
    fn toy_schedule_products() {
        let s = toy();
        assert_eq!(s.betas, vec![0.1, 0.2]);
        assert_abs_diff_eq!(s.alpha_bars[0], 1.0);
        assert_abs_diff_eq!(s.alpha_bars[1], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bars[2], 0.72, epsilon = 1e-15);
        assert_eq!(s.inference_grid, vec![1, 2]);
    }

    #[test]
    fn constant_beta_power_law() {
        let s = linear_schedule(20, 0.05, 0.05, 20).unwrap();
        for t in 0..=20 {
            assert_abs_diff_eq!(s.alpha_bars[t], 0.95_f64.powi(t as i32), epsilon = 1e-13);
        }
    }

    #[test]
    fn default_schedule_invariants() {
        let s = linear_schedule(1000, 1e-4, 0.02, 50).unwrap();
        assert_eq!(s.alpha_bars.len(), 1001);
        assert_eq!(s.inference_grid.len(), 50);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a <= 1.0));
        for t in 1..=1000usize {
            let expect = s.alpha_bars[t - 1] * (1.0 - s.beta(t));
            assert_abs_diff_eq!(s.alpha_bars[t], expect, epsilon = 1e-15);
        }
        assert!(s.alpha_bars[1000] < 1e-4);
        assert!(s.inference_grid.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*s.inference_grid.first().unwrap(), 1);
        assert_eq!(*s.inference_grid.last().unwrap(), 1000);
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(linear_schedule(10, 0.2, 0.1, 5).is_err());
        assert!(linear_schedule(10, 0.0, 0.1, 5).is_err());
        assert!(linear_schedule(10, 0.1, 1.0, 5).is_err());
        assert!(linear_schedule(10, 0.1, 0.2, 11).is_err());
        assert!(linear_schedule(10, 0.1, 0.2, 0).is_err());
    }

    #[test]
    fn snr_values() {
        let s = toy();
        assert_abs_diff_eq!(snr(&s, 1).unwrap(), 9.0, epsilon = 1e-12);
        assert!(snr(&s, 0).is_err());
        // snr strictly decreasing
        assert!(snr(&s, 2).unwrap() < snr(&s, 1).unwrap());
        // ratio identities
        assert_abs_diff_eq!(alpha_bar_for_snr(1.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(alpha_bar_for_snr(0.05), 0.05 / 1.05, epsilon = 1e-15);
    }

    #[test]
    fn forward_noise_cases() {
        let s = toy();
        let x0 = [1.0, 0.0];
        let zero = [0.0, 0.0];
        let e = [0.0, 1.0];
        let a = forward_noise(&x0, 2, &zero, &s).unwrap();
        assert_abs_diff_eq!(a[0], 0.72_f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], 0.0);
        let b = forward_noise(&zero, 2, &e, &s).unwrap();
        assert_abs_diff_eq!(b[1], 0.28_f64.sqrt(), epsilon = 1e-15);
        let c = forward_noise(&x0, 2, &e, &s).unwrap();
        assert_abs_diff_eq!(c[0], 0.8485, epsilon = 5e-4);
        assert_abs_diff_eq!(c[1], 0.5292, epsilon = 5e-4);
        // t = 0 is exact identity
        assert_eq!(forward_noise(&x0, 0, &e, &s).unwrap(), x0.to_vec());
        assert!(forward_noise(&x0, 1, &[0.0], &s).is_err());
    }

    #[test]
    fn ddim_step_inversion_identity() {
        let s = linear_schedule(100, 1e-3, 0.05, 10).unwrap();
        let x0 = [0.3, -1.2, 2.0];
        let e = [0.5, -0.25, 1.5];
        let x_t = forward_noise(&x0, 80, &e, &s).unwrap();
        let down = ddim_step(&x_t, 80, 40, &e, &s).unwrap();
        let expect = forward_noise(&x0, 40, &e, &s).unwrap();
        for (a, b) in down.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // t_prev = 0 with the true noise recovers x0 exactly
        let back = ddim_step(&x_t, 80, 0, &e, &s).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // eps_hat = 0 rescales by sqrt(ab_prev / ab_cur)
        let scaled = ddim_step(&x_t, 80, 40, &[0.0; 3], &s).unwrap();
        let ratio = (s.alpha_bar(40) / s.alpha_bar(80)).sqrt();
        for (a, b) in scaled.iter().zip(&x_t) {
            assert_abs_diff_eq!(*a, ratio * b, epsilon = 1e-12);
        }
        assert!(ddim_step(&x_t, 40, 80, &e, &s).is_err());
    }
}
