//! Class-wise reconstruction-timestep selection.
//!
//! Candidates are inference-grid timesteps whose SNR lies in
//! [gamma_min, gamma_max]. For each class, B samples are drawn and the
//! absolute finite-difference of the diffusion-classifier log-probability
//! is averaged per candidate; the argmax wins, ties going to the smaller
//! timestep. Noise draws are paired across classes and across the t-dt /
//! t+dt evaluations — pure variance reduction, no change in expectation.

use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::gmm::LabeledDataset;
use crate::rng::{derive_seed, stage, substream};
use crate::schedule::{forward_noise, snr, NoiseSchedule};

/// Selector hyperparameters. Defaults are B = 20, 20 noise groups,
/// a one-step finite difference, and the SNR window [0.05, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorParams {
    pub b: usize,
    pub num_eps: usize,
    pub delta_t: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for SelectorParams {
    fn default() -> Self {
        Self { b: 20, num_eps: 20, delta_t: 1, gamma_min: 0.05, gamma_max: 1.0 }
    }
}

/// One class's derivative-proxy curve over the feasible grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCurve {
    pub class: usize,
    /// (training timestep, mean |finite difference|) pairs, ascending t.
    pub points: Vec<(usize, f64)>,
}

/// Per-class optimal timesteps with the evidence that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepSelection {
    /// `t_star[c]` is the selected training-index timestep for class c.
    pub t_star: Vec<usize>,
    /// Grid positions of `t_star` on the inference grid.
    pub t_star_grid_pos: Vec<usize>,
    pub feasible_set: Vec<usize>,
    pub curves: Vec<DerivativeCurve>,
    pub params: SelectorParams,
}

impl TimestepSelection {
    pub fn timestep_for(&self, class: usize) -> Option<usize> {
        self.t_star.get(class).copied().filter(|&t| t != usize::MAX)
    }

    /// Same fixed timestep for every class (grid-search override path).
    pub fn fixed(t: usize, num_classes: usize, schedule: &NoiseSchedule) -> Result<Self> {
        let classes: Vec<usize> = (0..num_classes).collect();
        Self::fixed_for_classes(t, &classes, schedule)
    }

    /// Fixed timestep for the listed classes only; others stay unset.
    pub fn fixed_for_classes(t: usize, classes: &[usize], schedule: &NoiseSchedule) -> Result<Self> {
        let pos = if t == 0 { 0 } else { schedule.grid_position(t).ok_or(Error::OffGrid { t })? };
        let max_class = classes.iter().copied().max().unwrap_or(0);
        let mut t_star = vec![usize::MAX; max_class + 1];
        let mut t_star_grid_pos = vec![usize::MAX; max_class + 1];
        for &c in classes {
            t_star[c] = t;
            t_star_grid_pos[c] = pos;
        }
        Ok(Self {
            t_star,
            t_star_grid_pos,
            feasible_set: vec![t],
            curves: Vec::new(),
            params: SelectorParams::default(),
        })
    }
}

/// Grid timesteps whose SNR lies in [gamma_min, gamma_max], ascending.
pub fn feasible_timesteps(
    schedule: &NoiseSchedule,
    gamma_min: f64,
    gamma_max: f64,
) -> Result<Vec<usize>> {
    if !(gamma_min > 0.0 && gamma_min < gamma_max) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < gamma_min < gamma_max, got [{gamma_min}, {gamma_max}]"
        )));
    }
    let set: Vec<usize> = schedule
        .inference_grid
        .iter()
        .copied()
        .filter(|&t| {
            let s = snr(schedule, t).expect("grid timesteps are >= 1");
            s >= gamma_min && s <= gamma_max
        })
        .collect();
    if set.is_empty() {
        return Err(Error::EmptyFeasibleSet { gamma_min, gamma_max });
    }
    Ok(set)
}

/// Diffusion-classifier log class probabilities for a clean sample at
/// noise level `t`.
///
/// Each of the `num_eps` draws noises `x0` to `x_t` and measures every
/// class denoiser's prediction error against the injected noise; the
/// per-class mean errors are negated and log-softmaxed. The same draws are
/// used across classes, and the draws depend only on (seed, draw index) so
/// evaluations at different `t` under one seed are paired.
pub fn diffusion_classifier_logprob(
    x0: &[f64],
    t: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    num_eps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if num_eps == 0 {
        return Err(Error::InvalidArgument("num_eps must be >= 1".into()));
    }
    schedule.validate_timestep(t, 1)?;
    let c = denoiser.num_classes();
    let d = x0.len();
    let mut mean_err = vec![0.0; c];
    let mut pred = vec![0.0; d];
    for j in 0..num_eps {
        let mut rng = substream(seed, &[stage::SELECTOR, j as u64]);
        let eps: Vec<f64> =
            (0..d).map(|_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal)).collect();
        let x_t = forward_noise(x0, t, &eps, schedule)?;
        for (cls, me) in mean_err.iter_mut().enumerate() {
            denoiser.predict_into(&x_t, t, cls, &mut pred);
            let err: f64 = eps.iter().zip(&pred).map(|(e, p)| (e - p) * (e - p)).sum();
            *me += err / num_eps as f64;
        }
    }
    // log-softmax of negated mean errors
    let neg: Vec<f64> = mean_err.iter().map(|e| -e).collect();
    let m = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + neg.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(neg.iter().map(|v| v - lse).collect())
}

/// Mean absolute central difference of the classifier log-probability of
/// the true class, over a batch of (x0, class) samples.
///
/// Per-sample noise streams are keyed by the sample index, shared between
/// the t-dt and t+dt evaluations.
pub fn mi_derivative_proxy(
    samples: &[(&[f64], usize)],
    t: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    num_eps: usize,
    delta_t: usize,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("proxy needs at least one sample".into()));
    }
    if delta_t == 0 {
        return Err(Error::InvalidArgument("delta_t must be >= 1".into()));
    }
    if t < 1 + delta_t || t + delta_t > schedule.t_train {
        return Err(Error::TimestepRange {
            t,
            lo: 1 + delta_t,
            hi: schedule.t_train - delta_t,
        });
    }
    let mut total = 0.0;
    for (i, &(x0, class)) in samples.iter().enumerate() {
        let pair_seed = derive_seed(seed, &[stage::SELECTOR, 0xf00d, i as u64]);
        let lp_hi =
            diffusion_classifier_logprob(x0, t + delta_t, denoiser, schedule, num_eps, pair_seed)?;
        let lp_lo =
            diffusion_classifier_logprob(x0, t - delta_t, denoiser, schedule, num_eps, pair_seed)?;
        total += ((lp_hi[class] - lp_lo[class]) / (2.0 * delta_t as f64)).abs();
    }
    Ok(total / samples.len() as f64)
}

/// Runs the selector: per class, B seeded sample draws (all samples if the
/// class has fewer), the proxy at every feasible grid timestep, argmax with
/// ties toward the smaller timestep. Curves are retained for reporting.
pub fn select_timesteps(
    dataset: &LabeledDataset,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    params: &SelectorParams,
    seed: u64,
) -> Result<TimestepSelection> {
    let feasible = feasible_timesteps(schedule, params.gamma_min, params.gamma_max)?;
    let by_class = dataset.ids_by_class();
    let num_classes = dataset.num_classes;

    let mut t_star = vec![usize::MAX; num_classes];
    let mut t_star_grid_pos = vec![usize::MAX; num_classes];
    let mut curves = Vec::with_capacity(num_classes);

    for (class, ids) in by_class.iter().enumerate() {
        if ids.is_empty() {
            curves.push(DerivativeCurve { class, points: Vec::new() });
            continue;
        }
        // seeded draw of B sample ids (partial Fisher-Yates)
        let mut pool = ids.clone();
        let take = params.b.min(pool.len());
        let mut rng = substream(seed, &[stage::SELECTOR, 0xbeef, class as u64]);
        for i in 0..take {
            let j = i + rand::Rng::gen_range(&mut rng, 0..pool.len() - i);
            pool.swap(i, j);
        }
        let chosen: Vec<(&[f64], usize)> = pool[..take]
            .iter()
            .map(|&id| {
                let rec = dataset.record(id).expect("ids come from the dataset");
                (rec.features.as_slice(), rec.label)
            })
            .collect();

        let points: Vec<(usize, f64)> = feasible
            .par_iter()
            .map(|&t| {
                let v = mi_derivative_proxy(
                    &chosen,
                    t,
                    denoiser,
                    schedule,
                    params.num_eps,
                    params.delta_t,
                    derive_seed(seed, &[stage::SELECTOR, class as u64, t as u64]),
                )?;
                Ok((t, v))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut best = points[0];
        for &(t, v) in &points[1..] {
            if v > best.1 {
                best = (t, v);
            }
        }
        t_star[class] = best.0;
        t_star_grid_pos[class] = schedule.grid_position(best.0).expect("feasible t is on grid");
        curves.push(DerivativeCurve { class, points });
    }

    Ok(TimestepSelection { t_star, t_star_grid_pos, feasible_set: feasible, curves, params: *params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{analytic_denoiser, preset, sample_dataset, GmmWorld};
    use crate::schedule::{alpha_bar_for_snr, linear_schedule};

    fn default_schedule() -> NoiseSchedule {
        linear_schedule(1000, 1e-4, 0.02, 50).unwrap()
    }

    #[test]
    fn feasible_set_boundaries() {
        let s = default_schedule();
        let set = feasible_timesteps(&s, 0.05, 1.0).unwrap();
        assert!(!set.is_empty());
        assert!(set.windows(2).all(|w| w[0] < w[1]));
        // gamma_max = 1 excludes every t with alpha_bar > 0.5
        for &t in &set {
            assert!(s.alpha_bar(t) <= alpha_bar_for_snr(1.0) + 1e-12);
            assert!(s.alpha_bar(t) >= alpha_bar_for_snr(0.05) - 1e-12);
        }
        for &t in &s.inference_grid {
            if s.alpha_bar(t) > 0.5 {
                assert!(!set.contains(&t));
            }
        }
        // widening the window never shrinks the set
        let wider = feasible_timesteps(&s, 0.01, 2.0).unwrap();
        assert!(set.iter().all(|t| wider.contains(t)));
        assert!(wider.len() >= set.len());

        assert!(feasible_timesteps(&s, 0.0, 1.0).is_err());
        assert!(feasible_timesteps(&s, 1.0, 0.5).is_err());
        // a window out in un-reachable SNR territory is empty
        assert!(matches!(
            feasible_timesteps(&s, 1e6, 2e6),
            Err(Error::EmptyFeasibleSet { .. })
        ));
    }

    #[test]
    fn classifier_symmetry_and_confidence() {
        let s = default_schedule();
        let wp = preset("w2").unwrap();
        let den = analytic_denoiser(&wp.world, &s).unwrap();

        // midpoint of a mirror-symmetric world: probabilities match within
        // paired-noise tolerance
        let lp = diffusion_classifier_logprob(&[0.0, 0.0], 300, &den, &s, 20, 3).unwrap();
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        assert!((p[0] - p[1]).abs() < 0.05, "p = {p:?}");
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);

        // class mean at high SNR: true class wins nearly always
        let t_low = s.inference_grid[2]; // high SNR
        let mut wins = 0;
        for trial in 0..100u64 {
            let lp =
                diffusion_classifier_logprob(&[-2.0, 0.0], t_low, &den, &s, 20, trial).unwrap();
            if lp[0] > lp[1] {
                wins += 1;
            }
        }
        assert!(wins >= 95, "class-0 wins {wins}/100");

        // full-noise regime: probabilities near uniform
        let lp = diffusion_classifier_logprob(&[-2.0, 0.0], 1000, &den, &s, 20, 5).unwrap();
        for v in &lp {
            assert!((v - (0.5f64).ln()).abs() < 0.1, "logp {lp:?}");
        }
    }

    #[test]
    fn proxy_degenerate_and_low_noise_cases() {
        let s = default_schedule();
        // single-class world: log p(c|x) = 0 identically, proxy = 0
        let w1 = GmmWorld::new(2, vec![vec![(1.0, vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0])]])
            .unwrap();
        let den1 = analytic_denoiser(&w1, &s).unwrap();
        let x = vec![0.4, 0.2];
        let samples = vec![(x.as_slice(), 0usize)];
        for t in [100usize, 500] {
            let v = mi_derivative_proxy(&samples, t, &den1, &s, 10, 1, 1).unwrap();
            assert_eq!(v, 0.0);
        }

        // proxy at negligible noise is below the transition-region proxy
        let wp = preset("w2").unwrap();
        let den = analytic_denoiser(&wp.world, &s).unwrap();
        let ds = sample_dataset(&wp.world, 20, 6).unwrap();
        let samples: Vec<(&[f64], usize)> =
            ds.records.iter().map(|r| (r.features.as_slice(), r.label)).collect();
        // alpha_bar ~ 0.999 near t = 21
        let t_tiny = 21;
        assert!(s.alpha_bar(t_tiny) > 0.995);
        let v_tiny = mi_derivative_proxy(&samples, t_tiny, &den, &s, 20, 1, 7).unwrap();
        let v_mid = mi_derivative_proxy(&samples, 450, &den, &s, 20, 1, 7).unwrap();
        assert!(v_tiny <= v_mid, "tiny-noise proxy {v_tiny} vs interior {v_mid}");

        // boundary timesteps are rejected
        assert!(mi_derivative_proxy(&samples, 1000, &den, &s, 5, 1, 0).is_err());
        assert!(mi_derivative_proxy(&samples, 1, &den, &s, 5, 1, 0).is_err());
    }

    #[test]
    fn doubling_b_stays_within_two_standard_errors() {
        let s = default_schedule();
        let wp = preset("w2").unwrap();
        let den = analytic_denoiser(&wp.world, &s).unwrap();
        let ds = sample_dataset(&wp.world, 80, 11).unwrap();
        let t = 450;
        // B = 20 estimate with per-sample values to get a standard error
        let ids: Vec<(&[f64], usize)> =
            ds.records.iter().map(|r| (r.features.as_slice(), r.label)).collect();
        let per_sample: Vec<f64> = (0..20)
            .map(|i| mi_derivative_proxy(&ids[i..=i], t, &den, &s, 20, 1, 13 + i as u64).unwrap())
            .collect();
        let mean20 = per_sample.iter().sum::<f64>() / 20.0;
        let var = per_sample.iter().map(|v| (v - mean20) * (v - mean20)).sum::<f64>() / 19.0;
        let se = (var / 20.0).sqrt();
        let mean40: f64 = (0..40)
            .map(|i| mi_derivative_proxy(&ids[i..=i], t, &den, &s, 20, 1, 13 + i as u64).unwrap())
            .sum::<f64>()
            / 40.0;
        assert!(
            (mean40 - mean20).abs() < 2.0 * se,
            "B=20 {mean20} vs B=40 {mean40}, se {se}"
        );
    }

    #[test]
    fn selection_respects_feasible_set_and_symmetry() {
        let s = default_schedule();
        let wp = preset("w2").unwrap();
        let den = analytic_denoiser(&wp.world, &s).unwrap();
        let ds = sample_dataset(&wp.world, 60, 4).unwrap();
        let params = SelectorParams::default();
        assert_eq!(params.b, 20);
        assert_eq!(params.num_eps, 20);
        assert_eq!(params.delta_t, 1);
        assert_eq!(params.gamma_min, 0.05);
        assert_eq!(params.gamma_max, 1.0);

        let mut gaps = Vec::new();
        for seed in 0..5u64 {
            let sel = select_timesteps(&ds, &den, &s, &params, seed).unwrap();
            for c in 0..2 {
                assert!(sel.feasible_set.contains(&sel.t_star[c]));
            }
            let p0 = sel.t_star_grid_pos[0] as i64;
            let p1 = sel.t_star_grid_pos[1] as i64;
            gaps.push((p0 - p1).abs());
        }
        gaps.sort();
        // symmetric classes: identical curves in expectation, so the median
        // over seeds of the grid-position gap stays within one step
        assert!(gaps[2] <= 1, "median grid gap {gaps:?}");
    }

    #[test]
    fn forced_argmax_with_singleton_feasible_set() {
        let s = default_schedule();
        let wp = preset("w2overlap").unwrap();
        let den = analytic_denoiser(&wp.world, &s).unwrap();
        let ds = sample_dataset(&wp.world, 10, 2).unwrap();
        // squeeze the SNR window around one grid point (t = 450)
        let g = snr(&s, 450).unwrap();
        let params = SelectorParams {
            gamma_min: g * 0.99,
            gamma_max: g * 1.01,
            b: 5,
            num_eps: 5,
            delta_t: 1,
        };
        let sel = select_timesteps(&ds, &den, &s, &params, 0).unwrap();
        assert_eq!(sel.feasible_set, vec![450]);
        assert_eq!(sel.t_star, vec![450, 450]);
    }

    #[test]
    fn proxy_is_class_relabel_equivariant() {
        let s = default_schedule();
        // asymmetric world so the classes genuinely differ
        let w = GmmWorld::new(
            2,
            vec![
                vec![(1.0, vec![-1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0])],
                vec![(1.0, vec![2.0, 0.5], vec![1.0, 0.0, 0.0, 1.0])],
            ],
        )
        .unwrap();
        let w_swapped = GmmWorld::new(
            2,
            vec![
                vec![(1.0, vec![2.0, 0.5], vec![1.0, 0.0, 0.0, 1.0])],
                vec![(1.0, vec![-1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0])],
            ],
        )
        .unwrap();
        let den = analytic_denoiser(&w, &s).unwrap();
        let den_swapped = analytic_denoiser(&w_swapped, &s).unwrap();
        let x = vec![0.3, -0.2];
        let a = mi_derivative_proxy(&[(x.as_slice(), 0)], 400, &den, &s, 10, 1, 5).unwrap();
        let b = mi_derivative_proxy(&[(x.as_slice(), 1)], 400, &den_swapped, &s, 10, 1, 5).unwrap();
        assert!((a - b).abs() < 1e-12, "relabeled proxy {a} vs {b}");
    }

    #[test]
    fn fixed_selection_helpers() {
        let s = default_schedule();
        let sel = TimestepSelection::fixed(450, 3, &s).unwrap();
        for c in 0..3 {
            assert_eq!(sel.timestep_for(c), Some(450));
        }
        assert!(TimestepSelection::fixed(451, 2, &s).is_err());
        let partial = TimestepSelection::fixed_for_classes(450, &[1], &s).unwrap();
        assert_eq!(partial.timestep_for(0), None);
        assert_eq!(partial.timestep_for(1), Some(450));
    }
}
