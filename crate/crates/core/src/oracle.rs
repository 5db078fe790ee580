//! Independent brute-force ground truth: quadrature mutual information,
//! identity and ordering checks against exact posteriors, exhaustive
//! timestep search, and rank statistics.
//!
//! Nothing here shares code with the estimators it audits: mutual
//! information comes from tensor-grid quadrature over the closed-form
//! densities, derivatives from central differences, orderings from exact
//! log-likelihoods. Reports carry the raw numbers so thresholds stay
//! evidence, not folklore.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::coreset::{entries_from_records, window_select};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::eval::{evaluate, train_classifier, EvalTrainConfig};
use crate::gmm::{inject_outliers, sample_dataset, GmmWorld, OutlierParams};
use crate::rng::{derive_seed, stage, substream};
use crate::schedule::NoiseSchedule;
use crate::scoring::{reconstruction_deviation, score_dataset, MeanSquaredL2};
use crate::selector::{select_timesteps, SelectorParams, TimestepSelection};

/// One compared quantity inside an oracle report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Measurement {
    pub label: String,
    pub oracle_value: f64,
    pub pipeline_value: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_err: Option<f64>,
    pub pass: bool,
}

/// Machine-readable outcome of one oracle check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub check: String,
    pub pass: bool,
    pub measurements: Vec<Measurement>,
    /// Sample sizes, grid resolutions, seeds — whatever pins the run down.
    pub meta: BTreeMap<String, String>,
}

impl OracleReport {
    fn new(check: &str) -> Self {
        Self { check: check.into(), pass: true, measurements: Vec::new(), meta: BTreeMap::new() }
    }

    fn push(&mut self, m: Measurement) {
        self.pass &= m.pass;
        self.measurements.push(m);
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }
}

// ---------------------------------------------------------------------------
// Mutual information

/// Mutual-information estimate in nats, with the quadrature mass actually
/// covered (1.0 for the Monte Carlo path, which reports a standard error
/// instead).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MiEstimate {
    pub nats: f64,
    pub std_err: f64,
    pub mass: f64,
}

const REQUIRED_MASS: f64 = 0.999;

fn axis_ranges(world: &GmmWorld, t: usize, schedule: &NoiseSchedule) -> Result<Vec<(f64, f64)>> {
    let frozen = world.at(t, schedule)?;
    let d = world.dim;
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    for class in &frozen.classes {
        for comp in class {
            for axis in 0..d {
                // 8 combined standard deviations around each component mean
                let var = {
                    // reconstruct sigma_ii from the factor row
                    let row = &comp.chol.lower[axis * d..axis * d + d];
                    row.iter().map(|v| v * v).sum::<f64>()
                };
                let spread = 8.0 * var.sqrt();
                ranges[axis].0 = ranges[axis].0.min(comp.mean[axis] - spread);
                ranges[axis].1 = ranges[axis].1.max(comp.mean[axis] + spread);
            }
        }
    }
    Ok(ranges)
}

/// I(x_t; c) = H(c) - E_{x_t}[H(c | x_t)], computed exactly from the
/// closed-form posterior: midpoint tensor-grid quadrature for d <= 2,
/// Monte Carlo (>= 10^6 draws, standard error reported) above.
pub fn mi_quadrature(
    world: &GmmWorld,
    t: usize,
    schedule: &NoiseSchedule,
    points_per_axis: usize,
) -> Result<MiEstimate> {
    let c = world.num_classes() as f64;
    if world.num_classes() == 1 {
        return Ok(MiEstimate { nats: 0.0, std_err: 0.0, mass: 1.0 });
    }
    let frozen = world.at(t, schedule)?;
    match world.dim {
        1 => {
            let (lo, hi) = axis_ranges(world, t, schedule)?[0];
            let n = points_per_axis;
            let h = (hi - lo) / n as f64;
            let (mass, cond) = (0..n)
                .into_par_iter()
                .map(|i| {
                    let x = [lo + (i as f64 + 0.5) * h];
                    let q = frozen.marginal_log_density(&x).exp();
                    let hc = posterior_entropy(&frozen, &x);
                    (q * h, q * hc * h)
                })
                .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            finish_quadrature(c, mass, cond)
        }
        2 => {
            let ranges = axis_ranges(world, t, schedule)?;
            let n = points_per_axis;
            let h0 = (ranges[0].1 - ranges[0].0) / n as f64;
            let h1 = (ranges[1].1 - ranges[1].0) / n as f64;
            let cell = h0 * h1;
            let (mass, cond) = (0..n)
                .into_par_iter()
                .map(|i| {
                    let x0 = ranges[0].0 + (i as f64 + 0.5) * h0;
                    let mut m = 0.0;
                    let mut e = 0.0;
                    for j in 0..n {
                        let x = [x0, ranges[1].0 + (j as f64 + 0.5) * h1];
                        let q = frozen.marginal_log_density(&x).exp();
                        m += q * cell;
                        e += q * posterior_entropy(&frozen, &x) * cell;
                    }
                    (m, e)
                })
                .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            finish_quadrature(c, mass, cond)
        }
        _ => mi_monte_carlo(world, t, schedule, 1_000_000, 0),
    }
}

fn posterior_entropy(frozen: &crate::gmm::DiffusedGmm, x: &[f64]) -> f64 {
    frozen
        .posterior(x)
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

fn finish_quadrature(c: f64, mass: f64, cond_entropy: f64) -> Result<MiEstimate> {
    if mass < REQUIRED_MASS {
        return Err(Error::QuadratureMass { mass, required: REQUIRED_MASS });
    }
    let nats = (c.ln() - cond_entropy / mass).max(0.0);
    Ok(MiEstimate { nats, std_err: 0.0, mass })
}

/// Monte Carlo fallback for d > 2.
pub fn mi_monte_carlo(
    world: &GmmWorld,
    t: usize,
    schedule: &NoiseSchedule,
    n_samples: usize,
    seed: u64,
) -> Result<MiEstimate> {
    let frozen = world.at(t, schedule)?;
    let c = world.num_classes();
    let stats: Vec<(f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, &[stage::ORACLE, 0x31, i as u64]);
            let class = (rng.gen::<u64>() % c as u64) as usize;
            let ds = draw_noised(world, class, t, schedule, &mut rng);
            let h = posterior_entropy(&frozen, &ds);
            (h, h * h)
        })
        .collect();
    let n = n_samples as f64;
    let mean = stats.iter().map(|s| s.0).sum::<f64>() / n;
    let var = (stats.iter().map(|s| s.1).sum::<f64>() / n - mean * mean).max(0.0);
    Ok(MiEstimate {
        nats: ((c as f64).ln() - mean).max(0.0),
        std_err: (var / n).sqrt(),
        mass: 1.0,
    })
}

fn draw_noised(
    world: &GmmWorld,
    class: usize,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let d = world.dim;
    // component draw
    let u: f64 = rng.gen();
    let comps = &world.classes[class];
    let mut k = comps.len() - 1;
    let mut acc = 0.0;
    for (i, comp) in comps.iter().enumerate() {
        acc += comp.weight;
        if u < acc {
            k = i;
            break;
        }
    }
    let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut x0 = vec![0.0; d];
    comps[k].cov_chol.mul_lower(&z, &mut x0);
    for (xi, mi) in x0.iter_mut().zip(&comps[k].mean) {
        *xi += mi;
    }
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    x0.iter().map(|&v| sa * v + rng.sample::<f64, _>(StandardNormal) * sn).collect()
}

// ---------------------------------------------------------------------------
// Identity check: |dI/dt| vs |E[d log p(c|x_t)/dt]|

#[derive(Debug, Clone, Copy)]
pub struct IdentityCheckConfig {
    pub points_per_axis: usize,
    pub n_samples: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub seed: u64,
}

impl Default for IdentityCheckConfig {
    fn default() -> Self {
        Self { points_per_axis: 512, n_samples: 200_000, rel_tol: 0.05, abs_tol: 0.005, seed: 0 }
    }
}

/// Compares the central difference of quadrature MI against the Monte Carlo
/// estimate of |E[(log p(c|x_{t+1}) - log p(c|x_{t-1})) / 2]| with exact
/// posteriors and paired noise. A measurement only passes when the Monte
/// Carlo standard error stays below half the tolerance.
pub fn lemma1_check(
    world: &GmmWorld,
    schedule: &NoiseSchedule,
    t_list: &[usize],
    config: &IdentityCheckConfig,
) -> Result<OracleReport> {
    let mut report = OracleReport::new("mi_derivative_identity");
    report.note("n_samples", config.n_samples);
    report.note("points_per_axis", config.points_per_axis);
    report.note("seed", config.seed);
    report.note("tolerance", format!("max({} relative, {} nats/step)", config.rel_tol, config.abs_tol));

    for &t in t_list {
        if t < 2 || t + 1 > schedule.t_train {
            return Err(Error::TimestepRange { t, lo: 2, hi: schedule.t_train - 1 });
        }
        let hi = mi_quadrature(world, t + 1, schedule, config.points_per_axis)?;
        let lo = mi_quadrature(world, t - 1, schedule, config.points_per_axis)?;
        let lhs = ((hi.nats - lo.nats) / 2.0).abs();

        let frozen_hi = world.at(t + 1, schedule)?;
        let frozen_lo = world.at(t - 1, schedule)?;
        let a_hi = schedule.alpha_bar(t + 1);
        let a_lo = schedule.alpha_bar(t - 1);
        let c = world.num_classes();
        let stats: Vec<(f64, f64)> = (0..config.n_samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = substream(config.seed, &[stage::ORACLE, 0x11, t as u64, i as u64]);
                let class = (rng.gen::<u64>() % c as u64) as usize;
                let d = world.dim;
                // one x0 draw and one paired eps for both timesteps
                let u: f64 = rng.gen();
                let comps = &world.classes[class];
                let mut k = comps.len() - 1;
                let mut acc = 0.0;
                for (ci, comp) in comps.iter().enumerate() {
                    acc += comp.weight;
                    if u < acc {
                        k = ci;
                        break;
                    }
                }
                let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let mut x0 = vec![0.0; d];
                comps[k].cov_chol.mul_lower(&z, &mut x0);
                for (xi, mi) in x0.iter_mut().zip(&comps[k].mean) {
                    *xi += mi;
                }
                let eps: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let x_hi: Vec<f64> = x0
                    .iter()
                    .zip(&eps)
                    .map(|(x, e)| a_hi.sqrt() * x + (1.0 - a_hi).sqrt() * e)
                    .collect();
                let x_lo: Vec<f64> = x0
                    .iter()
                    .zip(&eps)
                    .map(|(x, e)| a_lo.sqrt() * x + (1.0 - a_lo).sqrt() * e)
                    .collect();
                let g = (frozen_hi.log_posterior(&x_hi)[class]
                    - frozen_lo.log_posterior(&x_lo)[class])
                    / 2.0;
                (g, g * g)
            })
            .collect();
        let n = config.n_samples as f64;
        let mean = stats.iter().map(|s| s.0).sum::<f64>() / n;
        let var = (stats.iter().map(|s| s.1).sum::<f64>() / n - mean * mean).max(0.0);
        let se = (var / n).sqrt();
        let rhs = mean.abs();

        let tol = (config.rel_tol * lhs).max(config.abs_tol);
        let pass = (lhs - rhs).abs() <= tol && se <= tol / 2.0;
        report.push(Measurement {
            label: format!("t={t}"),
            oracle_value: lhs,
            pipeline_value: rhs,
            tolerance: tol,
            std_err: Some(se),
            pass,
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Ordering check: deviation vs negative log-likelihood

#[derive(Debug, Clone, Copy)]
pub struct OrderingCheckConfig {
    pub n_samples: usize,
    pub k_draws: usize,
    pub rho_min: f64,
    pub max_inversions: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for OrderingCheckConfig {
    fn default() -> Self {
        Self { n_samples: 500, k_draws: 8, rho_min: 0.3, max_inversions: 1, bins: 5, seed: 0 }
    }
}

/// Spearman correlation between reconstruction deviation at timestep `t`
/// and the exact negative marginal log-likelihood, plus the binned
/// monotonicity of mean deviation across descending-likelihood groups.
pub fn theorem1_check(
    world: &GmmWorld,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    t: usize,
    config: &OrderingCheckConfig,
) -> Result<OracleReport> {
    if config.n_samples < 200 {
        return Err(Error::InvalidArgument("ordering check needs n_samples >= 200".into()));
    }
    let frozen0 = world.at(0, schedule)?;
    let c = world.num_classes();
    let metric = MeanSquaredL2;

    let rows: Vec<(f64, f64)> = (0..config.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(config.seed, &[stage::ORACLE, 0x71, i as u64]);
            let class = (rng.gen::<u64>() % c as u64) as usize;
            let x0 = {
                let d = world.dim;
                let comps = &world.classes[class];
                let u: f64 = rng.gen();
                let mut k = comps.len() - 1;
                let mut acc = 0.0;
                for (ci, comp) in comps.iter().enumerate() {
                    acc += comp.weight;
                    if u < acc {
                        k = ci;
                        break;
                    }
                }
                let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let mut x0 = vec![0.0; d];
                comps[k].cov_chol.mul_lower(&z, &mut x0);
                for (xi, mi) in x0.iter_mut().zip(&comps[k].mean) {
                    *xi += mi;
                }
                x0
            };
            let dev = reconstruction_deviation(
                &x0,
                class,
                t,
                denoiser,
                schedule,
                &metric,
                config.k_draws,
                config.seed,
                i as u64,
            )?;
            Ok((dev, -frozen0.marginal_log_density(&x0)))
        })
        .collect::<Result<Vec<_>>>()?;

    let devs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let neg_ll: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let rho = spearman(&devs, &neg_ll)?;

    // bin by descending likelihood: ascending -log q
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| neg_ll[a].partial_cmp(&neg_ll[b]).unwrap());
    let bins = config.bins;
    let base = rows.len() / bins;
    let extra = rows.len() % bins;
    let mut bin_means = Vec::with_capacity(bins);
    let mut offset = 0;
    for g in 0..bins {
        let size = base + usize::from(g < extra);
        let mean =
            order[offset..offset + size].iter().map(|&i| devs[i]).sum::<f64>() / size as f64;
        bin_means.push(mean);
        offset += size;
    }
    let inversions = bin_means.windows(2).filter(|w| w[1] < w[0]).count();

    let mut report = OracleReport::new("deviation_likelihood_ordering");
    report.note("t", t);
    report.note("n_samples", config.n_samples);
    report.note("k_draws", config.k_draws);
    report.note("seed", config.seed);
    report.note(
        "bin_means",
        bin_means.iter().map(|m| format!("{m:.6}")).collect::<Vec<_>>().join(","),
    );
    report.push(Measurement {
        label: "spearman_rho".into(),
        oracle_value: config.rho_min,
        pipeline_value: rho,
        tolerance: 0.0,
        std_err: None,
        pass: rho >= config.rho_min,
    });
    report.push(Measurement {
        label: "bin_inversions".into(),
        oracle_value: config.max_inversions as f64,
        pipeline_value: inversions as f64,
        tolerance: 0.0,
        std_err: None,
        pass: inversions <= config.max_inversions,
    });
    Ok(report)
}

// ---------------------------------------------------------------------------
// Exhaustive grid search over reconstruction timesteps

#[derive(Debug, Clone)]
pub struct GridSearchConfig {
    pub n_per_class: usize,
    pub outliers: Option<OutlierParams>,
    pub budget: f64,
    pub window_start: f64,
    pub k_draws: usize,
    pub eval: EvalTrainConfig,
    pub selector: SelectorParams,
    pub seeds: Vec<u64>,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self {
            n_per_class: 500,
            outliers: None,
            budget: 0.3,
            window_start: 0.3,
            k_draws: 8,
            eval: EvalTrainConfig::default(),
            selector: SelectorParams::default(),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

/// Full result of the grid search, kept alongside the pass/fail report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchOutcome {
    pub feasible: Vec<usize>,
    /// `grid_acc[i][s]`: accuracy at feasible timestep i under seed s.
    pub grid_acc: Vec<Vec<f64>>,
    /// Per-seed accuracy with the class-wise selected timesteps.
    pub ib_acc: Vec<f64>,
    /// Per-seed selected timesteps (one per class).
    pub ib_t_star: Vec<Vec<usize>>,
    pub best_t: usize,
    pub best_mean: f64,
    pub best_std: f64,
    pub ib_mean: f64,
    pub report: OracleReport,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Scores the dataset at every feasible grid timestep, selects a fixed
/// window, trains, and evaluates — per seed, with fresh train/test draws —
/// then compares the class-wise selected timesteps against the grid
/// optimum (within one standard deviation of the best cell).
pub fn exhaustive_timestep_search(
    world: &GmmWorld,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    config: &GridSearchConfig,
) -> Result<GridSearchOutcome> {
    let feasible =
        crate::selector::feasible_timesteps(schedule, config.selector.gamma_min, config.selector.gamma_max)?;
    let metric = MeanSquaredL2;
    let mut grid_acc = vec![Vec::with_capacity(config.seeds.len()); feasible.len()];
    let mut ib_acc = Vec::with_capacity(config.seeds.len());
    let mut ib_t_star = Vec::with_capacity(config.seeds.len());

    for &seed in &config.seeds {
        let mut train = sample_dataset(world, config.n_per_class, derive_seed(seed, &[stage::DATASET]))?;
        let mut test =
            sample_dataset(world, config.n_per_class, derive_seed(seed, &[stage::TEST_SPLIT]))?;
        if let Some(out) = config.outliers {
            train = inject_outliers(&train, world, out.fraction, out.offset_scale, derive_seed(seed, &[stage::OUTLIERS, 1]))?;
            test = inject_outliers(&test, world, out.fraction, out.offset_scale, derive_seed(seed, &[stage::OUTLIERS, 2]))?;
        }
        let eval_cfg = EvalTrainConfig { seed, ..config.eval };

        let run_at = |selection: &TimestepSelection| -> Result<f64> {
            let scores = score_dataset(&train, selection, denoiser, schedule, &metric, config.k_draws, seed)?;
            let subset_spec =
                window_select(&entries_from_records(&scores), config.budget, config.window_start)?;
            let (model, _) = train_classifier(&train.subset(&subset_spec.selected), &eval_cfg)?;
            evaluate(&model, &test)
        };

        for (i, &t) in feasible.iter().enumerate() {
            let selection = TimestepSelection::fixed(t, world.num_classes(), schedule)?;
            grid_acc[i].push(run_at(&selection)?);
        }

        let selection = select_timesteps(&train, denoiser, schedule, &config.selector, seed)?;
        ib_t_star.push(selection.t_star.clone());
        ib_acc.push(run_at(&selection)?);
    }

    let stats: Vec<(f64, f64)> = grid_acc.iter().map(|accs| mean_std(accs)).collect();
    let best_i = (0..feasible.len())
        .max_by(|&a, &b| stats[a].0.partial_cmp(&stats[b].0).unwrap())
        .unwrap();
    let (best_mean, best_std) = stats[best_i];
    let (ib_mean, _) = mean_std(&ib_acc);

    let mut report = OracleReport::new("timestep_grid_search");
    report.note("feasible", format!("{feasible:?}"));
    report.note("seeds", format!("{:?}", config.seeds));
    report.note("budget", config.budget);
    report.note("window_start", config.window_start);
    report.note(
        "grid_mean_acc",
        stats.iter().map(|s| format!("{:.4}", s.0)).collect::<Vec<_>>().join(","),
    );
    report.push(Measurement {
        label: "ib_within_one_std_of_grid_best".into(),
        oracle_value: best_mean,
        pipeline_value: ib_mean,
        tolerance: best_std,
        std_err: Some(best_std),
        pass: ib_mean >= best_mean - best_std,
    });

    Ok(GridSearchOutcome {
        feasible: feasible.clone(),
        grid_acc,
        ib_acc,
        ib_t_star,
        best_t: feasible[best_i],
        best_mean,
        best_std,
        ib_mean,
        report,
    })
}

// ---------------------------------------------------------------------------
// Rank statistics

/// Spearman rank correlation with average-rank tie handling (Pearson on
/// midranks, which reduces to the d^2 formula when there are no ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs length >= 2".into()));
    }
    let ra = midranks(a);
    let rb = midranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidArgument("zero rank variance".into()));
    }
    Ok(num / (va * vb).sqrt())
}

fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::preset;
    use crate::schedule::linear_schedule;

    fn default_schedule() -> NoiseSchedule {
        linear_schedule(1000, 1e-4, 0.02, 50).unwrap()
    }

    #[test]
    fn spearman_hand_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn spearman_handles_ties_with_midranks() {
        // a has a tie; compare against scipy's value for this fixture
        let a = [1.0, 2.0, 2.0, 3.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let rho = spearman(&a, &b).unwrap();
        // midranks of a: 1, 2.5, 2.5, 4 -> pearson vs 1,2,3,4
        let expect = 0.9486832980505138;
        assert!((rho - expect).abs() < 1e-12, "rho {rho}");
    }

    #[test]
    fn mi_single_class_is_zero() {
        let w = GmmWorld::new(1, vec![vec![(1.0, vec![0.0], vec![1.0])]]).unwrap();
        let s = default_schedule();
        for t in [0usize, 500, 1000] {
            assert_eq!(mi_quadrature(&w, t, &s, 512).unwrap().nats, 0.0);
        }
    }

    #[test]
    fn mi_w2_reference_value_and_limits() {
        let wp = preset("w2").unwrap();
        let s = default_schedule();
        // frozen reference from the 1D/2D quadrature and an independent
        // 2*10^6-draw Monte Carlo cross-check (0.632862 +/- 0.0004)
        let mi0 = mi_quadrature(&wp.world, 0, &s, 512).unwrap();
        assert!((mi0.nats - 0.63272).abs() < 2e-3, "I at t=0: {}", mi0.nats);
        assert!(mi0.mass >= REQUIRED_MASS);
        // full-noise endpoint
        let mi_t = mi_quadrature(&wp.world, 1000, &s, 512).unwrap();
        assert!(mi_t.nats < 0.02, "I at t=T: {}", mi_t.nats);
        // bounded by log C
        assert!(mi0.nats <= 2.0f64.ln() + 1e-9);
    }

    #[test]
    fn mi_1d_matches_2d_on_axis_worlds() {
        // W2's second coordinate is pure noise; a 1D world with the same
        // means has identical MI
        let w1 = GmmWorld::new(
            1,
            vec![vec![(1.0, vec![-2.0], vec![1.0])], vec![(1.0, vec![2.0], vec![1.0])]],
        )
        .unwrap();
        let w2 = preset("w2").unwrap().world;
        let s = default_schedule();
        for t in [0usize, 300, 600] {
            let a = mi_quadrature(&w1, t, &s, 2048).unwrap().nats;
            let b = mi_quadrature(&w2, t, &s, 512).unwrap().nats;
            assert!((a - b).abs() < 1e-4, "t={t}: 1d {a} vs 2d {b}");
        }
    }

    #[test]
    fn mi_rejects_coarse_grids() {
        let wp = preset("w2").unwrap();
        let s = default_schedule();
        // 2 points per axis cannot cover 99.9% of the mass
        assert!(matches!(
            mi_quadrature(&wp.world, 0, &s, 2),
            Err(Error::QuadratureMass { .. })
        ));
    }

    #[test]
    fn lemma1_negative_control_fails_at_zero_tolerance() {
        let wp = preset("w2").unwrap();
        let s = default_schedule();
        let cfg = IdentityCheckConfig {
            n_samples: 2_000,
            rel_tol: 0.0,
            abs_tol: 0.0,
            ..Default::default()
        };
        let report = lemma1_check(&wp.world, &s, &[450], &cfg).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn lemma1_single_class_is_degenerate_zero() {
        let w = GmmWorld::new(1, vec![vec![(1.0, vec![0.0], vec![1.0])]]).unwrap();
        let s = default_schedule();
        let cfg = IdentityCheckConfig { n_samples: 1_000, ..Default::default() };
        let report = lemma1_check(&w, &s, &[450], &cfg).unwrap();
        assert!(report.pass);
        let m = &report.measurements[0];
        assert_eq!(m.oracle_value, 0.0);
        assert_eq!(m.pipeline_value, 0.0);
    }

    #[test]
    fn theorem1_negative_control_constant_scores() {
        // a denoiser that always returns zero noise gives deviation that
        // depends only on the contraction toward the mean... to get truly
        // constant scores, check the spearman guard directly instead
        let devs = vec![1.0; 10];
        let lls: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(spearman(&devs, &lls).is_err());
    }

    #[test]
    fn theorem1_single_gaussian_strictly_increasing_bins() {
        let w = GmmWorld::new(
            2,
            vec![vec![(1.0, vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0])]],
        )
        .unwrap();
        let s = default_schedule();
        let den = crate::gmm::analytic_denoiser(&w, &s).unwrap();
        let cfg = OrderingCheckConfig { n_samples: 500, seed: 3, ..Default::default() };
        let report = theorem1_check(&w, &den, &s, 450, &cfg).unwrap();
        assert!(report.pass, "{report:?}");
        let bins: Vec<f64> = report.meta["bin_means"]
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect();
        assert!(bins.windows(2).all(|w| w[1] > w[0]), "bins {bins:?}");
    }
}
