//! Experiment protocols: selection-ratio sweeps, window-start sweeps,
//! strategy-by-score grids, selector hyperparameter sensitivity, and
//! fixed-vs-selected timestep comparisons.
//!
//! Each cell is keyed by (axes, seed); per-seed work (datasets, selector
//! runs, deviation scores, training dynamics) is computed once and shared
//! across the cells that need it, so reports are reproducible cell by cell.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::coreset::{
    bws_select, ccs_select, el2n_score, entries_from_records, forgetting_score, random_select,
    window_select, ScoreEntry, SubsetSpec,
};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::eval::{evaluate, train_classifier, ClassifierKind, EvalTrainConfig};
use crate::gmm::{inject_outliers, sample_dataset, GmmWorld, LabeledDataset, OutlierParams};
use crate::rng::{derive_seed, stage};
use crate::schedule::NoiseSchedule;
use crate::scoring::{score_dataset, MeanSquaredL2};
use crate::selector::{select_timesteps, SelectorParams, TimestepSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    RatioSweep,
    WindowSweep,
    StrategyGrid,
    HyperSensitivity,
    TimestepComparison,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ratio_sweep" => Self::RatioSweep,
            "window_sweep" => Self::WindowSweep,
            "strategy_grid" => Self::StrategyGrid,
            "hyper_sensitivity" => Self::HyperSensitivity,
            "timestep_comparison" => Self::TimestepComparison,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown experiment '{other}' (known: ratio_sweep, window_sweep, \
                     strategy_grid, hyper_sensitivity, timestep_comparison)"
                )))
            }
        })
    }
}

impl std::fmt::Display for SweepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::RatioSweep => "ratio_sweep",
            Self::WindowSweep => "window_sweep",
            Self::StrategyGrid => "strategy_grid",
            Self::HyperSensitivity => "hyper_sensitivity",
            Self::TimestepComparison => "timestep_comparison",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub world: GmmWorld,
    pub outliers: Option<OutlierParams>,
    pub n_per_class: usize,
    pub schedule: NoiseSchedule,
    pub k_draws: usize,
    pub selector: SelectorParams,
    pub eval: EvalTrainConfig,
    /// Model used to generate training dynamics for the baseline scorers
    /// (mlp2 by default so forgetting events actually occur).
    pub dynamics_eval: EvalTrainConfig,
    pub seeds: Vec<u64>,
    pub budgets: Vec<f64>,
    pub budget: f64,
    pub methods: Vec<String>,
    pub window_step: f64,
    pub num_strata: usize,
    pub el2n_runs: usize,
    pub el2n_probe_epoch: usize,
}

impl SweepConfig {
    pub fn new(world: GmmWorld, schedule: NoiseSchedule) -> Self {
        Self {
            world,
            outliers: None,
            n_per_class: 500,
            schedule,
            k_draws: 8,
            selector: SelectorParams::default(),
            eval: EvalTrainConfig::default(),
            dynamics_eval: EvalTrainConfig {
                kind: ClassifierKind::Mlp2,
                epochs: 60,
                learning_rate: 0.5,
                hidden: 16,
                seed: 0,
            },
            seeds: vec![1, 2, 3, 4, 5],
            budgets: vec![0.1, 0.2, 0.3, 0.5, 0.75],
            budget: 0.3,
            methods: vec![
                "random".into(),
                "drd+bws".into(),
                "drd+ccs".into(),
                "forgetting+bws".into(),
                "el2n+bws".into(),
            ],
            window_step: 0.05,
            num_strata: 5,
            el2n_runs: 3,
            el2n_probe_epoch: 5,
        }
    }
}

/// One report cell: its coordinates on the experiment axes plus the
/// accuracy per seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportCell {
    pub coords: BTreeMap<String, String>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// A finished experiment: axes, one cell per coordinate tuple, and the
/// seed count used for every mean +/- std.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub axes: BTreeMap<String, Vec<String>>,
    pub num_seeds: usize,
    pub cells: Vec<ReportCell>,
}

impl EvalReport {
    pub fn cell(&self, coords: &[(&str, &str)]) -> Option<&ReportCell> {
        self.cells.iter().find(|c| {
            coords.iter().all(|(k, v)| c.coords.get(*k).map(String::as_str) == Some(*v))
        })
    }
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

/// Everything one seed's cells share.
struct SeedContext {
    seed: u64,
    train: LabeledDataset,
    test: LabeledDataset,
    drd_entries: Vec<ScoreEntry>,
    forgetting_entries: Option<Vec<ScoreEntry>>,
    el2n_entries: Option<Vec<ScoreEntry>>,
}

fn build_seed_context(
    config: &SweepConfig,
    denoiser: &dyn Denoiser,
    seed: u64,
    need_dynamics: bool,
    selector: &SelectorParams,
) -> Result<SeedContext> {
    let mut train =
        sample_dataset(&config.world, config.n_per_class, derive_seed(seed, &[stage::DATASET]))?;
    let mut test = sample_dataset(
        &config.world,
        config.n_per_class,
        derive_seed(seed, &[stage::TEST_SPLIT]),
    )?;
    if let Some(out) = config.outliers {
        train = inject_outliers(
            &train,
            &config.world,
            out.fraction,
            out.offset_scale,
            derive_seed(seed, &[stage::OUTLIERS, 1]),
        )?;
        test = inject_outliers(
            &test,
            &config.world,
            out.fraction,
            out.offset_scale,
            derive_seed(seed, &[stage::OUTLIERS, 2]),
        )?;
    }
    let selection = select_timesteps(&train, denoiser, &config.schedule, selector, seed)?;
    let scores = score_dataset(
        &train,
        &selection,
        denoiser,
        &config.schedule,
        &MeanSquaredL2,
        config.k_draws,
        seed,
    )?;
    let drd_entries = entries_from_records(&scores);

    let (forgetting_entries, el2n_entries) = if need_dynamics {
        let dyn_cfg = EvalTrainConfig { seed, ..config.dynamics_eval };
        let (_, dynamics) = train_classifier(&train, &dyn_cfg)?;
        let forgetting = forgetting_score(&dynamics)?;
        let mut runs = vec![dynamics];
        for extra in 1..config.el2n_runs {
            let cfg = EvalTrainConfig {
                seed: derive_seed(seed, &[stage::CLASSIFIER, extra as u64]),
                ..config.dynamics_eval
            };
            runs.push(train_classifier(&train, &cfg)?.1);
        }
        let el2n = el2n_score(&runs, config.el2n_probe_epoch)?;
        (Some(forgetting), Some(el2n))
    } else {
        (None, None)
    };

    Ok(SeedContext { seed, train, test, drd_entries, forgetting_entries, el2n_entries })
}

impl SeedContext {
    fn entries_for(&self, score: &str) -> Result<&[ScoreEntry]> {
        match score {
            "drd" => Ok(&self.drd_entries),
            "forgetting" => self
                .forgetting_entries
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("forgetting dynamics not computed".into())),
            "el2n" => self
                .el2n_entries
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("el2n dynamics not computed".into())),
            other => Err(Error::InvalidArgument(format!("unknown score source '{other}'"))),
        }
    }
}

/// Applies a "score+strategy" method string at the given budget.
fn build_subset(
    ctx: &SeedContext,
    config: &SweepConfig,
    method: &str,
    budget: f64,
) -> Result<SubsetSpec> {
    if method == "random" {
        return random_select(&ctx.drd_entries, budget, derive_seed(ctx.seed, &[stage::SUBSET]));
    }
    if method == "full" {
        return window_select(&ctx.drd_entries, 1.0, 0.0);
    }
    let (score, strategy) = method.split_once('+').ok_or_else(|| {
        Error::InvalidArgument(format!(
            "method '{method}' must be 'random', 'full', or '<score>+<strategy>'"
        ))
    })?;
    let entries = ctx.entries_for(score)?;
    match strategy {
        "ccs" => {
            ccs_select(entries, budget, config.num_strata, derive_seed(ctx.seed, &[stage::SUBSET, 1]))
        }
        "bws" => {
            let eval_cfg = EvalTrainConfig { seed: ctx.seed, ..config.eval };
            let train = &ctx.train;
            let outcome = bws_select(entries, budget, config.window_step, |spec| {
                let (model, _) = train_classifier(&train.subset(&spec.selected), &eval_cfg)?;
                evaluate(&model, train)
            })?;
            Ok(outcome.spec)
        }
        "window" => window_select(entries, budget, 0.3),
        other => Err(Error::InvalidArgument(format!("unknown strategy '{other}'"))),
    }
}

fn accuracy_of_subset(ctx: &SeedContext, config: &SweepConfig, spec: &SubsetSpec) -> Result<f64> {
    let eval_cfg = EvalTrainConfig { seed: ctx.seed, ..config.eval };
    let (model, _) = train_classifier(&ctx.train.subset(&spec.selected), &eval_cfg)?;
    evaluate(&model, &ctx.test)
}

/// Runs one experiment protocol end to end and returns its report.
pub fn run_sweep(
    kind: SweepKind,
    config: &SweepConfig,
    denoiser: &dyn Denoiser,
) -> Result<EvalReport> {
    if config.seeds.len() < 3 {
        return Err(Error::InvalidArgument(
            "sweeps report mean +/- std and need at least 3 seeds".into(),
        ));
    }
    match kind {
        SweepKind::RatioSweep => ratio_or_grid(config, denoiser, "ratio_sweep", &config.budgets, &config.methods),
        SweepKind::StrategyGrid => {
            let methods: Vec<String> = ["forgetting", "el2n", "drd"]
                .iter()
                .flat_map(|s| ["ccs", "bws"].iter().map(move |st| format!("{s}+{st}")))
                .collect();
            let budgets = vec![0.1, 0.3, 0.75];
            ratio_or_grid(config, denoiser, "strategy_grid", &budgets, &methods)
        }
        SweepKind::WindowSweep => window_sweep(config, denoiser),
        SweepKind::HyperSensitivity => hyper_sensitivity(config, denoiser),
        SweepKind::TimestepComparison => timestep_comparison(config, denoiser),
    }
}

fn ratio_or_grid(
    config: &SweepConfig,
    denoiser: &dyn Denoiser,
    name: &str,
    budgets: &[f64],
    methods: &[String],
) -> Result<EvalReport> {
    let need_dynamics = methods.iter().any(|m| m.contains("forgetting") || m.contains("el2n"));
    let contexts: Vec<SeedContext> = config
        .seeds
        .iter()
        .map(|&seed| build_seed_context(config, denoiser, seed, need_dynamics, &config.selector))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for &budget in budgets {
        for method in methods {
            let per_seed: Vec<f64> = contexts
                .iter()
                .map(|ctx| {
                    let spec = build_subset(ctx, config, method, budget)?;
                    accuracy_of_subset(ctx, config, &spec)
                })
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&per_seed);
            let mut coords = BTreeMap::new();
            coords.insert("budget".into(), format!("{budget}"));
            coords.insert("method".into(), method.clone());
            cells.push(ReportCell { coords, per_seed, mean, std });
        }
    }
    let mut axes = BTreeMap::new();
    axes.insert("budget".into(), budgets.iter().map(|b| format!("{b}")).collect());
    axes.insert("method".into(), methods.to_vec());
    Ok(EvalReport { experiment: name.into(), axes, num_seeds: config.seeds.len(), cells })
}

fn window_sweep(config: &SweepConfig, denoiser: &dyn Denoiser) -> Result<EvalReport> {
    let contexts: Vec<SeedContext> = config
        .seeds
        .iter()
        .map(|&seed| build_seed_context(config, denoiser, seed, false, &config.selector))
        .collect::<Result<Vec<_>>>()?;
    let starts = crate::coreset::bws_starts(config.budget, config.window_step);
    let mut cells = Vec::new();
    for &start in &starts {
        let per_seed: Vec<f64> = contexts
            .iter()
            .map(|ctx| {
                let spec = window_select(&ctx.drd_entries, config.budget, start)?;
                accuracy_of_subset(ctx, config, &spec)
            })
            .collect::<Result<Vec<_>>>()?;
        let (mean, std) = mean_std(&per_seed);
        let mut coords = BTreeMap::new();
        coords.insert("start".into(), format!("{start:.2}"));
        cells.push(ReportCell { coords, per_seed, mean, std });
    }
    let mut axes = BTreeMap::new();
    axes.insert("start".into(), starts.iter().map(|s| format!("{s:.2}")).collect());
    Ok(EvalReport {
        experiment: "window_sweep".into(),
        axes,
        num_seeds: config.seeds.len(),
        cells,
    })
}

fn hyper_sensitivity(config: &SweepConfig, denoiser: &dyn Denoiser) -> Result<EvalReport> {
    let b_values = [5usize, 20, 40];
    let eps_values = [5usize, 20, 40];
    let mut cells = Vec::new();
    for &b in &b_values {
        for &num_eps in &eps_values {
            let selector = SelectorParams { b, num_eps, ..config.selector };
            let per_seed: Vec<f64> = config
                .seeds
                .iter()
                .map(|&seed| {
                    let ctx = build_seed_context(config, denoiser, seed, false, &selector)?;
                    let spec = build_subset(&ctx, config, "drd+bws", config.budget)?;
                    accuracy_of_subset(&ctx, config, &spec)
                })
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&per_seed);
            let mut coords = BTreeMap::new();
            coords.insert("b".into(), b.to_string());
            coords.insert("num_eps".into(), num_eps.to_string());
            cells.push(ReportCell { coords, per_seed, mean, std });
        }
    }
    let mut axes = BTreeMap::new();
    axes.insert("b".into(), b_values.iter().map(|v| v.to_string()).collect());
    axes.insert("num_eps".into(), eps_values.iter().map(|v| v.to_string()).collect());
    Ok(EvalReport {
        experiment: "hyper_sensitivity".into(),
        axes,
        num_seeds: config.seeds.len(),
        cells,
    })
}

fn timestep_comparison(config: &SweepConfig, denoiser: &dyn Denoiser) -> Result<EvalReport> {
    let feasible = crate::selector::feasible_timesteps(
        &config.schedule,
        config.selector.gamma_min,
        config.selector.gamma_max,
    )?;
    let contexts: Vec<SeedContext> = config
        .seeds
        .iter()
        .map(|&seed| build_seed_context(config, denoiser, seed, false, &config.selector))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    let mut t_axis: Vec<String> = Vec::new();
    for &t in &feasible {
        t_axis.push(t.to_string());
        let per_seed: Vec<f64> = contexts
            .iter()
            .map(|ctx| {
                let selection =
                    TimestepSelection::fixed(t, config.world.num_classes(), &config.schedule)?;
                let scores = score_dataset(
                    &ctx.train,
                    &selection,
                    denoiser,
                    &config.schedule,
                    &MeanSquaredL2,
                    config.k_draws,
                    ctx.seed,
                )?;
                let entries = entries_from_records(&scores);
                let eval_cfg = EvalTrainConfig { seed: ctx.seed, ..config.eval };
                let train = &ctx.train;
                let outcome = bws_select(&entries, config.budget, config.window_step, |spec| {
                    let (model, _) = train_classifier(&train.subset(&spec.selected), &eval_cfg)?;
                    evaluate(&model, train)
                })?;
                accuracy_of_subset(ctx, config, &outcome.spec)
            })
            .collect::<Result<Vec<_>>>()?;
        let (mean, std) = mean_std(&per_seed);
        let mut coords = BTreeMap::new();
        coords.insert("t".into(), t.to_string());
        cells.push(ReportCell { coords, per_seed, mean, std });
    }
    // the class-wise selected timesteps as the comparison row
    t_axis.push("ib".into());
    let per_seed: Vec<f64> = contexts
        .iter()
        .map(|ctx| {
            let spec = build_subset(ctx, config, "drd+bws", config.budget)?;
            accuracy_of_subset(ctx, config, &spec)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&per_seed);
    let mut coords = BTreeMap::new();
    coords.insert("t".into(), "ib".into());
    cells.push(ReportCell { coords, per_seed, mean, std });

    let mut axes = BTreeMap::new();
    axes.insert("t".into(), t_axis);
    Ok(EvalReport {
        experiment: "timestep_comparison".into(),
        axes,
        num_seeds: config.seeds.len(),
        cells,
    })
}
