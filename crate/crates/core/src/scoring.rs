//! Reconstruction-deviation scoring: noise a sample to a chosen timestep,
//! reconstruct it with DDIM, measure how far it lands from where it
//! started, and average over noise draws.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::gmm::LabeledDataset;
use crate::rng::{stage, substream};
use crate::schedule::{ddim_reconstruct, forward_noise, NoiseSchedule};
use crate::selector::TimestepSelection;
use rand_distr::StandardNormal;

/// Distance between a sample and its reconstruction.
pub trait DeviationMetric: Send + Sync {
    fn dist(&self, a: &[f64], b: &[f64]) -> f64;
    fn name(&self) -> &str;
}

/// Mean squared L2 over coordinates — the default metric.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanSquaredL2;

impl DeviationMetric for MeanSquaredL2 {
    fn dist(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = a.len().max(1);
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64
    }

    fn name(&self) -> &str {
        "mse"
    }
}

/// Looks up a metric by name. "lpips" is reserved for perceptual scoring on
/// image data and is not available in this build.
pub fn metric_by_name(name: &str) -> Result<Box<dyn DeviationMetric>> {
    match name.to_ascii_lowercase().as_str() {
        "mse" => Ok(Box::new(MeanSquaredL2)),
        "lpips" => Err(Error::InvalidArgument(
            "metric 'lpips' is a recognized name but is not implemented in this build; use 'mse'"
                .into(),
        )),
        other => Err(Error::InvalidArgument(format!("unknown metric '{other}'"))),
    }
}

/// Per-sample reconstruction deviation at the timestep chosen for its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: u64,
    pub label: usize,
    /// Training-index timestep the deviation was measured at.
    pub timestep: usize,
    pub deviation: f64,
    /// Number of noise draws averaged.
    pub num_draws: usize,
    pub metric: String,
}

/// Deviation of one sample at timestep `t`, averaged over `k` noise draws.
///
/// Draw j uses the substream keyed by (seed, SCORING, sample_id, j), so the
/// value is independent of batching, ordering, and thread count. `t = 0`
/// is defined as zero deviation (nothing is noised, nothing reconstructed).
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_deviation(
    x0: &[f64],
    class: usize,
    t: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    metric: &dyn DeviationMetric,
    k: usize,
    seed: u64,
    sample_id: u64,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if t == 0 {
        return Ok(0.0);
    }
    if schedule.grid_position(t).is_none() {
        return Err(Error::OffGrid { t });
    }
    let mut total = 0.0;
    for j in 0..k {
        let mut rng = substream(seed, &[stage::SCORING, sample_id, j as u64]);
        let eps: Vec<f64> = (0..x0.len())
            .map(|_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal))
            .collect();
        let x_t = forward_noise(x0, t, &eps, schedule)?;
        let recon = ddim_reconstruct(&x_t, t, class, denoiser, schedule)?;
        total += metric.dist(&recon, x0);
    }
    Ok(total / k as f64)
}

/// Scores every sample at its class's selected timestep. Output is ordered
/// by ascending sample id and is byte-stable across worker counts.
pub fn score_dataset(
    dataset: &LabeledDataset,
    selection: &TimestepSelection,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    metric: &dyn DeviationMetric,
    k: usize,
    seed: u64,
) -> Result<Vec<ScoreRecord>> {
    for r in &dataset.records {
        if selection.timestep_for(r.label).is_none() {
            return Err(Error::MissingClass { class: r.label });
        }
    }
    let mut records: Vec<ScoreRecord> = dataset
        .records
        .par_iter()
        .map(|r| {
            let t = selection.timestep_for(r.label).unwrap();
            let deviation = reconstruction_deviation(
                &r.features,
                r.label,
                t,
                denoiser,
                schedule,
                metric,
                k,
                seed,
                r.sample_id,
            )?;
            Ok(ScoreRecord {
                sample_id: r.sample_id,
                label: r.label,
                timestep: t,
                deviation,
                num_draws: k,
                metric: metric.name().to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.sample_id);
    Ok(records)
}
