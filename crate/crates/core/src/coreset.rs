//! Subset construction from per-sample scores: quantile stratification,
//! fixed windows, coverage-centric sampling, best-window search, and the
//! training-dynamics baseline scorers.
//!
//! Every strategy is rank-based — applying any strictly increasing function
//! to the scores changes nothing — and operates per class before taking the
//! union, which keeps class balance at every budget. Per-class subset sizes
//! use floor(budget * n_c).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::TrainingDynamics;
use crate::rng::{stage, substream};
use crate::scoring::ScoreRecord;

/// The minimal shape all selection strategies need: identity, class, and a
/// sortable score. Deviation records and the baseline scorers both reduce
/// to this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub sample_id: u64,
    pub label: usize,
    pub score: f64,
}

impl From<&ScoreRecord> for ScoreEntry {
    fn from(r: &ScoreRecord) -> Self {
        Self { sample_id: r.sample_id, label: r.label, score: r.deviation }
    }
}

pub fn entries_from_records(records: &[ScoreRecord]) -> Vec<ScoreEntry> {
    records.iter().map(ScoreEntry::from).collect()
}

/// A constructed subset: which method produced it, with what parameters,
/// and the selected ids (sorted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub method: String,
    pub budget: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_start: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_strata: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub selected: Vec<u64>,
}

fn sort_ascending(entries: &mut [ScoreEntry]) {
    // ties broken by sample_id so the result is independent of input order
    entries.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.sample_id.cmp(&b.sample_id))
    });
}

fn split_by_class(entries: &[ScoreEntry]) -> Vec<Vec<ScoreEntry>> {
    let num_classes = entries.iter().map(|e| e.label).max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for e in entries {
        by_class[e.label].push(e.clone());
    }
    for class in &mut by_class {
        sort_ascending(class);
    }
    by_class
}

/// Splits samples sorted ascending by score into k near-equal groups
/// (global, not per class). Group 0 holds the smallest scores; sizes differ
/// by at most one, with the earlier groups taking the remainder.
pub fn stratify_quantiles(entries: &[ScoreEntry], k: usize) -> Result<Vec<Vec<u64>>> {
    if k < 2 {
        return Err(Error::InvalidArgument("stratification needs k >= 2".into()));
    }
    if k > entries.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds sample count {}",
            entries.len()
        )));
    }
    let mut sorted = entries.to_vec();
    sort_ascending(&mut sorted);
    let n = sorted.len();
    let base = n / k;
    let extra = n % k;
    let mut groups = Vec::with_capacity(k);
    let mut offset = 0;
    for g in 0..k {
        let size = base + usize::from(g < extra);
        groups.push(sorted[offset..offset + size].iter().map(|e| e.sample_id).collect());
        offset += size;
    }
    Ok(groups)
}

/// Per class, the contiguous run of ascending-score ranks
/// [floor(start * n_c), floor(start * n_c) + floor(budget * n_c)).
pub fn window_select(entries: &[ScoreEntry], budget: f64, start: f64) -> Result<SubsetSpec> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::InvalidArgument(format!("budget must be in (0, 1], got {budget}")));
    }
    if !(0.0..=1.0).contains(&start) || start + budget > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "window start {start} with budget {budget} exceeds the list"
        )));
    }
    let mut selected = Vec::new();
    for class in split_by_class(entries) {
        let n_c = class.len();
        let lo = (start * n_c as f64).floor() as usize;
        let width = (budget * n_c as f64).floor() as usize;
        if lo + width > n_c {
            return Err(Error::InvalidArgument(format!(
                "window [{lo}, {}) exceeds class size {n_c}",
                lo + width
            )));
        }
        selected.extend(class[lo..lo + width].iter().map(|e| e.sample_id));
    }
    selected.sort_unstable();
    Ok(SubsetSpec {
        method: "window".into(),
        budget,
        window_start: Some(start),
        num_strata: None,
        step: None,
        seed: None,
        selected,
    })
}

/// Coverage-centric selection: per class, split the score-sorted samples
/// into `num_strata` near-equal strata and draw uniformly without
/// replacement, round-robin across strata, until floor(budget * n_c)
/// samples are taken.
pub fn ccs_select(
    entries: &[ScoreEntry],
    budget: f64,
    num_strata: usize,
    seed: u64,
) -> Result<SubsetSpec> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::InvalidArgument(format!("budget must be in (0, 1], got {budget}")));
    }
    if num_strata == 0 {
        return Err(Error::InvalidArgument("num_strata must be >= 1".into()));
    }
    let mut selected = Vec::new();
    for (class_idx, class) in split_by_class(entries).iter().enumerate() {
        let n_c = class.len();
        if n_c == 0 {
            continue;
        }
        let target = (budget * n_c as f64).floor() as usize;
        let k = num_strata.min(n_c);
        let base = n_c / k;
        let extra = n_c % k;
        let mut strata: Vec<Vec<u64>> = Vec::with_capacity(k);
        let mut offset = 0;
        for g in 0..k {
            let size = base + usize::from(g < extra);
            strata.push(class[offset..offset + size].iter().map(|e| e.sample_id).collect());
            offset += size;
        }
        let mut rng = substream(seed, &[stage::SUBSET, class_idx as u64]);
        let mut taken = 0;
        let mut stratum = 0usize;
        while taken < target {
            let pool = &mut strata[stratum % k];
            if !pool.is_empty() {
                let j = rand::Rng::gen_range(&mut rng, 0..pool.len());
                selected.push(pool.swap_remove(j));
                taken += 1;
            }
            stratum += 1;
            // all strata exhausted means target > n_c, impossible for
            // budget <= 1, but guard against an infinite loop anyway
            if stratum > 2 * k * (n_c + 1) {
                break;
            }
        }
    }
    selected.sort_unstable();
    Ok(SubsetSpec {
        method: "ccs".into(),
        budget,
        window_start: None,
        num_strata: Some(num_strata),
        step: None,
        seed: Some(seed),
        selected,
    })
}

/// Seeded uniform per-class sampling at the given budget — the "random"
/// baseline every comparison is anchored to.
pub fn random_select(entries: &[ScoreEntry], budget: f64, seed: u64) -> Result<SubsetSpec> {
    let mut spec = ccs_select(entries, budget, 1, seed)?;
    spec.method = "random".into();
    spec.num_strata = None;
    Ok(spec)
}

/// The window start grid scanned by best-window selection: multiples of
/// `step` in [0, min(0.5, 1 - budget)], inclusive.
pub fn bws_starts(budget: f64, step: f64) -> Vec<f64> {
    let limit = (1.0 - budget).min(0.5);
    let mut starts = Vec::new();
    let mut i = 0usize;
    loop {
        let s = i as f64 * step;
        if s > limit + 1e-9 {
            break;
        }
        starts.push(s);
        i += 1;
    }
    starts
}

/// Best-window selection outcome: the winning subset plus the full
/// start-accuracy trace that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BwsOutcome {
    pub spec: SubsetSpec,
    pub starts: Vec<f64>,
    pub accuracies: Vec<f64>,
}

/// Scans budget-width windows over the score-sorted list, trains the proxy
/// evaluator on each, and keeps the window with the highest accuracy on
/// the full set (ties to the smaller start).
pub fn bws_select(
    entries: &[ScoreEntry],
    budget: f64,
    step: f64,
    mut evaluator: impl FnMut(&SubsetSpec) -> Result<f64>,
) -> Result<BwsOutcome> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::InvalidArgument(format!("budget must be in (0, 1], got {budget}")));
    }
    if step <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let starts = bws_starts(budget, step);
    let mut accuracies = Vec::with_capacity(starts.len());
    let mut best: Option<(f64, SubsetSpec)> = None;
    for &start in &starts {
        let window = window_select(entries, budget, start)?;
        let acc = evaluator(&window).map_err(|e| {
            Error::Evaluation(format!("window evaluator failed at start {start}: {e}"))
        })?;
        accuracies.push(acc);
        let better = match &best {
            None => true,
            Some((best_acc, _)) => acc > *best_acc,
        };
        if better {
            best = Some((acc, window));
        }
    }
    let (_, mut spec) = best.expect("starts grid is never empty");
    spec.method = "bws".into();
    spec.step = Some(step);
    Ok(BwsOutcome { spec, starts, accuracies })
}

/// Early-training error-norm score: the L2 norm of (predicted probability
/// vector - one-hot label) at the probe epoch, averaged over runs.
pub fn el2n_score(runs: &[TrainingDynamics], probe_epoch: usize) -> Result<Vec<ScoreEntry>> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("el2n needs at least one dynamics run".into()));
    }
    for d in runs {
        if probe_epoch >= d.epochs() {
            return Err(Error::InvalidArgument(format!(
                "probe epoch {probe_epoch} beyond recorded dynamics ({} epochs)",
                d.epochs()
            )));
        }
    }
    let first = &runs[0];
    let n = first.sample_ids.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut score = 0.0;
        for d in runs {
            let probs = d.probs_at(probe_epoch, i);
            let mut sq = 0.0;
            for (c, p) in probs.iter().enumerate() {
                let target = if c == d.labels[i] { 1.0 } else { 0.0 };
                sq += (p - target) * (p - target);
            }
            score += sq.sqrt();
        }
        out.push(ScoreEntry {
            sample_id: first.sample_ids[i],
            label: first.labels[i],
            score: score / runs.len() as f64,
        });
    }
    Ok(out)
}

/// Forgetting events: count of correct -> incorrect transitions across
/// epochs. Samples never correct in any epoch get the never-learned
/// sentinel, the epoch count, so they rank as maximally forgettable.
pub fn forgetting_score(dynamics: &TrainingDynamics) -> Result<Vec<ScoreEntry>> {
    let epochs = dynamics.epochs();
    if epochs < 2 {
        return Err(Error::InvalidArgument(format!(
            "forgetting needs >= 2 recorded epochs, got {epochs}"
        )));
    }
    let n = dynamics.sample_ids.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut transitions = 0usize;
        let mut ever_correct = false;
        let mut prev = dynamics.correct_at(0, i);
        ever_correct |= prev;
        for e in 1..epochs {
            let cur = dynamics.correct_at(e, i);
            if prev && !cur {
                transitions += 1;
            }
            ever_correct |= cur;
            prev = cur;
        }
        let score = if ever_correct { transitions as f64 } else { epochs as f64 };
        out.push(ScoreEntry {
            sample_id: dynamics.sample_ids[i],
            label: dynamics.labels[i],
            score,
        });
    }
    Ok(out)
}
