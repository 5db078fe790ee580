//! Labeled Gaussian-mixture worlds with closed-form densities, scores,
//! posteriors, and the analytic optimal denoiser.
//!
//! Diffusing a mixture component N(mu, Sigma) to level t keeps it Gaussian:
//! mean sqrt(ab_t) mu, covariance ab_t Sigma + (1 - ab_t) I. Everything
//! here is exact up to floating point, which is what lets the oracle suite
//! check the pipeline against ground truth instead of folklore.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserKind};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::rng::{stage, substream};
use crate::schedule::NoiseSchedule;

pub const MAX_WORLD_DIM: usize = 16;

const LN_2PI: f64 = 1.8378770664093453;

/// One mixture component of a class-conditional distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major covariance; kept alongside its Cholesky factor.
    pub cov: Vec<f64>,
    pub cov_chol: Cholesky,
}

/// Labeled Gaussian-mixture data distribution with a uniform class prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmWorld {
    pub dim: usize,
    /// `classes[c]` lists the mixture components of class c.
    pub classes: Vec<Vec<GaussComponent>>,
}

impl GmmWorld {
    /// Builds a world from per-class (weight, mean, covariance) triples,
    /// validating weights, dimensions, and positive-definiteness.
    pub fn new(dim: usize, classes: Vec<Vec<(f64, Vec<f64>, Vec<f64>)>>) -> Result<Self> {
        if dim == 0 || dim > MAX_WORLD_DIM {
            return Err(Error::InvalidArgument(format!(
                "world dimension must be in [1, {MAX_WORLD_DIM}], got {dim}"
            )));
        }
        if classes.is_empty() {
            return Err(Error::InvalidArgument("world needs at least one class".into()));
        }
        let mut built = Vec::with_capacity(classes.len());
        for (c, comps) in classes.into_iter().enumerate() {
            if comps.is_empty() {
                return Err(Error::InvalidArgument(format!("class {c} has no components")));
            }
            let wsum: f64 = comps.iter().map(|(w, _, _)| w).sum();
            if (wsum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "class {c} component weights sum to {wsum}, expected 1"
                )));
            }
            let mut class = Vec::with_capacity(comps.len());
            for (weight, mean, cov) in comps {
                if mean.len() != dim || cov.len() != dim * dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: mean.len() });
                }
                if weight <= 0.0 {
                    return Err(Error::InvalidArgument("component weights must be positive".into()));
                }
                let cov_chol = Cholesky::factor(dim, &cov)?;
                class.push(GaussComponent { weight, mean, cov, cov_chol });
            }
            built.push(class);
        }
        Ok(Self { dim, classes: built })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Overall mean of class c (component-weighted).
    pub fn class_mean(&self, c: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for comp in &self.classes[c] {
            for (mi, &x) in m.iter_mut().zip(&comp.mean) {
                *mi += comp.weight * x;
            }
        }
        m
    }

    /// Snapshot of the world diffused to timestep t (t = 0 is the data
    /// distribution). Factors every diffused covariance once so batch
    /// queries stay cheap.
    pub fn at(&self, t: usize, schedule: &NoiseSchedule) -> Result<DiffusedGmm> {
        schedule.validate_timestep(t, 0)?;
        let a = schedule.alpha_bar(t);
        let d = self.dim;
        let mut classes = Vec::with_capacity(self.classes.len());
        for comps in &self.classes {
            let mut out = Vec::with_capacity(comps.len());
            for comp in comps {
                let mean: Vec<f64> = comp.mean.iter().map(|m| a.sqrt() * m).collect();
                let mut cov = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        let mut v = a * comp.cov[i * d + j];
                        if i == j {
                            v += 1.0 - a;
                        }
                        cov[i * d + j] = v;
                    }
                }
                let chol = Cholesky::factor(d, &cov)?;
                let log_norm = -0.5 * (d as f64 * LN_2PI + chol.log_det());
                out.push(DiffusedComponent { weight: comp.weight, mean, chol, log_norm });
            }
            classes.push(out);
        }
        Ok(DiffusedGmm { dim: d, classes })
    }
}

#[derive(Debug, Clone)]
pub struct DiffusedComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub chol: Cholesky,
    log_norm: f64,
}

/// A [`GmmWorld`] frozen at one diffusion timestep.
#[derive(Debug, Clone)]
pub struct DiffusedGmm {
    pub dim: usize,
    pub classes: Vec<Vec<DiffusedComponent>>,
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl DiffusedGmm {
    fn component_log_density(&self, comp: &DiffusedComponent, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&comp.mean).map(|(a, b)| a - b).collect();
        comp.log_norm - 0.5 * comp.chol.mahalanobis_sq(&diff)
    }

    /// Exact class-conditional log density.
    pub fn class_log_density(&self, x: &[f64], c: usize) -> f64 {
        let terms: Vec<f64> = self.classes[c]
            .iter()
            .map(|comp| comp.weight.ln() + self.component_log_density(comp, x))
            .collect();
        log_sum_exp(&terms)
    }

    /// Exact marginal log density under the uniform class prior.
    pub fn marginal_log_density(&self, x: &[f64]) -> f64 {
        let c = self.classes.len() as f64;
        let terms: Vec<f64> =
            (0..self.classes.len()).map(|cl| self.class_log_density(x, cl)).collect();
        log_sum_exp(&terms) - c.ln()
    }

    /// Gradient of the class-conditional log density at x:
    /// responsibility-weighted sum of -Sigma_k^{-1} (x - mean_k).
    pub fn class_score(&self, x: &[f64], c: usize) -> Vec<f64> {
        let comps = &self.classes[c];
        let log_terms: Vec<f64> = comps
            .iter()
            .map(|comp| comp.weight.ln() + self.component_log_density(comp, x))
            .collect();
        let lse = log_sum_exp(&log_terms);
        let mut score = vec![0.0; self.dim];
        for (comp, lt) in comps.iter().zip(&log_terms) {
            let r = (lt - lse).exp();
            let mut diff: Vec<f64> = x.iter().zip(&comp.mean).map(|(a, b)| a - b).collect();
            comp.chol.solve(&mut diff);
            for (s, dv) in score.iter_mut().zip(&diff) {
                *s -= r * dv;
            }
        }
        score
    }

    /// p(c | x) under the uniform prior; sums to 1.
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let log_terms: Vec<f64> =
            (0..self.classes.len()).map(|c| self.class_log_density(x, c)).collect();
        let lse = log_sum_exp(&log_terms);
        log_terms.iter().map(|lt| (lt - lse).exp()).collect()
    }

    /// log p(c | x) for all classes.
    pub fn log_posterior(&self, x: &[f64]) -> Vec<f64> {
        let log_terms: Vec<f64> =
            (0..self.classes.len()).map(|c| self.class_log_density(x, c)).collect();
        let lse = log_sum_exp(&log_terms);
        log_terms.iter().map(|lt| lt - lse).collect()
    }
}

/// Exact log density of the (possibly diffused) world. `class = None`
/// averages classes under the uniform prior; `t = 0` is the data density.
pub fn log_density(
    world: &GmmWorld,
    x: &[f64],
    class: Option<usize>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let frozen = world.at(t, schedule)?;
    Ok(match class {
        Some(c) => frozen.class_log_density(x, c),
        None => frozen.marginal_log_density(x),
    })
}

/// Closed-form gradient of the diffused class-conditional log density.
pub fn score_xt(
    world: &GmmWorld,
    x_t: &[f64],
    t: usize,
    class: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.validate_timestep(t, 1)?;
    Ok(world.at(t, schedule)?.class_score(x_t, class))
}

/// Exact class posterior p(c | x_t) at timestep t (t = 0 allowed).
pub fn exact_posterior(
    world: &GmmWorld,
    x_t: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    Ok(world.at(t, schedule)?.posterior(x_t))
}

/// Bayes-optimal epsilon-predictor for a known world:
/// eps*(x_t, t, c) = -sqrt(1 - ab_t) * grad log q_t(x_t | c).
pub struct AnalyticDenoiser {
    world: GmmWorld,
    schedule: NoiseSchedule,
    /// Frozen per-timestep snapshots, built lazily would race; built eagerly
    /// for every training timestep instead (cheap at d <= 16).
    frozen: Vec<DiffusedGmm>,
}

pub fn analytic_denoiser(world: &GmmWorld, schedule: &NoiseSchedule) -> Result<AnalyticDenoiser> {
    let mut frozen = Vec::with_capacity(schedule.t_train + 1);
    for t in 0..=schedule.t_train {
        frozen.push(world.at(t, schedule)?);
    }
    Ok(AnalyticDenoiser { world: world.clone(), schedule: schedule.clone(), frozen })
}

impl AnalyticDenoiser {
    pub fn world(&self) -> &GmmWorld {
        &self.world
    }
}

impl Denoiser for AnalyticDenoiser {
    fn predict_into(&self, x_t: &[f64], t: usize, class: usize, out: &mut [f64]) {
        let a = self.schedule.alpha_bar(t);
        let scale = -(1.0 - a).sqrt();
        let score = self.frozen[t].class_score(x_t, class);
        for (o, s) in out.iter_mut().zip(&score) {
            *o = scale * s;
        }
    }

    fn dim(&self) -> usize {
        self.world.dim
    }

    fn num_classes(&self) -> usize {
        self.world.num_classes()
    }

    fn kind(&self) -> DenoiserKind {
        DenoiserKind::Analytic
    }
}

// ---------------------------------------------------------------------------
// Labeled datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Inlier,
    InjectedOutlier,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Inlier => write!(f, "inlier"),
            Provenance::InjectedOutlier => write!(f, "injected_outlier"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataRecord {
    pub sample_id: u64,
    pub features: Vec<f64>,
    pub label: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub dim: usize,
    pub num_classes: usize,
    pub master_seed: u64,
    pub records: Vec<DataRecord>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, sample_id: u64) -> Option<&DataRecord> {
        // ids are contiguous from 0, so index directly
        self.records.get(sample_id as usize)
    }

    /// New dataset holding only the given sample ids (ids are re-kept, not
    /// renumbered; selection subsets stay traceable to the parent).
    pub fn subset(&self, ids: &[u64]) -> LabeledDataset {
        LabeledDataset {
            dim: self.dim,
            num_classes: self.num_classes,
            master_seed: self.master_seed,
            records: ids.iter().filter_map(|&id| self.record(id).cloned()).collect(),
        }
    }

    pub fn ids_by_class(&self) -> Vec<Vec<u64>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for r in &self.records {
            out[r.label].push(r.sample_id);
        }
        out
    }
}

fn draw_component(comps: &[GaussComponent], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, comp) in comps.iter().enumerate() {
        acc += comp.weight;
        if u < acc {
            return k;
        }
    }
    comps.len() - 1
}

fn draw_from_class(world: &GmmWorld, c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let comp = &world.classes[c][draw_component(&world.classes[c], rng)];
    let d = world.dim;
    let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut x = vec![0.0; d];
    comp.cov_chol.mul_lower(&z, &mut x);
    for (xi, mi) in x.iter_mut().zip(&comp.mean) {
        *xi += mi;
    }
    x
}

/// I.i.d. class-conditional draws, `n_per_class` per class, ids contiguous
/// from 0 in class-block order. Deterministic given the seed.
pub fn sample_dataset(world: &GmmWorld, n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be >= 1".into()));
    }
    let mut records = Vec::with_capacity(n_per_class * world.num_classes());
    let mut id = 0u64;
    for c in 0..world.num_classes() {
        for i in 0..n_per_class {
            let mut rng = substream(seed, &[stage::DATASET, c as u64, i as u64]);
            let features = draw_from_class(world, c, &mut rng);
            records.push(DataRecord { sample_id: id, features, label: c, provenance: Provenance::Inlier });
            id += 1;
        }
    }
    Ok(LabeledDataset {
        dim: world.dim,
        num_classes: world.num_classes(),
        master_seed: seed,
        records,
    })
}

/// Unit vector orthogonal to every class-mean direction: Gram-Schmidt over
/// the class means, then the first standard basis vector with a nonzero
/// residual. Deterministic.
fn orthogonal_unit(world: &GmmWorld) -> Result<Vec<f64>> {
    let d = world.dim;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let orthonormalize = |v: &[f64], basis: &Vec<Vec<f64>>| -> Vec<f64> {
        let mut r = v.to_vec();
        for b in basis {
            let dot: f64 = r.iter().zip(b).map(|(a, b)| a * b).sum();
            for (ri, bi) in r.iter_mut().zip(b) {
                *ri -= dot * bi;
            }
        }
        r
    };
    for c in 0..world.num_classes() {
        let m = world.class_mean(c);
        let r = orthonormalize(&m, &basis);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            basis.push(r.iter().map(|v| v / norm).collect());
        }
    }
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        let r = orthonormalize(&e, &basis);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return Ok(r.iter().map(|v| v / norm).collect());
        }
    }
    Err(Error::InvalidArgument(
        "no direction orthogonal to the class means exists (dimension too small)".into(),
    ))
}

/// Replaces a per-class fraction of records with draws from
/// N(offset_scale * u, 0.25 I), u orthogonal to the class-mean directions.
/// Labels are retained; replaced records are tagged.
pub fn inject_outliers(
    dataset: &LabeledDataset,
    world: &GmmWorld,
    fraction: f64,
    offset_scale: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(0.0..0.5).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "outlier fraction must be in [0, 0.5), got {fraction}"
        )));
    }
    if fraction == 0.0 {
        return Ok(dataset.clone());
    }
    let u = orthogonal_unit(world)?;
    let mut out = dataset.clone();
    for (c, ids) in dataset.ids_by_class().iter().enumerate() {
        let k = (fraction * ids.len() as f64).round() as usize;
        // choose k ids without replacement via a seeded partial shuffle
        let mut pool: Vec<u64> = ids.clone();
        let mut rng = substream(seed, &[stage::OUTLIERS, c as u64]);
        for i in 0..k.min(pool.len()) {
            let j = i + rng.gen_range(0..pool.len() - i);
            pool.swap(i, j);
        }
        for (slot, &id) in pool.iter().take(k).enumerate() {
            let mut draw = substream(seed, &[stage::OUTLIERS, c as u64, slot as u64]);
            let rec = &mut out.records[id as usize];
            for (f, ui) in rec.features.iter_mut().zip(&u) {
                let z: f64 = draw.sample(StandardNormal);
                *f = offset_scale * ui + 0.5 * z;
            }
            rec.provenance = Provenance::InjectedOutlier;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Presets

/// Outlier-injection parameters bundled with a world preset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OutlierParams {
    pub fraction: f64,
    pub offset_scale: f64,
}

/// A named world plus the dataset recipe it ships with.
#[derive(Debug, Clone)]
pub struct WorldPreset {
    pub name: String,
    pub world: GmmWorld,
    pub outliers: Option<OutlierParams>,
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn two_class_axis_world(mean: f64) -> GmmWorld {
    GmmWorld::new(
        2,
        vec![
            vec![(1.0, vec![-mean, 0.0], identity(2))],
            vec![(1.0, vec![mean, 0.0], identity(2))],
        ],
    )
    .expect("preset construction")
}

/// Standard worlds by name: `w2` (2D, means +/-[2,0]), `w2overlap`
/// (means +/-[1,0]), `w2o` (w2overlap plus 10% injected outliers at offset
/// 10), and `w1d` (1D, means +/-4, the well-separated oracle world).
pub fn preset(name: &str) -> Result<WorldPreset> {
    let lname = name.to_ascii_lowercase();
    let (world, outliers) = match lname.as_str() {
        "w2" => (two_class_axis_world(2.0), None),
        "w2overlap" => (two_class_axis_world(1.0), None),
        "w2o" => (
            two_class_axis_world(1.0),
            Some(OutlierParams { fraction: 0.1, offset_scale: 10.0 }),
        ),
        "w1d" => (
            GmmWorld::new(
                1,
                vec![
                    vec![(1.0, vec![-4.0], vec![1.0])],
                    vec![(1.0, vec![4.0], vec![1.0])],
                ],
            )?,
            None,
        ),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown world preset '{name}' (known: w2, w2overlap, w2o, w1d)"
            )))
        }
    };
    Ok(WorldPreset { name: lname, world, outliers })
}

/// All shipped preset names.
pub const PRESET_NAMES: &[&str] = &["w2", "w2overlap", "w2o", "w1d"];
