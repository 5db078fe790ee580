//! Trainable MLP epsilon-predictor with hand-written backpropagation.
//!
//! Input encoding is concat(x_t, time features, one-hot class) where the
//! time features are (t / T, sqrt(ab_t), sqrt(1 - ab_t)) — schedule-aware
//! and cheap. Two tanh hidden layers of width H, linear output of width d.
//! Everything is f64 and parameters live in one flat vector so SGD, the
//! checkpoint format, and finite-difference probing all share one layout:
//! w1, b1, w2, b2, w3, b3 in row-major order.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{Denoiser, DenoiserKind};
use crate::error::{Error, Result};
use crate::gmm::LabeledDataset;
use crate::rng::{stage, substream};
use crate::schedule::{forward_noise, NoiseSchedule};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRD-MLP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    pub dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    /// Flat parameter vector; see [`MlpDenoiser::layout`].
    pub params: Vec<f64>,
    pub schedule: NoiseSchedule,
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub input_dim: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub total: usize,
}

pub fn param_count(dim: usize, num_classes: usize, hidden: usize) -> usize {
    let input = dim + 3 + num_classes;
    hidden * input + hidden + hidden * hidden + hidden + dim * hidden + dim
}

impl MlpDenoiser {
    pub fn layout(&self) -> Layout {
        layout(self.dim, self.num_classes, self.hidden)
    }

    fn time_features(&self, t: usize) -> [f64; 3] {
        let a = self.schedule.alpha_bar(t);
        [t as f64 / self.schedule.t_train as f64, a.sqrt(), (1.0 - a).sqrt()]
    }

    fn encode_input(&self, x_t: &[f64], t: usize, class: usize, buf: &mut [f64]) {
        let d = self.dim;
        buf[..d].copy_from_slice(x_t);
        buf[d..d + 3].copy_from_slice(&self.time_features(t));
        for c in 0..self.num_classes {
            buf[d + 3 + c] = if c == class { 1.0 } else { 0.0 };
        }
    }

    /// Forward pass writing hidden activations into the caches (needed by
    /// backprop; pass scratch buffers when only the output matters).
    fn forward(&self, input: &[f64], a1: &mut [f64], a2: &mut [f64], out: &mut [f64]) {
        let l = self.layout();
        let (h, d) = (self.hidden, self.dim);
        let p = &self.params;
        for i in 0..h {
            let row = &p[l.w1 + i * l.input_dim..l.w1 + (i + 1) * l.input_dim];
            let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + p[l.b1 + i];
            a1[i] = z.tanh();
        }
        for i in 0..h {
            let row = &p[l.w2 + i * h..l.w2 + (i + 1) * h];
            let z: f64 = row.iter().zip(&*a1).map(|(w, x)| w * x).sum::<f64>() + p[l.b2 + i];
            a2[i] = z.tanh();
        }
        for i in 0..d {
            let row = &p[l.w3 + i * h..l.w3 + (i + 1) * h];
            out[i] = row.iter().zip(&*a2).map(|(w, x)| w * x).sum::<f64>() + p[l.b3 + i];
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    // --- checkpoint bytes: magic, version, d, C, H, params (all LE) ---

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + 8 * self.params.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        buf.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], schedule: NoiseSchedule) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::Checkpoint("file shorter than header".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let dim = u32_at(12) as usize;
        let num_classes = u32_at(16) as usize;
        let hidden = u32_at(20) as usize;
        let n = param_count(dim, num_classes, hidden);
        if bytes.len() != 24 + 8 * n {
            return Err(Error::Checkpoint(format!(
                "truncated or oversized file: {} bytes, expected {}",
                bytes.len(),
                24 + 8 * n
            )));
        }
        let params: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dim, num_classes, hidden, params, schedule })
    }
}

fn layout(dim: usize, num_classes: usize, hidden: usize) -> Layout {
    let input_dim = dim + 3 + num_classes;
    let w1 = 0;
    let b1 = w1 + hidden * input_dim;
    let w2 = b1 + hidden;
    let b2 = w2 + hidden * hidden;
    let w3 = b2 + hidden;
    let b3 = w3 + dim * hidden;
    Layout { input_dim, w1, b1, w2, b2, w3, b3, total: b3 + dim }
}

impl Denoiser for MlpDenoiser {
    fn predict_into(&self, x_t: &[f64], t: usize, class: usize, out: &mut [f64]) {
        let mut input = vec![0.0; self.layout().input_dim];
        self.encode_input(x_t, t, class, &mut input);
        let mut a1 = vec![0.0; self.hidden];
        let mut a2 = vec![0.0; self.hidden];
        self.forward(&input, &mut a1, &mut a2, out);
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn kind(&self) -> DenoiserKind {
        DenoiserKind::Learned
    }
}

/// Fresh model: weights uniform in +/- 1/sqrt(fan_in) per layer, biases zero.
pub fn init_mlp(
    dim: usize,
    num_classes: usize,
    hidden: usize,
    seed: u64,
    schedule: &NoiseSchedule,
) -> Result<MlpDenoiser> {
    if hidden == 0 {
        return Err(Error::InvalidArgument("hidden width must be >= 1".into()));
    }
    let l = layout(dim, num_classes, hidden);
    let mut params = vec![0.0; l.total];
    let mut rng = substream(seed, &[stage::DENOISER_INIT]);
    let mut fill = |lo: usize, n: usize, fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let scale = 1.0 / (fan_in as f64).sqrt();
        for p in &mut params[lo..lo + n] {
            *p = rng.gen_range(-scale..scale);
        }
    };
    fill(l.w1, hidden * l.input_dim, l.input_dim, &mut rng);
    fill(l.w2, hidden * hidden, hidden, &mut rng);
    fill(l.w3, dim * hidden, hidden, &mut rng);
    Ok(MlpDenoiser { dim, num_classes, hidden, params, schedule: schedule.clone() })
}

/// One training batch: clean samples with their class labels plus the
/// (t, eps) draws defining the regression targets.
pub struct NoiseBatch<'a> {
    pub x0: Vec<&'a [f64]>,
    pub classes: Vec<usize>,
    pub t_draws: Vec<usize>,
    pub eps_draws: Vec<Vec<f64>>,
}

/// Mean squared noise-prediction error over the batch (squared L2 summed
/// over coordinates, averaged over samples) and its exact gradient with
/// respect to every parameter.
pub fn loss_and_grad(model: &MlpDenoiser, batch: &NoiseBatch) -> Result<(f64, Vec<f64>)> {
    let n = batch.x0.len();
    if n == 0 {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    if batch.classes.len() != n || batch.t_draws.len() != n || batch.eps_draws.len() != n {
        return Err(Error::InvalidArgument("batch field lengths disagree".into()));
    }
    let l = model.layout();
    let (h, d) = (model.hidden, model.dim);
    let p = &model.params;
    let mut grads = vec![0.0; l.total];
    let mut loss = 0.0;

    let mut input = vec![0.0; l.input_dim];
    let mut a1 = vec![0.0; h];
    let mut a2 = vec![0.0; h];
    let mut out = vec![0.0; d];
    let mut delta3 = vec![0.0; d];
    let mut delta2 = vec![0.0; h];
    let mut delta1 = vec![0.0; h];

    for i in 0..n {
        model.encode_input(batch.x0[i], batch.t_draws[i], batch.classes[i], &mut input);
        let x_t = forward_noise(batch.x0[i], batch.t_draws[i], &batch.eps_draws[i], &model.schedule)?;
        input[..d].copy_from_slice(&x_t);
        model.forward(&input, &mut a1, &mut a2, &mut out);

        let eps = &batch.eps_draws[i];
        let inv_n = 1.0 / n as f64;
        for j in 0..d {
            let r = out[j] - eps[j];
            loss += r * r * inv_n;
            delta3[j] = 2.0 * r * inv_n;
        }

        for j in 0..d {
            let g3 = delta3[j];
            let row = &mut grads[l.w3 + j * h..l.w3 + (j + 1) * h];
            for (g, a) in row.iter_mut().zip(&a2) {
                *g += g3 * a;
            }
            grads[l.b3 + j] += g3;
        }
        for k in 0..h {
            let mut back = 0.0;
            for j in 0..d {
                back += p[l.w3 + j * h + k] * delta3[j];
            }
            delta2[k] = back * (1.0 - a2[k] * a2[k]);
        }
        for k in 0..h {
            let g2 = delta2[k];
            let row = &mut grads[l.w2 + k * h..l.w2 + (k + 1) * h];
            for (g, a) in row.iter_mut().zip(&a1) {
                *g += g2 * a;
            }
            grads[l.b2 + k] += g2;
        }
        for k in 0..h {
            let mut back = 0.0;
            for j in 0..h {
                back += p[l.w2 + j * h + k] * delta2[j];
            }
            delta1[k] = back * (1.0 - a1[k] * a1[k]);
        }
        for k in 0..h {
            let g1 = delta1[k];
            let row = &mut grads[l.w1 + k * l.input_dim..l.w1 + (k + 1) * l.input_dim];
            for (g, x) in row.iter_mut().zip(&input) {
                *g += g1 * x;
            }
            grads[l.b1 + k] += g1;
        }
    }
    Ok((loss, grads))
}

/// Loss only, on externally supplied (t, eps) draws. Used by finite
/// differences and the held-out comparison against the analytic denoiser.
pub fn loss_only(model: &MlpDenoiser, batch: &NoiseBatch) -> Result<f64> {
    let l = model.layout();
    let (h, d) = (model.hidden, model.dim);
    let mut input = vec![0.0; l.input_dim];
    let mut a1 = vec![0.0; h];
    let mut a2 = vec![0.0; h];
    let mut out = vec![0.0; d];
    let mut loss = 0.0;
    let n = batch.x0.len();
    for i in 0..n {
        model.encode_input(batch.x0[i], batch.t_draws[i], batch.classes[i], &mut input);
        let x_t = forward_noise(batch.x0[i], batch.t_draws[i], &batch.eps_draws[i], &model.schedule)?;
        input[..d].copy_from_slice(&x_t);
        model.forward(&input, &mut a1, &mut a2, &mut out);
        for j in 0..d {
            let r = out[j] - batch.eps_draws[i][j];
            loss += r * r / n as f64;
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 64, learning_rate: 1e-3, hidden: 128, seed: 0 }
    }
}

/// Plain SGD on the noise-prediction loss. Single-threaded and fully
/// deterministic given the config seed; per-epoch mean losses are returned
/// alongside the model.
pub fn train_denoiser(
    dataset: &LabeledDataset,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(MlpDenoiser, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let mut model = init_mlp(dataset.dim, dataset.num_classes, config.hidden, config.seed, schedule)?;
    let mut rng = substream(config.seed, &[stage::DENOISER_TRAIN]);
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        // Fisher-Yates shuffle
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut batch = NoiseBatch {
                x0: Vec::with_capacity(chunk.len()),
                classes: Vec::with_capacity(chunk.len()),
                t_draws: Vec::with_capacity(chunk.len()),
                eps_draws: Vec::with_capacity(chunk.len()),
            };
            for &idx in chunk {
                let rec = &dataset.records[idx];
                batch.x0.push(&rec.features);
                batch.classes.push(rec.label);
                batch.t_draws.push(rng.gen_range(1..=schedule.t_train));
                batch
                    .eps_draws
                    .push((0..dataset.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
            }
            let (loss, grads) = loss_and_grad(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss became {loss} at epoch {epoch} (lr {})",
                    config.learning_rate
                )));
            }
            for (pm, g) in model.params.iter_mut().zip(&grads) {
                *pm -= config.learning_rate * g;
            }
            epoch_loss += loss;
            batches += 1;
        }
        if !model.all_finite() {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {epoch}")));
        }
        losses.push(epoch_loss / batches as f64);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::linear_schedule;

    fn sched() -> NoiseSchedule {
        linear_schedule(100, 1e-3, 0.02, 10).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_counts_match() {
        let s = sched();
        let a = init_mlp(2, 3, 8, 42, &s).unwrap();
        let b = init_mlp(2, 3, 8, 42, &s).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, init_mlp(2, 3, 8, 43, &s).unwrap().params);

        // H = 1, d = 2, C = 2: input = 2 + 3 + 2 = 7
        // params = 1*7 + 1 + 1*1 + 1 + 2*1 + 2 = 14
        assert_eq!(param_count(2, 2, 1), 14);
        let m = init_mlp(2, 2, 1, 0, &s).unwrap();
        assert_eq!(m.params.len(), 14);
    }

    #[test]
    fn fresh_init_output_is_bounded() {
        let s = sched();
        let m = init_mlp(2, 2, 32, 7, &s).unwrap();
        let mut rng = substream(7, &[stage::ORACLE, 42]);
        for _ in 0..100 {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let x = [theta.cos(), theta.sin()];
            let t = rng.gen_range(1..=100);
            let out = m.predict(&x, t, rng.gen_range(0..2));
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 10.0, "fresh prediction norm {norm}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = sched();
        let model = init_mlp(2, 2, 6, 11, &s).unwrap();
        let mut rng = substream(11, &[stage::ORACLE, 1]);
        let x0: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let batch = NoiseBatch {
            x0: x0.iter().map(|v| v.as_slice()).collect(),
            classes: vec![0, 1, 0, 1],
            t_draws: vec![3, 40, 77, 100],
            eps_draws: (0..4)
                .map(|_| (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect(),
        };
        let (_, grads) = loss_and_grad(&model, &batch).unwrap();

        // probe >= 50 random parameters with central differences
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for probe in 0..60 {
            let idx =
                (substream(99, &[probe]).gen::<u64>() % model.params.len() as u64) as usize;
            let mut plus = model.clone();
            plus.params[idx] += h;
            let mut minus = model.clone();
            minus.params[idx] -= h;
            let fd = (loss_only(&plus, &batch).unwrap() - loss_only(&minus, &batch).unwrap())
                / (2.0 * h);
            let denom = fd.abs().max(grads[idx].abs()).max(1e-8);
            worst = worst.max((fd - grads[idx]).abs() / denom);
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }

    #[test]
    fn batch_duplication_is_invariant() {
        let s = sched();
        let model = init_mlp(2, 2, 5, 3, &s).unwrap();
        let x: Vec<f64> = vec![0.4, -0.7];
        let y: Vec<f64> = vec![-1.1, 0.2];
        let e1: Vec<f64> = vec![0.3, 0.9];
        let e2: Vec<f64> = vec![-0.5, 0.1];
        let single = NoiseBatch {
            x0: vec![&x, &y],
            classes: vec![0, 1],
            t_draws: vec![10, 60],
            eps_draws: vec![e1.clone(), e2.clone()],
        };
        let doubled = NoiseBatch {
            x0: vec![&x, &y, &x, &y],
            classes: vec![0, 1, 0, 1],
            t_draws: vec![10, 60, 10, 60],
            eps_draws: vec![e1.clone(), e2.clone(), e1, e2],
        };
        let (l1, g1) = loss_and_grad(&model, &single).unwrap();
        let (l2, g2) = loss_and_grad(&model, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_is_stationary() {
        // model with all-zero parameters predicts 0; feed eps = 0 targets
        let s = sched();
        let mut model = init_mlp(2, 2, 4, 0, &s).unwrap();
        model.params.iter_mut().for_each(|p| *p = 0.0);
        let x: Vec<f64> = vec![0.5, 0.5];
        let batch = NoiseBatch {
            x0: vec![&x],
            classes: vec![0],
            t_draws: vec![50],
            eps_draws: vec![vec![0.0, 0.0]],
        };
        let (loss, grads) = loss_and_grad(&model, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let s = sched();
        let m = init_mlp(2, 2, 8, 21, &s).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 24 + 8 * m.params.len());
        let loaded = MlpDenoiser::from_bytes(&bytes, s.clone()).unwrap();
        let mut rng = substream(5, &[1]);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let t = rng.gen_range(1..=100);
            let c = rng.gen_range(0..2);
            assert_eq!(m.predict(&x, t, c), loaded.predict(&x, t, c));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MlpDenoiser::from_bytes(&bad, s.clone()).is_err());
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(MlpDenoiser::from_bytes(&bad_version, s.clone()).is_err());
        assert!(MlpDenoiser::from_bytes(&bytes[..bytes.len() - 3], s).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let s = sched();
        let world = crate::gmm::preset("w2").unwrap().world;
        let ds = crate::gmm::sample_dataset(&world, 10, 1).unwrap();
        let cfg = TrainConfig { epochs: 0, hidden: 4, seed: 9, ..Default::default() };
        let (m, losses) = train_denoiser(&ds, &s, &cfg).unwrap();
        assert!(losses.is_empty());
        assert_eq!(m.params, init_mlp(2, 2, 4, 9, &s).unwrap().params);
    }

    #[test]
    fn training_is_deterministic() {
        let s = sched();
        let world = crate::gmm::preset("w2").unwrap().world;
        let ds = crate::gmm::sample_dataset(&world, 30, 2).unwrap();
        let cfg = TrainConfig { epochs: 5, hidden: 8, seed: 4, ..Default::default() };
        let (m1, l1) = train_denoiser(&ds, &s, &cfg).unwrap();
        let (m2, l2) = train_denoiser(&ds, &s, &cfg).unwrap();
        assert_eq!(m1.params, m2.params);
        assert_eq!(l1, l2);
    }
}
