//! Downstream proxy training and evaluation.
//!
//! The default proxy is multinomial logistic regression trained by
//! full-batch gradient descent with analytic gradients — convex, so runs
//! are seed-stable and the gradient is trivially auditable against finite
//! differences. A 2-layer tanh MLP ("mlp2") is available where nontrivial
//! forgetting dynamics are needed. Dynamics (per-epoch correctness and
//! class probabilities) are recorded for the baseline scorers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{GmmWorld, LabeledDataset};
use crate::rng::{stage, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Logistic,
    Mlp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalTrainConfig {
    pub kind: ClassifierKind,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Hidden width for mlp2; ignored by logistic.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for EvalTrainConfig {
    fn default() -> Self {
        Self { kind: ClassifierKind::Logistic, epochs: 300, learning_rate: 0.5, hidden: 16, seed: 0 }
    }
}

/// Anything that yields class probabilities for a feature vector.
pub trait Classifier {
    fn predict_proba(&self, x: &[f64]) -> Vec<f64>;

    /// Argmax class with first-max tie-breaking (class 0 wins full ties).
    fn predict(&self, x: &[f64]) -> usize {
        let p = self.predict_proba(x);
        let mut best = 0;
        for (c, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = c;
            }
        }
        best
    }
}

/// Logistic-regression or small-MLP model with a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedClassifier {
    pub kind: ClassifierKind,
    pub dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

impl TrainedClassifier {
    fn zeroed(kind: ClassifierKind, dim: usize, num_classes: usize, hidden: usize) -> Self {
        let n = match kind {
            ClassifierKind::Logistic => num_classes * dim + num_classes,
            ClassifierKind::Mlp2 => hidden * dim + hidden + num_classes * hidden + num_classes,
        };
        Self { kind, dim, num_classes, hidden, params: vec![0.0; n] }
    }

    fn logits(&self, x: &[f64], hidden_buf: &mut Vec<f64>) -> Vec<f64> {
        let (d, c, h) = (self.dim, self.num_classes, self.hidden);
        match self.kind {
            ClassifierKind::Logistic => {
                let w = &self.params[..c * d];
                let b = &self.params[c * d..];
                (0..c)
                    .map(|k| {
                        w[k * d..(k + 1) * d].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()
                            + b[k]
                    })
                    .collect()
            }
            ClassifierKind::Mlp2 => {
                let w1 = &self.params[..h * d];
                let b1 = &self.params[h * d..h * d + h];
                let off = h * d + h;
                let w2 = &self.params[off..off + c * h];
                let b2 = &self.params[off + c * h..];
                hidden_buf.resize(h, 0.0);
                for k in 0..h {
                    let z: f64 = w1[k * d..(k + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(wi, xi)| wi * xi)
                        .sum::<f64>()
                        + b1[k];
                    hidden_buf[k] = z.tanh();
                }
                (0..c)
                    .map(|k| {
                        w2[k * h..(k + 1) * h]
                            .iter()
                            .zip(hidden_buf.iter())
                            .map(|(wi, ai)| wi * ai)
                            .sum::<f64>()
                            + b2[k]
                    })
                    .collect()
            }
        }
    }
}

impl Classifier for TrainedClassifier {
    fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = Vec::new();
        let mut z = self.logits(x, &mut hidden);
        softmax_in_place(&mut z);
        z
    }
}

/// The exact posterior of a known world used as a classifier — the Bayes
/// reference point for sanity checks.
pub struct BayesClassifier<'a> {
    pub world: &'a GmmWorld,
}

impl Classifier for BayesClassifier<'_> {
    fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        // t = 0 posterior needs no schedule; reuse the frozen-at-0 view
        let schedule = crate::schedule::linear_schedule(1, 0.5, 0.5, 1).expect("static schedule");
        self.world.at(0, &schedule).expect("t = 0 snapshot").posterior(x)
    }
}

/// Per-epoch record of what the classifier believed about each training
/// sample, plus the final parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingDynamics {
    pub sample_ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `correct[e][i]`: was sample i argmax-correct at epoch e.
    pub correct: Vec<Vec<bool>>,
    /// `probs[e]` is row-major (n x C) at epoch e.
    pub probs: Vec<Vec<f64>>,
    pub config: EvalTrainConfig,
}

impl TrainingDynamics {
    pub fn epochs(&self) -> usize {
        self.correct.len()
    }

    pub fn correct_at(&self, epoch: usize, i: usize) -> bool {
        self.correct[epoch][i]
    }

    pub fn probs_at(&self, epoch: usize, i: usize) -> &[f64] {
        let c = self.num_classes;
        &self.probs[epoch][i * c..(i + 1) * c]
    }

    #[doc(hidden)]
    pub fn for_tests(
        sample_ids: Vec<u64>,
        labels: Vec<usize>,
        correct: Vec<Vec<bool>>,
        probs: Vec<Vec<f64>>,
        num_classes: usize,
    ) -> Self {
        Self { sample_ids, labels, num_classes, correct, probs, config: EvalTrainConfig::default() }
    }
}

/// Cross-entropy loss and gradient for either classifier kind; exposed for
/// the finite-difference check.
pub fn classifier_loss_and_grad(
    model: &TrainedClassifier,
    xs: &[&[f64]],
    ys: &[usize],
) -> (f64, Vec<f64>) {
    let n = xs.len();
    let (d, c, h) = (model.dim, model.num_classes, model.hidden);
    let inv_n = 1.0 / n as f64;
    let mut grads = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    let mut hidden = Vec::new();
    for (x, &y) in xs.iter().zip(ys) {
        let mut p = model.logits(x, &mut hidden);
        softmax_in_place(&mut p);
        loss -= p[y].max(1e-300).ln() * inv_n;
        match model.kind {
            ClassifierKind::Logistic => {
                for k in 0..c {
                    let g = (p[k] - f64::from(k == y)) * inv_n;
                    for (gw, xi) in grads[k * d..(k + 1) * d].iter_mut().zip(*x) {
                        *gw += g * xi;
                    }
                    grads[c * d + k] += g;
                }
            }
            ClassifierKind::Mlp2 => {
                let off = h * d + h;
                let w2 = &model.params[off..off + c * h];
                let mut dhidden = vec![0.0; h];
                for k in 0..c {
                    let g = (p[k] - f64::from(k == y)) * inv_n;
                    for j in 0..h {
                        grads[off + k * h + j] += g * hidden[j];
                        dhidden[j] += g * w2[k * h + j];
                    }
                    grads[off + c * h + k] += g;
                }
                for j in 0..h {
                    let dz = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
                    for (gw, xi) in grads[j * d..(j + 1) * d].iter_mut().zip(*x) {
                        *gw += dz * xi;
                    }
                    grads[h * d + j] += dz;
                }
            }
        }
    }
    (loss, grads)
}

/// Full-batch gradient descent on the subset; dynamics recorded every
/// epoch. Logistic starts from zeros; mlp2 from a seeded scaled-uniform
/// init. Deterministic given the config.
pub fn train_classifier(
    subset: &LabeledDataset,
    config: &EvalTrainConfig,
) -> Result<(TrainedClassifier, TrainingDynamics)> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("training subset is empty".into()));
    }
    let mut present = vec![false; subset.num_classes];
    for r in &subset.records {
        present[r.label] = true;
    }
    if !present.iter().all(|&p| p) {
        return Err(Error::Evaluation(format!(
            "training subset is missing classes: {:?}",
            present
                .iter()
                .enumerate()
                .filter_map(|(c, &p)| (!p).then_some(c))
                .collect::<Vec<_>>()
        )));
    }

    let (d, c) = (subset.dim, subset.num_classes);
    let mut model = TrainedClassifier::zeroed(config.kind, d, c, config.hidden);
    if config.kind == ClassifierKind::Mlp2 {
        let mut rng = substream(config.seed, &[stage::CLASSIFIER]);
        let scale_1 = 1.0 / (d as f64).sqrt();
        let h = config.hidden;
        for p in &mut model.params[..h * d] {
            *p = rng.gen_range(-scale_1..scale_1);
        }
        let scale_2 = 1.0 / (h as f64).sqrt();
        let off = h * d + h;
        for p in &mut model.params[off..off + c * h] {
            *p = rng.gen_range(-scale_2..scale_2);
        }
    }

    let xs: Vec<&[f64]> = subset.records.iter().map(|r| r.features.as_slice()).collect();
    let ys: Vec<usize> = subset.records.iter().map(|r| r.label).collect();
    let n = xs.len();

    let mut dynamics = TrainingDynamics {
        sample_ids: subset.records.iter().map(|r| r.sample_id).collect(),
        labels: ys.clone(),
        num_classes: c,
        correct: Vec::with_capacity(config.epochs),
        probs: Vec::with_capacity(config.epochs),
        config: *config,
    };

    for epoch in 0..config.epochs {
        let (loss, grads) = classifier_loss_and_grad(&model, &xs, &ys);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "classifier loss became {loss} at epoch {epoch}"
            )));
        }
        for (p, g) in model.params.iter_mut().zip(&grads) {
            *p -= config.learning_rate * g;
        }
        let mut correct_row = Vec::with_capacity(n);
        let mut prob_row = Vec::with_capacity(n * c);
        for (x, &y) in xs.iter().zip(&ys) {
            let p = model.predict_proba(x);
            correct_row.push(model.predict(x) == y);
            prob_row.extend_from_slice(&p);
        }
        dynamics.correct.push(correct_row);
        dynamics.probs.push(prob_row);
    }
    Ok((model, dynamics))
}

/// Fraction of correctly classified samples.
pub fn evaluate(model: &dyn Classifier, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let correct =
        test.records.iter().filter(|r| model.predict(&r.features) == r.label).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Cross-evaluation: stratify train and test by their scores into k groups,
/// train one model per train stratum, evaluate it on every test stratum.
/// `matrix[i][j]` is the accuracy of the model trained on train-stratum i
/// when tested on test-stratum j (stratum 0 = lowest scores).
pub fn cross_eval(
    train: &LabeledDataset,
    train_scores: &[crate::coreset::ScoreEntry],
    test: &LabeledDataset,
    test_scores: &[crate::coreset::ScoreEntry],
    k: usize,
    config: &EvalTrainConfig,
) -> Result<Vec<Vec<f64>>> {
    let train_groups = crate::coreset::stratify_quantiles(train_scores, k)?;
    let test_groups = crate::coreset::stratify_quantiles(test_scores, k)?;
    let mut matrix = Vec::with_capacity(k);
    for ids in &train_groups {
        let subset = train.subset(ids);
        let (model, _) = train_classifier(&subset, config)?;
        let mut row = Vec::with_capacity(k);
        for test_ids in &test_groups {
            row.push(evaluate(&model, &test.subset(test_ids))?);
        }
        matrix.push(row);
    }
    Ok(matrix)
}

/// Mean of the off-diagonal entries of row i.
pub fn off_diagonal_mean(matrix: &[Vec<f64>], row: usize) -> f64 {
    let vals: Vec<f64> = matrix[row]
        .iter()
        .enumerate()
        .filter_map(|(j, &v)| (j != row).then_some(v))
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{preset, sample_dataset};

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let wp = preset("w2overlap").unwrap();
        let ds = sample_dataset(&wp.world, 20, 3).unwrap();
        let xs: Vec<&[f64]> = ds.records.iter().map(|r| r.features.as_slice()).collect();
        let ys: Vec<usize> = ds.records.iter().map(|r| r.label).collect();
        let mut model = TrainedClassifier::zeroed(ClassifierKind::Logistic, 2, 2, 0);
        let mut rng = substream(1, &[stage::ORACLE]);
        for p in &mut model.params {
            *p = rng.gen_range(-0.5..0.5);
        }
        let (_, grads) = classifier_loss_and_grad(&model, &xs, &ys);
        let h = 1e-6;
        for idx in 0..model.params.len() {
            let mut plus = model.clone();
            plus.params[idx] += h;
            let mut minus = model.clone();
            minus.params[idx] -= h;
            let (lp, _) = classifier_loss_and_grad(&plus, &xs, &ys);
            let (lm, _) = classifier_loss_and_grad(&minus, &xs, &ys);
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grads[idx].abs()).max(1e-8);
            assert!(
                (fd - grads[idx]).abs() / denom < 1e-6,
                "param {idx}: fd {fd} vs analytic {}",
                grads[idx]
            );
        }
    }

    #[test]
    fn mlp2_gradient_matches_finite_differences() {
        let wp = preset("w2overlap").unwrap();
        let ds = sample_dataset(&wp.world, 10, 5).unwrap();
        let xs: Vec<&[f64]> = ds.records.iter().map(|r| r.features.as_slice()).collect();
        let ys: Vec<usize> = ds.records.iter().map(|r| r.label).collect();
        let mut model = TrainedClassifier::zeroed(ClassifierKind::Mlp2, 2, 2, 5);
        let mut rng = substream(2, &[stage::ORACLE]);
        for p in &mut model.params {
            *p = rng.gen_range(-0.5..0.5);
        }
        let (_, grads) = classifier_loss_and_grad(&model, &xs, &ys);
        let h = 1e-6;
        for idx in 0..model.params.len() {
            let mut plus = model.clone();
            plus.params[idx] += h;
            let mut minus = model.clone();
            minus.params[idx] -= h;
            let (lp, _) = classifier_loss_and_grad(&plus, &xs, &ys);
            let (lm, _) = classifier_loss_and_grad(&minus, &xs, &ys);
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grads[idx].abs()).max(1e-6);
            assert!(
                (fd - grads[idx]).abs() / denom < 1e-5,
                "param {idx}: fd {fd} vs analytic {}",
                grads[idx]
            );
        }
    }

    #[test]
    fn separable_data_reaches_full_accuracy() {
        // linearly separable fixture: class by sign of x0 with a margin
        let mut ds = sample_dataset(&preset("w2").unwrap().world, 50, 7).unwrap();
        for r in &mut ds.records {
            r.features[0] = if r.label == 0 { -1.0 } else { 1.0 } * (1.0 + r.features[1].abs());
        }
        let cfg = EvalTrainConfig { epochs: 500, learning_rate: 1.0, ..Default::default() };
        let (model, dynamics) = train_classifier(&ds, &cfg).unwrap();
        let acc = evaluate(&model, &ds).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(dynamics.epochs(), 500);
        // probability rows sum to one
        for i in 0..ds.len() {
            let s: f64 = dynamics.probs_at(499, i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_epochs_is_uniform_prediction() {
        let wp = preset("w2").unwrap();
        let ds = sample_dataset(&wp.world, 200, 9).unwrap();
        let cfg = EvalTrainConfig { epochs: 0, ..Default::default() };
        let (model, dynamics) = train_classifier(&ds, &cfg).unwrap();
        assert_eq!(dynamics.epochs(), 0);
        let p = model.predict_proba(&[0.3, -0.8]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        // first-max tie-break predicts class 0 everywhere: accuracy = share
        // of class 0 = 1/2 exactly on this balanced set
        let acc = evaluate(&model, &ds).unwrap();
        assert!((acc - 0.5).abs() < 0.05);
    }

    #[test]
    fn bayes_rule_accuracy_on_w2() {
        let wp = preset("w2").unwrap();
        let test = sample_dataset(&wp.world, 2500, 31).unwrap();
        let bayes = BayesClassifier { world: &wp.world };
        let acc = evaluate(&bayes, &test).unwrap();
        // 1 - Phi(-2) = 0.97725
        assert!((acc - 0.97725).abs() < 0.02, "bayes accuracy {acc}");
    }

    #[test]
    fn interpolating_and_constant_models() {
        let wp = preset("w2").unwrap();
        let ds = sample_dataset(&wp.world, 100, 17).unwrap();
        let cfg = EvalTrainConfig { epochs: 400, learning_rate: 1.0, ..Default::default() };
        let (model, _) = train_classifier(&ds, &cfg).unwrap();
        // test = train for a near-interpolating model on separated classes
        let acc = evaluate(&model, &ds).unwrap();
        assert!(acc > 0.95);

        // constant-class model on balanced data sits at 1/2
        let constant = TrainedClassifier::zeroed(ClassifierKind::Logistic, 2, 2, 0);
        let acc = evaluate(&constant, &ds).unwrap();
        assert!((acc - 0.5).abs() < 0.05);

        assert!(evaluate(&constant, &ds.subset(&[])).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let wp = preset("w2overlap").unwrap();
        let ds = sample_dataset(&wp.world, 50, 3).unwrap();
        for kind in [ClassifierKind::Logistic, ClassifierKind::Mlp2] {
            let cfg = EvalTrainConfig { kind, epochs: 50, seed: 5, ..Default::default() };
            let (m1, d1) = train_classifier(&ds, &cfg).unwrap();
            let (m2, d2) = train_classifier(&ds, &cfg).unwrap();
            assert_eq!(m1.params, m2.params);
            assert_eq!(d1.correct, d2.correct);
        }
    }

    #[test]
    fn missing_class_in_subset_is_rejected() {
        let wp = preset("w2").unwrap();
        let ds = sample_dataset(&wp.world, 10, 3).unwrap();
        let only_class0 = ds.subset(&(0..10u64).collect::<Vec<_>>());
        assert!(train_classifier(&only_class0, &EvalTrainConfig::default()).is_err());
    }

    #[test]
    fn cross_eval_shape_and_duplicated_data_symmetry() {
        let wp = preset("w2overlap").unwrap();
        let ds = sample_dataset(&wp.world, 50, 3).unwrap();
        // identical scores force stratification purely by id; with iid data
        // all strata are exchangeable, so rows agree within seed noise
        let scores: Vec<crate::coreset::ScoreEntry> = ds
            .records
            .iter()
            .map(|r| crate::coreset::ScoreEntry {
                sample_id: r.sample_id,
                label: r.label,
                score: 1.0,
            })
            .collect();
        let cfg = EvalTrainConfig { epochs: 200, ..Default::default() };
        let m = cross_eval(&ds, &scores, &ds, &scores, 5, &cfg).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m.iter().all(|row| row.len() == 5 && row.iter().all(|&a| (0.0..=1.0).contains(&a))));
    }
}
