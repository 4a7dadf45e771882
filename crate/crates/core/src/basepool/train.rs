use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, ClassifierModel};
use crate::datagen::Samples;
use crate::ensemble::metrics::Metric;
use crate::error::{Error, Result};
use crate::numkernel::{log_sum_exp, seed, Adam, Matrix, Tape};

/// Optimization settings for base classifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Class-weighted loss kicks in when max/min class count exceeds this.
    pub imbalance_threshold: f64,
    /// Validation score used for early stopping.
    pub selection_metric: Metric,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            max_epochs: 300,
            patience: 20,
            batch_size: 32,
            imbalance_threshold: 3.0,
            selection_metric: Metric::Accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedClassifier {
    pub model: ClassifierModel,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_score: f64,
}

/// Inverse-frequency weights over the classes present, or all ones when the
/// imbalance ratio is at most `threshold`.
pub fn class_weights(labels: &[usize], n_classes: usize, threshold: f64) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    let max = present.iter().copied().max().unwrap_or(1) as f64;
    let min = present.iter().copied().min().unwrap_or(1) as f64;
    if max / min <= threshold {
        return vec![1.0; n_classes];
    }
    let n = labels.len() as f64;
    let k = present.len() as f64;
    counts
        .iter()
        .map(|&c| if c > 0 { n / (k * c as f64) } else { 0.0 })
        .collect()
}

/// Mean unweighted cross-entropy of `logits` against `labels`.
fn cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| log_sum_exp(logits.row(i)) - logits.get(i, y))
        .sum();
    total / labels.len().max(1) as f64
}

/// Trains an MLP with (optionally class-weighted) cross-entropy and Adam,
/// keeping the parameters from the epoch with the best validation score.
/// Ties in the score go to the lower validation loss.
pub fn train_classifier(
    train: &Samples,
    val: &Samples,
    n_classes: usize,
    architecture: &Architecture,
    options: &TrainOptions,
    seed_value: u64,
) -> Result<TrainedClassifier> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation(
            "classifier training needs nonempty train and validation sets".into(),
        ));
    }
    if train.distinct_classes() < 2 {
        return Err(Error::DegenerateModel(format!(
            "training set holds a single class ({})",
            train.labels[0]
        )));
    }
    if let Some(&bad) = train.labels.iter().chain(&val.labels).find(|&&y| y >= n_classes) {
        return Err(Error::Validation(format!("label {bad} outside 0..{n_classes}")));
    }

    let mut rng = seed::derived_rng(seed_value, &[seed::tag("classifier")]);
    let mut model = ClassifierModel::init(architecture, train.features.cols(), n_classes, &mut rng);
    let mut params = model.parameters();
    let mut adam = Adam::for_params(options.learning_rate, &params);
    let weights = class_weights(&train.labels, n_classes, options.imbalance_threshold);

    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = options.batch_size.max(1);

    for epoch in 0..options.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let x = train.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let w: Vec<f64> = y.iter().map(|&c| weights[c]).collect();
            let mut tape = Tape::new();
            let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
            let input = tape.constant(x);
            let logits = model.forward_on_tape(&mut tape, &vars, input)?;
            let loss = tape.softmax_cross_entropy(logits, y, w)?;
            if !tape.value(loss).is_finite() {
                return Err(Error::Training(format!(
                    "non-finite classifier loss at epoch {epoch} (lr {})",
                    options.learning_rate
                )));
            }
            let grads = tape.backward(loss)?;
            let grads: Vec<Matrix> = vars
                .iter()
                .zip(&params)
                .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
                .collect();
            adam.step(&mut params, &grads)?;
        }

        model.set_parameters(&params);
        let val_logits = model.logits(&val.features)?;
        let preds = val_logits.argmax_rows();
        let score = options.selection_metric.score(&preds, &val.labels);
        let loss = cross_entropy(&val_logits, &val.labels);
        if score > best.0 || (score == best.0 && loss < best.1) {
            best = (score, loss);
            best_params = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= options.patience {
                break;
            }
        }
    }

    model.set_parameters(&best_params);
    Ok(TrainedClassifier {
        model,
        best_epoch,
        epochs_run,
        best_val_score: best.0,
    })
}

/// Out-of-fold logits for every training sample plus the fold models.
#[derive(Clone, Debug)]
pub struct OutOfFold {
    /// Row `i` comes from the fold model that never saw training sample `i`.
    pub logits: Matrix,
    pub fold_of: Vec<usize>,
    pub fold_models: Vec<ClassifierModel>,
}

/// Stratified fold ids: each class's samples are dealt round-robin, with
/// the deal continuing across classes so fold sizes stay balanced.
pub fn stratified_folds(labels: &[usize], folds: usize, seed_value: u64) -> Vec<usize> {
    let mut rng = seed::derived_rng(seed_value, &[seed::tag("folds")]);
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut fold_of = vec![0; labels.len()];
    let mut next = 0;
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % folds;
            next += 1;
        }
    }
    fold_of
}

/// K-fold cross-fitting over `train`; fold models early-stop on `val`.
pub fn oof_predictions(
    train: &Samples,
    val: &Samples,
    n_classes: usize,
    architecture: &Architecture,
    options: &TrainOptions,
    folds: usize,
    seed_value: u64,
) -> Result<OutOfFold> {
    if folds < 2 || folds > train.len() {
        return Err(Error::FoldInfeasible(format!(
            "{folds} folds over {} training samples",
            train.len()
        )));
    }
    let fold_of = stratified_folds(&train.labels, folds, seed_value);
    for f in 0..folds {
        let mut classes: Vec<usize> = (0..train.len())
            .filter(|&i| fold_of[i] != f)
            .map(|i| train.labels[i])
            .collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            let missing: Vec<usize> = {
                let mut all = train.labels.clone();
                all.sort_unstable();
                all.dedup();
                all.into_iter().filter(|c| !classes.contains(c)).collect()
            };
            return Err(Error::FoldInfeasible(format!(
                "fold {f}: training portion only holds class {:?}; class {:?} lives entirely in the held-out fold",
                classes, missing
            )));
        }
    }

    let mut logits = Matrix::zeros(train.len(), n_classes);
    let mut fold_models = Vec::with_capacity(folds);
    for f in 0..folds {
        let fit: Vec<usize> = (0..train.len()).filter(|&i| fold_of[i] != f).collect();
        let held: Vec<usize> = (0..train.len()).filter(|&i| fold_of[i] == f).collect();
        let fit_set = Samples {
            features: train.features.select_rows(&fit),
            labels: fit.iter().map(|&i| train.labels[i]).collect(),
        };
        let fold_seed = seed::derive(seed_value, &[seed::tag("fold"), f as u64]);
        let trained = train_classifier(&fit_set, val, n_classes, architecture, options, fold_seed)?;
        let held_logits = trained.model.logits(&train.features.select_rows(&held))?;
        for (r, &i) in held.iter().enumerate() {
            logits.row_mut(i).copy_from_slice(held_logits.row(r));
        }
        fold_models.push(trained.model);
    }
    Ok(OutOfFold {
        logits,
        fold_of,
        fold_models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basepool::Activation;
    use crate::datagen::{generate_gaussian_mixture, GaussianMixture};
    use crate::ensemble::metrics::accuracy;

    fn blobs(classes: usize, per_class: usize, separation: f64, seed_value: u64) -> Samples {
        let data = generate_gaussian_mixture(
            &GaussianMixture {
                classes,
                features: 4,
                per_class,
                separation,
            },
            seed_value,
        )
        .unwrap();
        let all: Vec<usize> = (0..data.len()).collect();
        data.subset(&all)
    }

    fn halves(s: &Samples) -> (Samples, Samples) {
        let even: Vec<usize> = (0..s.len()).step_by(2).collect();
        let odd: Vec<usize> = (1..s.len()).step_by(2).collect();
        let pick = |idx: &[usize]| Samples {
            features: s.features.select_rows(idx),
            labels: idx.iter().map(|&i| s.labels[i]).collect(),
        };
        (pick(&even), pick(&odd))
    }

    fn fast() -> TrainOptions {
        TrainOptions {
            learning_rate: 5e-3,
            max_epochs: 100,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (train, val) = halves(&blobs(2, 100, 8.0, 1));
        let arch = Architecture::mlp(&[8], Activation::Relu);
        let t = train_classifier(&train, &val, 2, &arch, &fast(), 3).unwrap();
        let acc = accuracy(&t.model.predict(&val.features).unwrap(), &val.labels);
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let (mut train, mut val) = halves(&blobs(3, 200, 3.0, 2));
        let mut rng = seed::rng(9);
        train.labels.shuffle(&mut rng);
        val.labels.shuffle(&mut rng);
        let arch = Architecture::mlp(&[8], Activation::Relu);
        let t = train_classifier(&train, &val, 3, &arch, &fast(), 4).unwrap();
        // fresh held-out rows: the original labels are independent of the shuffled training targets
        let test = blobs(3, 200, 3.0, 77);
        let mut test_labels = test.labels.clone();
        test_labels.shuffle(&mut rng);
        let acc = accuracy(&t.model.predict(&test.features).unwrap(), &test_labels);
        assert!((acc - 1.0 / 3.0).abs() <= 0.1, "accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let (train, val) = halves(&blobs(3, 30, 3.0, 5));
        let arch = Architecture::mlp(&[6], Activation::Tanh);
        let a = train_classifier(&train, &val, 3, &arch, &fast(), 11).unwrap();
        let b = train_classifier(&train, &val, 3, &arch, &fast(), 11).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn single_class_training_set_is_degenerate() {
        let train = Samples {
            features: Matrix::zeros(4, 2),
            labels: vec![1; 4],
        };
        let arch = Architecture::mlp(&[3], Activation::Relu);
        let err = train_classifier(&train, &train, 2, &arch, &fast(), 0);
        assert!(matches!(err, Err(Error::DegenerateModel(_))));
    }

    #[test]
    fn class_weights_only_when_imbalanced() {
        assert_eq!(class_weights(&[0, 0, 1, 1], 3, 3.0), vec![1.0; 3]);
        let w = class_weights(&[0, 0, 0, 0, 0, 0, 0, 0, 1, 1], 3, 3.0);
        assert!((w[0] - 10.0 / 16.0).abs() < 1e-12);
        assert!((w[1] - 10.0 / 4.0).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn oof_covers_every_sample_once_with_distinct_models() {
        let (train, val) = halves(&blobs(2, 40, 3.0, 6));
        let arch = Architecture::mlp(&[4], Activation::Relu);
        let oof = oof_predictions(&train, &val, 2, &arch, &fast(), 5, 8).unwrap();
        let mut per_fold = [0usize; 5];
        for &f in &oof.fold_of {
            per_fold[f] += 1;
        }
        assert_eq!(per_fold.iter().sum::<usize>(), train.len());
        assert!(per_fold.iter().all(|&c| c == 8));
        let full = train_classifier(&train, &val, 2, &arch, &fast(), 8).unwrap();
        for m in &oof.fold_models {
            assert_ne!(m.layers, full.model.layers);
        }
    }

    #[test]
    fn oof_reports_the_class_that_breaks_a_fold() {
        let train = Samples {
            features: Matrix::from_vec(6, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
            labels: vec![0, 0, 0, 0, 0, 1],
        };
        let arch = Architecture::mlp(&[2], Activation::Relu);
        let err = oof_predictions(&train, &train, 2, &arch, &fast(), 5, 1).unwrap_err();
        match err {
            Error::FoldInfeasible(msg) => assert!(msg.contains("[1]"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
