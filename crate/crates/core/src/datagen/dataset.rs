use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::seed;
use crate::numkernel::Matrix;

/// Labeled feature vectors where every class in `0..n_classes` occurs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    n_classes: usize,
}

/// Rows and labels for a subset of a [`Dataset`]; classes may be missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of distinct labels present.
    pub fn distinct_classes(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// On-disk layout: `{"n_classes": C, "features": [[..], ..], "labels": [..]}`.
#[derive(Serialize, Deserialize)]
struct DatasetFile {
    n_classes: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if !features.is_finite() {
            return Err(Error::Data("dataset contains non-finite features".into()));
        }
        let mut counts = vec![0usize; n_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= n_classes {
                return Err(Error::Data(format!(
                    "label {y} at row {i} outside 0..{n_classes}"
                )));
            }
            counts[y] += 1;
        }
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("class {missing} has no samples")));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Largest class count over smallest.
    pub fn imbalance_ratio(&self) -> f64 {
        let counts = self.class_counts();
        let max = *counts.iter().max().unwrap_or(&1) as f64;
        let min = *counts.iter().min().unwrap_or(&1) as f64;
        max / min.max(1.0)
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        Samples {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            n_classes: self.n_classes,
            features: self.features.iter_rows().map(<[f64]>::to_vec).collect(),
            labels: self.labels.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let features = Matrix::from_rows(&file.features)?;
        Self::new(features, file.labels, file.n_classes)
    }
}

/// Parameters for [`generate_gaussian_mixture`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub classes: usize,
    pub features: usize,
    pub per_class: usize,
    /// Minimum pairwise distance between class means.
    pub separation: f64,
}

/// Unit-covariance Gaussian blobs, one per class, with class means at
/// pairwise distance at least `separation`. Rows are grouped by class.
pub fn generate_gaussian_mixture(spec: &GaussianMixture, seed_value: u64) -> Result<Dataset> {
    if spec.classes == 0 || spec.features == 0 || spec.per_class == 0 {
        return Err(Error::Config(
            "gaussian mixture needs positive class, feature and per-class counts".into(),
        ));
    }
    if !(spec.separation >= 0.0) || !spec.separation.is_finite() {
        return Err(Error::Config(format!(
            "separation must be finite and nonnegative, got {}",
            spec.separation
        )));
    }
    let mut rng = seed::derived_rng(seed_value, &[seed::tag("gaussian-mixture")]);
    let means = class_means(spec, &mut rng);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.features);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &mu in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mu + z);
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, spec.features, data)?, labels, spec.classes)
}

fn class_means(spec: &GaussianMixture, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    let (c, d, sep) = (spec.classes, spec.features, spec.separation);
    if c <= d {
        // scaled basis vectors are exactly `sep` apart
        let radius = sep / std::f64::consts::SQRT_2;
        return (0..c)
            .map(|k| (0..d).map(|j| if j == k { radius } else { 0.0 }).collect())
            .collect();
    }
    // more classes than dimensions: random directions, rescaled until the
    // closest pair sits at `sep`
    let dirs: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..c {
        for j in i + 1..c {
            let dist = dirs[i]
                .iter()
                .zip(&dirs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(dist);
        }
    }
    let scale = if min_dist > 0.0 { sep / min_dist } else { sep };
    dirs.into_iter()
        .map(|v| v.into_iter().map(|x| x * scale).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nearest-class-mean rule fitted on even rows, scored on odd rows.
    fn centroid_holdout_accuracy(data: &Dataset) -> f64 {
        let d = data.n_features();
        let mut sums = vec![vec![0.0; d]; data.n_classes()];
        let mut counts = vec![0.0; data.n_classes()];
        for i in (0..data.len()).step_by(2) {
            let y = data.labels()[i];
            for (s, x) in sums[y].iter_mut().zip(data.features().row(i)) {
                *s += x;
            }
            counts[y] += 1.0;
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| s.iter().map(|v| v / n).collect())
            .collect();
        let mut correct = 0;
        let mut total = 0;
        for i in (1..data.len()).step_by(2) {
            let x = data.features().row(i);
            let pred = (0..means.len())
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(&means[a]).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = x.iter().zip(&means[b]).map(|(p, q)| (p - q).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            correct += usize::from(pred == data.labels()[i]);
            total += 1;
        }
        correct as f64 / total as f64
    }

    #[test]
    fn well_separated_pair_is_linearly_separable() {
        let spec = GaussianMixture {
            classes: 2,
            features: 5,
            per_class: 200,
            separation: 20.0,
        };
        let data = generate_gaussian_mixture(&spec, 1).unwrap();
        assert!(centroid_holdout_accuracy(&data) > 0.99);
    }

    #[test]
    fn zero_separation_is_chance_level() {
        let spec = GaussianMixture {
            classes: 4,
            features: 3,
            per_class: 2000,
            separation: 0.0,
        };
        let data = generate_gaussian_mixture(&spec, 2).unwrap();
        let acc = centroid_holdout_accuracy(&data);
        assert!((acc - 0.25).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = GaussianMixture {
            classes: 3,
            features: 4,
            per_class: 10,
            separation: 2.0,
        };
        let a = generate_gaussian_mixture(&spec, 9).unwrap().to_json().unwrap();
        let b = generate_gaussian_mixture(&spec, 9).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let c = generate_gaussian_mixture(&spec, 10).unwrap().to_json().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn means_respect_separation_with_more_classes_than_dims() {
        let spec = GaussianMixture {
            classes: 7,
            features: 2,
            per_class: 1,
            separation: 3.0,
        };
        let mut rng = seed::rng(4);
        let means = class_means(&spec, &mut rng);
        for i in 0..7 {
            for j in i + 1..7 {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 3.0 - 1e-9);
            }
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let spec = GaussianMixture {
            classes: 2,
            features: 2,
            per_class: 3,
            separation: 1.0,
        };
        let data = generate_gaussian_mixture(&spec, 3).unwrap();
        let back = Dataset::from_json(&data.to_json().unwrap()).unwrap();
        assert_eq!(back, data);
        let missing = Dataset::new(Matrix::zeros(2, 1), vec![0, 0], 2);
        assert!(matches!(missing, Err(Error::Data(_))));
    }
}
