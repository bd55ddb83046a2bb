//! Reproducible synthetic datasets.
//!
//! Two generators with documented closed forms:
//!
//! * **Gaussian mixture** (classification): class `c` of `k` has center
//!   `scale * e_c` (the `c`-th scaled standard basis vector, a vertex of a
//!   scaled simplex), and sample `i` gets label `i mod k` and features
//!   `center + noise_std * N(0, I)`.
//! * **Linear regression**: features are standard normal, targets are
//!   `y = A x + noise_std * N(0, I)` for a fixed matrix `A` with entries
//!   `N(0, 1/sqrt(n_features))` drawn once from the seed.
//!
//! Everything is a pure function of (descriptor, seed): the same pair
//! yields bitwise-equal data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Target, Task};
use crate::numerics::matrix::Vector;
use crate::numerics::rng::derive_stream;

/// First path element of every data stream. Chosen disjoint from the
/// federation stream tags (1..=7) so one experiment seed can drive both
/// without overlap.
pub const DATA_STREAM_TAG: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianMixture { n_classes: usize, center_scale: f64, noise_std: f64 },
    LinearRegression { n_targets: usize, noise_std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataDescriptor {
    pub kind: DatasetKind,
    pub n_samples: usize,
    pub n_features: usize,
    /// Fraction of samples held out for evaluation, in [0, 1).
    pub eval_fraction: f64,
}

impl DataDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples", "need at least one sample"));
        }
        if self.n_features == 0 {
            return Err(Error::invalid("n_features", "need at least one feature"));
        }
        if !(self.eval_fraction >= 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::invalid(
                "eval_fraction",
                format!("{} not in [0, 1)", self.eval_fraction),
            ));
        }
        match self.kind {
            DatasetKind::GaussianMixture { n_classes, center_scale, noise_std } => {
                if n_classes == 0 {
                    return Err(Error::invalid("n_classes", "need at least one class"));
                }
                if n_classes > self.n_samples {
                    return Err(Error::invalid(
                        "n_classes",
                        format!("{n_classes} classes but only {} samples", self.n_samples),
                    ));
                }
                if n_classes > self.n_features {
                    return Err(Error::invalid(
                        "n_classes",
                        format!(
                            "{n_classes} classes need {n_classes} features for distinct centers, got {}",
                            self.n_features
                        ),
                    ));
                }
                if !(center_scale.is_finite() && center_scale > 0.0) {
                    return Err(Error::invalid(
                        "center_scale",
                        format!("{center_scale} must be positive"),
                    ));
                }
                if !(noise_std.is_finite() && noise_std >= 0.0) {
                    return Err(Error::invalid(
                        "noise_std",
                        format!("{noise_std} must be non-negative"),
                    ));
                }
            }
            DatasetKind::LinearRegression { n_targets, noise_std } => {
                if n_targets == 0 {
                    return Err(Error::invalid("n_targets", "need at least one target"));
                }
                if !(noise_std.is_finite() && noise_std >= 0.0) {
                    return Err(Error::invalid(
                        "noise_std",
                        format!("{noise_std} must be non-negative"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        match self.kind {
            DatasetKind::GaussianMixture { .. } => Task::Classification,
            DatasetKind::LinearRegression { .. } => Task::Regression,
        }
    }

    /// Output width the model needs for this data.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            DatasetKind::GaussianMixture { n_classes, .. } => n_classes,
            DatasetKind::LinearRegression { n_targets, .. } => n_targets,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub descriptor: DataDescriptor,
    pub seed: u64,
    pub train_xs: Vec<Vector>,
    pub train_targets: Vec<Target>,
    pub eval_xs: Vec<Vector>,
    pub eval_targets: Vec<Target>,
}

impl SyntheticDataset {
    pub fn n_train(&self) -> usize {
        self.train_xs.len()
    }

    pub fn n_eval(&self) -> usize {
        self.eval_xs.len()
    }
}

pub fn make_dataset(descriptor: &DataDescriptor, seed: u64) -> Result<SyntheticDataset> {
    descriptor.validate()?;
    let n = descriptor.n_samples;
    let d = descriptor.n_features;
    let mut xs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);

    let mut sample_stream = derive_stream(seed, &[DATA_STREAM_TAG, 0]);
    match descriptor.kind {
        DatasetKind::GaussianMixture { n_classes, center_scale, noise_std } => {
            for i in 0..n {
                let label = i % n_classes;
                let mut x = vec![0.0; d];
                for (j, v) in x.iter_mut().enumerate() {
                    let center = if j == label { center_scale } else { 0.0 };
                    let noise =
                        if noise_std > 0.0 { noise_std * sample_stream.next_normal() } else { 0.0 };
                    *v = center + noise;
                }
                xs.push(Vector::from_vec(x));
                targets.push(Target::Class(label));
            }
        }
        DatasetKind::LinearRegression { n_targets, noise_std } => {
            let mut map_stream = derive_stream(seed, &[DATA_STREAM_TAG, 1]);
            let scale = 1.0 / (d as f64).sqrt();
            let a: Vec<Vec<f64>> = (0..n_targets)
                .map(|_| (0..d).map(|_| scale * map_stream.next_normal()).collect())
                .collect();
            for _ in 0..n {
                let x: Vec<f64> = (0..d).map(|_| sample_stream.next_normal()).collect();
                let y: Vec<f64> = a
                    .iter()
                    .map(|row| {
                        let clean: f64 = row.iter().zip(&x).map(|(w, v)| w * v).sum();
                        let noise = if noise_std > 0.0 {
                            noise_std * sample_stream.next_normal()
                        } else {
                            0.0
                        };
                        clean + noise
                    })
                    .collect();
                xs.push(Vector::from_vec(x));
                targets.push(Target::Values(Vector::from_vec(y)));
            }
        }
    }

    // Held-out split: a seeded shuffle picks the evaluation rows; both
    // halves keep ascending original order so batching stays stable.
    let eval_count = ((descriptor.eval_fraction * n as f64).round() as usize).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_stream = derive_stream(seed, &[DATA_STREAM_TAG, 2]);
    split_stream.shuffle(&mut order);
    let mut eval_idx = order[..eval_count].to_vec();
    let mut train_idx = order[eval_count..].to_vec();
    eval_idx.sort_unstable();
    train_idx.sort_unstable();

    let pick = |idx: &[usize], xs: &[Vector], ts: &[Target]| {
        let px: Vec<Vector> = idx.iter().map(|&i| xs[i].clone()).collect();
        let pt: Vec<Target> = idx.iter().map(|&i| ts[i].clone()).collect();
        (px, pt)
    };
    let (eval_xs, eval_targets) = pick(&eval_idx, &xs, &targets);
    let (train_xs, train_targets) = pick(&train_idx, &xs, &targets);

    Ok(SyntheticDataset {
        descriptor: descriptor.clone(),
        seed,
        train_xs,
        train_targets,
        eval_xs,
        eval_targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture(n: usize, d: usize, k: usize, noise: f64) -> DataDescriptor {
        DataDescriptor {
            kind: DatasetKind::GaussianMixture {
                n_classes: k,
                center_scale: 3.0,
                noise_std: noise,
            },
            n_samples: n,
            n_features: d,
            eval_fraction: 0.2,
        }
    }

    #[test]
    fn same_descriptor_and_seed_give_bitwise_equal_data() {
        let desc = mixture(100, 8, 4, 1.0);
        let a = make_dataset(&desc, 42).unwrap();
        let b = make_dataset(&desc, 42).unwrap();
        assert_eq!(a, b);
        let c = make_dataset(&desc, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let desc = mixture(103, 8, 4, 1.0);
        let ds = make_dataset(&desc, 1).unwrap();
        // round(0.2 * 103) = 21 evaluation rows.
        assert_eq!(ds.n_eval(), 21);
        assert_eq!(ds.n_train(), 82);
    }

    #[test]
    fn zero_noise_mixture_is_exactly_centroid_separable() {
        let desc = mixture(40, 6, 4, 0.0);
        let ds = make_dataset(&desc, 7).unwrap();
        // Class centroids estimated from train data.
        let mut centroids = vec![vec![0.0; 6]; 4];
        let mut counts = vec![0usize; 4];
        for (x, t) in ds.train_xs.iter().zip(&ds.train_targets) {
            let Target::Class(c) = t else { panic!("classification targets expected") };
            counts[*c] += 1;
            for j in 0..6 {
                centroids[*c][j] += x[j];
            }
        }
        for (c, count) in counts.iter().enumerate() {
            assert!(*count > 0, "class {c} missing from train split");
            for v in centroids[c].iter_mut() {
                *v /= *count as f64;
            }
        }
        // Nearest-centroid classification scores 100% on the eval split.
        for (x, t) in ds.eval_xs.iter().zip(&ds.eval_targets) {
            let Target::Class(want) = t else { panic!() };
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = (0..6).map(|j| (x[j] - centroids[a][j]).powi(2)).sum();
                    let db: f64 = (0..6).map(|j| (x[j] - centroids[b][j]).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(best, *want);
        }
    }

    #[test]
    fn labels_are_balanced_round_robin() {
        let desc = mixture(101, 8, 4, 1.0);
        let ds = make_dataset(&desc, 3).unwrap();
        let mut counts = vec![0usize; 4];
        for t in ds.train_targets.iter().chain(&ds.eval_targets) {
            let Target::Class(c) = t else { panic!() };
            counts[*c] += 1;
        }
        // 101 samples over 4 classes: 26, 25, 25, 25.
        assert_eq!(counts, vec![26, 25, 25, 25]);
    }

    #[test]
    fn zero_noise_regression_is_recovered_by_normal_equations() {
        let desc = DataDescriptor {
            kind: DatasetKind::LinearRegression { n_targets: 2, noise_std: 0.0 },
            n_samples: 60,
            n_features: 4,
            eval_fraction: 0.2,
        };
        let ds = make_dataset(&desc, 5).unwrap();
        let n = ds.n_train();
        // Solve W = (X^T X)^{-1} X^T Y by Gauss-Jordan on the 4x4 system.
        let d = 4;
        let mut xtx = vec![vec![0.0f64; d]; d];
        let mut xty = vec![vec![0.0f64; 2]; d];
        for (x, t) in ds.train_xs.iter().zip(&ds.train_targets) {
            let Target::Values(y) = t else { panic!("regression targets expected") };
            for i in 0..d {
                for j in 0..d {
                    xtx[i][j] += x[i] * x[j];
                }
                for o in 0..2 {
                    xty[i][o] += x[i] * y[o];
                }
            }
        }
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&a, &b| xtx[a][col].abs().partial_cmp(&xtx[b][col].abs()).unwrap())
                .unwrap();
            xtx.swap(col, pivot);
            xty.swap(col, pivot);
            let p = xtx[col][col];
            assert!(p.abs() > 1e-9, "singular normal equations");
            for j in 0..d {
                xtx[col][j] /= p;
            }
            for o in 0..2 {
                xty[col][o] /= p;
            }
            for row in 0..d {
                if row != col {
                    let f = xtx[row][col];
                    for j in 0..d {
                        xtx[row][j] -= f * xtx[col][j];
                    }
                    for o in 0..2 {
                        xty[row][o] -= f * xty[col][o];
                    }
                }
            }
        }
        // Residual of the fitted map on every sample is ~ 0.
        let mut max_residual = 0.0f64;
        for (x, t) in ds.train_xs.iter().zip(&ds.train_targets).take(n) {
            let Target::Values(y) = t else { panic!() };
            for o in 0..2 {
                let pred: f64 = (0..d).map(|i| xty[i][o] * x[i]).sum();
                max_residual = max_residual.max((pred - y[o]).abs());
            }
        }
        assert!(max_residual < 1e-10, "max residual {max_residual}");
    }

    #[test]
    fn invalid_descriptors_are_rejected() {
        assert!(make_dataset(&mixture(3, 8, 4, 1.0), 0).unwrap_err().to_string().contains("classes"));
        assert!(make_dataset(&mixture(50, 3, 4, 1.0), 0).unwrap_err().to_string().contains("features"));
        let mut bad = mixture(50, 8, 4, 1.0);
        bad.eval_fraction = 1.0;
        assert!(make_dataset(&bad, 0).is_err());
        let mut bad = mixture(50, 8, 4, -1.0);
        assert!(make_dataset(&bad, 0).is_err());
        bad = mixture(0, 8, 4, 1.0);
        assert!(make_dataset(&bad, 0).is_err());
    }

    #[test]
    fn eval_fraction_zero_keeps_everything_in_train() {
        let mut desc = mixture(30, 8, 3, 1.0);
        desc.eval_fraction = 0.0;
        let ds = make_dataset(&desc, 2).unwrap();
        assert_eq!(ds.n_train(), 30);
        assert_eq!(ds.n_eval(), 0);
    }
}
