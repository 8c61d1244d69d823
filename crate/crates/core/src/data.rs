//! Tabular dataset containers, synthetic data generation with a controllable
//! group-label bias, the group-conditional masking simulator, and dataset
//! splitting.
//!
//! Datasets are immutable: every transform produces a new dataset. Hidden
//! ground truth travels alongside the observations for simulation and
//! scoring only; the training view ([`TrainView`]) exposes nothing but the
//! features and the observed (possibly unavailable) labels and groups, so
//! training code cannot read the truth by construction.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::math;
use crate::obs::Obs;
use crate::stream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("invalid {what}: {value}")]
    InvalidSpec { what: &'static str, value: f64 },
    #[error("split fractions sum to {sum}, expected 1")]
    BadFractions { sum: f64 },
    #[error("operation requires hidden ground truth, which this dataset does not carry")]
    NoGroundTruth,
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("dataset is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
}

/// Hidden ground-truth labels and groups, retained only for simulation and
/// scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub labels: Vec<u8>,
    pub groups: Vec<u8>,
}

/// An encoded tabular dataset: feature matrix plus per-record observed label
/// and group, which may carry the unavailable outcome.
#[derive(Debug, Clone)]
pub struct TabularDataset {
    features: Tensor,
    label_obs: Vec<Obs>,
    group_obs: Vec<Obs>,
    truth: Option<GroundTruth>,
    columns: Vec<ColumnMeta>,
}

impl TabularDataset {
    pub fn new(
        features: Tensor,
        label_obs: Vec<Obs>,
        group_obs: Vec<Obs>,
        truth: Option<GroundTruth>,
        columns: Vec<ColumnMeta>,
    ) -> Result<Self, DataError> {
        let shape = features.shape();
        if shape.len() != 2 {
            return Err(DataError::LengthMismatch {
                what: "feature matrix rank",
                expected: 2,
                got: shape.len(),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        if n == 0 {
            return Err(DataError::Empty);
        }
        if label_obs.len() != n || group_obs.len() != n {
            return Err(DataError::LengthMismatch {
                what: "observation vectors",
                expected: n,
                got: label_obs.len().min(group_obs.len()),
            });
        }
        if let Some(t) = &truth {
            if t.labels.len() != n || t.groups.len() != n {
                return Err(DataError::LengthMismatch {
                    what: "ground truth vectors",
                    expected: n,
                    got: t.labels.len().min(t.groups.len()),
                });
            }
        }
        if !columns.is_empty() && columns.len() != d {
            return Err(DataError::LengthMismatch {
                what: "column metadata",
                expected: d,
                got: columns.len(),
            });
        }
        Ok(Self {
            features,
            label_obs,
            group_obs,
            truth,
            columns,
        })
    }

    pub fn n_records(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_row(&self, record: usize) -> &[f64] {
        let d = self.n_features();
        &self.features.data()[record * d..(record + 1) * d]
    }

    pub fn label_obs(&self) -> &[Obs] {
        &self.label_obs
    }

    pub fn group_obs(&self) -> &[Obs] {
        &self.group_obs
    }

    pub fn columns(&self) -> &[ColumnMeta] {
        &self.columns
    }

    /// Hidden ground truth, if this dataset still carries it.
    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    /// The view the training path is allowed to see.
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            features: &self.features,
            label_obs: &self.label_obs,
            group_obs: &self.group_obs,
        }
    }

    /// Scoring view against the hidden ground truth, if present.
    pub fn scored_view(&self) -> Option<ScoredView<'_>> {
        self.truth.as_ref().map(|t| ScoredView {
            features: &self.features,
            labels: &t.labels,
            groups: &t.groups,
        })
    }

    /// Copy of the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.n_features();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut label_obs = Vec::with_capacity(indices.len());
        let mut group_obs = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.feature_row(i));
            label_obs.push(self.label_obs[i]);
            group_obs.push(self.group_obs[i]);
        }
        let truth = self.truth.as_ref().map(|t| GroundTruth {
            labels: indices.iter().map(|&i| t.labels[i]).collect(),
            groups: indices.iter().map(|&i| t.groups[i]).collect(),
        });
        Self {
            features: Tensor::matrix(indices.len(), d, data).expect("subset shape"),
            label_obs,
            group_obs,
            truth,
            columns: self.columns.clone(),
        }
    }
}

/// Borrowed training view: features and observations only, no ground truth.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub features: &'a Tensor,
    pub label_obs: &'a [Obs],
    pub group_obs: &'a [Obs],
}

impl<'a> TrainView<'a> {
    pub fn new(features: &'a Tensor, label_obs: &'a [Obs], group_obs: &'a [Obs]) -> Self {
        Self {
            features,
            label_obs,
            group_obs,
        }
    }

    pub fn n_records(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.features.shape()[1]
    }

    /// Owned copy of the records at `indices` for one training step.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.n_features();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
        }
        Batch {
            features: Tensor::matrix(indices.len(), d, data).expect("batch shape"),
            label_obs: indices.iter().map(|&i| self.label_obs[i]).collect(),
            group_obs: indices.iter().map(|&i| self.group_obs[i]).collect(),
        }
    }

    pub fn full_batch(&self) -> Batch {
        let indices: Vec<usize> = (0..self.n_records()).collect();
        self.batch(&indices)
    }
}

/// Borrowed scoring view: features plus hidden ground truth, for evaluation
/// only.
#[derive(Debug, Clone, Copy)]
pub struct ScoredView<'a> {
    pub features: &'a Tensor,
    pub labels: &'a [u8],
    pub groups: &'a [u8],
}

impl ScoredView<'_> {
    pub fn n_records(&self) -> usize {
        self.features.shape()[0]
    }
}

/// One owned mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub label_obs: Vec<Obs>,
    pub group_obs: Vec<Obs>,
}

impl Batch {
    pub fn n_records(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Group-conditional masking rates.
///
/// `alpha` masks records whose true group is 1, `beta` those whose true
/// group is 0; labels are masked uniformly at `label_missing`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub alpha: f64,
    pub beta: f64,
    pub label_missing: f64,
    pub seed: u64,
}

/// Default uniform label missing rate.
pub const DEFAULT_LABEL_MISSING: f64 = 0.25;

impl MaskSpec {
    pub fn new(alpha: f64, beta: f64, label_missing: f64, seed: u64) -> Result<Self, DataError> {
        for (what, value) in [
            ("alpha", alpha),
            ("beta", beta),
            ("label_missing", label_missing),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(DataError::InvalidSpec { what, value });
            }
        }
        Ok(Self {
            alpha,
            beta,
            label_missing,
            seed,
        })
    }

    pub fn sparse(seed: u64) -> Self {
        Self {
            alpha: 0.4,
            beta: 0.8,
            label_missing: DEFAULT_LABEL_MISSING,
            seed,
        }
    }

    pub fn medium(seed: u64) -> Self {
        Self {
            alpha: 0.2,
            beta: 0.4,
            label_missing: DEFAULT_LABEL_MISSING,
            seed,
        }
    }

    pub fn dense(seed: u64) -> Self {
        Self {
            alpha: 0.1,
            beta: 0.2,
            label_missing: DEFAULT_LABEL_MISSING,
            seed,
        }
    }
}

/// Synthetic tabular data with controllable group balance, label-group
/// correlation, and feature shifts.
///
/// Features are a unit-variance Gaussian mixture. The first two coordinates
/// form the class block (shifted by the label, and leaked into by the group,
/// which is what creates unfairness pressure); the next two form the group
/// block (shifted by the group only, making the group learnable); any
/// remaining coordinates are pure noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Total feature count; at least 4.
    pub d: usize,
    /// P(group = 1).
    pub group_balance: f64,
    /// Pearson correlation between the true group and label.
    pub label_group_correlation: f64,
    /// Marginal P(label = 1).
    pub positive_rate: f64,
    /// Norm of the class-conditional mean shift on the class block.
    pub class_shift: f64,
    /// Norm of the group-conditional mean shift on the group block.
    pub group_shift: f64,
    /// Group-conditional shift leaking into the class block.
    pub bias_leak: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 5000,
            d: 6,
            group_balance: 0.5,
            label_group_correlation: 0.4,
            positive_rate: 0.5,
            class_shift: 3.0,
            group_shift: 3.0,
            bias_leak: 1.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(f64, f64), DataError> {
        if self.n == 0 {
            return Err(DataError::InvalidSpec {
                what: "n",
                value: 0.0,
            });
        }
        if self.d < 4 {
            return Err(DataError::InvalidSpec {
                what: "d",
                value: self.d as f64,
            });
        }
        for (what, value) in [
            ("group_balance", self.group_balance),
            ("positive_rate", self.positive_rate),
        ] {
            if !(0.0 < value && value < 1.0) {
                return Err(DataError::InvalidSpec { what, value });
            }
        }
        let rho = self.label_group_correlation;
        if !(-1.0..=1.0).contains(&rho) {
            return Err(DataError::InvalidSpec {
                what: "label_group_correlation",
                value: rho,
            });
        }
        let (bal, py) = (self.group_balance, self.positive_rate);
        let cov = rho * math::sqrt(bal * (1.0 - bal) * py * (1.0 - py));
        let p1 = py + cov / bal;
        let p0 = py - cov / (1.0 - bal);
        for p in [p1, p0] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::InvalidSpec {
                    what: "label_group_correlation (implied conditional out of range)",
                    value: p,
                });
            }
        }
        Ok((p0, p1))
    }
}

/// Draw a synthetic dataset; observations start unmasked (equal to the
/// ground truth).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TabularDataset, DataError> {
    let (p_y_given_a0, p_y_given_a1) = spec.validate()?;
    let mut rng = stream::stream(spec.seed, stream::names::DATA);
    let (n, d) = (spec.n, spec.d);
    let per_coord = 1.0 / math::sqrt(2.0);

    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let a = u8::from(rng.random::<f64>() < spec.group_balance);
        let p_y = if a == 1 { p_y_given_a1 } else { p_y_given_a0 };
        let y = u8::from(rng.random::<f64>() < p_y);
        let (af, yf) = (f64::from(a), f64::from(y));
        for j in 0..d {
            let mean = match j {
                0 | 1 => yf * spec.class_shift * per_coord + af * spec.bias_leak * per_coord,
                2 | 3 => af * spec.group_shift * per_coord,
                _ => 0.0,
            };
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(mean + noise);
        }
        labels.push(y);
        groups.push(a);
    }

    let columns = (0..d)
        .map(|j| ColumnMeta {
            name: alloc::format!("f{j}"),
            kind: ColumnKind::Numeric,
        })
        .collect();
    TabularDataset::new(
        Tensor::matrix(n, d, data).expect("synthetic shape"),
        labels.iter().map(|&y| Obs::from_bit(y)).collect(),
        groups.iter().map(|&a| Obs::from_bit(a)).collect(),
        Some(GroundTruth { labels, groups }),
        columns,
    )
}

/// Mask observations group-conditionally from the ground truth.
///
/// Masking always re-derives from the hidden truth, so re-applying the same
/// spec to an already-masked dataset yields the identical pattern.
pub fn apply_mask(ds: &TabularDataset, spec: &MaskSpec) -> Result<TabularDataset, DataError> {
    MaskSpec::new(spec.alpha, spec.beta, spec.label_missing, spec.seed)?;
    let truth = ds.truth().ok_or(DataError::NoGroundTruth)?.clone();
    let mut rng = stream::stream(spec.seed, stream::names::MASK);
    let n = ds.n_records();
    let mut group_obs = Vec::with_capacity(n);
    let mut label_obs = Vec::with_capacity(n);
    for i in 0..n {
        let rate = if truth.groups[i] == 1 {
            spec.alpha
        } else {
            spec.beta
        };
        let u_group: f64 = rng.random();
        group_obs.push(if u_group < rate {
            Obs::Missing
        } else {
            Obs::from_bit(truth.groups[i])
        });
        let u_label: f64 = rng.random();
        label_obs.push(if u_label < spec.label_missing {
            Obs::Missing
        } else {
            Obs::from_bit(truth.labels[i])
        });
    }
    TabularDataset::new(
        ds.features().clone(),
        label_obs,
        group_obs,
        Some(truth),
        ds.columns().to_vec(),
    )
}

/// Random disjoint covering split into (train, validation, test).
///
/// The test part retains hidden truth for scoring but its observed label and
/// group are blanked: prediction runs with no access to them.
pub fn split(
    ds: &TabularDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(TabularDataset, TabularDataset, TabularDataset), DataError> {
    let sum = fractions.0 + fractions.1 + fractions.2;
    if math::abs(sum - 1.0) > 1e-9 {
        return Err(DataError::BadFractions { sum });
    }
    let n = ds.n_records();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = stream::stream(seed, stream::names::SPLIT);
    indices.shuffle(&mut rng);

    let n_train = (n as f64 * fractions.0) as usize;
    let n_val = (n as f64 * fractions.1) as usize;
    let train = ds.subset(&indices[..n_train]);
    let val = ds.subset(&indices[n_train..n_train + n_val]);
    let mut test = ds.subset(&indices[n_train + n_val..]);
    let n_test = test.n_records();
    test.label_obs = vec![Obs::Missing; n_test];
    test.group_obs = vec![Obs::Missing; n_test];
    Ok((train, val, test))
}

/// Per-column affine normalization fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl Normalizer {
    /// Fit z-scoring statistics on the numeric columns of `train`.
    /// Categorical (one-hot) columns pass through unchanged.
    pub fn fit(train: &TabularDataset) -> Self {
        let (n, d) = (train.n_records(), train.n_features());
        let mut means = vec![0.0; d];
        let mut stds = vec![1.0; d];
        for j in 0..d {
            let numeric = train
                .columns()
                .get(j)
                .map_or(true, |c| c.kind == ColumnKind::Numeric);
            if !numeric {
                continue;
            }
            let mut mean = 0.0;
            for i in 0..n {
                mean += train.features.data()[i * d + j];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                let delta = train.features.data()[i * d + j] - mean;
                var += delta * delta;
            }
            var /= n as f64;
            means[j] = mean;
            stds[j] = if var > 0.0 { math::sqrt(var) } else { 1.0 };
        }
        Self { means, stds }
    }

    pub fn apply(&self, ds: &TabularDataset) -> TabularDataset {
        let (n, d) = (ds.n_records(), ds.n_features());
        debug_assert_eq!(d, self.means.len());
        let mut data = ds.features.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = (data[i * d + j] - self.means[j]) / self.stds[j];
            }
        }
        TabularDataset {
            features: Tensor::matrix(n, d, data).expect("normalize shape"),
            label_obs: ds.label_obs.clone(),
            group_obs: ds.group_obs.clone(),
            truth: ds.truth.clone(),
            columns: ds.columns.clone(),
        }
    }
}

/// Split, then z-score every part with statistics fitted on the training
/// part only, then mask train and validation.
pub fn prepare_splits(
    ds: &TabularDataset,
    fractions: (f64, f64, f64),
    mask: &MaskSpec,
    split_seed: u64,
) -> Result<(TabularDataset, TabularDataset, TabularDataset), DataError> {
    let (train, val, test) = split(ds, fractions, split_seed)?;
    let normalizer = Normalizer::fit(&train);
    let train = normalizer.apply(&train);
    let val = normalizer.apply(&val);
    let test = normalizer.apply(&test);
    let train = apply_mask(&train, mask)?;
    // An independent mask stream for validation, derived from the same spec.
    let val_mask = MaskSpec {
        seed: mask.seed.wrapping_add(1),
        ..*mask
    };
    let val = apply_mask(&val, &val_mask)?;
    Ok((train, val, test))
}
