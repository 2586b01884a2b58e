//! Seeded construction of federated datasets.
//!
//! A [`FederatedDataset`] is a single [`SampleStore`] plus, per client, a pair
//! of disjoint train/test index lists into it. Partitioners return raw
//! per-client index assignments; [`FederatedDataset::from_assignments`] turns
//! an assignment into stratified train/test splits so that each client's test
//! labels follow its training labels.

mod idx;
mod partition;
mod synthetic;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;
use crate::scalar::Scalar;

pub use idx::{load_idx, read_idx, save_idx, write_idx, IdxArray};
pub use partition::{partition_dirichlet, partition_iid, partition_pathological};
pub use synthetic::{
    make_feature_skew, make_feature_skew_with, make_gaussian_mixture, make_noise_skew,
    make_regression_clients, FeatureSkewSpec,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Labels<T> {
    Class(Vec<usize>),
    Real(Vec<T>),
}

impl<T> Labels<T> {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Labels::Class(v) => Some(v),
            Labels::Real(_) => None,
        }
    }
}

/// Feature matrix `n × d` with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStore<T> {
    pub features: Tensor<T>,
    pub labels: Labels<T>,
}

impl<T: Scalar> SampleStore<T> {
    pub fn new(features: Tensor<T>, labels: Labels<T>) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n == 0 {
            return Err(Error::InvalidArgument("sample store needs at least one sample".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// `1 + max label` for classification stores.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels.classes().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn class_labels(&self) -> Result<&[usize]> {
        self.labels
            .classes()
            .ok_or_else(|| Error::InvalidArgument("expected class labels".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// How a dataset was made heterogeneous; echoed into run summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heterogeneity {
    pub kind: String,
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Heterogeneity {
    pub fn new(kind: &str, params: &[(&str, f64)], seed: u64) -> Self {
        Self {
            kind: kind.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset<T> {
    pub store: SampleStore<T>,
    pub clients: Vec<ClientSplit>,
    pub heterogeneity: Heterogeneity,
    /// Per-client input covariances, for regression clients only.
    pub covariances: Vec<Tensor<T>>,
}

impl<T: Scalar> FederatedDataset<T> {
    /// Splits every client's samples into train and test, stratified by
    /// class, with `test_fraction` of each class (rounded) going to test.
    /// Each client keeps at least one sample on each side.
    pub fn from_assignments(
        store: SampleStore<T>,
        assignments: Vec<Vec<usize>>,
        test_fraction: f64,
        seed: u64,
        heterogeneity: Heterogeneity,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "test fraction must be in (0, 1), got {test_fraction}"
            )));
        }
        let mut clients = Vec::with_capacity(assignments.len());
        for (cid, idx) in assignments.into_iter().enumerate() {
            if idx.len() < 2 {
                return Err(Error::Infeasible(format!(
                    "client {cid} has {} samples; need at least 2 for a train/test split",
                    idx.len()
                )));
            }
            let mut rng = rng::stream(&[seed, rng::tag::SPLIT, cid as u64]);
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in &idx {
                let key = match &store.labels {
                    Labels::Class(l) => l[i],
                    Labels::Real(_) => 0,
                };
                by_class.entry(key).or_default().push(i);
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (_, mut members) in by_class {
                members.sort_unstable();
                members.shuffle(&mut rng);
                let n_test = (members.len() as f64 * test_fraction).round() as usize;
                test.extend_from_slice(&members[..n_test]);
                train.extend_from_slice(&members[n_test..]);
            }
            if test.is_empty() {
                test.push(train.pop().expect("at least 2 samples"));
            } else if train.is_empty() {
                train.push(test.pop().expect("at least 2 samples"));
            }
            train.sort_unstable();
            test.sort_unstable();
            clients.push(ClientSplit { train, test });
        }
        Ok(Self {
            store,
            clients,
            heterogeneity,
            covariances: Vec::new(),
        })
    }

    /// Dirichlet label skew over a classification store. Every client gets
    /// at least two samples so both of its splits are non-empty.
    pub fn dirichlet(
        store: SampleStore<T>,
        n_clients: usize,
        alpha: f64,
        test_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let labels = store.class_labels()?.to_vec();
        let assignments = partition::partition_dirichlet_min(&labels, n_clients, alpha, seed, 2)?;
        let het = Heterogeneity::new(
            "dirichlet",
            &[
                ("alpha", alpha),
                ("n_clients", n_clients as f64),
                ("label_tv", label_heterogeneity(&labels, &assignments)),
            ],
            seed,
        );
        Self::from_assignments(store, assignments, test_fraction, seed, het)
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn train_features(&self, client: usize) -> Result<Tensor<T>> {
        self.store.features.select_rows(&self.clients[client].train)
    }

    pub fn test_features(&self, client: usize) -> Result<Tensor<T>> {
        self.store.features.select_rows(&self.clients[client].test)
    }

    pub fn class_labels_of(&self, idx: &[usize]) -> Result<Vec<usize>> {
        let l = self.store.class_labels()?;
        Ok(idx.iter().map(|&i| l[i]).collect())
    }

    /// Checks the partition invariants: disjoint splits, non-empty sides,
    /// indices in range and no sample shared between clients.
    pub fn validate(&self) -> Result<()> {
        let n = self.store.len();
        let mut seen = vec![false; n];
        for (cid, c) in self.clients.iter().enumerate() {
            if c.train.is_empty() || c.test.is_empty() {
                return Err(Error::Infeasible(format!("client {cid} has an empty split")));
            }
            for &i in c.train.iter().chain(&c.test) {
                if i >= n {
                    return Err(Error::Shape(format!("client {cid} index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Infeasible(format!("sample {i} assigned twice")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Normalized label histogram of `labels[idx]`.
pub fn label_histogram(labels: &[usize], idx: &[usize], num_classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; num_classes];
    for &i in idx {
        h[labels[i]] += 1.0;
    }
    let n = idx.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Total-variation distance between two distributions on the same support.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Mean TV distance between each client's label histogram and the global one.
pub fn label_heterogeneity(labels: &[usize], assignments: &[Vec<usize>]) -> f64 {
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let all: Vec<usize> = (0..labels.len()).collect();
    let global = label_histogram(labels, &all, c);
    let total: f64 = assignments
        .iter()
        .map(|a| tv_distance(&label_histogram(labels, a, c), &global))
        .sum();
    total / assignments.len().max(1) as f64
}

#[cfg(test)]
mod tests;
