use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::{
    make_feature_skew_with, make_gaussian_mixture, make_noise_skew, load_idx, label_heterogeneity,
    partition_iid, partition_pathological, FeatureSkewSpec, FederatedDataset, Heterogeneity, SampleStore,
};
use crate::error::{Error, Result};
use crate::federation::{Ablation, RoundConfig};
use crate::models::MlpConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Per-client affine transforms of a shared class mixture. Comes
    /// already split into clients.
    FeatureSkew {
        n_clients: usize,
        n_per_client: usize,
        d: usize,
        num_classes: usize,
        #[serde(default = "one")]
        class_sep: f64,
        #[serde(default = "half")]
        scale_min: f64,
        #[serde(default = "two")]
        scale_max: f64,
        #[serde(default = "one")]
        max_angle: f64,
        #[serde(default = "half")]
        test_fraction: f64,
        #[serde(default)]
        identity_transforms: bool,
    },
    GaussianMixture {
        n_samples: usize,
        d: usize,
        num_classes: usize,
        #[serde(default = "one")]
        class_sep: f64,
    },
    /// Relative paths are resolved against the config file's directory.
    Idx { features: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Dirichlet { n_clients: usize, alpha: f64 },
    Pathological { n_clients: usize, classes_per_client: usize },
    Iid { n_clients: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Client `i` gets noise level `σ_max·i/(N−1)`.
    pub sigma_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_widths")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "yes")]
    pub bn_after_hidden: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_widths: default_widths(),
            bn_after_hidden: true,
        }
    }
}

/// A complete experiment as read from JSON.
///
/// The top-level `seed` drives data generation, partitioning and training;
/// any `seed` inside `federation` is replaced by it. A top-level `ablation`
/// likewise replaces `federation.ablation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    /// Test share used when splitting partitioned clients.
    #[serde(default = "half")]
    pub test_fraction: f64,
    #[serde(default)]
    pub model: ModelSpec,
    pub federation: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn two() -> f64 {
    2.0
}

fn yes() -> bool {
    true
}

fn default_widths() -> Vec<usize> {
    vec![64, 64]
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses `v` as JSON when possible, otherwise keeps it as a string.
fn parse_value(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

/// Applies `key=value` overrides. Keys may be dotted paths into nested
/// objects; missing objects along the path are created.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override key `{key}` has an empty segment")));
        }
        let mut node = &mut *doc;
        for part in &parts[..parts.len() - 1] {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is inside a non-object")))?;
            node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` targets a non-object")))?;
        obj.insert(parts[parts.len() - 1].to_string(), parse_value(value));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_value(doc: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(doc).map_err(config_err)?;
        cfg.round_config()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(config_err)?;
        apply_overrides(&mut doc, overrides)?;
        Self::from_value(doc)
    }

    /// Reads a config file. Relative IDX paths are made relative to the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text, overrides)?;
        if let DatasetSpec::Idx { features, labels } = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [features, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// The federation section with the top-level seed and ablation applied.
    pub fn round_config(&self) -> Result<RoundConfig> {
        let mut fed = self.federation.clone();
        let obj = fed
            .as_object_mut()
            .ok_or_else(|| Error::Config("`federation` must be an object".into()))?;
        obj.insert("seed".into(), Value::from(self.seed));
        if let Some(a) = self.ablation {
            obj.insert("ablation".into(), serde_json::to_value(a)?);
        }
        let rc: RoundConfig = serde_json::from_value(fed).map_err(config_err)?;
        rc.validate()?;
        Ok(rc)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (&self.dataset, &self.partition) {
            (DatasetSpec::FeatureSkew { .. }, Some(_)) => {
                return bad("feature_skew data is already split into clients; drop `partition`".into())
            }
            (DatasetSpec::GaussianMixture { .. } | DatasetSpec::Idx { .. }, None) => {
                return bad("this dataset needs a `partition`".into())
            }
            _ => {}
        }
        if let DatasetSpec::FeatureSkew { scale_min, scale_max, test_fraction, .. } = self.dataset {
            if !(scale_min > 0.0 && scale_min <= scale_max) {
                return bad(format!("invalid scale range [{scale_min}, {scale_max}]"));
            }
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return bad(format!("dataset.test_fraction must be in (0, 1), got {test_fraction}"));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must be in (0, 1), got {}", self.test_fraction));
        }
        if let Some(PartitionSpec::Dirichlet { alpha, .. }) = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return bad(format!("dirichlet alpha must be positive, got {alpha}"));
            }
        }
        if let Some(n) = self.noise {
            if !(n.sigma_max >= 0.0 && n.sigma_max.is_finite()) {
                return bad(format!("noise.sigma_max must be >= 0, got {}", n.sigma_max));
            }
        }
        if self.model.hidden_widths.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    /// Generates or loads the data and splits it into clients.
    pub fn build_dataset(&self) -> Result<FederatedDataset<f64>> {
        let seed = self.seed;
        let ds = match &self.dataset {
            &DatasetSpec::FeatureSkew {
                n_clients,
                n_per_client,
                d,
                num_classes,
                class_sep,
                scale_min,
                scale_max,
                max_angle,
                test_fraction,
                identity_transforms,
            } => {
                let spec = FeatureSkewSpec {
                    n_clients,
                    n_per_client,
                    d,
                    num_classes,
                    class_sep,
                    scale_range: (scale_min, scale_max),
                    max_angle,
                    test_fraction,
                    identity_transforms,
                };
                make_feature_skew_with(&spec, seed)?
            }
            DatasetSpec::GaussianMixture { n_samples, d, num_classes, class_sep } => {
                let store = make_gaussian_mixture(*n_samples, *d, *num_classes, *class_sep, seed)?;
                self.partition_store(store)?
            }
            DatasetSpec::Idx { features, labels } => self.partition_store(load_idx(features, labels)?)?,
        };
        match self.noise {
            Some(n) => make_noise_skew(&ds, n.sigma_max, seed),
            None => Ok(ds),
        }
    }

    fn partition_store(&self, store: SampleStore<f64>) -> Result<FederatedDataset<f64>> {
        let (seed, tf) = (self.seed, self.test_fraction);
        let part = self.partition.as_ref().ok_or_else(|| Error::Config("missing partition".into()))?;
        let labels = store.class_labels()?.to_vec();
        match *part {
            PartitionSpec::Dirichlet { n_clients, alpha } => FederatedDataset::dirichlet(store, n_clients, alpha, tf, seed),
            PartitionSpec::Pathological { n_clients, classes_per_client } => {
                let a = partition_pathological(&labels, n_clients, classes_per_client, seed)?;
                let het = Heterogeneity::new(
                    "pathological",
                    &[
                        ("classes_per_client", classes_per_client as f64),
                        ("n_clients", n_clients as f64),
                        ("label_tv", label_heterogeneity(&labels, &a)),
                    ],
                    seed,
                );
                FederatedDataset::from_assignments(store, a, tf, seed, het)
            }
            PartitionSpec::Iid { n_clients } => {
                let a = partition_iid(labels.len(), n_clients, seed)?;
                let het = Heterogeneity::new(
                    "iid",
                    &[("n_clients", n_clients as f64), ("label_tv", label_heterogeneity(&labels, &a))],
                    seed,
                );
                FederatedDataset::from_assignments(store, a, tf, seed, het)
            }
        }
    }

    pub fn mlp_config(&self, ds: &FederatedDataset<f64>) -> Result<MlpConfig> {
        let num_classes = ds
            .store
            .num_classes()
            .ok_or_else(|| Error::Config("classification data required".into()))?;
        Ok(MlpConfig {
            input_dim: ds.store.dim(),
            hidden_widths: self.model.hidden_widths.clone(),
            num_classes,
            bn_after_hidden: self.model.bn_after_hidden,
        })
    }
}
