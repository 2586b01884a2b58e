use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cooperation::FusionRule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "FedCO2-feature")]
    FedCo2Feature,
    #[serde(rename = "FedCO2-plain")]
    FedCo2Plain,
    FedAvg,
    FedBN,
    FedProx,
    SingleSet,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::FedCo2Feature,
        Algorithm::FedCo2Plain,
        Algorithm::FedAvg,
        Algorithm::FedBN,
        Algorithm::FedProx,
        Algorithm::SingleSet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedCo2Feature => "FedCO2-feature",
            Algorithm::FedCo2Plain => "FedCO2-plain",
            Algorithm::FedAvg => "FedAvg",
            Algorithm::FedBN => "FedBN",
            Algorithm::FedProx => "FedProx",
            Algorithm::SingleSet => "SingleSet",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Whether each client also keeps a fully local offline model.
    pub fn has_offline(self) -> bool {
        matches!(self, Algorithm::FedCo2Feature | Algorithm::FedCo2Plain)
    }

    /// Whether BN blocks stay on the client.
    pub fn personal_bn(self) -> bool {
        matches!(
            self,
            Algorithm::FedCo2Feature | Algorithm::FedCo2Plain | Algorithm::FedBN
        )
    }

    pub fn communicates(self) -> bool {
        self != Algorithm::SingleSet
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which knowledge-transfer mechanisms the feature-skew variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default = "yes")]
    pub intra_transfer: bool,
    #[serde(default = "yes")]
    pub inter_transfer: bool,
}

fn yes() -> bool {
    true
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            intra_transfer: true,
            inter_transfer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "one")]
    pub mutual_epochs: usize,
    pub lr: f64,
    #[serde(default = "unit")]
    pub mu: f64,
    #[serde(default = "default_mu_prox")]
    pub mu_prox: f64,
    #[serde(default = "unit")]
    pub sample_fraction: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub fusion: FusionRule,
    /// Also evaluate on the training split every round.
    #[serde(default)]
    pub eval_train: bool,
    /// Record wall-clock milliseconds; when off the column is 0 and output
    /// is reproducible bit for bit.
    #[serde(default)]
    pub timing: bool,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn default_mu_prox() -> f64 {
    0.01
}

fn default_batch() -> usize {
    32
}

impl RoundConfig {
    pub fn new(algorithm: Algorithm, rounds: usize, lr: f64, seed: u64) -> Self {
        Self {
            algorithm,
            rounds,
            local_epochs: 1,
            mutual_epochs: 1,
            lr,
            mu: 1.0,
            mu_prox: default_mu_prox(),
            sample_fraction: 1.0,
            batch_size: default_batch(),
            seed,
            ablation: Ablation::default(),
            fusion: FusionRule::default(),
            eval_train: false,
            timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1".into());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!("sample_fraction must be in (0, 1], got {}", self.sample_fraction));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.mu >= 0.0) || !(self.mu_prox >= 0.0) {
            return bad("mu and mu_prox must be >= 0".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch statistics)".into());
        }
        if !(self.fusion.w_on > 0.0 && self.fusion.w_off > 0.0) {
            return bad("fusion weights must be positive".into());
        }
        if self.ablation != Ablation::default() && self.algorithm != Algorithm::FedCo2Feature {
            return bad(format!(
                "ablation flags only apply to FedCO2-feature, not {}",
                self.algorithm
            ));
        }
        Ok(())
    }
}
