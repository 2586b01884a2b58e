//! Round-based server/client simulation of Fed-CO₂ and its baselines.
//!
//! Clients train in parallel; every per-client random stream is keyed by
//! `(seed, client id, round, purpose)` and uploads are aggregated in
//! ascending client order, so results do not depend on the thread count.

mod config;
mod round;

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use crate::cooperation::{fuse_predictions, ClassifierSet, FusionRule};
use crate::datagen::FederatedDataset;
use crate::error::{Error, Result};
use crate::models::{init_mlp, split_params, Mlp, MlpConfig, ParamSet, Select};
use crate::numerics::{BnMode, Tape, Tensor};
use crate::rng;
use crate::scalar::Scalar;

pub use config::{Ablation, Algorithm, RoundConfig};
pub use round::{
    run_round, run_round_baseline, run_round_fedco2_feature, run_round_fedco2_plain, RoundOutcome,
};

/// A client's slice of the dataset, materialized once.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData<T> {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub x_train: Tensor<T>,
    pub y_train: Vec<usize>,
    pub x_test: Tensor<T>,
    pub y_test: Vec<usize>,
}

impl<T: Scalar> ClientData<T> {
    pub fn from_dataset(ds: &FederatedDataset<T>, cid: usize) -> Result<Self> {
        let split = ds
            .clients
            .get(cid)
            .ok_or_else(|| Error::InvalidArgument(format!("no client {cid}")))?;
        Ok(Self {
            train: split.train.clone(),
            test: split.test.clone(),
            x_train: ds.train_features(cid)?,
            y_train: ds.class_labels_of(&split.train)?,
            x_test: ds.test_features(cid)?,
            y_test: ds.class_labels_of(&split.test)?,
        })
    }

    pub fn split(&self, split: Split) -> (&Tensor<T>, &[usize]) {
        match split {
            Split::Train => (&self.x_train, &self.y_train),
            Split::Test => (&self.x_test, &self.y_test),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState<T> {
    pub id: usize,
    pub online: ParamSet<T>,
    /// Fully local model; only present for the Fed-CO₂ variants.
    pub offline: Option<ParamSet<T>>,
    pub teacher_online: Option<ParamSet<T>>,
    pub teacher_offline: Option<ParamSet<T>>,
    pub classifier_set: ClassifierSet<T>,
    pub data: ClientData<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState<T> {
    /// Blocks every participant receives at round start.
    pub shared: ParamSet<T>,
    pub classifier_pool: ClassifierSet<T>,
    pub round: usize,
}

/// Blockwise mean with equal weights.
pub fn aggregate_mean<T: Scalar>(sets: &[&ParamSet<T>]) -> Result<ParamSet<T>> {
    let first = *sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    if let Some(bad) = sets.iter().position(|s| !s.same_schema(first)) {
        return Err(Error::Misaligned(format!("parameter set {bad} has a different schema")));
    }
    let n = T::from_count(sets.len());
    let mut out = first.clone();
    let names: Vec<String> = first.names().map(str::to_string).collect();
    for name in &names {
        let acc = out.get_mut_unchecked(name);
        let mut sum = vec![T::zero(); acc.numel()];
        for s in sets {
            let t = s.get(name).expect("same schema");
            sum.iter_mut().zip(t.data()).for_each(|(a, &b)| *a = *a + b);
        }
        acc.data_mut()
            .iter_mut()
            .zip(sum)
            .for_each(|(a, s)| *a = s / n);
    }
    Ok(out)
}

/// `⌈fraction·N⌉` distinct client ids, ascending, determined by
/// `(seed, round)`.
pub fn sample_clients(n: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let k = ((fraction * n as f64).ceil() as usize).clamp(usize::from(n > 0), n);
    if k == n {
        return (0..n).collect();
    }
    let mut rng = rng::stream(&[seed, rng::tag::SAMPLING, round as u64]);
    let mut ids = index::sample(&mut rng, n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// The part of an online model that travels to the server.
pub fn upload_blocks<T: Scalar>(algorithm: Algorithm, online: &ParamSet<T>) -> ParamSet<T> {
    if !algorithm.communicates() {
        ParamSet::new()
    } else if algorithm.personal_bn() {
        split_params(online, Select::Shared).0
    } else {
        online.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fused,
    Online,
    Offline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Fused => "fused",
            Mode::Online => "online",
            Mode::Offline => "offline",
        }
    }

    /// Modes reported for an algorithm; the headline mode comes first.
    pub fn reported(algorithm: Algorithm) -> &'static [Mode] {
        if algorithm.has_offline() {
            &[Mode::Fused, Mode::Online, Mode::Offline]
        } else {
            &[Mode::Online]
        }
    }
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub algorithm: Algorithm,
    pub client_id: usize,
    pub split: Split,
    pub mode: Mode,
    pub accuracy: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Test or train accuracy and mean cross-entropy of one client, with BN in
/// eval mode. Fused logits are `w_on·online + w_off·offline`.
pub fn evaluate_client<T: Scalar>(
    mlp: &Mlp<T>,
    client: &ClientState<T>,
    mode: Mode,
    split: Split,
    fusion: FusionRule,
) -> Result<(f64, f64)> {
    let (x, y) = client.data.split(split);
    if y.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "client {} has an empty {} split",
            client.id,
            split.name()
        )));
    }
    let offline = || {
        client.offline.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("client {} has no offline model", client.id))
        })
    };
    let logits = match mode {
        Mode::Online => mlp.forward(&client.online, x, BnMode::Eval)?.logits,
        Mode::Offline => mlp.forward(offline()?, x, BnMode::Eval)?.logits,
        Mode::Fused => {
            let on = mlp.forward(&client.online, x, BnMode::Eval)?.logits;
            let off = mlp.forward(offline()?, x, BnMode::Eval)?.logits;
            fuse_predictions(&on, &off, fusion)?
        }
    };
    score(&logits, y)
}

/// Accuracy and mean cross-entropy of a batch of logits.
pub fn score<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, f64)> {
    let pred = crate::models::predict_class(logits)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    let mut tape = Tape::new();
    let lv = tape.constant(logits.clone());
    let ce = tape.softmax_cross_entropy(lv, labels)?;
    Ok((
        correct as f64 / labels.len() as f64,
        tape.value(ce).data()[0].to_f64_lossy(),
    ))
}

/// Initial client and server states. Every online model starts from the
/// same draw; offline models get per-client draws.
pub fn init_states<T: Scalar>(
    cfg: &RoundConfig,
    mlp_cfg: &MlpConfig,
    ds: &FederatedDataset<T>,
) -> Result<(ServerState<T>, Vec<ClientState<T>>)> {
    let global = init_mlp::<T>(mlp_cfg, cfg.seed)?;
    let clients = (0..ds.num_clients())
        .map(|cid| {
            let offline = if cfg.algorithm.has_offline() {
                let s = rng::derive_seed(&[cfg.seed, rng::tag::OFFLINE_INIT, cid as u64]);
                Some(init_mlp::<T>(mlp_cfg, s)?)
            } else {
                None
            };
            Ok(ClientState {
                id: cid,
                online: global.clone(),
                offline,
                teacher_online: None,
                teacher_offline: None,
                classifier_set: ClassifierSet::new(),
                data: ClientData::from_dataset(ds, cid)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let server = ServerState {
        shared: upload_blocks(cfg.algorithm, &global),
        classifier_pool: ClassifierSet::new(),
        round: 0,
    };
    Ok((server, clients))
}

/// A full federated run.
#[derive(Debug, Clone)]
pub struct Simulation<T> {
    pub cfg: RoundConfig,
    pub mlp: Mlp<T>,
    pub server: ServerState<T>,
    pub clients: Vec<ClientState<T>>,
}

impl<T: Scalar> Simulation<T> {
    pub fn new(cfg: RoundConfig, mlp_cfg: MlpConfig, ds: &FederatedDataset<T>) -> Result<Self> {
        cfg.validate()?;
        ds.validate()?;
        let d = ds.store.dim();
        if d != mlp_cfg.input_dim {
            return Err(Error::Config(format!(
                "model input_dim {} does not match data width {d}",
                mlp_cfg.input_dim
            )));
        }
        if let Some(c) = ds.store.num_classes() {
            if c > mlp_cfg.num_classes {
                return Err(Error::Config(format!(
                    "data has {c} classes, model only {}",
                    mlp_cfg.num_classes
                )));
            }
        }
        let mlp = Mlp::new(mlp_cfg.clone())?;
        let (server, clients) = init_states(&cfg, &mlp_cfg, ds)?;
        Ok(Self {
            cfg,
            mlp,
            server,
            clients,
        })
    }

    pub fn done(&self) -> bool {
        self.server.round >= self.cfg.rounds
    }

    /// Runs one round and evaluates every client afterwards.
    pub fn step(&mut self) -> Result<Vec<RoundReport>> {
        let outcome = run_round(&mut self.server, &mut self.clients, &self.cfg, &self.mlp)?;
        self.evaluate(self.server.round, &outcome.wall_ms)
    }

    /// Runs all remaining rounds.
    pub fn run(&mut self) -> Result<Vec<RoundReport>> {
        let mut out = Vec::new();
        while !self.done() {
            out.extend(self.step()?);
        }
        Ok(out)
    }

    /// Metrics rows for every client at the current state. `train_ms` holds
    /// per-client training time for this round (zero when not sampled).
    pub fn evaluate(&self, round: usize, train_ms: &[f64]) -> Result<Vec<RoundReport>> {
        let cfg = &self.cfg;
        let mut splits = vec![Split::Test];
        if cfg.eval_train {
            splits.insert(0, Split::Train);
        }
        let rows: Vec<Vec<RoundReport>> = self
            .clients
            .par_iter()
            .map(|client| {
                let mut rows = Vec::new();
                for &split in &splits {
                    for &mode in Mode::reported(cfg.algorithm) {
                        let start = Instant::now();
                        let (accuracy, loss) = evaluate_client(&self.mlp, client, mode, split, cfg.fusion)?;
                        let wall_ms = if cfg.timing {
                            train_ms.get(client.id).copied().unwrap_or(0.0)
                                + start.elapsed().as_secs_f64() * 1e3
                        } else {
                            0.0
                        };
                        rows.push(RoundReport {
                            round,
                            algorithm: cfg.algorithm,
                            client_id: client.id,
                            split,
                            mode,
                            accuracy,
                            loss,
                            wall_ms,
                        });
                    }
                }
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        Ok(rows.into_iter().flatten().collect())
    }

    /// Mean test accuracy over clients in `mode`.
    pub fn mean_test_accuracy(&self, mode: Mode) -> Result<f64> {
        let total = self
            .clients
            .iter()
            .map(|c| evaluate_client(&self.mlp, c, mode, Split::Test, self.cfg.fusion).map(|r| r.0))
            .sum::<Result<f64>>()?;
        Ok(total / self.clients.len() as f64)
    }
}
