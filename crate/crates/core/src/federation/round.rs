use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::cooperation::{
    adaptation_step, build_classifier_set, classifier_of, mutual_learning_step, ClassifierSet,
};
use crate::error::{Error, Result};
use crate::federation::{
    aggregate_mean, sample_clients, upload_blocks, Algorithm, ClientData, ClientState, RoundConfig,
    ServerState,
};
use crate::models::{apply_stats, clone_frozen, overwrite_blocks, Bound, Mlp, ParamSet};
use crate::numerics::{sgd_step, BnMode, Tape};
use crate::rng;
use crate::scalar::Scalar;

/// What a round produced besides the updated states.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Mean training loss of the online model per participant, in
    /// participant order.
    pub train_loss: Vec<f64>,
    /// Training wall time per client id (zero when not sampled or when
    /// timing is off).
    pub wall_ms: Vec<f64>,
}

struct Upload<T> {
    id: usize,
    shared: ParamSet<T>,
    classifier: Option<ParamSet<T>>,
    loss: f64,
    ms: f64,
}

/// Shuffled minibatches covering `0..n`. A trailing batch of one sample is
/// folded into the previous batch, since batch statistics need two rows.
fn minibatches(n: usize, batch_size: usize, rng: &mut rng::Rng) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("at least one batch").extend(last);
    }
    Ok(batches)
}

fn stream(cfg: &RoundConfig, cid: usize, round: usize, tag: u64) -> rng::Rng {
    rng::stream(&[cfg.seed, cid as u64, round as u64, tag])
}

/// `epochs` passes of SGD on cross-entropy, optionally plus the proximal
/// term `(μ/2)‖θ − anchor‖²` over trainable blocks.
#[allow(clippy::too_many_arguments)]
fn ce_epochs<T: Scalar>(
    mlp: &Mlp<T>,
    params: &mut ParamSet<T>,
    data: &ClientData<T>,
    epochs: usize,
    batch_size: usize,
    lr: T,
    prox: Option<(&ParamSet<T>, T)>,
    rng: &mut rng::Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut steps = 0usize;
    for _ in 0..epochs {
        for batch in minibatches(data.y_train.len(), batch_size, rng)? {
            let x = data.x_train.select_rows(&batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| data.y_train[i]).collect();
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, params, true);
            let xv = tape.constant(x);
            let out = mlp.forward_tape(&mut tape, &bound, params, xv, BnMode::Train)?;
            let mut loss = tape.softmax_cross_entropy(out.logits, &y)?;
            if let Some((anchor, mu)) = prox {
                let mut penalty = None;
                for name in params.trainable_names() {
                    let Some(a) = anchor.get(name) else { continue };
                    let av = tape.constant(a.clone());
                    let diff = tape.sub(bound.var(name)?, av)?;
                    let sq = tape.sum_squares(diff)?;
                    penalty = Some(match penalty {
                        Some(p) => tape.add(p, sq)?,
                        None => sq,
                    });
                }
                if let Some(p) = penalty {
                    let p = tape.scale(p, mu * T::lit(0.5))?;
                    loss = tape.add(loss, p)?;
                }
            }
            total += tape.value(loss).data()[0].to_f64_lossy();
            steps += 1;
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            sgd_step(params, &grads, lr)?;
            apply_stats(params, &out.stats)?;
        }
    }
    Ok(total / steps.max(1) as f64)
}

fn train_participant<T: Scalar>(
    client: &mut ClientState<T>,
    broadcast: &ParamSet<T>,
    pool: &ClassifierSet<T>,
    cfg: &RoundConfig,
    mlp: &Mlp<T>,
    round: usize,
) -> Result<Upload<T>> {
    let start = Instant::now();
    let lr = T::lit(cfg.lr);
    let cid = client.id;
    if cfg.algorithm.communicates() {
        overwrite_blocks(&mut client.online, broadcast)?;
    }
    let mut on_rng = stream(cfg, cid, round, rng::tag::TRAIN_ONLINE);
    let mut off_rng = stream(cfg, cid, round, rng::tag::TRAIN_OFFLINE);
    let (loss, classifier) = match cfg.algorithm {
        Algorithm::FedAvg | Algorithm::FedBN | Algorithm::SingleSet => {
            let l = ce_epochs(mlp, &mut client.online, &client.data, cfg.local_epochs, cfg.batch_size, lr, None, &mut on_rng)?;
            (l, None)
        }
        Algorithm::FedProx => {
            let prox = (cfg.mu_prox > 0.0).then_some((broadcast, T::lit(cfg.mu_prox)));
            let l = ce_epochs(mlp, &mut client.online, &client.data, cfg.local_epochs, cfg.batch_size, lr, prox, &mut on_rng)?;
            (l, None)
        }
        Algorithm::FedCo2Plain => {
            let offline = client.offline.as_mut().ok_or_else(|| missing_offline(cid))?;
            let l = ce_epochs(mlp, &mut client.online, &client.data, cfg.local_epochs, cfg.batch_size, lr, None, &mut on_rng)?;
            ce_epochs(mlp, offline, &client.data, cfg.local_epochs, cfg.batch_size, lr, None, &mut off_rng)?;
            (l, None)
        }
        Algorithm::FedCo2Feature => {
            client.classifier_set = pool.clone();
            let offline = client.offline.as_mut().ok_or_else(|| missing_offline(cid))?;
            let data = &client.data;
            if cfg.ablation.intra_transfer {
                let t_on = clone_frozen(&client.online);
                let t_off = clone_frozen(offline);
                let mut m_rng = stream(cfg, cid, round, rng::tag::MUTUAL);
                for _ in 0..cfg.mutual_epochs {
                    for batch in minibatches(data.y_train.len(), cfg.batch_size, &mut m_rng)? {
                        let x = data.x_train.select_rows(&batch)?;
                        mutual_learning_step(mlp, &mut client.online, offline, &t_on, &t_off, &x, lr)?;
                    }
                }
                client.teacher_online = Some(t_on);
                client.teacher_offline = Some(t_off);
            } else {
                client.teacher_online = None;
                client.teacher_offline = None;
            }
            let mu = if cfg.ablation.inter_transfer { T::lit(cfg.mu) } else { T::zero() };
            let set = &client.classifier_set;
            let mut total = 0.0;
            let mut steps = 0usize;
            for _ in 0..cfg.local_epochs {
                for batch in minibatches(data.y_train.len(), cfg.batch_size, &mut on_rng)? {
                    let x = data.x_train.select_rows(&batch)?;
                    let y: Vec<usize> = batch.iter().map(|&i| data.y_train[i]).collect();
                    let l = adaptation_step(mlp, &mut client.online, &x, &y, set, cid, mu, lr)?;
                    total += l.to_f64_lossy();
                    steps += 1;
                }
                for batch in minibatches(data.y_train.len(), cfg.batch_size, &mut off_rng)? {
                    let x = data.x_train.select_rows(&batch)?;
                    let y: Vec<usize> = batch.iter().map(|&i| data.y_train[i]).collect();
                    adaptation_step(mlp, offline, &x, &y, set, cid, mu, lr)?;
                }
            }
            (total / steps.max(1) as f64, Some(classifier_of(offline)))
        }
    };
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("client {cid} loss {loss} in round {round}")));
    }
    Ok(Upload {
        id: cid,
        shared: upload_blocks(cfg.algorithm, &client.online),
        classifier,
        loss,
        ms: if cfg.timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
    })
}

fn missing_offline(cid: usize) -> Error {
    Error::Contract(format!("client {cid} has no offline model"))
}

/// One communication round for any algorithm: sampled clients sync with
/// the server, train locally in parallel, upload, and the server averages
/// the uploads in ascending client order. Participants then receive the
/// new shared blocks; unsampled clients are left untouched.
pub fn run_round<T: Scalar>(
    server: &mut ServerState<T>,
    clients: &mut [ClientState<T>],
    cfg: &RoundConfig,
    mlp: &Mlp<T>,
) -> Result<RoundOutcome> {
    cfg.validate()?;
    let round = server.round + 1;
    let participants = sample_clients(clients.len(), cfg.sample_fraction, round, cfg.seed);
    let mut selected = vec![false; clients.len()];
    participants.iter().for_each(|&i| selected[i] = true);
    let broadcast = &server.shared;
    let pool = &server.classifier_pool;
    let uploads: Vec<Upload<T>> = clients
        .par_iter_mut()
        .filter(|c| selected[c.id])
        .map(|c| train_participant(c, broadcast, pool, cfg, mlp, round))
        .collect::<Result<_>>()?;

    if cfg.algorithm.communicates() {
        let sets: Vec<&ParamSet<T>> = uploads.iter().map(|u| &u.shared).collect();
        server.shared = aggregate_mean(&sets)?;
        for c in clients.iter_mut().filter(|c| selected[c.id]) {
            overwrite_blocks(&mut c.online, &server.shared)?;
        }
    }
    if cfg.algorithm == Algorithm::FedCo2Feature {
        let heads: Vec<(usize, ParamSet<T>)> = uploads
            .iter()
            .filter_map(|u| u.classifier.clone().map(|c| (u.id, c)))
            .collect();
        server.classifier_pool = build_classifier_set(&heads)?;
    }
    server.round = round;
    let mut wall_ms = vec![0.0; clients.len()];
    uploads.iter().for_each(|u| wall_ms[u.id] = u.ms);
    Ok(RoundOutcome {
        round,
        participants,
        train_loss: uploads.iter().map(|u| u.loss).collect(),
        wall_ms,
    })
}

fn expect_algorithm(cfg: &RoundConfig, allowed: &[Algorithm]) -> Result<()> {
    if allowed.contains(&cfg.algorithm) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{} cannot run this round type (expected one of {allowed:?})",
            cfg.algorithm
        )))
    }
}

/// Online and offline models train independently on cross-entropy.
pub fn run_round_fedco2_plain<T: Scalar>(
    server: &mut ServerState<T>,
    clients: &mut [ClientState<T>],
    cfg: &RoundConfig,
    mlp: &Mlp<T>,
) -> Result<RoundOutcome> {
    expect_algorithm(cfg, &[Algorithm::FedCo2Plain])?;
    run_round(server, clients, cfg, mlp)
}

/// Mutual learning through frozen teachers, then adaptation on
/// cross-entropy plus the foreign-classifier loss.
pub fn run_round_fedco2_feature<T: Scalar>(
    server: &mut ServerState<T>,
    clients: &mut [ClientState<T>],
    cfg: &RoundConfig,
    mlp: &Mlp<T>,
) -> Result<RoundOutcome> {
    expect_algorithm(cfg, &[Algorithm::FedCo2Feature])?;
    run_round(server, clients, cfg, mlp)
}

pub fn run_round_baseline<T: Scalar>(
    server: &mut ServerState<T>,
    clients: &mut [ClientState<T>],
    cfg: &RoundConfig,
    mlp: &Mlp<T>,
) -> Result<RoundOutcome> {
    expect_algorithm(
        cfg,
        &[Algorithm::FedAvg, Algorithm::FedBN, Algorithm::FedProx, Algorithm::SingleSet],
    )?;
    run_round(server, clients, cfg, mlp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minibatches_cover_and_fold_singletons() {
        let mut rng = rng::stream(&[1]);
        let b = minibatches(9, 4, &mut rng).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert!(minibatches(1, 4, &mut rng).is_err());
    }
}
