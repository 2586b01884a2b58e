use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::rng;

const MAX_RETRIES: usize = 100;

fn indices_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    by_class
}

/// Splits `members` into consecutive chunks whose sizes follow `weights`,
/// using rounded cumulative boundaries so the sizes sum exactly.
fn split_by_weights(members: &[usize], weights: &[f64]) -> Vec<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    let n = members.len();
    let mut out = Vec::with_capacity(weights.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (k, w) in weights.iter().enumerate() {
        cum += w;
        let end = if k + 1 == weights.len() {
            n
        } else {
            ((cum / total) * n as f64).round().min(n as f64) as usize
        };
        let end = end.max(start);
        out.push(members[start..end].to_vec());
        start = end;
    }
    out
}

fn dirichlet(rng: &mut rng::Rng, alpha: f64, k: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    loop {
        let draw: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        // very small alpha can underflow every component to zero
        if draw.iter().sum::<f64>() > 0.0 {
            return Ok(draw);
        }
    }
}

/// Label-skewed partition: for every class, client proportions are drawn
/// from a symmetric Dirichlet and that class's samples are dealt out
/// accordingly.
pub fn partition_dirichlet(
    labels: &[usize],
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    partition_dirichlet_min(labels, n_clients, alpha, seed, 1)
}

/// As [`partition_dirichlet`], but every client must end with at least
/// `min_size` samples.
pub(crate) fn partition_dirichlet_min(
    labels: &[usize],
    n_clients: usize,
    alpha: f64,
    seed: u64,
    min_size: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if n_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if n_clients * min_size > labels.len() {
        return Err(Error::Infeasible(format!(
            "{n_clients} clients need {} samples, only {} available",
            n_clients * min_size,
            labels.len()
        )));
    }
    let by_class = indices_by_class(labels);
    let mut rng = rng::stream(&[seed, rng::tag::PARTITION]);
    let mut shuffled: Vec<Vec<usize>> = by_class.into_values().collect();
    for members in &mut shuffled {
        members.shuffle(&mut rng);
    }
    let mut per_class: Vec<Vec<Vec<usize>>> = Vec::with_capacity(shuffled.len());
    for members in &shuffled {
        let p = dirichlet(&mut rng, alpha, n_clients)?;
        per_class.push(split_by_weights(members, &p));
    }
    let sizes = |per_class: &[Vec<Vec<usize>>]| -> Vec<usize> {
        (0..n_clients)
            .map(|i| per_class.iter().map(|c| c[i].len()).sum())
            .collect()
    };
    let mut retries = 0;
    loop {
        let s = sizes(&per_class);
        let Some(short) = s.iter().position(|&n| n < min_size) else {
            break;
        };
        if retries == MAX_RETRIES {
            return Err(Error::Infeasible(format!(
                "client {short} stayed below {min_size} samples after {MAX_RETRIES} resamples"
            )));
        }
        retries += 1;
        // redraw the class whose draw withheld the most samples from it
        let offending = (0..shuffled.len())
            .max_by(|&a, &b| {
                let fa = shuffled[a].len() - per_class[a][short].len();
                let fb = shuffled[b].len() - per_class[b][short].len();
                fa.cmp(&fb).then(b.cmp(&a))
            })
            .expect("at least one class");
        let p = dirichlet(&mut rng, alpha, n_clients)?;
        per_class[offending] = split_by_weights(&shuffled[offending], &p);
    }
    let mut out = vec![Vec::new(); n_clients];
    for class in per_class {
        for (i, part) in class.into_iter().enumerate() {
            out[i].extend(part);
        }
    }
    out.iter_mut().for_each(|v| v.sort_unstable());
    Ok(out)
}

/// Pathological label skew: each client holds `classes_per_client` classes,
/// and a class's samples are split among its holders in proportion to
/// `q ~ U(0.4, 0.6)` draws.
pub fn partition_pathological(
    labels: &[usize],
    n_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let by_class = indices_by_class(labels);
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let nc = classes.len();
    if n_clients == 0 || classes_per_client == 0 {
        return Err(Error::InvalidArgument("need at least one client and one class per client".into()));
    }
    if classes_per_client > nc {
        return Err(Error::InvalidArgument(format!(
            "{classes_per_client} classes per client but only {nc} classes present"
        )));
    }
    if n_clients * classes_per_client < nc {
        return Err(Error::Infeasible(format!(
            "{n_clients} clients x {classes_per_client} classes cannot cover {nc} classes"
        )));
    }
    let mut rng = rng::stream(&[seed, rng::tag::PARTITION]);
    // client i takes k consecutive entries of a random class permutation,
    // read cyclically; n·k ≥ C makes the windows cover every class
    let mut perm = classes.clone();
    perm.shuffle(&mut rng);
    let mut holders: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for cid in 0..n_clients {
        for j in 0..classes_per_client {
            let c = perm[(cid * classes_per_client + j) % nc];
            holders.entry(c).or_default().push(cid);
        }
    }
    if let Some((c, h)) = holders.iter().find(|(c, h)| by_class[*c].len() < h.len()) {
        return Err(Error::Infeasible(format!(
            "class {c} has {} samples for {} holders",
            by_class[c].len(),
            h.len()
        )));
    }
    let mut out = vec![Vec::new(); n_clients];
    for (c, h) in &holders {
        let mut members = by_class[c].clone();
        members.shuffle(&mut rng);
        let q: Vec<f64> = h.iter().map(|_| rng.random_range(0.4..0.6)).collect();
        let mut parts = split_by_weights(&members, &q);
        // keep every holder's support: move one sample from the largest share
        while let Some(empty) = parts.iter().position(Vec::is_empty) {
            let donor = (0..parts.len())
                .max_by_key(|&k| (parts[k].len(), std::cmp::Reverse(k)))
                .expect("non-empty holders");
            let moved = parts[donor].pop().expect("donor has samples");
            parts[empty].push(moved);
        }
        for (part, &cid) in parts.into_iter().zip(h) {
            out[cid].extend(part);
        }
    }
    out.iter_mut().for_each(|v| v.sort_unstable());
    Ok(out)
}

/// Uniform random partition into near-equal shares.
pub fn partition_iid(n_samples: usize, n_clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 || n_clients > n_samples {
        return Err(Error::Infeasible(format!(
            "cannot split {n_samples} samples over {n_clients} clients"
        )));
    }
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(&mut rng::stream(&[seed, rng::tag::PARTITION]));
    let mut out = vec![Vec::new(); n_clients];
    for (k, i) in idx.into_iter().enumerate() {
        out[k % n_clients].push(i);
    }
    out.iter_mut().for_each(|v| v.sort_unstable());
    Ok(out)
}
