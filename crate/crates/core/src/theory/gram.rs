use rand::Rng as _;
use rayon::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::make_regression_clients;
use crate::error::{Error, Result};
use crate::numerics::{sym_eig_min, Tensor};
use crate::rng;
use crate::scalar::Scalar;
use crate::theory::net::{dot, quad_form, TheoryData, TwoLayerBnNet};
use crate::theory::{NetKind, TheoryConfig, EIG_TOL};

/// Fixed number of RNG shards for the Monte-Carlo estimators. Results are
/// bitwise reproducible for a fixed shard count regardless of thread count.
pub const MC_SHARDS: usize = 16;

/// Draws with a Euclidean norm below this are redrawn.
const MIN_DRAW_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GramEstimate<T> {
    /// `P × P`, symmetric by construction.
    pub matrix: Tensor<T>,
    /// Largest entrywise standard error of the mean.
    pub stderr: T,
    pub mc_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramKind {
    VOn,
    GOn,
    VOff,
}

/// `x − (vᵀx / ‖v‖²) v`.
pub fn perp_projection<T: Scalar>(x: &[T], v: &[T]) -> Result<Vec<T>> {
    if x.len() != v.len() {
        return Err(Error::Shape(format!("x has {} entries, v has {}", x.len(), v.len())));
    }
    let vv = dot(v, v);
    if !(vv > T::zero()) {
        return Err(Error::DegenerateWeight("projection onto a zero vector".into()));
    }
    if v.len() == 1 {
        // The orthogonal complement of a nonzero vector in one dimension is {0};
        // computing it through the general formula would leave rounding residue.
        return Ok(vec![T::zero()]);
    }
    let coef = dot(v, x) / vv;
    Ok(x.iter().zip(v).map(|(&a, &b)| a - coef * b).collect())
}

/// 1 where the two points belong to the same client, 0 elsewhere.
pub fn block_mask<T: Scalar>(clients: &[usize]) -> Tensor<T> {
    let p = clients.len();
    let mut out = Tensor::zeros(&[p, p]);
    for a in 0..p {
        for b in 0..p {
            if clients[a] == clients[b] {
                out.set(a, b, T::one());
            }
        }
    }
    out
}

/// Restricts to same-client entries. Kept entries are copied, so the result is
/// bitwise the masked input.
fn restrict_blocks<T: Scalar>(m: &Tensor<T>, clients: &[usize]) -> Tensor<T> {
    let p = clients.len();
    let mut out = Tensor::zeros(&[p, p]);
    for a in 0..p {
        for b in 0..p {
            if clients[a] == clients[b] {
                out.set(a, b, m.at(a, b));
            }
        }
    }
    out
}

fn check_points<T: Scalar>(x: &Tensor<T>, clients: &[usize]) -> Result<(usize, usize)> {
    let (p, d) = x.dims2()?;
    if clients.len() != p {
        return Err(Error::Shape(format!("{} client ids for {p} points", clients.len())));
    }
    if p == 0 {
        return Err(Error::InvalidArgument("no points".into()));
    }
    Ok((p, d))
}

struct ShardSums<T> {
    n: usize,
    sum: Vec<T>,
    sumsq: Vec<T>,
}

/// Upper-triangle entry index of `(a, b)` with `a ≤ b`.
#[inline]
fn tri(a: usize, b: usize, p: usize) -> usize {
    a * p - a * (a + 1) / 2 + b
}

fn mc_shard<T: Scalar>(x: &Tensor<T>, alpha: f64, seed: u64, shard: usize, n: usize) -> ShardSums<T> {
    let (p, d) = (x.shape()[0], x.shape()[1]);
    let len = p * (p + 1) / 2;
    let mut sum = vec![T::zero(); len];
    let mut sumsq = vec![T::zero(); len];
    let mut rng = rng::stream(&[seed, rng::tag::THEORY, 2, shard as u64]);
    let a2 = T::lit(alpha * alpha);
    let mut perp = vec![T::zero(); p * d];
    let mut v = vec![T::zero(); d];
    for _ in 0..n {
        loop {
            for e in v.iter_mut() {
                *e = T::lit(alpha * rng.sample::<f64, _>(StandardNormal));
            }
            if dot(&v, &v).sqrt() >= T::lit(MIN_DRAW_NORM) {
                break;
            }
        }
        for q in 0..p {
            let proj = perp_projection(x.row(q), &v).expect("nonzero draw");
            perp[q * d..(q + 1) * d].copy_from_slice(&proj);
        }
        for a in 0..p {
            for b in a..p {
                let s = a2 * dot(&perp[a * d..(a + 1) * d], &perp[b * d..(b + 1) * d]);
                let t = tri(a, b, p);
                sum[t] = sum[t] + s;
                sumsq[t] = sumsq[t] + s * s;
            }
        }
    }
    ShardSums { n, sum, sumsq }
}

/// Monte-Carlo estimate of `E_v α² ⟨x_p^{v⊥}, x_q^{v⊥}⟩` with `v ~ N(0, α² I)`.
pub fn estimate_gram_von<T: Scalar>(
    x: &Tensor<T>,
    clients: &[usize],
    cfg: &TheoryConfig,
) -> Result<GramEstimate<T>> {
    estimate_with_seed(x, clients, cfg.alpha, cfg.mc_samples, cfg.seed)
}

fn estimate_with_seed<T: Scalar>(
    x: &Tensor<T>,
    clients: &[usize],
    alpha: f64,
    mc: usize,
    seed: u64,
) -> Result<GramEstimate<T>> {
    let (p, _) = check_points(x, clients)?;
    if mc < 2 {
        return Err(Error::InvalidArgument("need at least two Monte-Carlo draws".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let shards: Vec<ShardSums<T>> = (0..MC_SHARDS)
        .into_par_iter()
        .map(|s| {
            let n = mc / MC_SHARDS + usize::from(s < mc % MC_SHARDS);
            mc_shard(x, alpha, seed, s, n)
        })
        .collect();
    let len = p * (p + 1) / 2;
    let mut sum = vec![T::zero(); len];
    let mut sumsq = vec![T::zero(); len];
    let mut n = 0;
    for sh in &shards {
        n += sh.n;
        for t in 0..len {
            sum[t] = sum[t] + sh.sum[t];
            sumsq[t] = sumsq[t] + sh.sumsq[t];
        }
    }
    let nf = T::from_count(n);
    let mut matrix = Tensor::zeros(&[p, p]);
    let mut stderr = T::zero();
    for a in 0..p {
        for b in a..p {
            let t = tri(a, b, p);
            let mean = sum[t] / nf;
            let var = ((sumsq[t] / nf - mean * mean) * nf / T::from_count(n - 1)).max(T::zero());
            stderr = stderr.max((var / nf).sqrt());
            matrix.set(a, b, mean);
            matrix.set(b, a, mean);
        }
    }
    Ok(GramEstimate { matrix, stderr, mc_samples: n })
}

/// The offline Gram. With `shared_draws` it reuses the online draws and is
/// exactly the block-diagonal restriction of [`estimate_gram_von`]; otherwise
/// it uses an independent stream.
pub fn estimate_gram_voff<T: Scalar>(
    x: &Tensor<T>,
    clients: &[usize],
    cfg: &TheoryConfig,
    shared_draws: bool,
) -> Result<GramEstimate<T>> {
    let seed = if shared_draws {
        cfg.seed
    } else {
        rng::derive_seed(&[cfg.seed, rng::tag::THEORY, 4])
    };
    let full = estimate_with_seed(x, clients, cfg.alpha, cfg.mc_samples, seed)?;
    Ok(GramEstimate {
        matrix: restrict_blocks(&full.matrix, clients),
        ..full
    })
}

/// Online and shared-draw offline estimates from a single Monte-Carlo pass.
pub fn estimate_grams<T: Scalar>(
    x: &Tensor<T>,
    clients: &[usize],
    cfg: &TheoryConfig,
) -> Result<(GramEstimate<T>, GramEstimate<T>)> {
    let on = estimate_gram_von(x, clients, cfg)?;
    let off = GramEstimate {
        matrix: restrict_blocks(&on.matrix, clients),
        stderr: on.stderr,
        mc_samples: on.mc_samples,
    };
    Ok((on, off))
}

/// Exact finite-width Gram matrices of the current network.
///
/// `VOn` and `GOn` need the online net and `VOff` the offline one. The
/// perpendicular components are Euclidean.
pub fn gram_time_t<T: Scalar>(
    net: &TwoLayerBnNet<T>,
    alpha: T,
    x: &Tensor<T>,
    clients: &[usize],
    which: GramKind,
) -> Result<Tensor<T>> {
    let (p, d) = check_points(x, clients)?;
    if d != net.dim() {
        return Err(Error::Shape(format!("points have dim {d}, net expects {}", net.dim())));
    }
    if let Some(&bad) = clients.iter().find(|&&c| c >= net.n_clients()) {
        return Err(Error::InvalidArgument(format!("client {bad} out of range")));
    }
    let want = if which == GramKind::VOff { NetKind::Offline } else { NetKind::Online };
    if net.kind() != want {
        return Err(Error::InvalidArgument(format!("{which:?} needs the {want:?} network")));
    }
    let m = net.width();
    let mut out = Tensor::zeros(&[p, p]);
    // Per-unit terms for every point: (coefficient, perp vector, pre-activation).
    let mut coef = vec![T::zero(); p];
    let mut pre = vec![T::zero(); p];
    let mut perp = vec![T::zero(); p * d];
    for k in 0..m {
        for q in 0..p {
            let i = clients[q];
            let v = net.v_k(k, i);
            let s = quad_form(v, &net.covariances[i]);
            if !(s > T::zero()) {
                return Err(Error::DegenerateWeight(format!("unit {k} vanishes for client {i}")));
            }
            let inv = T::one() / s.sqrt();
            pre[q] = dot(v, x.row(q));
            coef[q] = match which {
                GramKind::VOn | GramKind::VOff => alpha * net.c_k(k, i) * net.gamma(k, i) * inv,
                GramKind::GOn => net.c_k(k, i) * inv,
            };
            if which != GramKind::GOn {
                perp[q * d..(q + 1) * d].copy_from_slice(&perp_projection(x.row(q), v)?);
            }
        }
        for a in 0..p {
            for b in a..p {
                let cross = clients[a] != clients[b];
                let term = match which {
                    GramKind::VOn => {
                        if pre[a] >= T::zero() && pre[b] >= T::zero() {
                            coef[a] * coef[b] * dot(&perp[a * d..(a + 1) * d], &perp[b * d..(b + 1) * d])
                        } else {
                            T::zero()
                        }
                    }
                    GramKind::VOff => {
                        if !cross && pre[a] >= T::zero() && pre[b] >= T::zero() {
                            coef[a] * coef[b] * dot(&perp[a * d..(a + 1) * d], &perp[b * d..(b + 1) * d])
                        } else {
                            T::zero()
                        }
                    }
                    GramKind::GOn => {
                        if cross {
                            T::zero()
                        } else {
                            coef[a] * coef[b] * pre[a].max(T::zero()) * pre[b].max(T::zero())
                        }
                    }
                };
                out.set(a, b, out.at(a, b) + term);
            }
        }
    }
    let mf = T::from_count(m);
    for a in 0..p {
        for b in a..p {
            let e = out.at(a, b) / mf;
            out.set(a, b, e);
            out.set(b, a, e);
        }
    }
    Ok(out)
}

/// Offending trial data, serialized into failure reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub points: Vec<Vec<f64>>,
    pub clients: Vec<usize>,
    pub v_on: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub lambda_on: f64,
    pub lambda_off: f64,
    pub lambda_mean: f64,
    pub stderr: f64,
    pub offline_ge_online: bool,
    pub mean_ge_online: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<Instance>,
}

impl TrialReport {
    pub fn passed(&self) -> bool {
        self.offline_ge_online && self.mean_ge_online
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramCheckReport {
    pub config: TheoryConfig,
    pub tolerance: f64,
    pub trials: Vec<TrialReport>,
    pub passed: usize,
    pub all_passed: bool,
}

impl GramCheckReport {
    /// Turns a failing report into a [`Error::GramCheck`] carrying the
    /// first offending trial as JSON.
    pub fn check(&self) -> Result<()> {
        match self.trials.iter().find(|t| !t.passed()) {
            None => Ok(()),
            Some(t) => Err(Error::GramCheck(
                serde_json::to_string(t).unwrap_or_else(|_| format!("trial {}", t.trial)),
            )),
        }
    }
}

fn rows(m: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..m.shape()[0]).map(|i| m.row(i).to_vec()).collect()
}

/// Runs `trials` fresh regression instances and compares the minimum
/// eigenvalues of the online, offline and averaged Gram matrices.
pub fn verify_gram_ordering(cfg: &TheoryConfig, trials: usize) -> Result<GramCheckReport> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let mut reports = Vec::with_capacity(trials);
    for trial in 0..trials {
        let seed = rng::derive_seed(&[cfg.seed, rng::tag::THEORY, 3, trial as u64]);
        let ds = make_regression_clients::<f64>(cfg.n_clients, cfg.m_per_client, cfg.d, seed)?;
        let data = TheoryData::from_dataset(&ds)?;
        let trial_cfg = TheoryConfig { seed, ..cfg.clone() };
        let (on, off) = estimate_grams(&data.x, &data.client, &trial_cfg)?;
        let mut mean = on.matrix.clone();
        for (m, o) in mean.data_mut().iter_mut().zip(off.matrix.data()) {
            *m = 0.5 * (*m + o);
        }
        let lambda_on = sym_eig_min(&on.matrix)?;
        let lambda_off = sym_eig_min(&off.matrix)?;
        let lambda_mean = sym_eig_min(&mean)?;
        let offline_ge_online = lambda_off >= lambda_on - EIG_TOL;
        let mean_ge_online = lambda_mean >= lambda_on - EIG_TOL;
        let instance = (!(offline_ge_online && mean_ge_online)).then(|| Instance {
            points: rows(&data.x),
            clients: data.client.clone(),
            v_on: rows(&on.matrix),
        });
        reports.push(TrialReport {
            trial,
            seed,
            lambda_on,
            lambda_off,
            lambda_mean,
            stderr: on.stderr,
            offline_ge_online,
            mean_ge_online,
            instance,
        });
    }
    let passed = reports.iter().filter(|t| t.passed()).count();
    Ok(GramCheckReport {
        config: cfg.clone(),
        tolerance: EIG_TOL,
        all_passed: passed == trials,
        passed,
        trials: reports,
    })
}
