use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::datagen::{FederatedDataset, Heterogeneity, Labels, SampleStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;
use crate::scalar::Scalar;

const MAX_RETRIES: usize = 100;
const COLLINEAR_COS: f64 = 1.0 - 1e-9;

fn gaussian(rng: &mut rng::Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Haar-distributed `d × d` rotation: Gram-Schmidt on a Gaussian matrix.
/// Returned row-major as a list of orthonormal columns `q[j]`.
fn random_rotation(rng: &mut rng::Rng, d: usize) -> Vec<Vec<f64>> {
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ok = true;
        for _ in 0..d {
            let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
            for q in &cols {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
        if ok {
            return cols;
        }
    }
}

/// Rotation `Q · blockdiag(R(θ_1), R(θ_2), …) · Qᵀ` with Haar `Q` and plane
/// angles `θ_k ~ U(−max_angle, max_angle)`, so no vector moves by more than
/// `max_angle`. Row-major dense output.
fn bounded_rotation(rng: &mut rng::Rng, d: usize, max_angle: f64) -> Vec<f64> {
    let q = random_rotation(rng, d);
    let mut inner = vec![0.0; d * d];
    (0..d).for_each(|i| inner[i * d + i] = 1.0);
    for k in 0..d / 2 {
        let t = rng.random_range(-max_angle..=max_angle);
        let (a, b) = (2 * k, 2 * k + 1);
        inner[a * d + a] = t.cos();
        inner[a * d + b] = -t.sin();
        inner[b * d + a] = t.sin();
        inner[b * d + b] = t.cos();
    }
    // Q · inner · Qᵀ, with q[j] the j-th column of Q
    let mut qi = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            qi[i * d + j] = (0..d).map(|k| q[k][i] * inner[k * d + j]).sum();
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| qi[i * d + k] * q[k][j]).sum();
        }
    }
    out
}

/// `Q · diag(s)` as a dense row-major matrix, `cols` being the columns of Q.
fn rotate_scale(cols: &[Vec<f64>], s: &[f64]) -> Vec<f64> {
    let d = cols.len();
    let mut a = vec![0.0; d * d];
    for (j, q) in cols.iter().enumerate() {
        for i in 0..d {
            a[i * d + j] = q[i] * s[j];
        }
    }
    a
}

fn apply(a: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d)
        .map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum())
        .collect()
}

/// Parameters of the feature-skew generator.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSkewSpec {
    pub n_clients: usize,
    /// Samples per client, train and test together.
    pub n_per_client: usize,
    pub d: usize,
    pub num_classes: usize,
    /// Class means are drawn from `N(0, class_sep² I)`.
    pub class_sep: f64,
    pub scale_range: (f64, f64),
    /// Largest plane angle of the per-client rotation, in radians. Values
    /// of π or more draw Haar-uniform rotations.
    pub max_angle: f64,
    pub test_fraction: f64,
    /// Use `A_i = I` for every client.
    pub identity_transforms: bool,
}

impl FeatureSkewSpec {
    pub fn new(n_clients: usize, n_per_client: usize, d: usize, num_classes: usize) -> Self {
        Self {
            n_clients,
            n_per_client,
            d,
            num_classes,
            class_sep: 1.0,
            scale_range: (0.5, 2.0),
            max_angle: std::f64::consts::PI,
            test_fraction: 0.5,
            identity_transforms: false,
        }
    }
}

/// Feature-skewed clients with the default [`FeatureSkewSpec`].
pub fn make_feature_skew<T: Scalar>(
    n_clients: usize,
    n_per_client: usize,
    d: usize,
    num_classes: usize,
    seed: u64,
) -> Result<FederatedDataset<T>> {
    make_feature_skew_with(&FeatureSkewSpec::new(n_clients, n_per_client, d, num_classes), seed)
}

/// Every client shares the class means but sees its samples through its
/// own invertible transform `A_i = R_i diag(s_i)`, `R_i` a rotation:
/// `x = A_i (μ_y + z)`, `z ~ N(0, I)`. Labels cycle through the classes.
pub fn make_feature_skew_with<T: Scalar>(spec: &FeatureSkewSpec, seed: u64) -> Result<FederatedDataset<T>> {
    let &FeatureSkewSpec {
        n_clients,
        n_per_client,
        d,
        num_classes,
        class_sep,
        scale_range: (lo, hi),
        max_angle,
        test_fraction,
        identity_transforms,
    } = spec;
    if d < 2 {
        return Err(Error::InvalidArgument(format!("feature skew needs d >= 2, got {d}")));
    }
    if n_clients == 0 || num_classes == 0 || n_per_client < 2 {
        return Err(Error::InvalidArgument(
            "need at least one client, one class and two samples per client".into(),
        ));
    }
    if !(max_angle >= 0.0) {
        return Err(Error::InvalidArgument(format!("max_angle must be >= 0, got {max_angle}")));
    }
    if !(0.0 < lo && lo <= hi) {
        return Err(Error::InvalidArgument(format!("bad scale range ({lo}, {hi})")));
    }
    let mut mrng = rng::stream(&[seed, rng::tag::DATA]);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..d).map(|_| class_sep * gaussian(&mut mrng)).collect())
        .collect();

    let n = n_clients * n_per_client;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut assignments = Vec::with_capacity(n_clients);
    for cid in 0..n_clients {
        let mut crng = rng::stream(&[seed, rng::tag::DATA, 1 + cid as u64]);
        let a = if identity_transforms {
            let mut eye = vec![0.0; d * d];
            (0..d).for_each(|i| eye[i * d + i] = 1.0);
            eye
        } else {
            let s: Vec<f64> = (0..d).map(|_| crng.random_range(lo..=hi)).collect();
            if max_angle >= std::f64::consts::PI {
                rotate_scale(&random_rotation(&mut crng, d), &s)
            } else {
                let r = bounded_rotation(&mut crng, d, max_angle);
                let mut a = r;
                for i in 0..d {
                    for j in 0..d {
                        a[i * d + j] *= s[j];
                    }
                }
                a
            }
        };
        let start = labels.len();
        for k in 0..n_per_client {
            let y = k % num_classes;
            let u: Vec<f64> = means[y].iter().map(|m| m + gaussian(&mut crng)).collect();
            features.extend(apply(&a, &u).into_iter().map(T::lit));
            labels.push(y);
        }
        assignments.push((start..labels.len()).collect());
    }
    let store = SampleStore::new(Tensor::new(vec![n, d], features)?, Labels::Class(labels))?;
    let het = Heterogeneity::new(
        "feature_skew",
        &[
            ("n_clients", n_clients as f64),
            ("n_per_client", n_per_client as f64),
            ("d", d as f64),
            ("num_classes", num_classes as f64),
            ("class_sep", class_sep),
            ("scale_lo", lo),
            ("scale_hi", hi),
            ("max_angle", max_angle.min(std::f64::consts::PI)),
        ],
        seed,
    );
    FederatedDataset::from_assignments(store, assignments, test_fraction, seed, het)
}

/// Balanced Gaussian mixture: labels cycle through the classes, class means
/// are drawn from `N(0, class_sep² I)` and noise is unit Gaussian.
pub fn make_gaussian_mixture<T: Scalar>(
    n_samples: usize,
    d: usize,
    num_classes: usize,
    class_sep: f64,
    seed: u64,
) -> Result<SampleStore<T>> {
    if n_samples == 0 || d == 0 || num_classes == 0 {
        return Err(Error::InvalidArgument("empty mixture".into()));
    }
    let mut rng = rng::stream(&[seed, rng::tag::DATA]);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..d).map(|_| class_sep * gaussian(&mut rng)).collect())
        .collect();
    let mut features = Vec::with_capacity(n_samples * d);
    let mut labels = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let y = k % num_classes;
        features.extend(means[y].iter().map(|m| T::lit(m + gaussian(&mut rng))));
        labels.push(y);
    }
    SampleStore::new(Tensor::new(vec![n_samples, d], features)?, Labels::Class(labels))
}

/// Adds `N(0, σ_i²)` noise to every feature of client `i`, with
/// `σ_i = sigma_max · i / (N − 1)`.
pub fn make_noise_skew<T: Scalar>(
    base: &FederatedDataset<T>,
    sigma_max: f64,
    seed: u64,
) -> Result<FederatedDataset<T>> {
    let n = base.num_clients();
    if n < 2 {
        return Err(Error::InvalidArgument("noise skew needs at least two clients".into()));
    }
    if !(sigma_max >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_max must be >= 0, got {sigma_max}")));
    }
    let mut out = base.clone();
    let d = out.store.dim();
    for (cid, split) in base.clients.iter().enumerate() {
        let sigma = sigma_max * cid as f64 / (n - 1) as f64;
        if sigma == 0.0 {
            continue;
        }
        let mut rng = rng::stream(&[seed, rng::tag::NOISE, cid as u64]);
        let data = out.store.features.data_mut();
        for &i in split.train.iter().chain(&split.test) {
            for v in &mut data[i * d..(i + 1) * d] {
                *v = *v + T::lit(sigma * gaussian(&mut rng));
            }
        }
    }
    out.heterogeneity.kind = format!("{}+noise", base.heterogeneity.kind);
    out.heterogeneity.params.insert("sigma_max".into(), sigma_max);
    out.heterogeneity.params.insert("noise_seed".into(), seed as f64);
    Ok(out)
}

fn collinear(a: &[f64], b: &[f64]) -> bool {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    na == 0.0 || nb == 0.0 || (dot / (na * nb)).abs() > COLLINEAR_COS
}

/// Regression clients with per-client input covariance.
///
/// Client `i` draws `S_i = Q_i diag(s_i) Q_iᵀ` with `s_i ~ U[0.5, 2]^d`,
/// samples `2M` points from `N(0, S_i)`, keeps the first `M` for training
/// and the rest for testing, and subtracts the training mean from both.
/// Targets are `tanh(wᵀx) + 0.01 ε` for a shared unit vector `w`. Training
/// inputs across all clients are pairwise non-collinear; a client whose draw
/// violates this is redrawn.
pub fn make_regression_clients<T: Scalar>(
    n_clients: usize,
    m: usize,
    d: usize,
    seed: u64,
) -> Result<FederatedDataset<T>> {
    if m == 0 || d < 2 || n_clients == 0 {
        return Err(Error::InvalidArgument(format!(
            "regression clients need N >= 1, M >= 1, d >= 2 (got N={n_clients}, M={m}, d={d})"
        )));
    }
    let mut grng = rng::stream(&[seed, rng::tag::DATA]);
    let mut w: Vec<f64> = (0..d).map(|_| gaussian(&mut grng)).collect();
    let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.iter_mut().for_each(|x| *x /= wn);

    let mut train_pts: Vec<Vec<f64>> = Vec::new();
    let mut clients: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> = Vec::new();
    for cid in 0..n_clients {
        let mut crng = rng::stream(&[seed, rng::tag::DATA, 1 + cid as u64]);
        let mut attempt = 0;
        loop {
            let q = random_rotation(&mut crng, d);
            let s: Vec<f64> = (0..d).map(|_| crng.random_range(0.5..=2.0)).collect();
            let root: Vec<f64> = s.iter().map(|v| v.sqrt()).collect();
            let a = rotate_scale(&q, &root);
            let mut pts: Vec<Vec<f64>> = (0..2 * m)
                .map(|_| {
                    let z: Vec<f64> = (0..d).map(|_| gaussian(&mut crng)).collect();
                    apply(&a, &z)
                })
                .collect();
            let mut mean = vec![0.0; d];
            for p in &pts[..m] {
                mean.iter_mut().zip(p).for_each(|(a, b)| *a += b / m as f64);
            }
            for p in &mut pts {
                p.iter_mut().zip(&mean).for_each(|(a, b)| *a -= b);
            }
            let train = &pts[..m];
            let clash = train.iter().enumerate().any(|(k, p)| {
                train[..k].iter().any(|q| collinear(p, q)) || train_pts.iter().any(|q| collinear(p, q))
            });
            // a rotation-scaled spectrum equal to I would need s ≡ 1
            let dist_from_eye = s.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>().sqrt();
            if !clash && (cid > 0 || dist_from_eye > 0.1) {
                let mut cov = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        cov[i * d + j] = (0..d).map(|k| q[k][i] * s[k] * q[k][j]).sum();
                    }
                }
                let test = pts.split_off(m);
                train_pts.extend(pts.iter().cloned());
                clients.push((pts, test, cov));
                break;
            }
            attempt += 1;
            if attempt == MAX_RETRIES {
                return Err(Error::Infeasible(format!(
                    "client {cid}: no non-collinear draw after {MAX_RETRIES} attempts"
                )));
            }
        }
    }

    let mut nrng = rng::stream(&[seed, rng::tag::NOISE]);
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut assignments = Vec::new();
    let mut covariances = Vec::new();
    for (train, test, cov) in clients {
        let start = targets.len();
        let mut idx_train = Vec::new();
        let mut idx_test = Vec::new();
        for (k, p) in train.iter().chain(&test).enumerate() {
            let wx: f64 = w.iter().zip(p).map(|(a, b)| a * b).sum();
            targets.push(T::lit(wx.tanh() + 0.01 * gaussian(&mut nrng)));
            features.extend(p.iter().map(|&v| T::lit(v)));
            if k < train.len() {
                idx_train.push(start + k);
            } else {
                idx_test.push(start + k);
            }
        }
        assignments.push((idx_train, idx_test));
        covariances.push(Tensor::new(vec![d, d], cov.into_iter().map(T::lit).collect())?);
    }
    let n = targets.len();
    let store = SampleStore::new(Tensor::new(vec![n, d], features)?, Labels::Real(targets))?;
    Ok(FederatedDataset {
        store,
        clients: assignments
            .into_iter()
            .map(|(train, test)| super::ClientSplit { train, test })
            .collect(),
        heterogeneity: Heterogeneity::new(
            "regression",
            &[("n_clients", n_clients as f64), ("m", m as f64), ("d", d as f64)],
            seed,
        ),
        covariances,
    })
}
