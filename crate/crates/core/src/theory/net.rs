use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::datagen::{FederatedDataset, Labels};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;
use crate::scalar::Scalar;
use crate::theory::TheoryConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    /// One set of directions `v_k` and signs `c_k` for all clients.
    Online,
    /// Per-client directions `v_{k,i}` and signs `c_{k,i}`.
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Online,
    Offline,
    /// `½(F_on + F_off)`.
    FedCo2,
}

/// `F(x) = (1/√m) Σ_k c_k σ(γ_{k,i} v_kᵀx / ‖v_k‖_{S_i})` for a sample of
/// client `i`. BN shifts are omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerBnNet<T> {
    kind: NetKind,
    width: usize,
    d: usize,
    n_clients: usize,
    /// `groups × m × d`, one group for online, `N` for offline.
    pub v: Vec<T>,
    /// `m × N`.
    pub gamma: Vec<T>,
    /// `groups × m`, entries ±1.
    pub c: Vec<T>,
    pub covariances: Vec<Tensor<T>>,
}

pub(crate) fn quad_form<T: Scalar>(v: &[T], s: &Tensor<T>) -> T {
    let d = v.len();
    let mut acc = T::zero();
    for a in 0..d {
        let mut row = T::zero();
        for b in 0..d {
            row = row + s.at(a, b) * v[b];
        }
        acc = acc + v[a] * row;
    }
    acc
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

impl<T: Scalar> TwoLayerBnNet<T> {
    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn groups(&self) -> usize {
        match self.kind {
            NetKind::Online => 1,
            NetKind::Offline => self.n_clients,
        }
    }

    #[inline]
    pub fn group(&self, client: usize) -> usize {
        match self.kind {
            NetKind::Online => 0,
            NetKind::Offline => client,
        }
    }

    #[inline]
    pub fn v_k(&self, k: usize, client: usize) -> &[T] {
        let start = (self.group(client) * self.width + k) * self.d;
        &self.v[start..start + self.d]
    }

    #[inline]
    pub fn c_k(&self, k: usize, client: usize) -> T {
        self.c[self.group(client) * self.width + k]
    }

    #[inline]
    pub fn gamma(&self, k: usize, client: usize) -> T {
        self.gamma[k * self.n_clients + client]
    }

    /// `‖v_k‖_{S_i}`; errors when it vanishes.
    pub fn s_norm(&self, k: usize, client: usize) -> Result<T> {
        let q = quad_form(self.v_k(k, client), &self.covariances[client]);
        if !(q > T::zero()) {
            return Err(Error::DegenerateWeight(format!(
                "‖v_{k}‖ vanishes under the covariance of client {client}"
            )));
        }
        Ok(q.sqrt())
    }

    fn check_client(&self, client: usize, x: &[T]) -> Result<()> {
        if client >= self.n_clients {
            return Err(Error::InvalidArgument(format!(
                "client {client} out of range for {} clients",
                self.n_clients
            )));
        }
        if x.len() != self.d {
            return Err(Error::Shape(format!("input has {} entries, net expects {}", x.len(), self.d)));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T], client: usize) -> Result<T> {
        self.check_client(client, x)?;
        let mut out = T::zero();
        for k in 0..self.width {
            let z = self.gamma(k, client) * dot(self.v_k(k, client), x) / self.s_norm(k, client)?;
            if z > T::zero() {
                out = out + self.c_k(k, client) * z;
            }
        }
        Ok(out / T::from_count(self.width).sqrt())
    }

    /// Mean squared error of this network alone.
    pub fn mse(&self, data: &TheoryData<T>) -> Result<T> {
        let mut acc = T::zero();
        for p in 0..data.len() {
            let r = self.forward(data.x.row(p), data.client[p])? - data.y[p];
            acc = acc + r * r;
        }
        Ok(acc / T::from_count(data.len()))
    }
}

/// Symmetric initialization. Online directions `v_k ~ N(0, α² I)`, signs
/// uniform on ±1, `γ_{k,i} = ‖v_k‖₂ / α`; the offline network starts as an
/// exact copy for every client.
pub fn init_theory_net<T: Scalar>(
    cfg: &TheoryConfig,
    covariances: &[Tensor<T>],
) -> Result<(TwoLayerBnNet<T>, TwoLayerBnNet<T>)> {
    let (m, d, n) = (cfg.width, cfg.d, cfg.n_clients);
    if covariances.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} covariances for {n} clients",
            covariances.len()
        )));
    }
    for s in covariances {
        if s.dims2()? != (d, d) {
            return Err(Error::Shape(format!("covariance must be {d}x{d}")));
        }
    }
    let mut rng = rng::stream(&[cfg.seed, rng::tag::THEORY, 1]);
    let alpha = cfg.alpha;
    let mut v = Vec::with_capacity(m * d);
    let mut c = Vec::with_capacity(m);
    let mut gamma = Vec::with_capacity(m * n);
    for _ in 0..m {
        let row: Vec<f64> = loop {
            let r: Vec<f64> = (0..d).map(|_| alpha * rng.sample::<f64, _>(StandardNormal)).collect();
            if r.iter().map(|x| x * x).sum::<f64>().sqrt() >= 1e-12 {
                break r;
            }
        };
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.extend(row.into_iter().map(T::lit));
        c.push(if rng.random::<bool>() { T::one() } else { -T::one() });
        gamma.extend(std::iter::repeat_n(T::lit(norm / alpha), n));
    }
    let online = TwoLayerBnNet {
        kind: NetKind::Online,
        width: m,
        d,
        n_clients: n,
        v: v.clone(),
        gamma: gamma.clone(),
        c: c.clone(),
        covariances: covariances.to_vec(),
    };
    let offline = TwoLayerBnNet {
        kind: NetKind::Offline,
        width: m,
        d,
        n_clients: n,
        v: v.repeat(n),
        gamma,
        c: c.repeat(n),
        covariances: covariances.to_vec(),
    };
    Ok((online, offline))
}

pub fn forward_theory<T: Scalar>(
    online: &TwoLayerBnNet<T>,
    offline: &TwoLayerBnNet<T>,
    kind: Prediction,
    x: &[T],
    client: usize,
) -> Result<T> {
    match kind {
        Prediction::Online => online.forward(x, client),
        Prediction::Offline => offline.forward(x, client),
        Prediction::FedCo2 => {
            let a = online.forward(x, client)?;
            let b = offline.forward(x, client)?;
            Ok(T::lit(0.5) * (a + b))
        }
    }
}

/// Training points of a regression dataset, flattened across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryData<T> {
    /// `P × d`, clients in ascending order.
    pub x: Tensor<T>,
    pub client: Vec<usize>,
    pub y: Vec<T>,
    pub covariances: Vec<Tensor<T>>,
}

impl<T: Scalar> TheoryData<T> {
    pub fn from_dataset(ds: &FederatedDataset<T>) -> Result<Self> {
        let Labels::Real(targets) = &ds.store.labels else {
            return Err(Error::InvalidArgument("theory data needs regression targets".into()));
        };
        if ds.covariances.len() != ds.num_clients() {
            return Err(Error::InvalidArgument("regression dataset without covariances".into()));
        }
        let mut idx = Vec::new();
        let mut client = Vec::new();
        for (cid, split) in ds.clients.iter().enumerate() {
            idx.extend_from_slice(&split.train);
            client.extend(std::iter::repeat_n(cid, split.train.len()));
        }
        Ok(Self {
            x: ds.store.features.select_rows(&idx)?,
            y: idx.iter().map(|&i| targets[i]).collect(),
            client,
            covariances: ds.covariances.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// `(1/P) Σ_p (½(F_on + F_off)(x_p) − y_p)²`.
pub fn mse_loss<T: Scalar>(
    online: &TwoLayerBnNet<T>,
    offline: &TwoLayerBnNet<T>,
    data: &TheoryData<T>,
) -> Result<T> {
    let mut acc = T::zero();
    for p in 0..data.len() {
        let f = forward_theory(online, offline, Prediction::FedCo2, data.x.row(p), data.client[p])?;
        let r = f - data.y[p];
        acc = acc + r * r;
    }
    Ok(acc / T::from_count(data.len()))
}
