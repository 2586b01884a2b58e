use crate::datagen::make_regression_clients;
use crate::error::{Error, Result};
use crate::numerics::{sym_eig_max, Tensor};
use crate::scalar::Scalar;
use crate::theory::net::{dot, quad_form};
use crate::theory::{init_theory_net, TheoryConfig, TheoryData, TwoLayerBnNet};

/// A run fails once its loss exceeds this multiple of the initial loss.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

/// Fraction of `1/λ_max` used as the default step size.
const DEFAULT_LR_SCALE: f64 = 0.05;

/// Per-step training losses; each curve has `steps + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    pub online: Vec<f64>,
    pub offline: Vec<f64>,
    pub fedco2: Vec<f64>,
    pub lr: f64,
}

/// Jacobian row of `F(x_p)` w.r.t. `(v, γ)`, laid out as `v` then `γ`.
pub(crate) fn jacobian_row<T: Scalar>(net: &TwoLayerBnNet<T>, x: &[T], client: usize, out: &mut [T]) -> Result<()> {
    out.iter_mut().for_each(|e| *e = T::zero());
    let (m, d, n) = (net.width(), net.dim(), net.n_clients());
    let scale = T::one() / T::from_count(m).sqrt();
    let s = &net.covariances[client];
    let g = net.group(client);
    let v_len = net.v.len();
    for k in 0..m {
        let v = net.v_k(k, client);
        let q = quad_form(v, s);
        if !(q > T::zero()) {
            return Err(Error::DegenerateWeight(format!("unit {k} vanishes for client {client}")));
        }
        let norm = q.sqrt();
        let vx = dot(v, x);
        let gamma = net.gamma(k, client);
        if !(gamma * vx / norm > T::zero()) {
            continue;
        }
        let c = net.c_k(k, client) * scale;
        out[v_len + k * n + client] = c * vx / norm;
        let base = (g * m + k) * d;
        let norm3 = norm * norm * norm;
        for a in 0..d {
            let sv: T = (0..d).map(|b| s.at(a, b) * v[b]).sum();
            out[base + a] = c * gamma * (x[a] / norm - vx * sv / norm3);
        }
    }
    Ok(())
}

fn n_params<T>(net: &TwoLayerBnNet<T>) -> usize {
    net.v.len() + net.gamma.len()
}

/// `(2/P) Σ_p r_p ∂F(x_p)`.
fn residual_grad<T: Scalar>(net: &TwoLayerBnNet<T>, data: &TheoryData<T>, r: &[T]) -> Result<Vec<T>> {
    let np = n_params(net);
    let mut grad = vec![T::zero(); np];
    let mut row = vec![T::zero(); np];
    let w = T::lit(2.0) / T::from_count(data.len());
    for p in 0..data.len() {
        jacobian_row(net, data.x.row(p), data.client[p], &mut row)?;
        let f = w * r[p];
        for (g, j) in grad.iter_mut().zip(&row) {
            *g = *g + f * *j;
        }
    }
    Ok(grad)
}

fn apply<T: Scalar>(net: &mut TwoLayerBnNet<T>, grad: &[T], lr: T) {
    let v_len = net.v.len();
    for (v, g) in net.v.iter_mut().zip(&grad[..v_len]) {
        *v = *v - lr * *g;
    }
    for (v, g) in net.gamma.iter_mut().zip(&grad[v_len..]) {
        *v = *v - lr * *g;
    }
}

fn residuals<T: Scalar>(nets: &[&TwoLayerBnNet<T>], data: &TheoryData<T>) -> Result<Vec<T>> {
    let w = T::one() / T::from_count(nets.len());
    (0..data.len())
        .map(|p| {
            let mut f = T::zero();
            for net in nets {
                f = f + net.forward(data.x.row(p), data.client[p])?;
            }
            Ok(w * f - data.y[p])
        })
        .collect()
}

/// Largest eigenvalue of the Gauss-Newton matrix `(2/P) J Jᵀ`.
pub(crate) fn gauss_newton_max<T: Scalar>(net: &TwoLayerBnNet<T>, data: &TheoryData<T>) -> Result<T> {
    let p = data.len();
    let np = n_params(net);
    let mut jac = vec![T::zero(); p * np];
    for q in 0..p {
        jacobian_row(net, data.x.row(q), data.client[q], &mut jac[q * np..(q + 1) * np])?;
    }
    let w = T::lit(2.0) / T::from_count(p);
    let mut k = Tensor::zeros(&[p, p]);
    for a in 0..p {
        for b in a..p {
            let e = w * dot(&jac[a * np..(a + 1) * np], &jac[b * np..(b + 1) * np]);
            k.set(a, b, e);
            k.set(b, a, e);
        }
    }
    sym_eig_max(&k)
}

fn guard(curve: &[f64], what: &str) -> Result<()> {
    let last = *curve.last().expect("nonempty curve");
    if !last.is_finite() || last > DIVERGENCE_FACTOR * curve[0] {
        return Err(Error::Divergence(format!(
            "{what} loss {last:e} after {} steps from {:e}; lower the step size",
            curve.len() - 1,
            curve[0]
        )));
    }
    Ok(())
}

/// Full-batch gradient descent from the shared initialization on a given
/// dataset. The online and offline curves minimize their own MSE. In the
/// ensemble run each member follows the ensemble residual
/// `½(F_on + F_off) − y`, which gives the ensemble output the averaged-kernel
/// dynamics `dF/dt = −½(Λ_on + Λ_off)(F − y)`. Signs `c` stay fixed.
pub fn train_on_data<T: Scalar>(
    cfg: &TheoryConfig,
    data: &TheoryData<T>,
    steps: usize,
    lr: Option<f64>,
) -> Result<Trajectories> {
    let (on0, off0) = init_theory_net(cfg, &data.covariances)?;
    let lr = match lr {
        Some(lr) if lr >= 0.0 && lr.is_finite() => lr,
        Some(lr) => return Err(Error::InvalidArgument(format!("invalid step size {lr}"))),
        None => {
            let lmax = gauss_newton_max(&on0, data)?.to_f64_lossy();
            if !(lmax > 0.0) {
                return Err(Error::DegenerateWeight("zero Gauss-Newton spectrum".into()));
            }
            DEFAULT_LR_SCALE / lmax
        }
    };
    let eta = T::lit(lr);

    let mut online = on0.clone();
    let mut offline = off0.clone();
    let (mut ens_on, mut ens_off) = (on0, off0);
    let mut out = Trajectories {
        online: Vec::with_capacity(steps + 1),
        offline: Vec::with_capacity(steps + 1),
        fedco2: Vec::with_capacity(steps + 1),
        lr,
    };
    for step in 0..=steps {
        let r_on = residuals(&[&online], data)?;
        let r_off = residuals(&[&offline], data)?;
        let r_ens = residuals(&[&ens_on, &ens_off], data)?;
        let mse = |r: &[T]| r.iter().map(|&e| (e * e).to_f64_lossy()).sum::<f64>() / r.len() as f64;
        out.online.push(mse(&r_on));
        out.offline.push(mse(&r_off));
        out.fedco2.push(mse(&r_ens));
        guard(&out.online, "online")?;
        guard(&out.offline, "offline")?;
        guard(&out.fedco2, "Fed-CO2")?;
        if step == steps {
            break;
        }
        let g = residual_grad(&online, data, &r_on)?;
        apply(&mut online, &g, eta);
        let g = residual_grad(&offline, data, &r_off)?;
        apply(&mut offline, &g, eta);
        let g_on = residual_grad(&ens_on, data, &r_ens)?;
        let g_off = residual_grad(&ens_off, data, &r_ens)?;
        apply(&mut ens_on, &g_on, eta);
        apply(&mut ens_off, &g_off, eta);
    }

    Ok(out)
}

/// Draws a regression instance from `cfg.seed` and trains on it.
pub fn train_theory_trajectories(cfg: &TheoryConfig, steps: usize, lr: Option<f64>) -> Result<Trajectories> {
    let ds = make_regression_clients::<f64>(cfg.n_clients, cfg.m_per_client, cfg.d, cfg.seed)?;
    let data = TheoryData::from_dataset(&ds)?;
    train_on_data(cfg, &data, steps, lr)
}
