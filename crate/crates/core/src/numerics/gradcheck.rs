//! Finite-difference verification of every differentiable primitive.
//!
//! Each check builds a scalar objective around one primitive (non-scalar
//! outputs are contracted with a fixed random weight tensor), computes the
//! analytic gradient of every differentiable input by [`Tape::backward`] and
//! compares it with central differences at `h = 1e-5`. The reported error
//! for one input tensor is `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-4)`.

use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::numerics::{BnMode, OpKind, RunningStats, Tape, Tensor, Var};
use crate::rng;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;
const NORM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub configs: usize,
    /// Test fixture: negate the analytic gradient of this primitive.
    pub flip_sign: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            configs: 50,
            flip_sign: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub max_rel_err: f64,
    pub worst: String,
    pub passed: bool,
}

/// Builds the objective from input tensors; returns the loss and the vars of
/// the inputs (in the same order).
type Objective<'a> = Box<dyn Fn(&[Tensor<f64>], &mut Tape<f64>) -> Result<(Var, Vec<Var>)> + 'a>;

struct Check<'a> {
    name: String,
    kind: Option<OpKind>,
    inputs: Vec<Tensor<f64>>,
    /// Which inputs are differentiated.
    wrt: Vec<bool>,
    objective: Objective<'a>,
}

fn rand_tensor(rng: &mut rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for inputs that pass through ReLU kinks.
fn away_from_zero(rng: &mut rng::Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_sum(tape: &mut Tape<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    tape.sum(prod)
}

fn leaves(tape: &mut Tape<f64>, inputs: &[Tensor<f64>], wrt: &[bool]) -> Vec<Var> {
    inputs
        .iter()
        .zip(wrt)
        .map(|(t, &g)| tape.leaf(t.clone().with_requires_grad(g)))
        .collect()
}

fn eval_loss(check: &Check<'_>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = (check.objective)(inputs, &mut tape)?;
    Ok(tape.value(loss).data()[0])
}

fn run_check(check: &Check<'_>, flip: Option<OpKind>) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, vars) = (check.objective)(&check.inputs, &mut tape)?;
    tape.backward(loss)?;
    let sign = if flip.is_some() && flip == check.kind { -1.0 } else { 1.0 };
    let mut worst: f64 = 0.0;
    for (k, (&v, &differentiate)) in vars.iter().zip(&check.wrt).enumerate() {
        if !differentiate {
            continue;
        }
        let n = check.inputs[k].numel();
        let analytic: Vec<f64> = match tape.grad(v) {
            Some(g) => g.iter().map(|x| sign * x).collect(),
            None => vec![0.0; n],
        };
        let mut numeric = vec![0.0; n];
        let mut perturbed = check.inputs.clone();
        for e in 0..n {
            let orig = perturbed[k].data()[e];
            perturbed[k].data_mut()[e] = orig + FD_STEP;
            let up = eval_loss(check, &perturbed)?;
            perturbed[k].data_mut()[e] = orig - FD_STEP;
            let down = eval_loss(check, &perturbed)?;
            perturbed[k].data_mut()[e] = orig;
            numeric[e] = (up - down) / (2.0 * FD_STEP);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(NORM_FLOOR));
    }
    Ok(worst)
}

fn checks_for_config(rng: &mut rng::Rng) -> Vec<Check<'static>> {
    let b = rng.random_range(2..7usize);
    let k = rng.random_range(1..6usize);
    let c = rng.random_range(2..7usize);
    let mut out: Vec<Check<'static>> = Vec::new();

    let w_bc = rand_tensor(rng, &[b, c], -1.0, 1.0);
    let w_c = rand_tensor(rng, &[b, c], -1.0, 1.0);

    {
        let w = w_bc.clone();
        out.push(Check {
            name: "matmul".into(),
            kind: Some(OpKind::MatMul),
            inputs: vec![rand_tensor(rng, &[b, k], -1.0, 1.0), rand_tensor(rng, &[k, c], -1.0, 1.0)],
            wrt: vec![true, true],
            objective: Box::new(move |inp, tape| {
                let v = leaves(tape, inp, &[true, true]);
                let o = tape.matmul(v[0], v[1])?;
                Ok((weighted_sum(tape, o, &w)?, v))
            }),
        });
    }
    {
        let w = w_bc.clone();
        out.push(Check {
            name: "add_bias".into(),
            kind: Some(OpKind::AddBias),
            inputs: vec![rand_tensor(rng, &[b, c], -1.0, 1.0), rand_tensor(rng, &[c], -1.0, 1.0)],
            wrt: vec![true, true],
            objective: Box::new(move |inp, tape| {
                let v = leaves(tape, inp, &[true, true]);
                let o = tape.add_bias(v[0], v[1])?;
                Ok((weighted_sum(tape, o, &w)?, v))
            }),
        });
    }
    for kind in [OpKind::Add, OpKind::Sub, OpKind::Mul] {
        out.push(Check {
            name: kind.name().into(),
            kind: Some(kind),
            inputs: vec![rand_tensor(rng, &[b, c], -1.0, 1.0), rand_tensor(rng, &[b, c], -1.0, 1.0)],
            wrt: vec![true, true],
            objective: Box::new(move |inp, tape| {
                let v = leaves(tape, inp, &[true, true]);
                let o = match kind {
                    OpKind::Add => tape.add(v[0], v[1])?,
                    OpKind::Sub => tape.sub(v[0], v[1])?,
                    _ => tape.mul(v[0], v[1])?,
                };
                // contracted without `mul` so the mul check stays isolated
                Ok((tape.sum_squares(o)?, v))
            }),
        });
    }
    {
        let w = w_bc.clone();
        let s: f64 = rng.random_range(-2.0..2.0);
        out.push(Check {
            name: "scale".into(),
            kind: Some(OpKind::Scale),
            inputs: vec![rand_tensor(rng, &[b, c], -1.0, 1.0)],
            wrt: vec![true],
            objective: Box::new(move |inp, tape| {
                let v = leaves(tape, inp, &[true]);
                let o = tape.scale(v[0], s)?;
                Ok((weighted_sum(tape, o, &w)?, v))
            }),
        });
    }
    {
        let w = w_bc.clone();
        out.push(Check {
            name: "relu".into(),
            kind: Some(OpKind::Relu),
            inputs: vec![away_from_zero(rng, &[b, c])],
            wrt: vec![true],
            objective: Box::new(move |inp, tape| {
                let v = leaves(tape, inp, &[true]);
                let o = tape.relu(v[0])?;
                Ok((weighted_sum(tape, o, &w)?, v))
            }),
        });
    }
    out.push(Check {
        name: "sum".into(),
        kind: Some(OpKind::Sum),
        inputs: vec![rand_tensor(rng, &[b, c], -1.0, 1.0)],
        wrt: vec![true],
        objective: Box::new(|inp, tape| {
            let v = leaves(tape, inp, &[true]);
            let s = tape.sum(v[0])?;
            let s2 = tape.sum_squares(s)?;
            Ok((s2, v))
        }),
    });
    out.push(Check {
        name: "sum_squares".into(),
        kind: Some(OpKind::SumSquares),
        inputs: vec![rand_tensor(rng, &[b, c], -1.0, 1.0)],
        wrt: vec![true],
        objective: Box::new(|inp, tape| {
            let v = leaves(tape, inp, &[true]);
            Ok((tape.sum_squares(v[0])?, v))
        }),
    });
    for mode in [BnMode::Train, BnMode::Eval] {
        let w = w_c.clone();
        let stats = RunningStats {
            mean: rand_tensor(rng, &[c], -0.5, 0.5).into_data(),
            var: rand_tensor(rng, &[c], 0.5, 2.0).into_data(),
        };
        out.push(Check {
            name: format!("batch_norm[{mode:?}]").to_lowercase(),
            kind: Some(OpKind::BatchNorm),
            inputs: vec![
                rand_tensor(rng, &[b, c], -2.0, 2.0),
                rand_tensor(rng, &[c], 0.5, 1.5),
                rand_tensor(rng, &[c], -0.5, 0.5),
            ],
            wrt: vec![true, true, true],
            objective: Box::new(move |inp, tape| {
                let v = leaves(tape, inp, &[true, true, true]);
                let mut st = stats.clone();
                let o = tape.batch_norm(v[0], v[1], v[2], &mut st, mode)?;
                Ok((weighted_sum(tape, o, &w)?, v))
            }),
        });
    }
    {
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        out.push(Check {
            name: "softmax_cross_entropy".into(),
            kind: Some(OpKind::CrossEntropy),
            inputs: vec![rand_tensor(rng, &[b, c], -3.0, 3.0)],
            wrt: vec![true],
            objective: Box::new(move |inp, tape| {
                let v = leaves(tape, inp, &[true]);
                Ok((tape.softmax_cross_entropy(v[0], &labels)?, v))
            }),
        });
    }
    out.push(Check {
        name: "kl_divergence".into(),
        kind: Some(OpKind::KlDiv),
        inputs: vec![rand_tensor(rng, &[b, c], -3.0, 3.0), rand_tensor(rng, &[b, c], -3.0, 3.0)],
        wrt: vec![false, true],
        objective: Box::new(|inp, tape| {
            let v = leaves(tape, inp, &[false, true]);
            Ok((tape.kl_divergence(v[0], v[1])?, v))
        }),
    });
    out.push(two_layer_net_check(rng, b.max(3), k + 1, c));
    out
}

/// `x·W1 + b1 → BN → ReLU → ·W2 + b2 → CE`, differentiated w.r.t. every
/// parameter. Inputs are redrawn until no pre-activation sits within 1e-3
/// of the ReLU kink.
fn two_layer_net_check(rng: &mut rng::Rng, b: usize, d: usize, c: usize) -> Check<'static> {
    let hidden = 4;
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let forward = move |inp: &[Tensor<f64>], tape: &mut Tape<f64>, track: bool| -> Result<(Var, Var, Vec<Var>)> {
        let wrt = [false, track, track, track, track, track, track];
        let v = leaves(tape, inp, &wrt);
        let h = tape.matmul(v[0], v[1])?;
        let h = tape.add_bias(h, v[2])?;
        let mut st = RunningStats::new(hidden);
        let pre = tape.batch_norm(h, v[3], v[4], &mut st, BnMode::Train)?;
        let a = tape.relu(pre)?;
        let z = tape.matmul(a, v[5])?;
        let z = tape.add_bias(z, v[6])?;
        Ok((z, pre, v))
    };
    let mut inputs = Vec::new();
    for _ in 0..50 {
        inputs = vec![
            rand_tensor(rng, &[b, d], -2.0, 2.0),
            rand_tensor(rng, &[d, hidden], -1.0, 1.0),
            rand_tensor(rng, &[hidden], -0.5, 0.5),
            rand_tensor(rng, &[hidden], 0.5, 1.5),
            rand_tensor(rng, &[hidden], -0.5, 0.5),
            rand_tensor(rng, &[hidden, c], -1.0, 1.0),
            rand_tensor(rng, &[c], -0.5, 0.5),
        ];
        let mut tape = Tape::new();
        let (_, pre, _) = forward(&inputs, &mut tape, false).expect("well-formed net");
        if tape.value(pre).data().iter().all(|v| v.abs() > 1e-3) {
            break;
        }
    }
    Check {
        name: "two_layer_net".into(),
        kind: None,
        inputs,
        wrt: vec![false, true, true, true, true, true, true],
        objective: Box::new(move |inp, tape| {
            let (z, _, v) = forward(inp, tape, true)?;
            Ok((tape.softmax_cross_entropy(z, &labels)?, v))
        }),
    }
}

/// Runs every check on `opts.configs` random configurations.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut results: Vec<CheckResult> = Vec::new();
    for cfg in 0..opts.configs {
        let mut rng = rng::stream(&[opts.seed, rng::tag::GRADCHECK, cfg as u64]);
        for check in checks_for_config(&mut rng) {
            let err = run_check(&check, opts.flip_sign)?;
            match results.iter_mut().find(|r| r.check == check.name) {
                Some(r) => r.max_rel_err = r.max_rel_err.max(err),
                None => results.push(CheckResult {
                    check: check.name.clone(),
                    max_rel_err: err,
                }),
            }
        }
    }
    let (worst, max_rel_err) = results
        .iter()
        .fold((String::new(), 0.0f64), |(wn, we), r| {
            if r.max_rel_err > we || wn.is_empty() {
                (r.check.clone(), r.max_rel_err)
            } else {
                (wn, we)
            }
        });
    Ok(GradcheckReport {
        passed: max_rel_err < MAX_REL_ERR,
        results,
        max_rel_err,
        worst,
    })
}
