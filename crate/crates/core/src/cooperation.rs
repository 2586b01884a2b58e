//! Online/offline cooperation: logit fusion, mutual distillation through
//! frozen teachers, and cross-entropy against other clients' offline
//! classifiers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{clone_frozen, split_params, Bound, Mlp, ParamSet, Select, HEAD};
use crate::numerics::{sgd_step, BnMode, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Weights of the logit sum `w_on·online + w_off·offline`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionRule {
    pub w_on: f64,
    pub w_off: f64,
}

impl Default for FusionRule {
    fn default() -> Self {
        Self { w_on: 1.0, w_off: 1.0 }
    }
}

impl FusionRule {
    pub fn new(w_on: f64, w_off: f64) -> Result<Self> {
        if !(w_on > 0.0 && w_off > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fusion weights must be positive, got ({w_on}, {w_off})"
            )));
        }
        Ok(Self { w_on, w_off })
    }

    /// The averaging variant `(½, ½)`.
    pub fn mean() -> Self {
        Self { w_on: 0.5, w_off: 0.5 }
    }
}

pub fn fuse_predictions<T: Scalar>(on: &Tensor<T>, off: &Tensor<T>, rule: FusionRule) -> Result<Tensor<T>> {
    if !on.same_shape(off) {
        return Err(Error::Shape(format!(
            "cannot fuse logits of shapes {:?} and {:?}",
            on.shape(),
            off.shape()
        )));
    }
    let (a, b) = (T::lit(rule.w_on), T::lit(rule.w_off));
    let data = on.data().iter().zip(off.data()).map(|(&x, &y)| a * x + b * y).collect();
    Tensor::new(on.shape().to_vec(), data)
}

/// Frozen offline classifiers keyed by the client that uploaded them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSet<T> {
    entries: Vec<(usize, ParamSet<T>)>,
}

impl<T: Scalar> Default for ClassifierSet<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> ClassifierSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, ParamSet<T>)] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|(id, _)| *id).collect()
    }

    pub fn get(&self, id: usize) -> Option<&ParamSet<T>> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, p)| p)
    }

    /// Entries uploaded by clients other than `own_id`.
    pub fn foreign(&self, own_id: usize) -> impl Iterator<Item = &(usize, ParamSet<T>)> {
        self.entries.iter().filter(move |(id, _)| *id != own_id)
    }
}

/// Deep-copies and freezes every uploaded classifier. Entries are kept in
/// ascending id order.
pub fn build_classifier_set<T: Scalar>(uploads: &[(usize, ParamSet<T>)]) -> Result<ClassifierSet<T>> {
    let mut entries: Vec<(usize, ParamSet<T>)> =
        uploads.iter().map(|(id, p)| (*id, clone_frozen(p))).collect();
    entries.sort_by_key(|(id, _)| *id);
    if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Duplicate(format!("classifier from client {}", w[0].0)));
    }
    Ok(ClassifierSet { entries })
}

/// The classifier blocks of a model, as uploaded to the server.
pub fn classifier_of<T: Scalar>(params: &ParamSet<T>) -> ParamSet<T> {
    split_params(params, Select::Classifier).0
}

/// Records `Σ_{j ≠ own_id} CE(C̄_j(features), y)` on the tape. Foreign heads
/// enter as constants, so only the features receive gradient. With no
/// foreign entry the result is a constant zero.
pub fn inter_client_loss<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    set: &ClassifierSet<T>,
    own_id: usize,
    labels: &[usize],
) -> Result<Var> {
    let (_, width) = tape.value(features).dims2()?;
    let mut total: Option<Var> = None;
    for (id, head) in set.foreign(own_id) {
        if !head.all_frozen() {
            return Err(Error::Contract(format!("classifier of client {id} is not frozen")));
        }
        let w = head
            .get(&format!("{HEAD}.weight"))
            .ok_or_else(|| Error::Misaligned(format!("classifier of client {id} has no weight")))?;
        let b = head
            .get(&format!("{HEAD}.bias"))
            .ok_or_else(|| Error::Misaligned(format!("classifier of client {id} has no bias")))?;
        let (rows, _) = w.dims2()?;
        if rows != width {
            return Err(Error::Shape(format!(
                "classifier of client {id} expects {rows} features, got {width}"
            )));
        }
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let z = tape.matmul(features, wv)?;
        let z = tape.add_bias(z, bv)?;
        let ce = tape.softmax_cross_entropy(z, labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

/// Outcome of one recorded adaptation loss.
#[derive(Debug, Clone)]
pub struct AdaptationTerms<T> {
    pub loss: Var,
    pub ce: T,
    pub gen: T,
    pub out: crate::models::TapeOutput<T>,
}

/// Records `CE + μ·L_gen` for one model on one batch. `L_gen` is skipped
/// entirely when `μ = 0` or no foreign classifier exists, so the loss is
/// then exactly the cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    mlp: &Mlp<T>,
    bound: &Bound,
    params: &ParamSet<T>,
    x: Var,
    labels: &[usize],
    set: &ClassifierSet<T>,
    own_id: usize,
    mu: T,
) -> Result<AdaptationTerms<T>> {
    if !(mu >= T::zero()) {
        return Err(Error::InvalidArgument(format!("mu must be >= 0, got {mu}")));
    }
    let out = mlp.forward_tape(tape, bound, params, x, BnMode::Train)?;
    let ce = tape.softmax_cross_entropy(out.logits, labels)?;
    let ce_value = tape.value(ce).data()[0];
    if mu == T::zero() || set.foreign(own_id).next().is_none() {
        return Ok(AdaptationTerms {
            loss: ce,
            ce: ce_value,
            gen: T::zero(),
            out,
        });
    }
    let gen = inter_client_loss(tape, out.features, set, own_id, labels)?;
    let gen_value = tape.value(gen).data()[0];
    let scaled = tape.scale(gen, mu)?;
    let loss = tape.add(ce, scaled)?;
    Ok(AdaptationTerms {
        loss,
        ce: ce_value,
        gen: gen_value,
        out,
    })
}

/// One SGD step on `CE + μ·L_gen`, updating running statistics. Returns the
/// loss before the step.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_step<T: Scalar>(
    mlp: &Mlp<T>,
    params: &mut ParamSet<T>,
    x: &Tensor<T>,
    labels: &[usize],
    set: &ClassifierSet<T>,
    own_id: usize,
    mu: T,
    lr: T,
) -> Result<T> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, true);
    let xv = tape.constant(x.clone());
    let terms = adaptation_loss(&mut tape, mlp, &bound, params, xv, labels, set, own_id, mu)?;
    let loss = tape.value(terms.loss).data()[0];
    tape.backward(terms.loss)?;
    let grads = bound.grads(&tape);
    sgd_step(params, &grads, lr)?;
    crate::models::apply_stats(params, &terms.out.stats)?;
    Ok(loss)
}

/// KL values of a mutual-learning step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutualStep<T> {
    pub kl_online: T,
    pub kl_offline: T,
}

fn teacher_logits<T: Scalar>(mlp: &Mlp<T>, teacher: &ParamSet<T>, x: &Tensor<T>, who: &str) -> Result<Tensor<T>> {
    if !teacher.all_frozen() {
        return Err(Error::Contract(format!("{who} teacher is not frozen")));
    }
    Ok(mlp.forward(teacher, x, BnMode::Train)?.logits)
}

fn distill_grads<T: Scalar>(
    mlp: &Mlp<T>,
    student: &ParamSet<T>,
    teacher: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(T, crate::models::Grads<T>)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, student, true);
    let xv = tape.constant(x.clone());
    let out = mlp.forward_tape(&mut tape, &bound, student, xv, BnMode::Train)?;
    let tv = tape.constant(teacher.clone());
    let kl = tape.kl_divergence(tv, out.logits)?;
    let value = tape.value(kl).data()[0];
    tape.backward(kl)?;
    Ok((value, bound.grads(&tape)))
}

/// Online learns from the offline teacher and offline from the online
/// teacher, each by one SGD step on `KL(teacher ‖ student)`. Both gradients
/// are taken at the pre-step parameters. All forward passes use batch
/// statistics; running statistics are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn mutual_learning_step<T: Scalar>(
    mlp: &Mlp<T>,
    online: &mut ParamSet<T>,
    offline: &mut ParamSet<T>,
    teacher_on: &ParamSet<T>,
    teacher_off: &ParamSet<T>,
    x: &Tensor<T>,
    lr: T,
) -> Result<MutualStep<T>> {
    let (b, _) = x.dims2()?;
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let p_off = teacher_logits(mlp, teacher_off, x, "offline")?;
    let p_on = teacher_logits(mlp, teacher_on, x, "online")?;
    let (kl_online, g_on) = distill_grads(mlp, online, &p_off, x)?;
    let (kl_offline, g_off) = distill_grads(mlp, offline, &p_on, x)?;
    sgd_step(online, &g_on, lr)?;
    sgd_step(offline, &g_off, lr)?;
    Ok(MutualStep { kl_online, kl_offline })
}

/// `KL(teacher ‖ student)` on a batch without recording gradients.
pub fn distillation_gap<T: Scalar>(
    mlp: &Mlp<T>,
    student: &ParamSet<T>,
    teacher: &ParamSet<T>,
    x: &Tensor<T>,
) -> Result<T> {
    let p = mlp.forward(teacher, x, BnMode::Train)?.logits;
    let q = mlp.forward(student, x, BnMode::Train)?.logits;
    let mut tape = Tape::new();
    let (pv, qv) = (tape.constant(p), tape.constant(q));
    let kl = tape.kl_divergence(pv, qv)?;
    Ok(tape.value(kl).data()[0])
}

#[cfg(test)]
mod tests;
