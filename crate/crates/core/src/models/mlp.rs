use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Grads, Group, ParamSet, Part, Role};
use crate::numerics::{BnMode, RunningStats, Tape, Tensor, Var};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub bn_after_hidden: bool,
}

fn default_true() -> bool {
    true
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidArgument("MLP needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::InvalidArgument("MLP widths must be at least 1".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden_widths.last().expect("validated")
    }
}

/// Logits and penultimate activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub logits: Tensor<T>,
    pub features: Tensor<T>,
}

/// Tape handles for every block of a [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Records every block of `params` on the tape. Trainable blocks track
    /// gradients when `track` is set; frozen blocks and buffers never do.
    pub fn new<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet<T>, track: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let trainable = !params.is_frozen(name) && !params.is_buffer(name);
                let v = if track && trainable {
                    tape.leaf(t.clone().with_requires_grad(true))
                } else {
                    tape.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Misaligned(format!("missing block {name}")))
    }

    /// Gradients of every tracked block after `tape.backward`.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> Grads<T> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .map(|(name, v)| {
                let g = tape
                    .grad(*v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); tape.value(*v).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Output handles of a forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeOutput<T> {
    pub logits: Var,
    pub features: Var,
    /// Updated running statistics per BN layer (train mode only).
    pub stats: Vec<(String, RunningStats<T>)>,
}

/// Multilayer perceptron: `linear → BN → ReLU` per hidden layer, then a
/// BN-free linear classifier head.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    cfg: MlpConfig,
    _scalar: std::marker::PhantomData<T>,
}

pub fn layer_name(i: usize) -> String {
    format!("l{i}")
}

pub fn bn_name(i: usize) -> String {
    format!("bn{i}")
}

pub const HEAD: &str = "head";

impl<T: Scalar> Mlp<T> {
    pub fn new(cfg: MlpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet<T>> {
        init_mlp(&self.cfg, seed)
    }

    /// Records a forward pass. `x` must be `B × input_dim`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        params: &ParamSet<T>,
        x: Var,
        mode: BnMode,
    ) -> Result<TapeOutput<T>> {
        let (_, d) = tape.value(x).dims2()?;
        if d != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "input width {d}, model expects {}",
                self.cfg.input_dim
            )));
        }
        let mut h = x;
        let mut stats = Vec::new();
        for i in 0..self.cfg.hidden_widths.len() {
            let l = layer_name(i);
            h = tape.matmul(h, bound.var(&format!("{l}.weight"))?)?;
            h = tape.add_bias(h, bound.var(&format!("{l}.bias"))?)?;
            if self.cfg.bn_after_hidden {
                let b = bn_name(i);
                let mut rs = params.running_stats(&b)?;
                h = tape.batch_norm(
                    h,
                    bound.var(&format!("{b}.gamma"))?,
                    bound.var(&format!("{b}.beta"))?,
                    &mut rs,
                    mode,
                )?;
                if mode == BnMode::Train {
                    stats.push((b, rs));
                }
            }
            h = tape.relu(h)?;
        }
        let logits = self.head(
            tape,
            bound.var(&format!("{HEAD}.weight"))?,
            bound.var(&format!("{HEAD}.bias"))?,
            h,
        )?;
        Ok(TapeOutput {
            logits,
            features: h,
            stats,
        })
    }

    /// Applies a classifier head `features · W + b`.
    pub fn head(&self, tape: &mut Tape<T>, w: Var, b: Var, features: Var) -> Result<Var> {
        let z = tape.matmul(features, w)?;
        tape.add_bias(z, b)
    }

    /// Forward pass without gradients. Running statistics are not updated.
    pub fn forward(&self, params: &ParamSet<T>, x: &Tensor<T>, mode: BnMode) -> Result<ModelOutput<T>> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_tape(&mut tape, &bound, params, xv, mode)?;
        Ok(ModelOutput {
            logits: tape.value(out.logits).clone(),
            features: tape.value(out.features).clone(),
        })
    }
}

/// Convenience wrapper over [`Mlp::forward`].
pub fn forward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &MlpConfig,
    x: &Tensor<T>,
    mode: BnMode,
) -> Result<ModelOutput<T>> {
    Mlp::new(cfg.clone())?.forward(params, x, mode)
}

/// Writes train-mode running statistics back into `params`.
pub fn apply_stats<T: Scalar>(params: &mut ParamSet<T>, stats: &[(String, RunningStats<T>)]) -> Result<()> {
    for (prefix, rs) in stats {
        params.set_running_stats(prefix, rs)?;
    }
    Ok(())
}

/// He-initialized MLP parameters.
///
/// Weights are drawn from `N(0, 2/fan_in)`, biases and BN shifts are 0, BN
/// scales 1, running statistics `(0, 1)`. The last linear layer is the
/// classifier; every BN block is tagged [`Group::Bn`].
pub fn init_mlp<T: Scalar>(cfg: &MlpConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = rng::stream(&[seed, rng::tag::INIT]);
    let mut p = ParamSet::new();
    let shared_ext = Role::new(Group::Shared, Part::Extractor);
    let bn_ext = Role::new(Group::Bn, Part::Extractor);
    let mut weight = |fan_in: usize, fan_out: usize| -> Result<Tensor<T>> {
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data)
    };
    let mut fan_in = cfg.input_dim;
    for (i, &w) in cfg.hidden_widths.iter().enumerate() {
        let l = layer_name(i);
        p.insert(format!("{l}.weight"), weight(fan_in, w)?, shared_ext)?;
        p.insert(format!("{l}.bias"), Tensor::zeros(&[w]), shared_ext)?;
        if cfg.bn_after_hidden {
            let b = bn_name(i);
            p.insert(format!("{b}.gamma"), Tensor::ones(&[w]), bn_ext)?;
            p.insert(format!("{b}.beta"), Tensor::zeros(&[w]), bn_ext)?;
            p.insert_buffer(format!("{b}.running_mean"), Tensor::zeros(&[w]), bn_ext)?;
            p.insert_buffer(format!("{b}.running_var"), Tensor::ones(&[w]), bn_ext)?;
        }
        fan_in = w;
    }
    let cls = Role::new(Group::Shared, Part::Classifier);
    p.insert(format!("{HEAD}.weight"), weight(fan_in, cfg.num_classes)?, cls)?;
    p.insert(format!("{HEAD}.bias"), Tensor::zeros(&[cfg.num_classes]), cls)?;
    Ok(p)
}

/// Row-wise argmax; ties go to the smallest index.
pub fn predict_class<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (b, c) = logits.dims2()?;
    if c == 0 {
        return Err(Error::Shape("logits need at least one class".into()));
    }
    Ok((0..b)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
