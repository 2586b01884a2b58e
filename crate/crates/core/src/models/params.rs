use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numerics::{RunningStats, Tensor};
use crate::scalar::Scalar;

/// Whether a block is a batch-norm parameter (personalized under FedBN-style
/// training) or an ordinary shared parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Bn,
    Shared,
}

/// Which half of the network a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Extractor,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Role {
    pub group: Group,
    pub part: Part,
}

impl Role {
    pub const fn new(group: Group, part: Part) -> Self {
        Self { group, part }
    }
}

/// Role predicate for [`split_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Select {
    Bn,
    Shared,
    Extractor,
    Classifier,
}

impl Select {
    pub fn matches(self, role: Role) -> bool {
        match self {
            Select::Bn => role.group == Group::Bn,
            Select::Shared => role.group == Group::Shared,
            Select::Extractor => role.part == Part::Extractor,
            Select::Classifier => role.part == Part::Classifier,
        }
    }
}

/// Gradients keyed by block name.
pub type Grads<T> = BTreeMap<String, Vec<T>>;

/// Named, role-tagged parameter blocks.
///
/// Blocks are kept ordered by name. A block may additionally be a *buffer*
/// (batch-norm running statistics), which is carried and communicated like a
/// parameter but never receives a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    blocks: BTreeMap<String, Tensor<T>>,
    roles: BTreeMap<String, Role>,
    frozen: BTreeSet<String>,
    buffers: BTreeSet<String>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            blocks: BTreeMap::new(),
            roles: BTreeMap::new(),
            frozen: BTreeSet::new(),
            buffers: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>, role: Role) -> Result<()> {
        let name = name.into();
        if self.blocks.contains_key(&name) {
            return Err(Error::Duplicate(name));
        }
        self.roles.insert(name.clone(), role);
        self.blocks.insert(name, t);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>, role: Role) -> Result<()> {
        let name = name.into();
        self.insert(name.clone(), t, role)?;
        self.buffers.insert(name);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.blocks.get(name)
    }

    pub(crate) fn get_mut_unchecked(&mut self, name: &str) -> &mut Tensor<T> {
        self.blocks.get_mut(name).expect("block exists")
    }

    /// Mutable access to a block. Frozen blocks refuse.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        if self.frozen.contains(name) {
            return Err(Error::Contract(format!("block {name} is frozen")));
        }
        self.blocks
            .get_mut(name)
            .ok_or_else(|| Error::Misaligned(format!("unknown block {name}")))
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.roles.get(name).copied()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains(name)
    }

    /// True when every block is frozen. Empty sets count as frozen.
    pub fn all_frozen(&self) -> bool {
        self.blocks.keys().all(|k| self.frozen.contains(k))
    }

    /// Names of blocks that take gradient steps.
    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.blocks
            .keys()
            .filter(|k| !self.frozen.contains(*k) && !self.buffers.contains(*k))
            .map(String::as_str)
    }

    pub fn num_buffers(&self) -> usize {
        self.buffers.len()
    }

    /// Running statistics stored under `{prefix}.running_mean` / `.running_var`.
    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats<T>> {
        let get = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            self.get(&name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Misaligned(format!("missing buffer {name}")))
        };
        Ok(RunningStats {
            mean: get("running_mean")?,
            var: get("running_var")?,
        })
    }

    /// Overwrites running statistics; frozen buffers refuse.
    pub fn set_running_stats(&mut self, prefix: &str, stats: &RunningStats<T>) -> Result<()> {
        for (suffix, vals) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let t = self.get_mut(&format!("{prefix}.{suffix}"))?;
            if t.numel() != vals.len() {
                return Err(Error::Shape(format!("running stats length for {prefix}")));
            }
            t.data_mut().copy_from_slice(vals);
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.blocks.keys().cloned().collect();
    }

    /// Structural equality: same names, roles, buffer flags and shapes.
    pub fn same_schema(&self, other: &Self) -> bool {
        self.roles == other.roles
            && self.buffers == other.buffers
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    /// Bitwise equality of every block value, plus schema.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.same_schema(other)
            && self
                .blocks
                .values()
                .zip(other.blocks.values())
                .all(|(a, b)| a.bitwise_eq(b))
    }

    /// Total number of scalar parameters, buffers included.
    pub fn numel(&self) -> usize {
        self.blocks.values().map(Tensor::numel).sum()
    }

    fn take_block(&self, name: &str, dst: &mut Self) {
        dst.blocks.insert(name.to_string(), self.blocks[name].clone());
        dst.roles.insert(name.to_string(), self.roles[name]);
        if self.frozen.contains(name) {
            dst.frozen.insert(name.to_string());
        }
        if self.buffers.contains(name) {
            dst.buffers.insert(name.to_string());
        }
    }
}

/// Partitions `p` by role into `(selected, rest)`. Names, roles and flags are
/// kept on both sides.
pub fn split_params<T: Scalar>(p: &ParamSet<T>, select: Select) -> (ParamSet<T>, ParamSet<T>) {
    let mut selected = ParamSet::new();
    let mut rest = ParamSet::new();
    for (name, role) in &p.roles {
        let dst = if select.matches(*role) { &mut selected } else { &mut rest };
        p.take_block(name, dst);
    }
    (selected, rest)
}

/// Union of two disjoint parameter sets.
pub fn merge_params<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>) -> Result<ParamSet<T>> {
    if let Some(dup) = b.blocks.keys().find(|k| a.blocks.contains_key(*k)) {
        return Err(Error::Duplicate(dup.clone()));
    }
    let mut out = a.clone();
    for name in b.blocks.keys() {
        b.take_block(name, &mut out);
    }
    Ok(out)
}

/// Deep copy with every block frozen.
pub fn clone_frozen<T: Scalar>(p: &ParamSet<T>) -> ParamSet<T> {
    let mut out = p.clone();
    out.freeze_all();
    out
}

/// Replaces the values of every block of `dst` that also appears in `src`.
/// Used when a client receives broadcast shared blocks.
pub fn overwrite_blocks<T: Scalar>(dst: &mut ParamSet<T>, src: &ParamSet<T>) -> Result<()> {
    for (name, t) in src.iter() {
        let d = dst
            .blocks
            .get_mut(name)
            .ok_or_else(|| Error::Misaligned(format!("broadcast block {name} unknown to client")))?;
        if d.shape() != t.shape() {
            return Err(Error::Misaligned(format!("broadcast block {name} has the wrong shape")));
        }
        d.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
