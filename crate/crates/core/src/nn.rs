//! Parameter storage and the basic layers.
//!
//! Models never own tensors directly. Construction registers named tensors in
//! a [`ParamStore`] and keeps the returned [`ParamId`]s; a forward pass reads
//! them through a [`Session`], which decides whether they are tracked for
//! gradients and collects normalization-statistics updates. This keeps
//! forward passes `&self`, so a model can serve concurrent inference calls.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Var};
use crate::error::shape_err;
use crate::ops::{self, Conv2dArgs};
use crate::{math, Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// Running statistics, updated from forward passes in training mode.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn learnable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|&id| self.entries[id.0].kind == ParamKind::Learnable)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.learnable().map(|id| self.get(id).numel()).sum()
    }

    /// Overwrite values from `(name, tensor)` pairs. Every entry must be
    /// present with a matching shape.
    pub fn load(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor> =
            values.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &self.entries {
            match by_name.get(e.name.as_str()) {
                None => return Err(Error::Load(format!("missing parameter {}", e.name))),
                Some(t) if t.shape() != e.value.shape() => {
                    return Err(Error::Load(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        e.name,
                        t.shape(),
                        e.value.shape()
                    )))
                }
                _ => {}
            }
        }
        if by_name.len() != self.entries.len() {
            return Err(Error::Load(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                by_name.len()
            )));
        }
        for e in &mut self.entries {
            e.value = by_name[e.name.as_str()].clone();
        }
        Ok(())
    }
}

impl ParamStore {
    /// Overwrite only the entries whose name starts with `prefix`; each of
    /// them must be present in `values` with a matching shape. Other names in
    /// `values` are ignored.
    pub fn load_prefix(&mut self, prefix: &str, values: &[(String, Tensor)]) -> Result<usize> {
        let by_name: BTreeMap<&str, &Tensor> =
            values.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut loaded = 0;
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            match by_name.get(e.name.as_str()) {
                None => return Err(Error::Load(format!("missing parameter {}", e.name))),
                Some(t) if t.shape() != e.value.shape() => {
                    return Err(Error::Load(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        e.name,
                        t.shape(),
                        e.value.shape()
                    )))
                }
                _ => loaded += 1,
            }
        }
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.value = by_name[e.name.as_str()].clone();
        }
        Ok(loaded)
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn constant(&mut self, leaf: &str, kind: ParamKind, value: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, kind, value)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.constant(leaf, ParamKind::Learnable, t)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass worth of parameter access.
pub struct Session<'a> {
    store: &'a ParamStore,
    mode: Mode,
    track: bool,
    leaves: RefCell<BTreeMap<ParamId, Var>>,
    updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'a> Session<'a> {
    /// Training-mode session: learnable parameters are tracked and batch
    /// statistics are used and recorded.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Train, true)
    }

    /// Inference-mode session with no gradient tracking.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Eval, false)
    }

    pub fn new(store: &'a ParamStore, mode: Mode, track: bool) -> Self {
        Self {
            store,
            mode,
            track,
            leaves: RefCell::new(BTreeMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The variable for a stored parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.leaves.borrow().get(&id) {
            return v.clone();
        }
        let e = self.store.entry(id);
        let v = if self.track && e.kind == ParamKind::Learnable {
            Var::leaf(e.value.clone())
        } else {
            Var::constant(e.value.clone())
        };
        self.leaves.borrow_mut().insert(id, v.clone());
        v
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }

    pub(crate) fn record_update(&self, id: ParamId, value: Tensor) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced by training-mode normalization.
    pub fn take_updates(&self) -> Vec<(ParamId, Tensor)> {
        core::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Gradients of every tracked parameter touched in this session.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(&id, v)| grads.get(v).map(|g| (id, g.clone())))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub args: Conv2dArgs,
}

impl Conv2d {
    /// Fan-in scaled uniform initialization (He-uniform for the weights).
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        args: Conv2dArgs,
        bias: bool,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = pb.uniform(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            math::sqrt(6.0 / fan_in),
        );
        let bias = bias.then(|| pb.uniform("bias", &[out_channels], 1.0 / math::sqrt(fan_in)));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            args,
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|id| s.param(id));
        ops::conv2d(x, &w, b.as_ref(), self.args)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Self {
        Self {
            gamma: pb.constant("gamma", ParamKind::Learnable, Tensor::full(&[channels], 1.0)),
            beta: pb.constant("beta", ParamKind::Learnable, Tensor::zeros(&[channels])),
            running_mean: pb.constant("running_mean", ParamKind::Buffer, Tensor::zeros(&[channels])),
            running_var: pb.constant("running_var", ParamKind::Buffer, Tensor::full(&[channels], 1.0)),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Var) -> Result<Var> {
        let (b, c, h, w) = x.value().dims4()?;
        if c != self.channels {
            return Err(shape_err!(
                "batch norm over {} channels got {}",
                self.channels,
                c
            ));
        }
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode() {
            Mode::Train => {
                let (mean, var) = ops::channel_stats(x.value())?;
                let n = (b * h * w) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = self.momentum;
                let rm = s.value(self.running_mean);
                let rv = s.value(self.running_var);
                let new_rm: Vec<f64> = rm.data().iter().zip(&mean).map(|(r, v)| (1.0 - m) * r + m * v).collect();
                let new_rv: Vec<f64> = rv
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| (1.0 - m) * r + m * v * unbiased)
                    .collect();
                s.record_update(self.running_mean, Tensor::new(&[c], new_rm)?);
                s.record_update(self.running_var, Tensor::new(&[c], new_rv)?);
                ops::batch_norm(x, &gamma, &beta, mean, var, self.eps, true)
            }
            Mode::Eval => {
                let mean = s.value(self.running_mean).data().to_vec();
                let var = s.value(self.running_var).data().to_vec();
                ops::batch_norm(x, &gamma, &beta, mean, var, self.eps, false)
            }
        }
    }
}

/// A learnable scalar such as an attention residual scale.
#[derive(Clone, Copy, Debug)]
pub struct Scalar(pub ParamId);

impl Scalar {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, init: f64) -> Self {
        Scalar(pb.constant(name, ParamKind::Learnable, Tensor::scalar(init)))
    }

    pub fn var(&self, s: &Session<'_>) -> Var {
        s.param(self.0)
    }
}

pub(crate) fn new_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn padding_for(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn session_reuses_leaf_nodes() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Learnable, Tensor::scalar(2.0));
        let s = Session::train(&store);
        assert_eq!(s.param(id).id(), s.param(id).id());
        assert!(s.param(id).requires_grad());
        let e = Session::eval(&store);
        assert!(!e.param(id).requires_grad());
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut store = ParamStore::new();
        let mut rng = new_rng(0);
        let bn = BatchNorm2d::new(&mut ParamBuilder::new(&mut store, &mut rng), 2);
        *store.get_mut(bn.running_mean) = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        *store.get_mut(bn.running_var) = Tensor::new(&[2], vec![4.0, 1.0]).unwrap();
        let s = Session::eval(&store);
        let x = Var::constant(Tensor::new(&[1, 2, 1, 1], vec![3.0, 0.0]).unwrap());
        let y = bn.forward(&s, &x).unwrap();
        assert!((y.value().data()[0] - 2.0 / math::sqrt(4.0 + 1e-5)).abs() < 1e-12);
        assert!((y.value().data()[1] - 1.0 / math::sqrt(1.0 + 1e-5)).abs() < 1e-12);
        assert!(s.take_updates().is_empty());
    }

    #[test]
    fn batch_norm_train_records_running_updates() {
        let mut store = ParamStore::new();
        let mut rng = new_rng(0);
        let bn = BatchNorm2d::new(&mut ParamBuilder::new(&mut store, &mut rng), 1);
        let s = Session::train(&store);
        let x = Var::constant(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let y = bn.forward(&s, &x).unwrap();
        assert!(y.value().mean().abs() < 1e-12);
        let updates = s.take_updates();
        assert_eq!(updates.len(), 2);
        assert!((updates[0].1.item() - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((updates[1].1.item() - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("a", ParamKind::Learnable, Tensor::zeros(&[2]));
        let err = store
            .load(&[("a".to_string(), Tensor::zeros(&[3]))])
            .unwrap_err();
        assert!(matches!(err, Error::Load(_)));
    }
}
