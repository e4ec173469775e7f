//! Named parameter storage and the per-pass forward context shared by all layers.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, BatchStats, BnMode};
use crate::tensor::Tensor;

/// Ordered map of named tensors. Iteration order is the lexicographic name
/// order, which keeps checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Internal(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `tape`; names accepted by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn vars<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> ParamVars<'t> {
        let map = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        ParamVars { map }
    }
}

/// Parameters registered on one tape.
pub struct ParamVars<'t> {
    map: BTreeMap<String, Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Self { map: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.map.get(name).copied().ok_or_else(|| Error::Internal(format!("parameter `{name}` not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.map.iter()
    }
}

/// Kaiming-normal initialization, `N(0, 2/fan_in)`.
pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Adds `<prefix>.gamma/.beta` parameters and running-stat buffers for a batch-norm layer.
pub fn init_batch_norm(prefix: &str, channels: usize, params: &mut ParamStore, buffers: &mut ParamStore) {
    params.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]));
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
    buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
    buffers.insert(format!("{prefix}.running_var"), Tensor::ones(&[channels]));
}

/// Adds `<prefix>.weight` (`[out,in,kh,kw]`, Kaiming) and optionally a zero `<prefix>.bias`.
pub fn init_conv(
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: (usize, usize),
    bias: bool,
    params: &mut ParamStore,
    rng: &mut impl Rng,
) {
    let (kh, kw) = kernel;
    params.insert(format!("{prefix}.weight"), kaiming(&[c_out, c_in, kh, kw], c_in * kh * kw, rng));
    if bias {
        params.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
    }
}

/// State shared by every layer during one forward pass.
pub struct Forward<'a, 't> {
    pub tape: &'t Tape,
    pub params: &'a ParamVars<'t>,
    pub buffers: &'a ParamStore,
    /// Batch statistics (train) or running statistics (eval) for batch norm.
    pub train: bool,
    pub leaky_slope: f64,
    stats: RefCell<Vec<(String, BatchStats)>>,
}

impl<'a, 't> Forward<'a, 't> {
    pub fn new(tape: &'t Tape, params: &'a ParamVars<'t>, buffers: &'a ParamStore, train: bool, leaky_slope: f64) -> Self {
        Self { tape, params, buffers, train, leaky_slope, stats: RefCell::new(Vec::new()) }
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        self.params.get(name)
    }

    pub fn leaky(&self, x: Var<'t>) -> Var<'t> {
        ops::leaky_relu(x, self.leaky_slope)
    }

    /// Same-padded convolution using `<prefix>.weight` and, when present, `<prefix>.bias`.
    pub fn conv(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.params.get(&format!("{prefix}.bias")).ok();
        match w.shape().len() {
            3 => ops::conv1d(x, w, b),
            _ => ops::conv2d(x, w, b),
        }
    }

    pub fn batch_norm(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        if self.train {
            let (y, stats) = ops::batch_norm(x, gamma, beta, BnMode::Train)?;
            if let Some(s) = stats {
                self.stats.borrow_mut().push((prefix.to_string(), s));
            }
            Ok(y)
        } else {
            let mean = self.buffers.require(&format!("{prefix}.running_mean"))?;
            let var = self.buffers.require(&format!("{prefix}.running_var"))?;
            let (y, _) = ops::batch_norm(x, gamma, beta, BnMode::Eval { mean: mean.data(), var: var.data() })?;
            Ok(y)
        }
    }

    /// Batch statistics gathered by train-mode batch norm, in call order.
    pub fn take_stats(&self) -> Vec<(String, BatchStats)> {
        self.stats.take()
    }
}

/// Folds batch statistics into running averages: `running = m * running + (1 - m) * batch`.
pub fn update_running_stats(buffers: &mut ParamStore, stats: &[(String, BatchStats)], momentum: f64) -> Result<()> {
    for (prefix, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{prefix}.{suffix}");
            let buf = buffers.get_mut(&name).ok_or_else(|| Error::Internal(format!("missing buffer `{name}`")))?;
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
    Ok(())
}
