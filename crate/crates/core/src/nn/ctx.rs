use std::collections::BTreeMap;

use super::{Init, ParamStore};
use crate::error::Result;
use crate::tensor::norm::{update_running_stats, BnSaved, PRELU_INIT};
use crate::tensor::{Grads, Graph, Scalar, Tensor, Var};

/// Whether batch norm uses batch statistics (and updates running averages)
/// or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// A graph under construction together with the parameters bound into it.
///
/// Each parameter becomes one leaf the first time it is requested, so a
/// parameter used in several places accumulates its gradient.
pub struct Ctx<'s, T: Scalar> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    bound: BTreeMap<String, Var>,
    grads: bool,
    pub bn_mode: BnMode,
    bn_nodes: Vec<(String, Var)>,
    taps: Vec<(String, Var)>,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    /// With `grads` false no node requires a gradient, which skips all
    /// bookkeeping for pure inference.
    pub fn new(store: &'s ParamStore<T>, grads: bool) -> Self {
        Self { g: Graph::new(), store, bound: BTreeMap::new(), grads, bn_mode: BnMode::Infer, bn_nodes: Vec::new(), taps: Vec::new() }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.g.leaf(value, self.grads && !self.store.is_frozen(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.g.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.g.value(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Records an intermediate under a name for later inspection.
    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        self.taps.push((name.into(), v));
    }

    pub fn taps(&self) -> &[(String, Var)] {
        &self.taps
    }

    pub fn tapped(&self, name: &str) -> Option<&Tensor<T>> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| self.g.value(*v))
    }

    pub fn conv(&mut self, prefix: &str, x: Var, stride: (usize, usize)) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.g.conv2d(x, w, b, stride)
    }

    pub fn deconv(&mut self, prefix: &str, x: Var, stride: (usize, usize)) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.g.conv_transpose2d(x, w, b, stride)
    }

    pub fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.bn_mode {
            BnMode::Train => {
                let y = self.g.batch_norm_train(x, gamma, beta)?;
                self.bn_nodes.push((prefix.to_string(), y));
                Ok(y)
            }
            BnMode::Infer => {
                let rm = self.store.buffer(&format!("{prefix}.running_mean"))?;
                let rv = self.store.buffer(&format!("{prefix}.running_var"))?;
                self.g.batch_norm_infer(x, gamma, beta, rm, rv)
            }
        }
    }

    pub fn prelu(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let a = self.param(&format!("{prefix}.slope"))?;
        self.g.prelu(x, a)
    }

    /// conv -> batch norm -> PReLU, the basic unit of every convolutional stack.
    pub fn conv_bn_prelu(&mut self, prefix: &str, x: Var, stride: (usize, usize)) -> Result<Var> {
        let y = self.conv(&format!("{prefix}.conv"), x, stride)?;
        let y = self.bn(&format!("{prefix}.bn"), y)?;
        self.prelu(&format!("{prefix}.prelu"), y)
    }

    /// Gradients of every bound, trainable parameter that received one.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(name, _)| !self.store.is_frozen(name))
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// Batch statistics observed by train-mode batch norms, keyed by prefix.
    pub fn bn_stats(&self) -> Vec<(String, BnSaved<T>)> {
        self.bn_nodes
            .iter()
            .filter_map(|(p, v)| self.g.bn_saved(*v).map(|s| (p.clone(), s.clone())))
            .collect()
    }
}

/// Folds observed batch statistics into the running averages.
pub fn apply_bn_stats<T: Scalar>(store: &mut ParamStore<T>, stats: &[(String, BnSaved<T>)]) -> Result<()> {
    for (prefix, saved) in stats {
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let mut rm = store.buffer(&mean_name)?.clone();
        let mut rv = store.buffer(&var_name)?.clone();
        update_running_stats(&mut rm, &mut rv, saved);
        *store.buffer_mut(&mean_name)? = rm;
        *store.buffer_mut(&var_name)? = rv;
    }
    Ok(())
}

pub fn declare_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    kernel: (usize, usize),
    cin: usize,
    cout: usize,
) -> Result<()> {
    store.declare(&format!("{prefix}.weight"), &[kernel.0, kernel.1, cin, cout], Init::Xavier)?;
    store.declare(&format!("{prefix}.bias"), &[cout], Init::Zeros)
}

/// Transposed-convolution kernels are stored `[kh, kw, Cout, Cin]`, i.e. as
/// the forward kernel they are the adjoint of.
pub fn declare_deconv<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    kernel: (usize, usize),
    cin: usize,
    cout: usize,
) -> Result<()> {
    store.declare(&format!("{prefix}.weight"), &[kernel.0, kernel.1, cout, cin], Init::Xavier)?;
    store.declare(&format!("{prefix}.bias"), &[cout], Init::Zeros)
}

pub fn declare_bn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.declare(&format!("{prefix}.gamma"), &[c], Init::Constant(1.0))?;
    store.declare(&format!("{prefix}.beta"), &[c], Init::Zeros)?;
    store.declare_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]))?;
    store.declare_buffer(&format!("{prefix}.running_var"), Tensor::full(&[c], T::one()))
}

pub fn declare_prelu<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.declare(&format!("{prefix}.slope"), &[c], Init::Constant(PRELU_INIT))
}

pub fn declare_conv_bn_prelu<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    kernel: (usize, usize),
    cin: usize,
    cout: usize,
) -> Result<()> {
    declare_conv(store, &format!("{prefix}.conv"), kernel, cin, cout)?;
    declare_bn(store, &format!("{prefix}.bn"), cout)?;
    declare_prelu(store, &format!("{prefix}.prelu"), cout)
}
