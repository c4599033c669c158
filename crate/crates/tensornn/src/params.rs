use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{BatchStats, Gradients, Graph, Var};
use crate::tensor::Tensor;

/// A trainable tensor with its accumulated gradient and Adam state.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
    pub(crate) moment1: Option<Tensor<T>>,
    pub(crate) moment2: Option<Tensor<T>>,
    pub(crate) step: u64,
}

impl<T: Float> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        Self { value, grad: None, trainable: true, moment1: None, moment2: None, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Named parameters plus non-trainable buffers (batch-norm running statistics).
///
/// Names are kept sorted so iteration and serialization order are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(TensorError::invalid("param_store", format!("duplicate name `{name}`")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(TensorError::invalid("param_store", format!("duplicate name `{name}`")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.param(name)?.value)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers.get_mut(name).ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    /// Parameter or buffer value by name.
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value).or_else(|| self.buffers.get(name))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match self.params.get_mut(name) {
            Some(p) => Some(&mut p.value),
            None => self.buffers.get_mut(name),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.buffers.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    /// All parameters and buffers, sorted by name.
    pub fn tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        let mut v: Vec<(&str, &Tensor<T>)> = self
            .params
            .iter()
            .map(|(k, p)| (k.as_str(), &p.value))
            .chain(self.buffers.iter().map(|(k, t)| (k.as_str(), t)))
            .collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Adds the gradients of every bound parameter to its `grad` slot.
    pub fn accumulate_grads(&mut self, bindings: &Bindings, grads: &Gradients<T>) -> Result<()> {
        for (name, var) in &bindings.vars {
            let Some(g) = grads.get(*var) else { continue };
            let p = self.param_mut(name)?;
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Exponential running-stat update (`momentum` weights the new batch).
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)], momentum: f64) -> Result<()> {
        let m = T::of(momentum);
        for (name, stats) in updates {
            for (suffix, vals) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let buf = self.buffer_mut(&format!("{name}.{suffix}"))?;
                for (r, &v) in buf.data_mut().iter_mut().zip(vals.iter()) {
                    *r = (T::one() - m) * *r + m * v;
                }
            }
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Converts every tensor to another precision; optimizer state is dropped.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    let mut q = Param::new(p.value.cast());
                    q.trainable = p.trainable;
                    (k.clone(), q)
                })
                .collect(),
            buffers: self.buffers.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Removes every parameter and buffer whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
        self.buffers.retain(|k, _| !k.starts_with(prefix));
    }
}

/// Parameter-name → graph-leaf map recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Forward-pass context: a fresh graph plus read access to the parameters.
pub struct Ctx<'s, T: Float> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    bindings: Bindings,
    train: bool,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'s, T: Float> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, train: bool) -> Self {
        Self { graph: Graph::new(), store, bindings: Bindings::default(), train, bn_updates: Vec::new() }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Graph leaf for a named parameter; each parameter is bound once per graph.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bindings.get(name) {
            return Ok(v);
        }
        let p = self.store.param(name)?;
        let v = if p.trainable { self.graph.leaf(p.value.clone()) } else { self.graph.input(p.value.clone()) };
        self.bindings.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'s Tensor<T>> {
        self.store.buffer(name)
    }

    pub(crate) fn record_bn(&mut self, name: &str, stats: BatchStats<T>) {
        self.bn_updates.push((name.to_string(), stats));
    }

    pub fn finish(self) -> (Graph<T>, Bindings, Vec<(String, BatchStats<T>)>) {
        (self.graph, self.bindings, self.bn_updates)
    }
}

/// Kaiming-uniform initialization, `U(-√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}
