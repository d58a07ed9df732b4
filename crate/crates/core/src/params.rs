//! Named parameter storage and the per-forward binding of parameters onto a
//! tape.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Learnable tensors addressed by stable dotted names
/// (`"ftvp5.cvp.fwd.w1"`, `"enc.s0.conv1"`, ...), iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self { map: self.map.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    /// `self += other`, matching by name.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (name, g) in &other.map {
            let dst = self.get_mut(name)?;
            for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in self.map.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.map.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFiniteParam(name.clone())),
            None => Ok(()),
        }
    }

    /// Gaussian init with standard deviation `std`.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) {
        self.insert(name, Tensor::from_fn(shape, |_| T::from_f64(rng.normal() * std)));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f64) {
        self.insert(name, Tensor::full(shape, T::from_f64(v)));
    }
}

/// A forward pass in progress: the tape plus lazily bound parameters.
pub struct Ctx<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, Var>,
}

impl<'p, T: Real> Ctx<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { tape: Tape::new(), params, bound: BTreeMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Tape handle of parameter `name`, registering it on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = self.tape.param(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of parameters read by this forward pass.
    pub fn bound_names(&self) -> Vec<&str> {
        self.bound.keys().map(String::as_str).collect()
    }

    /// Run backward from `loss` and collect gradients for every stored
    /// parameter; parameters the pass never read get exact zeros.
    pub fn backward(&mut self, loss: Var) -> Result<ParamStore<T>> {
        self.tape.backward(loss)?;
        let mut grads = self.params.zeros_like();
        for (name, &v) in &self.bound {
            if let Some(g) = self.tape.grad(v) {
                grads.insert(name.clone(), g.clone());
            }
        }
        Ok(grads)
    }
}
