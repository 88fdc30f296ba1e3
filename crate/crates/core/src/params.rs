//! Named trainable parameters with gradient slots.

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Rng, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Uniform initialization half-width.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    /// Registers a parameter drawn uniform(-INIT_SCALE, INIT_SCALE).
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut Rng) -> ParamId {
        let n = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), rng.uniform_vec(n, -INIT_SCALE, INIT_SCALE))
            .expect("shape");
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.grads
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    /// Mutable views of every `(value, grad)` pair.
    pub fn pairs_mut(&mut self) -> impl Iterator<Item = (&mut Tensor<T>, &Tensor<T>)> {
        self.values.iter_mut().zip(self.grads.iter())
    }

    /// Replaces all values, checking names and shapes.
    pub fn load_values(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    t.shape()
                )));
            }
            self.values[i] = t;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(T::zero());
        }
    }

    /// Puts every parameter on `tape`, gradient-tracked when `track` is set.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> ParamVars {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if track {
                    tape.input(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        ParamVars(vars)
    }

    /// Adds `scale ×` the gradients collected for `vars`.
    pub fn accumulate(&mut self, grads: &mut Gradients<T>, vars: &ParamVars, scale: T) {
        for (g, &v) in self.grads.iter_mut().zip(&vars.0) {
            if let Some(mut d) = grads.take(v) {
                d.scale_assign(scale);
                g.add_assign(&d);
            }
        }
    }

    pub fn grad_norm(&self) -> T {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm > T::zero() {
            let s = max_norm / norm;
            for g in &mut self.grads {
                g.scale_assign(s);
            }
        }
        norm
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Tape handles for every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(pub(crate) Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Wraps handles created elsewhere, e.g. by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_and_clip() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::vector(vec![3.0, 4.0]));
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape, true);
        let y = tape.dot(pv.get(w), pv.get(w)).unwrap();
        let mut g = tape.backward(y).unwrap();
        store.accumulate(&mut g, &pv, 0.5);
        assert_eq!(store.grad(w).data(), &[3.0, 4.0]);
        let before = store.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
        store.zero_grads();
        assert_eq!(store.grad_norm(), 0.0);
    }

    #[test]
    fn load_values_checks_layout() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", Tensor::vector(vec![1.0]));
        assert!(store
            .load_values(vec![("b".into(), Tensor::vector(vec![1.0]))])
            .is_err());
        assert!(store
            .load_values(vec![("a".into(), Tensor::vector(vec![1.0, 2.0]))])
            .is_err());
        store
            .load_values(vec![("a".into(), Tensor::vector(vec![7.0]))])
            .unwrap();
        assert_eq!(store.values()[0].item(), 7.0);
    }
}
