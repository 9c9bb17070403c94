use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameter arrays plus the per-parameter freeze mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape handles for the parameters used in one forward pass.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<ParamId, Var>,
    no_grad: bool,
}

impl Bindings {
    /// Bindings that register every parameter as a constant.
    pub fn no_grad() -> Self {
        Bindings {
            vars: BTreeMap::new(),
            no_grad: true,
        }
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars.get(&id).copied()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn replace_value(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
    }

    /// Registers `id` on `tape` (once per pass) and returns its handle.
    /// Frozen parameters enter as constants.
    pub fn bind(&self, tape: &mut Tape, bindings: &mut Bindings, id: ParamId) -> Var {
        if let Some(v) = bindings.vars.get(&id) {
            return *v;
        }
        let p = &self.params[id.0];
        let v = tape.leaf(p.value.clone().with_requires_grad(!p.frozen && !bindings.no_grad));
        bindings.vars.insert(id, v);
        v
    }

    /// Adds the gradients of every bound, trainable parameter.
    pub fn accumulate(&mut self, grads: &Gradients, bindings: &Bindings) -> Result<()> {
        for (&id, &var) in &bindings.vars {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            if let Some(g) = grads.get(var) {
                p.value.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }
}

/// SGD with heavy-ball momentum: `v <- mu v + g; p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    learning_rate: f64,
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Contract(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Contract(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(SgdMomentum {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// Updates every unfrozen parameter and clears its gradient. Frozen
    /// parameters are not touched at all.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| !p.frozen && p.value.grad().is_none()) {
            return Err(Error::Contract(format!("parameter `{}` has no gradient", p.name)));
        }
        for p in store.params.iter_mut().filter(|p| !p.frozen) {
            let grad = p.value.grad().expect("checked above").to_vec();
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            if v.len() != grad.len() {
                // the parameter was resized (classifier growth); restart its momentum
                *v = vec![0.0; grad.len()];
            }
            for ((vel, g), w) in v.iter_mut().zip(&grad).zip(p.value.data_mut()) {
                *vel = self.momentum * *vel + g;
                *w -= self.learning_rate * *vel;
            }
            p.value.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, frozen: bool) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.push("p", Tensor::scalar(value));
        s.set_frozen(id, frozen);
        (s, id)
    }

    #[test]
    fn plain_sgd_step() {
        let (mut s, id) = store_with(1.0, false);
        let mut opt = SgdMomentum::new(0.1, 0.0).unwrap();
        s.get_mut(id).value.set_grad(vec![2.0]).unwrap();
        opt.step(&mut s).unwrap();
        assert!((s.get(id).value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let (mut s, id) = store_with(0.0, false);
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        let mut seen = Vec::new();
        for _ in 0..2 {
            s.get_mut(id).value.set_grad(vec![1.0]).unwrap();
            opt.step(&mut s).unwrap();
            seen.push(s.get(id).value.data()[0]);
        }
        assert!((seen[0] + 0.1).abs() < 1e-15);
        assert!((seen[1] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let (mut s, id) = store_with(0.123456789, true);
        let before = s.get(id).value.data()[0].to_bits();
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        for _ in 0..100 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get(id).value.data()[0].to_bits(), before);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let (mut s, _) = store_with(1.0, false);
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        assert!(matches!(opt.step(&mut s), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdMomentum::new(0.0, 0.5).is_err());
        assert!(SgdMomentum::new(0.1, 1.0).is_err());
    }

    #[test]
    fn bind_skips_frozen_gradients() {
        let mut s = ParamStore::new();
        let a = s.push("a", Tensor::vector(vec![1.0, 2.0]));
        let b = s.push("b", Tensor::vector(vec![3.0, 4.0]));
        s.set_frozen(a, true);
        let mut tape = Tape::new();
        let mut bind = Bindings::default();
        let va = s.bind(&mut tape, &mut bind, a);
        let vb = s.bind(&mut tape, &mut bind, b);
        let d = tape.row_dot(va, vb).unwrap();
        let grads = tape.backward(d).unwrap();
        s.accumulate(&grads, &bind).unwrap();
        assert!(s.get(a).value.grad().is_none());
        assert_eq!(s.get(b).value.grad().unwrap(), &[1.0, 2.0]);
    }
}
