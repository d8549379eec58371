use std::collections::BTreeMap;

use rand::Rng;

use super::graph::Gradients;
use super::tensor::Tensor;
use super::DiffError;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub(crate) struct Slot<T> {
    pub value: Tensor<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Named parameters plus Adam moment accumulators.
///
/// Entries are kept sorted by name, which fixes checkpoint and update order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    pub(crate) slots: BTreeMap<String, Slot<T>>,
    pub(crate) step: u64,
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam { lr, ..Adam::default() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { slots: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<(), DiffError> {
        if self.slots.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        let n = value.numel();
        self.slots
            .insert(name.to_string(), Slot { value: value.detach(), m: vec![T::zero(); n], v: vec![T::zero(); n] });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>, DiffError> {
        self.get(name).ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), DiffError> {
        let slot = self.slots.get_mut(name).ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(DiffError::Shape {
                op: "set",
                detail: format!("{} has shape {:?}, got {:?}", name, slot.value.shape(), value.shape()),
            });
        }
        slot.value = value.detach();
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    /// Clears optimizer moments and the step counter, keeping values.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for s in self.slots.values_mut() {
            s.m.iter_mut().for_each(|x| *x = T::zero());
            s.v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Copy holding only the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            slots: self.slots.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, s)| (k.clone(), s.clone())).collect(),
            step: self.step,
        }
    }

    /// Union of two stores with disjoint names. The step counter of `self` is kept.
    pub fn merged(&self, other: &ParamStore<T>) -> Result<ParamStore<T>, DiffError> {
        let mut out = self.clone();
        for (k, s) in &other.slots {
            if out.slots.insert(k.clone(), s.clone()).is_some() {
                return Err(DiffError::DuplicateParam(k.clone()));
            }
        }
        Ok(out)
    }

    /// True when names, shapes, values, moments and step are all bit-identical.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let same = |a: &[T], b: &[T]| a.iter().zip(b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits());
        self.step == other.step
            && self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|((ka, a), (kb, b))| {
                ka == kb && a.value.bit_eq(&b.value) && same(&a.m, &b.m) && same(&a.v, &b.v)
            })
    }

    /// One Adam step with bias correction. `grads` must cover exactly this store's names.
    pub fn adam_step(&mut self, grads: &Gradients<T>, cfg: &Adam) -> Result<(), DiffError> {
        if let Some(extra) = grads.keys().find(|k| !self.slots.contains_key(*k)) {
            return Err(DiffError::UnknownParam(extra.clone()));
        }
        if let Some(missing) = self.slots.keys().find(|k| !grads.contains_key(*k)) {
            return Err(DiffError::MissingGradient(missing.clone()));
        }
        for (name, g) in grads {
            let slot = &self.slots[name];
            if slot.value.shape() != g.shape() {
                return Err(DiffError::Shape {
                    op: "adam_step",
                    detail: format!("gradient for {} has shape {:?}, parameter {:?}", name, g.shape(), slot.value.shape()),
                });
            }
        }
        self.step += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        let t = self.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for (name, g) in grads {
            let slot = self.slots.get_mut(name).expect("checked above");
            let mut values = slot.value.to_vec();
            for (i, &gi) in g.data().iter().enumerate() {
                slot.m[i] = b1 * slot.m[i] + (T::one() - b1) * gi;
                slot.v[i] = b2 * slot.v[i] + (T::one() - b2) * gi * gi;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            slot.value = Tensor::new(slot.value.shape().to_vec(), values)
                .map_err(|_| DiffError::NonFinite { op: format!("adam update of {}", name) })?;
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data().iter()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

/// Glorot-uniform matrix `[fan_in, fan_out]`, optionally scaled.
pub fn glorot<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Tensor<T> {
    let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(vec![v]).unwrap()).unwrap();
        s
    }

    fn grad(v: f64) -> Gradients<f64> {
        let mut g = Gradients::new();
        g.insert("p".into(), Tensor::vector(vec![v]).unwrap());
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(1.0);
        s.adam_step(&grad(0.0), &Adam::with_lr(0.1)).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[1.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 after bias correction: p = 1 - 0.1 / (1 + 1e-8).
        let mut s = scalar_store(1.0);
        s.adam_step(&grad(1.0), &Adam::with_lr(0.1)).unwrap();
        let p = s.get("p").unwrap().data()[0];
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn rejects_missing_and_extra_keys() {
        let mut s = scalar_store(1.0);
        assert!(matches!(s.adam_step(&Gradients::new(), &Adam::default()), Err(DiffError::MissingGradient(_))));
        let mut g = grad(1.0);
        g.insert("q".into(), Tensor::vector(vec![1.0]).unwrap());
        assert!(matches!(s.adam_step(&g, &Adam::default()), Err(DiffError::UnknownParam(_))));
    }

    #[test]
    fn duplicate_names_and_shape_changes_rejected() {
        let mut s = scalar_store(1.0);
        assert!(s.insert("p", Tensor::vector(vec![0.0]).unwrap()).is_err());
        assert!(s.set("p", Tensor::vector(vec![0.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = scalar_store(0.3);
            for i in 0..5 {
                s.adam_step(&grad(0.1 * i as f64 - 0.2), &Adam::default()).unwrap();
            }
            s
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn clip_grad_norm_caps_global_norm() {
        let mut g = grad(3.0);
        g.insert("q".into(), Tensor::vector(vec![4.0]).unwrap());
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((g["p"].data()[0] - 0.6).abs() < 1e-12);
    }
}
