//! Named parameter storage and Adam/SGD updates with per-step scaling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::KernelError;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Uniquely named parameters with Adam moment state and a step counter.
/// Iteration order is the name order, so updates are deterministic.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

/// Gradients keyed by parameter name, as produced by a tape backward pass.
pub type GradMap = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), KernelError> {
        if self.entries.contains_key(name) {
            return Err(KernelError::DuplicateParam(name.to_owned()));
        }
        let len = value.len();
        self.entries.insert(
            name.to_owned(),
            ParamEntry {
                value,
                m: vec![0.0; len],
                v: vec![0.0; len],
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, KernelError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| KernelError::UnknownParam(name.to_owned()))
    }

    /// In-place access, for perturbation probes; moment state is untouched.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, KernelError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| KernelError::UnknownParam(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn checked<'a>(
        entries: &'a mut BTreeMap<String, ParamEntry>,
        name: &str,
        grad: &[f64],
    ) -> Result<&'a mut ParamEntry, KernelError> {
        let entry = entries
            .get_mut(name)
            .ok_or_else(|| KernelError::UnknownParam(name.to_owned()))?;
        if grad.len() != entry.value.len() {
            return Err(KernelError::ShapeMismatch {
                op: "optimizer step",
                lhs: entry.value.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        Ok(entry)
    }

    /// Bias-corrected Adam update with effective step base_lr * scale.
    /// Parameters absent from `grads` keep their value and moments.
    pub fn adam_step(
        &mut self,
        grads: &GradMap,
        base_lr: f64,
        scale: f64,
    ) -> Result<(), KernelError> {
        if !(0.0..=1.0).contains(&scale) {
            return Err(KernelError::BadScale(scale));
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = base_lr * scale;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, grad) in grads {
            let entry = Self::checked(&mut self.entries, name, grad)?;
            for ((p, g), (m, v)) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(entry.m.iter_mut().zip(entry.v.iter_mut()))
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }

    /// Plain gradient descent: p -= base_lr * scale * g. No moment state.
    pub fn sgd_step(
        &mut self,
        grads: &GradMap,
        base_lr: f64,
        scale: f64,
    ) -> Result<(), KernelError> {
        if !(0.0..=1.0).contains(&scale) {
            return Err(KernelError::BadScale(scale));
        }
        self.step += 1;
        let lr = base_lr * scale;
        for (name, grad) in grads {
            let entry = Self::checked(&mut self.entries, name, grad)?;
            for (p, g) in entry.value.data_mut().iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::tape::Tape;

    fn store_with(name: &str, data: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::vector(data).unwrap()).unwrap();
        s
    }

    #[test]
    fn duplicate_and_unknown_params() {
        let mut s = store_with("w", vec![1.0]);
        assert!(matches!(
            s.insert("w", Tensor::vector(vec![2.0]).unwrap()),
            Err(KernelError::DuplicateParam(_))
        ));
        assert!(matches!(s.get("nope"), Err(KernelError::UnknownParam(_))));
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with("w", vec![1.5, -2.0]);
        let mut grads = GradMap::new();
        grads.insert("w".into(), vec![0.0, 0.0]);
        s.adam_step(&grads, 0.1, 1.0).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn scale_zero_freezes_params() {
        let mut s = store_with("w", vec![1.5]);
        let mut grads = GradMap::new();
        grads.insert("w".into(), vec![3.0]);
        s.adam_step(&grads, 0.1, 0.0).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn first_adam_step_matches_hand_formula() {
        let mut s = store_with("w", vec![2.0]);
        let mut grads = GradMap::new();
        grads.insert("w".into(), vec![0.5]);
        s.adam_step(&grads, 0.01, 1.0).unwrap();
        // t=1: mhat = g, vhat = g^2 -> step = lr * g / (|g| + eps)
        let expect = 2.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn scale_one_equals_unscaled() {
        let mut a = store_with("w", vec![1.0, 2.0]);
        let mut b = store_with("w", vec![1.0, 2.0]);
        let mut grads = GradMap::new();
        grads.insert("w".into(), vec![0.3, -0.7]);
        for _ in 0..5 {
            a.adam_step(&grads, 0.05, 1.0).unwrap();
            b.adam_step(&grads, 0.05 * 1.0, 1.0).unwrap();
        }
        assert_eq!(a.get("w").unwrap().data(), b.get("w").unwrap().data());
    }

    #[test]
    fn bad_scale_rejected() {
        let mut s = store_with("w", vec![1.0]);
        let grads = GradMap::new();
        assert!(matches!(s.adam_step(&grads, 0.1, 1.5), Err(KernelError::BadScale(_))));
        assert!(matches!(s.sgd_step(&grads, 0.1, -0.1), Err(KernelError::BadScale(_))));
    }

    #[test]
    fn grad_shape_mismatch_rejected() {
        let mut s = store_with("w", vec![1.0, 2.0]);
        let mut grads = GradMap::new();
        grads.insert("w".into(), vec![0.1]);
        assert!(matches!(
            s.adam_step(&grads, 0.1, 1.0),
            Err(KernelError::ShapeMismatch { .. })
        ));
    }

    /// Two half-weighted copies of a sample produce the same summed gradient
    /// as the sample at weight one, so the optimizer steps agree exactly.
    #[test]
    fn half_weighted_duplicates_equal_full_weight() {
        let loss_grad = |w: &Tensor, weights: &[f64]| -> GradMap {
            // linear model: loss_i = weights_i * (w . x - y)^2 on one sample
            let mut tape = Tape::new();
            let wv = tape.input(w);
            let x = tape.input(&Tensor::vector(vec![0.7, -0.3]).unwrap());
            let parts: Vec<_> = weights
                .iter()
                .map(|&wt| {
                    let dot = tape.hadamard(wv, x).unwrap();
                    let ones = tape.input(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
                    let s = tape.matmul(ones, dot).unwrap();
                    let sq = tape.hadamard(s, s).unwrap();
                    tape.scale(sq, wt)
                })
                .collect();
            let total = tape.add_many(&parts).unwrap();
            tape.backward(total).unwrap();
            let mut g = GradMap::new();
            g.insert("w".into(), tape.grad(wv).to_vec());
            g
        };
        let w0 = Tensor::vector(vec![0.4, 1.1]).unwrap();
        let mut a = store_with("w", w0.data().to_vec());
        let mut b = store_with("w", w0.data().to_vec());
        let ga = loss_grad(&w0, &[0.5, 0.5]);
        let gb = loss_grad(&w0, &[1.0]);
        assert_eq!(ga, gb);
        a.adam_step(&ga, 0.01, 1.0).unwrap();
        b.adam_step(&gb, 0.01, 1.0).unwrap();
        assert_eq!(a.get("w").unwrap().data(), b.get("w").unwrap().data());
    }
}
