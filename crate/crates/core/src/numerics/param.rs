use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor together with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// `None` until a backward pass (or [`ParamStore::zero_grad`]) fills it.
    pub grad: Option<Vec<f64>>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_count: u64,
}

impl Parameter {
    fn new(name: String, tensor: Tensor) -> Self {
        let n = tensor.numel();
        Self {
            name,
            tensor,
            grad: None,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }
}

/// Named, ordered collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, tensor));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Sets every gradient to an all-zero buffer.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Some(vec![0.0; p.tensor.numel()]);
        }
    }

    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        let n = p.tensor.numel();
        let acc = p.grad.get_or_insert_with(|| vec![0.0; n]);
        for (a, e) in acc.iter_mut().zip(g) {
            *a += e;
        }
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale_grad(&mut self, factor: f64) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            for e in g.iter_mut() {
                *e *= factor;
            }
        }
    }

    /// Global L2 norm of all gradients present.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|e| e * e)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grad(max_norm / norm);
        }
        norm
    }

    /// `(name, L2 norm)` of every parameter value, used in diagnostics.
    pub fn value_norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect()
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to every parameter and clears the gradients.
    pub fn step(&self, store: &mut ParamStore) -> Result<(), NumericsError> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(NumericsError::MissingGradient(p.name.clone()));
        }
        for p in &mut store.params {
            let grad = p.grad.take().expect("checked above");
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                p.adam_m[i] = self.beta1 * p.adam_m[i] + (1.0 - self.beta1) * g;
                p.adam_v[i] = self.beta2 * p.adam_v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.adam_m[i] / bc1;
                let v_hat = p.adam_v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value)).unwrap();
        (s, id)
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(
            s.add("a", Tensor::scalar(1.0)),
            Err(NumericsError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut s, id) = scalar_store(0.7);
        s.zero_grad();
        Adam::new(1e-3).step(&mut s).unwrap();
        assert_eq!(s.get(id).tensor.data(), &[0.7]);
        assert_eq!(s.get(id).step_count, 1);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let lr = 3e-4;
        let (mut s, id) = scalar_store(0.0);
        s.zero_grad();
        s.add_grad(id, &[1.0]);
        Adam::new(lr).step(&mut s).unwrap();
        let delta = s.get(id).tensor.data()[0].abs();
        assert!(delta > 0.99 * lr && delta <= lr, "{delta}");
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let (mut s, _) = scalar_store(0.0);
        let err = Adam::new(1e-3).step(&mut s).unwrap_err();
        assert_eq!(err, NumericsError::MissingGradient("p".into()));
    }

    #[test]
    fn matches_scalar_reference_over_two_steps() {
        // Reference written out longhand.
        fn reference(mut x: f64, g: f64, lr: f64, steps: i32) -> f64 {
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            let (mut m, mut v) = (0.0, 0.0);
            for t in 1..=steps {
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t));
                let vh = v / (1.0 - b2.powi(t));
                x -= lr * mh / (vh.sqrt() + eps);
            }
            x
        }
        let (mut s, id) = scalar_store(0.25);
        for _ in 0..2 {
            s.zero_grad();
            s.add_grad(id, &[-0.4]);
            Adam::new(1e-2).step(&mut s).unwrap();
        }
        let got = s.get(id).tensor.data()[0];
        assert!((got - reference(0.25, -0.4, 1e-2, 2)).abs() <= 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (mut s, id) = scalar_store(1.5);
        s.zero_grad();
        s.add_grad(id, &[3.0]);
        Adam::new(0.0).step(&mut s).unwrap();
        assert_eq!(s.get(id).tensor.data(), &[1.5]);
    }
}
