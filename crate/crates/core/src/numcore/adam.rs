use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore};
use crate::error::{ensure, Result};

/// Adam moments for one parameter group plus its hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    first: BTreeMap<ParamId, Vec<f64>>,
    second: BTreeMap<ParamId, Vec<f64>>,
}

impl AdamState {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of every parameter present in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            let p = store.get(id);
            ensure!(
                p.shape() == g.shape(),
                "gradient shape {:?} does not match parameter {} {:?}",
                g.shape(),
                store.name(id),
                p.shape()
            );
            if let Some(m) = self.first.get(&id) {
                ensure!(m.len() == g.len(), "moment buffer for {} has wrong size", store.name(id));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.params() {
            let n = g.len();
            let m = self.first.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(id).or_insert_with(|| vec![0.0; n]);
            let p = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.step(store, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{backward, Graph, Tensor};

    fn grad_of_linear(store: &ParamStore, p: ParamId, slope: f64) -> Gradients {
        // loss = slope · sum(p)
        let mut g = Graph::with_trainable([p]);
        let pn = g.param(store, p);
        let s = g.sum(pn);
        let l = g.scale(s, slope);
        backward(&g, l).unwrap()
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![0.7, -1.2]));
        let mut adam = AdamState::new(0.1);
        let grads = grad_of_linear(&store, p, 0.0);
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(p).data(), &[0.7, -1.2]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_is_sign_normalised() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![0.0]));
        let mut adam = AdamState::new(0.1);
        let grads = grad_of_linear(&store, p, 4.0);
        adam.step(&mut store, &grads).unwrap();
        // -lr · g / (|g| + eps)
        let expect = -0.1 * 4.0 / (4.0 + 1e-8);
        assert!((store.get(p).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn second_identical_step_keeps_magnitude() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![0.0]));
        let mut adam = AdamState::new(0.1);
        let grads = grad_of_linear(&store, p, 1.0);
        adam.step(&mut store, &grads).unwrap();
        let after_one = store.get(p).item();
        let grads = grad_of_linear(&store, p, 1.0);
        adam.step(&mut store, &grads).unwrap();
        let second = store.get(p).item() - after_one;
        assert!((second + 0.1).abs() < 1e-6, "second update {second}");
        assert_eq!(adam.steps(), 2);
    }
}
