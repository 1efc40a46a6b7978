//! Adam optimizer with bias correction.

use crate::numerics::params::ParamSet;

pub struct AdamState {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh optimizer state shaped after `params`, with the standard
    /// (β1 = 0.9, β2 = 0.999, ε = 1e-8) defaults.
    pub fn new(learning_rate: f64, params: &ParamSet) -> Self {
        let m = params.ids().map(|id| vec![0.0; params.tensor(id).len()]).collect();
        let v = params.ids().map(|id| vec![0.0; params.tensor(id).len()]).collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// One update over every parameter. `grads` must be in parameter order
    /// (as produced by `Lease::collect_grads` / `zero_grads`).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), params.len(), "adam: gradient count mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = params.tensor_mut(id).data_mut();
            assert_eq!(g.len(), data.len(), "adam: gradient shape mismatch");
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }

    /// Raw state for checkpointing: (first moments, second moments, step).
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>], u64) {
        (&self.m, &self.v, self.step_count)
    }

    /// Restore from checkpointed state. Shapes must match the parameter set
    /// this state was built for.
    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step_count: u64) {
        assert_eq!(m.len(), self.m.len(), "adam restore: moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "adam restore: moment count mismatch");
        for (new, old) in m.iter().zip(&self.m) {
            assert_eq!(new.len(), old.len(), "adam restore: moment shape mismatch");
        }
        for (new, old) in v.iter().zip(&self.v) {
            assert_eq!(new.len(), old.len(), "adam restore: moment shape mismatch");
        }
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }
}
