use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tape::GradBuffer;
use super::tensor::ParamStore;
use super::NnError;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl AdamState {
    /// Default hyperparameters with moment buffers sized for `store`.
    pub fn new<F: Scalar>(store: &ParamStore<F>) -> Self {
        let mut s = Self::default();
        s.init(store);
        s
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn init<F: Scalar>(&mut self, store: &ParamStore<F>) {
        self.m = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        self.v = self.m.clone();
        self.step = 0;
    }

    pub fn is_initialized(&self) -> bool {
        !self.m.is_empty()
    }

    /// One update of every parameter from `grads`.
    pub fn update<F: Scalar>(&mut self, store: &mut ParamStore<F>, grads: &GradBuffer<F>) -> Result<(), NnError> {
        if !self.is_initialized() && !store.is_empty() {
            return Err(NnError::Optimizer("moment buffers not initialized".into()));
        }
        if self.m.len() != store.len() || grads.grads.len() != store.len() {
            return Err(NnError::Optimizer("parameter count changed since init".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads.grads[i];
            let p = store.get_mut(id).data_mut();
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(NnError::Optimizer(format!("buffer shape mismatch for parameter {i}")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j].to_f64_lossy();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let step = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] = F::from_f64_lossy(p[j].to_f64_lossy() - step);
            }
        }
        Ok(())
    }
}
