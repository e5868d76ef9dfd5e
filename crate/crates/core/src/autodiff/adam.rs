use super::params::ParamStore;
use super::tensor::Tensor;
use super::AutodiffError;

/// Adam optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's accumulated gradients.
    ///
    /// A non-finite gradient leaves every parameter untouched and returns
    /// [`AutodiffError::Diverged`].
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), AutodiffError> {
        let (values, grads) = store.values_and_grads_mut();
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(AutodiffError::Diverged(format!("non-finite gradient in parameter #{i}")));
        }
        if self.m.len() != values.len() {
            self.m = values.iter().map(|v| Tensor::zeros(v.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in values.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
