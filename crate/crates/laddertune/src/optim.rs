//! Adam with bias correction. State tensors exist only for parameters that
//! have actually received a gradient, which keeps optimizer memory at two
//! extra buffers per trainable tensor and zero for everything frozen.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Elem, GradMap};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct Adam<E> {
    cfg: AdamConfig,
    steps: u64,
    m: BTreeMap<String, Vec<E>>,
    v: BTreeMap<String, Vec<E>>,
}

impl<E: Elem> Adam<E> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &GradMap<E>) -> Result<()> {
        self.steps += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.steps as i32);
        let lr = E::from_f64(self.cfg.lr);
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.cfg.beta2);
        let inv_bc1 = E::from_f64(1.0 / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);
        let eps = E::from_f64(self.cfg.eps);

        for (name, grad) in grads.iter() {
            let entry = store.get_mut(name)?;
            if !entry.trainable {
                return Err(Error::Contract(format!(
                    "gradient supplied for frozen parameter `{name}`"
                )));
            }
            let n = entry.tensor.numel();
            if grad.numel() != n {
                return Err(Error::Shape {
                    op: "adam",
                    detail: format!(
                        "gradient for `{name}` has {} elements, parameter has {n}",
                        grad.numel()
                    ),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![E::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![E::zero(); n]);
            let p = entry.tensor.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Total bytes of first- and second-moment state currently allocated.
    pub fn state_bytes(&self) -> u64 {
        let elems: usize = self.m.values().map(Vec::len).sum::<usize>()
            + self.v.values().map(Vec::len).sum::<usize>();
        (elems * E::DTYPE.width()) as u64
    }
}
