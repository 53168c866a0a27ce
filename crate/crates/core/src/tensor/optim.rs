use super::{ParamStore, Real, Tensor};
use crate::error::{config_err, contract_err, Result};

/// Learning rate held constant for the first half of training, then decayed
/// linearly to zero over the second half.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub total: usize,
}

impl LrSchedule {
    /// Learning rate at progress `t` (steps or epochs, same unit as `total`).
    pub fn at(&self, t: usize) -> f64 {
        let half = self.total as f64 / 2.0;
        let t = t as f64;
        if t < half || half == 0.0 {
            self.base
        } else {
            (self.base * (self.total as f64 - t) / half).max(0.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; one moment pair per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || cfg.eps <= 0.0 {
            return config_err(format!("invalid Adam hyper-parameters {cfg:?}"));
        }
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Ok(Self {
            cfg,
            step: 0,
            first: zeros(),
            second: zeros(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update with learning rate `lr` using the gradients held in
    /// `store`. Every trainable parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.len() != self.first.len() {
            return contract_err("optimizer state does not match the parameter store");
        }
        if let Some(p) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return contract_err(format!("parameter {} has no gradient", p.1.name));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.trainable {
                continue;
            }
            let g = p.grad.as_ref().expect("checked above");
            let vals = p.value.data_mut();
            for (((x, &g), m), v) in vals
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1t * *m + one_b1 * g;
                *v = b2t * *v + one_b2 * g * g;
                let mh = m.as_f64() / c1;
                let vh = v.as_f64() / c2;
                *x -= T::lit(lr * mh / (vh.sqrt() + self.cfg.eps));
            }
        }
        Ok(())
    }
}
