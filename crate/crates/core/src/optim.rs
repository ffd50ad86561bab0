//! Adam and the step learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::nn::{ParamId, ParamKind, ParamStore};
use crate::{math, Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moments per parameter, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor, &Tensor)> {
        self.moments.iter().map(|(id, (m, v))| (*id, m, v))
    }

    /// Resume from a saved step count and moments.
    pub fn restore(&mut self, step: u64, moments: Vec<(ParamId, Tensor, Tensor)>) {
        self.step = step;
        self.moments = moments.into_iter().map(|(id, m, v)| (id, (m, v))).collect();
    }

    /// Apply one update with learning rate `lr`. Parameters without a gradient
    /// are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - math::powi(c.beta1, self.step as i32);
        let bias2 = 1.0 - math::powi(c.beta2, self.step as i32);
        for (id, g) in grads {
            if store.entry(*id).kind != ParamKind::Learnable {
                continue;
            }
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(shape_err!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i] + c.weight_decay * pd[i];
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let mh = md[i] / bias1;
                let vh = vd[i] / bias2;
                pd[i] -= lr * mh / (math::sqrt(vh) + c.eps);
            }
        }
        Ok(())
    }
}

/// `base * gamma^min(floor(epoch / step), max_decays)`, epochs counted from 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub step_epochs: usize,
    pub gamma: f64,
    pub max_decays: usize,
}

impl LrSchedule {
    pub fn new(base: f64) -> Self {
        Self {
            base,
            step_epochs: 50,
            gamma: 0.1,
            max_decays: 3,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.step_epochs.max(1)).min(self.max_decays);
        self.base * math::powi(self.gamma, decays as i32)
    }
}

/// Ids of all learnable parameters, in registration order.
pub fn learnable_ids(store: &ParamStore) -> Vec<ParamId> {
    store.learnable().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_three_times() {
        let s = LrSchedule::new(1e-4);
        assert_eq!(s.lr(0), 1e-4);
        assert_eq!(s.lr(49), 1e-4);
        assert!((s.lr(50) - 1e-5).abs() < 1e-18);
        assert!((s.lr(100) - 1e-6).abs() < 1e-19);
        assert!((s.lr(150) - 1e-7).abs() < 1e-20);
        assert_eq!(s.lr(400), s.lr(150));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Learnable, Tensor::new(&[2], alloc::vec![1.0, -1.0]).unwrap());
        let buf = store.add("b", ParamKind::Buffer, Tensor::zeros(&[1]));
        let mut adam = Adam::new(AdamConfig::default());
        let g = Tensor::new(&[2], alloc::vec![3.0, -0.5]).unwrap();
        adam.step(&mut store, &[(id, g), (buf, Tensor::full(&[1], 1.0))], 0.1).unwrap();
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.get(buf).data(), &[0.0]);
    }
}
