use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Linear warm-up to `peak`, then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            peak: lr,
            warmup_steps: 0,
            total_steps: u64::MAX,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == u64::MAX {
            return self.peak;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        self.peak * (self.total_steps - step) as f64 / span
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

/// Adam with bias correction and a scheduled learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    schedule: LrSchedule,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig, schedule: LrSchedule) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            cfg,
            schedule,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.at(self.steps + 1)
    }

    /// Applies one update from the accumulated gradients; returns the rate used.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        if store.len() != self.first.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for p in store.iter_mut() {
            if let Some(bad) = p.grad.data().iter().find(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {bad} in parameter `{}`",
                    p.name
                )));
            }
        }
        self.steps += 1;
        let lr = self.schedule.at(self.steps);
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                md[k] = beta1 * md[k] + (1.0 - beta1) * g[k];
                vd[k] = beta2 * vd[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        store.scale_grads(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            peak: 1e-3,
            warmup_steps: 10,
            total_steps: 110,
        }
    }

    #[test]
    fn schedule_shape() {
        let s = sched();
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(10), 1e-3);
        assert_eq!(s.at(110), 0.0);
        assert!((s.at(5) - 5e-4).abs() < 1e-18);
        assert!((s.at(60) - 5e-4).abs() < 1e-18);
        // continuity at the boundary
        assert!((s.at(9) - s.at(10)).abs() <= 1e-4 + 1e-18);
        assert!((s.at(11) - s.at(10)).abs() <= 1e-5 + 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = store.clone();
        let mut opt = Adam::new(&store, AdamConfig::default(), sched());
        for _ in 0..5 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.value(crate::tensor::ParamId(0)), before.value(crate::tensor::ParamId(0)));
    }

    #[test]
    fn first_step_is_sign_of_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[3], vec![0.0; 3]).unwrap());
        store.iter_mut().next().unwrap().grad = Tensor::new(&[3], vec![3.0, -0.2, 50.0]).unwrap();
        let mut opt = Adam::new(&store, AdamConfig::default(), LrSchedule::constant(0.01));
        opt.step(&mut store).unwrap();
        let w = store.value(id).data();
        for (wv, s) in w.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((wv - 0.01 * s).abs() < 1e-8, "{wv}");
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.add("encoder.w", Tensor::zeros(&[2]));
        store.iter_mut().next().unwrap().grad = Tensor::new(&[2], vec![0.0, f64::NAN]).unwrap();
        let mut opt = Adam::new(&store, AdamConfig::default(), LrSchedule::constant(0.1));
        let err = opt.step(&mut store).unwrap_err().to_string();
        assert!(err.contains("encoder.w"), "{err}");
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2]));
        store.iter_mut().next().unwrap().grad = Tensor::new(&[2], vec![30.0, 40.0]).unwrap();
        let n = clip_grad_norm(&mut store, 5.0);
        assert_eq!(n, 50.0);
        let g = store.iter().next().unwrap().1.grad.data().to_vec();
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
    }
}
