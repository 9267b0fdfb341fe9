use crate::error::{NumError, Result};
use crate::params::ParamStore;

/// Adam hyperparameters plus the warmup/exponential-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Multiplicative learning-rate decay applied per step after warmup.
    pub decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            peak_lr: 1e-3,
            warmup_steps: 200,
            decay: half_life_decay(2000),
            clip_norm: Some(5.0),
        }
    }
}

/// Per-step decay factor that halves the learning rate every `steps` steps.
pub fn half_life_decay(steps: usize) -> f64 {
    0.5f64.powf(1.0 / steps.max(1) as f64)
}

impl AdamConfig {
    /// Learning rate used for the (0-based) update `step`.
    ///
    /// Linear warmup reaches `peak_lr` at step `warmup - 1`; afterwards
    /// `lr = peak * decay^(step - warmup)`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.peak_lr * self.decay.powf((step - self.warmup_steps) as f64)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        let v = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one Adam update to every non-frozen parameter, then zeroes all
    /// gradients. Returns the learning rate that was used.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        if !store.grads_ready() {
            return Err(NumError::Usage(
                "optimizer step called before backward".into(),
            ));
        }
        if self.m.len() != store.len() {
            return Err(NumError::Usage(format!(
                "optimizer built for {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = store.grad_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let gj = grad[j] * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                value[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn cfg(warmup: usize, decay: f64) -> AdamConfig {
        AdamConfig {
            peak_lr: 0.01,
            warmup_steps: warmup,
            decay,
            clip_norm: None,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn linear_warmup_first_step() {
        let c = cfg(10, 0.99);
        assert!((c.lr_at(0) - 0.001).abs() < 1e-15);
        assert!((c.lr_at(9) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn exponential_decay_after_warmup() {
        let c = cfg(10, 0.99);
        for k in [0usize, 1, 7, 100] {
            let expected = 0.01 * 0.99f64.powi(k as i32);
            assert!((c.lr_at(10 + k) - expected).abs() < 1e-15);
        }
        assert!((half_life_decay(2000).powi(2000) - 0.5).abs() < 1e-12);
    }

    fn constant_grad_step(store: &mut ParamStore, g: f64) {
        let id = store.ids().next().unwrap();
        store.get_mut(id).grad = Tensor::filled(store.get(id).value.shape(), g);
        store.mark_grads_ready();
    }

    #[test]
    fn adam_asymptote_is_sign_of_gradient() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::zeros(&[2]));
        let c = AdamConfig {
            decay: 1.0,
            ..cfg(1, 1.0)
        };
        let mut opt = Adam::new(c, &store);
        for _ in 0..500 {
            constant_grad_step(&mut store, 0.37);
            opt.step(&mut store).unwrap();
        }
        let before = store.get(crate::ParamId(0)).value.data()[0];
        constant_grad_step(&mut store, 0.37);
        opt.step(&mut store).unwrap();
        let after = store.get(crate::ParamId(0)).value.data()[0];
        let delta = after - before;
        assert!((delta + 0.01).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.add("frozen.a", Tensor::filled(&[3], 1.0));
        let b = store.add("live.b", Tensor::filled(&[3], 1.0));
        store.set_frozen_prefix("frozen.", true);
        let mut opt = Adam::new(cfg(1, 1.0), &store);
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let bv = g.param(&store, b);
        let s = g.mul(av, bv).unwrap();
        let l = g.sum(s);
        g.backward(l, &mut store).unwrap();
        assert!(store.get(a).grad.data().iter().all(|&x| x == 1.0));
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(a).value.data(), &[1.0, 1.0, 1.0]);
        assert!(store.get(b).value.data()[0] < 1.0);
    }

    #[test]
    fn step_before_backward_is_usage_error() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::zeros(&[1]));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        assert!(matches!(opt.step(&mut store), Err(NumError::Usage(_))));
    }
}
