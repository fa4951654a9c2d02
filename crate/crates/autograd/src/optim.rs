use crate::error::{invalid, Result, TensorError};
use crate::float::Float;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Parameters whose name starts with `prefix` use `lr` instead of the default.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub prefix: String,
    pub lr: f64,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub groups: Vec<ParamGroup>,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        Self {
            config,
            groups: Vec::new(),
            first: store.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
            second: store.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
            step: 0,
        }
    }

    pub fn with_group(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.groups.push(ParamGroup {
            prefix: prefix.into(),
            lr,
        });
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .find(|g| name.starts_with(&g.prefix))
            .map_or(self.config.lr, |g| g.lr)
    }

    /// First and second moment buffers, in store order.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<()> {
        if first.len() != self.first.len() || second.len() != self.second.len() {
            return Err(invalid("adamw restore", "moment count does not match parameters"));
        }
        for ((a, b), c) in first.iter().zip(&second).zip(&self.first) {
            if a.len() != c.len() || b.len() != c.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw restore",
                    lhs: vec![c.len()],
                    rhs: vec![a.len(), b.len()],
                });
            }
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Apply one update using each parameter's gradient buffer. Parameters
    /// without a gradient (or frozen) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: vec![store.len()],
                rhs: vec![self.first.len()],
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps) = (T::one(), T::lit(c.eps));
        let lrs: Vec<f64> = store.iter().map(|p| self.lr_for(&p.name)).collect();
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            if grad.len() != self.first[i].len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: vec![self.first[i].len()],
                });
            }
            let lr = T::lit(lrs[i]);
            let decay = one - lr * T::lit(c.weight_decay);
            let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (((w, &g), m), v) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(p: f64, g: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(p)).unwrap();
        store.get_mut(id).tensor.set_grad(vec![g]).unwrap();
        store
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut store = scalar_store(1.5, 0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..3 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.by_name("p").unwrap().tensor.data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g = 1, v_hat = 1 => p = 1 - 0.1 * 1 / (1 + 1e-8)
        let mut store = scalar_store(1.0, 1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store).unwrap();
        let p = store.by_name("p").unwrap().tensor.data()[0];
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient: only the -lr * lambda * p term acts
        let mut store = scalar_store(2.0, 0.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store).unwrap();
        let p = store.by_name("p").unwrap().tensor.data()[0];
        assert!((p - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn groups_override_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        for name in ["backbone.conv", "head.w"] {
            let id = store.add(name, Tensor::scalar(1.0)).unwrap();
            store.get_mut(id).tensor.set_grad(vec![1.0]).unwrap();
        }
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store).with_group("backbone.", 0.01);
        opt.step(&mut store).unwrap();
        let bb = store.by_name("backbone.conv").unwrap().tensor.data()[0];
        let head = store.by_name("head.w").unwrap().tensor.data()[0];
        assert!((1.0 - bb - 0.01).abs() < 1e-7);
        assert!((1.0 - head - 0.1).abs() < 1e-7);
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let store = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let mut other = ParamStore::<f64>::new();
        assert!(opt.step(&mut other).is_err());
    }
}
