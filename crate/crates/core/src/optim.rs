//! Adam and plateau-driven learning-rate control.

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for every trainable tensor, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = store.trainable().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    fn check(&self, store: &ParamStore<T>) -> Result<()> {
        let lens: Vec<usize> = store.trainable().map(|(_, p)| p.tensor.numel()).collect();
        let ok = lens.len() == self.m.len()
            && lens.len() == self.v.len()
            && lens.iter().zip(&self.m).zip(&self.v).all(|((&n, m), v)| m.len() == n && v.len() == n);
        if !ok {
            return Err(shape_err!("optimizer state does not match the parameter set"));
        }
        Ok(())
    }

    /// One bias-corrected update from the gradients held in `store`.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.check(store)?;
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be finite and non-negative")));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(c.eps));
        let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let tensor = &mut store.get_mut(id).tensor;
            let grad = tensor.grad().map(<[T]>::to_vec);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauConfig {
    /// Non-improving epochs before the learning rate is reduced.
    pub patience: usize,
    pub factor: f64,
    pub floor: f64,
    /// An epoch improves only if `val < best - min_delta`.
    pub min_delta: f64,
    /// Non-improving epochs before training stops.
    pub early_stop_patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { patience: 5, factor: 0.5, floor: 1e-6, min_delta: 1e-5, early_stop_patience: 15 }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be >= 1".into()));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) || !(self.floor >= 0.0) || !(self.min_delta >= 0.0) {
            return Err(Error::Config(format!("invalid plateau settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauDecision {
    pub improved: bool,
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub stop: bool,
}

/// Tracks validation loss across epochs and decides learning-rate cuts and
/// early stopping.
#[derive(Clone, Debug)]
pub struct PlateauController {
    config: PlateauConfig,
    lr: f64,
    best: f64,
    since_best: usize,
    since_cut: usize,
}

impl PlateauController {
    pub fn new(config: PlateauConfig, lr0: f64) -> Self {
        Self { config, lr: lr0.max(config.floor), best: f64::INFINITY, since_best: 0, since_cut: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> PlateauDecision {
        let improved = val_loss < self.best - self.config.min_delta;
        if improved {
            self.best = val_loss;
            self.since_best = 0;
            self.since_cut = 0;
        } else {
            self.since_best += 1;
            self.since_cut += 1;
            if self.since_cut >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.floor);
                self.since_cut = 0;
            }
        }
        PlateauDecision { improved, lr: self.lr, stop: self.since_best >= self.config.early_stop_patience }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamBuilder, ParamKind};

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut b = ParamBuilder::new(&mut s, 0);
        let id = b.constant("p", values.len(), 0.0, ParamKind::Trainable).unwrap();
        s.get_mut(id).tensor.data_mut().copy_from_slice(values);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[1.0, -2.0]);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.update(&mut s, 1e-3).unwrap();
        assert_eq!(s.flat_trainable(), vec![1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[1.0, 1.0]);
        let id = s.id_of("p").unwrap();
        s.get_mut(id).tensor.accumulate_grad(&[0.3, -5.0]).unwrap();
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.update(&mut s, 0.01).unwrap();
        let p = s.flat_trainable();
        assert!((p[0] - (1.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-12);
        assert!((p[1] - (1.0 + 0.01 * 5.0 / (5.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn plateau_cuts_and_stops() {
        let mut c = PlateauController::new(PlateauConfig::default(), 1e-4);
        assert!(c.observe(1.0).improved);
        let mut lrs = Vec::new();
        let mut stopped_at = None;
        for epoch in 2..=40 {
            let d = c.observe(1.0);
            lrs.push(d.lr);
            if d.stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(16));
        assert_eq!(lrs[3], 1e-4);
        assert_eq!(lrs[4], 5e-5);
        assert_eq!(lrs[9], 2.5e-5);
        assert!(!c.observe(1.0 - 1e-6).improved);
    }

    #[test]
    fn lr_never_below_floor() {
        let cfg = PlateauConfig { patience: 1, early_stop_patience: 100, ..Default::default() };
        let mut c = PlateauController::new(cfg, 1e-5);
        c.observe(0.0);
        for _ in 0..50 {
            assert!(c.observe(1.0).lr >= cfg.floor);
        }
        assert_eq!(c.lr(), cfg.floor);
    }
}
