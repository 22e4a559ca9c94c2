//! Adam with bias correction and a step-decay learning-rate schedule.

use super::TrainError;
use crate::swinsf::{AdamSnapshot, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// `lr0 · 0.5^⌊epoch / decay_every⌋`
pub fn lr_at(lr0: f64, epoch: u64, decay_every: u64) -> f64 {
    assert!(decay_every >= 1, "decay_every must be at least 1");
    lr0 * 0.5f64.powi((epoch / decay_every).min(i32::MAX as u64) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }

    pub fn from_snapshot(s: AdamSnapshot, lr: f64) -> Self {
        OptimizerState {
            m: s.m,
            v: s.v,
            step: s.step,
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }

    pub fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn adam_step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<(), TrainError> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| TrainError::Contract(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(TrainError::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if self.m.get(name).is_none_or(|m| m.shape() != p.shape()) {
                return Err(TrainError::Contract(format!("optimizer state does not cover {name}")));
            }
        }
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked").data();
            let m = self.m.get_mut(name).expect("checked").data_mut();
            let v = self.v.get_mut(name).expect("checked").data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Rounds parameters and moments to `f32` so a saved checkpoint resumes exactly.
    pub fn round_to_f32(&mut self, params: &mut ParamStore) {
        for store in [params, &mut self.m, &mut self.v] {
            round_store(store);
        }
    }
}

pub(crate) fn round_store(store: &mut ParamStore) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("w", Tensor::new(&[1], vec![v]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_store(0.7);
        let mut st = OptimizerState::new(&p, 1e-3);
        for _ in 0..3 {
            st.adam_step(&mut p, &scalar_store(0.0)).unwrap();
        }
        assert_eq!(p, scalar_store(0.7));
        assert_eq!(st.step, 3);
    }

    #[test]
    fn unit_gradient_trace() {
        // independent scalar recurrence
        let (lr, mut m, mut v, mut w) = (0.01, 0.0f64, 0.0f64, 0.0f64);
        let mut p = scalar_store(0.0);
        let mut st = OptimizerState::new(&p, lr);
        for t in 1..=5 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            w -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            st.adam_step(&mut p, &scalar_store(1.0)).unwrap();
            assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-15);
            if t == 1 {
                // off from -lr only by the eps term
                assert!((w + lr).abs() < 1e-7 * lr);
            }
        }
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut p = scalar_store(0.0);
        let mut st = OptimizerState::new(&p, 1e-3);
        let err = st.adam_step(&mut p, &ParamStore::default()).unwrap_err();
        assert!(err.to_string().contains("w"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn step_decay() {
        assert_eq!(lr_at(1e-4, 0, 300), 1e-4);
        assert_eq!(lr_at(1e-4, 299, 300), 1e-4);
        assert_eq!(lr_at(1e-4, 300, 300), 5e-5);
        let mut prev = f64::INFINITY;
        for e in 0..1000 {
            let lr = lr_at(1e-4, e, 100);
            assert!(lr <= prev);
            if e % 100 == 0 && e > 0 {
                assert_eq!(lr, prev / 2.0);
            }
            prev = lr;
        }
    }
}
