//! Mini-batch SGD with momentum, L2 decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Per-epoch learning-rate profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// `lr * (1 - decay)^epoch`.
    Decay { decay: f64 },
}

impl Schedule {
    /// Multiply by 0.9 per epoch.
    pub const LSTM: Schedule = Schedule::Decay { decay: 0.1 };
    /// Multiply by 0.75 per epoch.
    pub const CRF: Schedule = Schedule::Decay { decay: 0.25 };

    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Decay { decay } => base * (1.0 - decay).powi(epoch as i32),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Schedule::Decay { decay } if !(decay > 0.0 && decay <= 1.0) => {
                Err(format!("schedule decay must lie in (0, 1], got {decay}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub schedule: Schedule,
}

impl SgdConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0) {
            return Err(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.clip > 0.0) {
            return Err(format!("clip norm must be positive, got {}", self.clip));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("non-finite gradient in parameter {param}")]
pub struct NonFiniteGradient {
    pub param: usize,
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One update of every trainable entry of `store`. Frozen entries are left
/// out of the norm, the decay and the momentum buffers.
pub fn sgd_step<F: Scalar>(
    store: &mut ParamStore<F>,
    grads: &[Tensor<F>],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    clip: f64,
) -> Result<StepInfo, NonFiniteGradient> {
    assert_eq!(grads.len(), store.len(), "one gradient per parameter");
    if state.velocity.is_empty() {
        state.velocity = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    }
    let mut sq = 0.0;
    for (i, (p, g)) in store.params().iter().zip(grads).enumerate() {
        for (j, v) in g.data().iter().enumerate() {
            if p.is_frozen(j) {
                continue;
            }
            let v = v.as_f64();
            if !v.is_finite() {
                return Err(NonFiniteGradient { param: i });
            }
            sq += v * v;
        }
    }
    let grad_norm = sq.sqrt();
    let scale = if grad_norm > clip { clip / grad_norm } else { 1.0 };
    for (i, g) in grads.iter().enumerate() {
        let frozen = store.params()[i].frozen.clone();
        let vel = &mut state.velocity[i];
        let theta = store.value_mut(i).data_mut();
        for (j, gj) in g.data().iter().enumerate() {
            if frozen.as_ref().is_some_and(|m| m[j]) {
                continue;
            }
            let t = theta[j].as_f64();
            let d = gj.as_f64() * scale + weight_decay * t;
            vel[j] = momentum * vel[j] - lr * d;
            theta[j] = F::of(t + vel[j]);
        }
    }
    Ok(StepInfo {
        grad_norm,
        clipped: scale < 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64], frozen: Option<Vec<bool>>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let t = Tensor::new(vec![values.len()], values.to_vec()).unwrap();
        s.register_fixed("w", t, frozen).unwrap();
        s
    }

    fn grad(v: &[f64]) -> Vec<Tensor<f64>> {
        vec![Tensor::new(vec![v.len()], v.to_vec()).unwrap()]
    }

    #[test]
    fn vanilla_step() {
        let mut s = store(&[1.0, 2.0], None);
        let mut st = SgdState::default();
        sgd_step(&mut s, &grad(&[0.5, -1.0]), &mut st, 0.1, 0.0, 0.0, 10.0).unwrap();
        assert_eq!(s.params()[0].value.data(), &[0.95, 2.1]);
    }

    #[test]
    fn clipping_halves() {
        let mut s = store(&[0.0, 0.0], None);
        let mut st = SgdState::default();
        let info = sgd_step(&mut s, &grad(&[12.0, 16.0]), &mut st, 1.0, 0.0, 0.0, 10.0).unwrap();
        assert_eq!(info.grad_norm, 20.0);
        assert!(info.clipped);
        assert_eq!(s.params()[0].value.data(), &[-6.0, -8.0]);
    }

    #[test]
    fn momentum_recurrence() {
        let mut s = store(&[0.0], None);
        let mut st = SgdState::default();
        for _ in 0..2 {
            sgd_step(&mut s, &grad(&[1.0]), &mut st, 0.1, 0.9, 0.0, 10.0).unwrap();
        }
        assert!((st.velocity[0][0] + 0.19).abs() < 1e-15);
        assert!((s.params()[0].value.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_and_frozen_entries() {
        let mut s = store(&[1.0, -1e9], Some(vec![false, true]));
        let mut st = SgdState::default();
        // the frozen gradient would dominate the norm if it were counted
        let info = sgd_step(&mut s, &grad(&[0.0, 1e6]), &mut st, 0.5, 0.9, 0.1, 10.0).unwrap();
        assert_eq!(info.grad_norm, 0.0);
        assert_eq!(s.params()[0].value.data(), &[0.95, -1e9]);
        assert_eq!(st.velocity[0][1], 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        let mut s = store(&[1.0], None);
        let err = sgd_step(&mut s, &grad(&[f64::NAN]), &mut SgdState::default(), 0.1, 0.0, 0.0, 1.0);
        assert_eq!(err, Err(NonFiniteGradient { param: 0 }));
        assert_eq!(s.params()[0].value.data(), &[1.0]);
    }

    #[test]
    fn schedules() {
        assert!((Schedule::CRF.lr(0.01, 2) - 0.005625).abs() < 1e-15);
        assert_eq!(Schedule::LSTM.lr(0.01, 0), 0.01);
        assert_eq!(Schedule::Constant.lr(0.01, 7), 0.01);
        assert!(Schedule::Decay { decay: 0.0 }.validate().is_err());
    }
}
