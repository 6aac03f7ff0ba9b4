use super::param::ParamStore;
use super::tensor::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Upper bound on the global gradient norm. `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            clip_norm: 5.0,
        }
    }
}

/// What one step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global norm of the trainable gradients before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradients (1 when no clipping happened).
    pub clip_scale: f64,
}

/// One SGD-with-momentum update over every trainable parameter.
///
/// Gradients are first rescaled so their global norm is at most
/// `clip_norm`, then `weight_decay * value` is added, then
/// `buf = momentum * buf + grad` and `value -= lr * buf`. Frozen parameters
/// are not touched at all. A non-finite gradient aborts before anything is
/// modified.
pub fn sgd_momentum_step<T: Real>(store: &mut ParamStore<T>, cfg: &SgdConfig) -> Result<StepStats> {
    let mut sq = 0.0f64;
    for p in store.iter().filter(|p| p.trainable) {
        for (i, g) in p.grad.data().iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at flat index {i} is {g}",
                    p.name
                )));
            }
            let g = g.as_f64();
            sq += g * g;
        }
    }
    let grad_norm = sq.sqrt();
    let clip_scale = if grad_norm > cfg.clip_norm { cfg.clip_norm / grad_norm } else { 1.0 };
    let (scale, lr, mom, wd) = (T::of(clip_scale), T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for p in store.iter_mut().filter(|p| p.trainable) {
        let value = p.value.data_mut();
        let grad = p.grad.data();
        let buf = p.momentum_buf.data_mut();
        for ((v, &g), b) in value.iter_mut().zip(grad).zip(buf.iter_mut()) {
            let g = g * scale + wd * *v;
            *b = mom * *b + g;
            *v -= lr * *b;
        }
    }
    Ok(StepStats { grad_norm, clip_scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamStore, StageTag, Tensor};

    fn scalar_store(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v), StageTag::Head);
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn one_step_by_hand() {
        let mut s = scalar_store(1.0, 2.0);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0, clip_norm: f64::INFINITY };
        sgd_momentum_step(&mut s, &cfg).unwrap();
        assert!((s.iter().next().unwrap().value.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_leave_params_alone() {
        let mut s = scalar_store(0.37, 0.0);
        let cfg = SgdConfig { weight_decay: 0.0, ..SgdConfig::default() };
        sgd_momentum_step(&mut s, &cfg).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item(), 0.37);
    }

    #[test]
    fn global_norm_clip() {
        // two params with grads (30, 40): global norm 50
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::scalar(0.0), StageTag::Head);
        let b = s.add("b", Tensor::scalar(0.0), StageTag::Upper);
        s.get_mut(a).grad = Tensor::scalar(30.0);
        s.get_mut(b).grad = Tensor::scalar(40.0);
        let cfg = SgdConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.0, clip_norm: 5.0 };
        let st = sgd_momentum_step(&mut s, &cfg).unwrap();
        assert!((st.grad_norm - 50.0).abs() < 1e-12);
        assert!((st.clip_scale - 0.1).abs() < 1e-15);
        assert!((s.get(a).value.item() + 3.0).abs() < 1e-12);
        assert!((s.get(b).value.item() + 4.0).abs() < 1e-12);
    }

    #[test]
    fn momentum_accumulates() {
        let mut s = scalar_store(0.0, 1.0);
        let cfg = SgdConfig { lr: 1.0, momentum: 0.9, weight_decay: 0.0, clip_norm: f64::INFINITY };
        sgd_momentum_step(&mut s, &cfg).unwrap();
        sgd_momentum_step(&mut s, &cfg).unwrap();
        // buf: 1, then 1.9; value: -1 - 1.9
        assert!((s.iter().next().unwrap().value.item() + 2.9).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut s = scalar_store(1.0, f64::NAN);
        let err = sgd_momentum_step(&mut s, &SgdConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(s.iter().next().unwrap().value.item(), 1.0);
    }

    #[test]
    fn frozen_params_are_bit_identical() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap(), StageTag::Lower);
        let b = s.add("b", Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), StageTag::Head);
        s.set_trainable_stages(&[StageTag::Head]);
        let before = s.get(a).value.clone();
        for _ in 0..25 {
            s.get_mut(a).grad = Tensor::new(&[3], vec![5.0, 5.0, 5.0]).unwrap();
            s.get_mut(b).grad = Tensor::new(&[2], vec![0.5, -0.5]).unwrap();
            sgd_momentum_step(&mut s, &SgdConfig::default()).unwrap();
        }
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s.get(a).value), bits(&before));
        assert_ne!(s.get(b).value.data(), &[1.0, 2.0]);
    }
}
