//! Adam and RAdam with per-group learning rates and global-norm clipping.

use super::config::OptimizerKind;
use crate::numerics::{Grads, ParamGroup, ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr_lm: f64,
    pub lr_other: f64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    /// Update count per parameter; frozen parameters do not advance.
    steps: Vec<u64>,
}

/// Scales `grads` in place so the global norm over `active` parameters is
/// at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads<f32>, active: &[bool], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .0
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(t, _)| t.sq_norm())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for (t, _) in grads.0.iter_mut().zip(active).filter(|(_, &a)| a) {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore<f32>, lr_lm: f64, lr_other: f64) -> Self {
        let zeros: Vec<Tensor<f32>> = params.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            kind,
            lr_lm,
            lr_other,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        }
    }

    /// RAdam's variance rectification factor at step `t`, or `None` while
    /// the variance estimate is not yet tractable.
    pub fn rectification(t: u64) -> Option<f64> {
        let rho_inf = 2.0 / (1.0 - BETA2) - 1.0;
        let b2t = BETA2.powi(t as i32);
        let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        (rho > 5.0).then(|| ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt())
    }

    /// Applies one update to every parameter with `active[i]`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>, active: &[bool]) {
        for (i, p) in params.iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i];
            let lr = match p.group {
                ParamGroup::Lm => self.lr_lm,
                ParamGroup::Other => self.lr_other,
            };
            let bc1 = 1.0 - BETA1.powi(t as i32);
            let bc2 = 1.0 - BETA2.powi(t as i32);
            let rect = match self.kind {
                OptimizerKind::Adam => Some(1.0),
                OptimizerKind::RAdam => Self::rectification(t),
            };
            let g = grads.0[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, x) in p.tensor.data_mut().iter_mut().enumerate() {
                let gk = g[k] as f64;
                let mk = BETA1 * m[k] as f64 + (1.0 - BETA1) * gk;
                let vk = BETA2 * v[k] as f64 + (1.0 - BETA2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let mhat = mk / bc1;
                let upd = match rect {
                    Some(r) => lr * r * mhat / ((vk / bc2).sqrt() + EPS),
                    None => lr * mhat,
                };
                *x = (*x as f64 - upd) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), ParamGroup::Other)
            .unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &s, 0.0, 0.1);
        let g = Grads(vec![Tensor::new(vec![1, 2], vec![3.0, -0.5]).unwrap()]);
        opt.step(&mut s, &g, &[true]);
        let w = s.tensor(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn inactive_parameters_are_untouched() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::filled(&[1, 2], 0.5), ParamGroup::Lm).unwrap();
        s.add("b", Tensor::filled(&[1, 2], 0.5), ParamGroup::Other).unwrap();
        let before = s.clone();
        let mut opt = Optimizer::new(OptimizerKind::RAdam, &s, 0.1, 0.1);
        let g = Grads(vec![Tensor::filled(&[1, 2], 1.0), Tensor::filled(&[1, 2], 1.0)]);
        for _ in 0..10 {
            opt.step(&mut s, &g, &[false, true]);
        }
        assert_eq!(
            s.tensor(crate::numerics::ParamId(0)),
            before.tensor(crate::numerics::ParamId(0))
        );
        assert_ne!(
            s.tensor(crate::numerics::ParamId(1)),
            before.tensor(crate::numerics::ParamId(1))
        );
    }

    #[test]
    fn radam_warms_up_before_rectifying() {
        assert!(Optimizer::rectification(1).is_none());
        assert!(Optimizer::rectification(5).is_none());
        let r = Optimizer::rectification(1000).unwrap();
        assert!(r > 0.0 && r < 1.0);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_limit(vals in proptest::collection::vec(-100f32..100.0, 1..40), max in 0.01f64..10.0) {
            let n = vals.len();
            let mut g = Grads(vec![Tensor::new(vec![1, n], vals).unwrap()]);
            clip_grad_norm(&mut g, &[true], max);
            prop_assert!(g.global_norm() <= max + 1e-6);
        }
    }
}
