use ndarray::Zip;

use super::FreezePlan;
use crate::config::TrainConfig;
use crate::nn::{Gradients, ParamStore};
use crate::Scalar;

/// Adam with bias correction, no weight decay. Moments of parameters that
/// the plan freezes are never touched and stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Gradients<T>,
    pub v: Gradients<T>,
    /// Number of updates applied so far.
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, plan: &FreezePlan) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, lr, eps) = (T::one(), T::of(self.lr), T::of(self.eps));
        let c1 = one - T::of(self.beta1.powi(t));
        let c2 = one - T::of(self.beta2.powi(t));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !plan.is_trainable(params.group(id)) {
                continue;
            }
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            Zip::from(params.get_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModuleGroup;
    use ndarray::{arr1, ArrayD};

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(ModuleGroup::Fusion, "x", arr1(&[x]).into_dyn());
        s
    }

    /// Loss (x - 3)², gradient 2(x - 3); three steps against a hand-rolled
    /// scalar Adam.
    #[test]
    fn matches_closed_form_on_a_quadratic() {
        let cfg = TrainConfig { lr: 0.1, ..TrainConfig::default() };
        let mut params = scalar_store(0.5);
        let mut adam = Adam::new(&params, &cfg);
        let id = params.find("fusion.x").unwrap();
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (x - 3.0);
            let mut grads = Gradients::zeros_like(&params);
            grads.get_mut(id)[[0]] = 2.0 * (params.get(id)[[0]] - 3.0);
            adam.step(&mut params, &grads, &FreezePlan::all_trainable());
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
            assert!((params.get(id)[[0]] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_groups_keep_values_and_zero_moments() {
        let mut params = scalar_store(1.0);
        params.insert(ModuleGroup::MaskDecoder, "y", ArrayD::from_elem(vec![2], 1.0));
        let mut adam = Adam::new(&params, &TrainConfig::default());
        let before = params.clone();
        let mut grads = Gradients::zeros_like(&params);
        for id in params.ids() {
            grads.get_mut(id).fill(0.5);
        }
        let plan = FreezePlan { mask_decoder: false, ..FreezePlan::all_trainable() };
        for _ in 0..5 {
            adam.step(&mut params, &grads, &plan);
        }
        let y = params.find("mask_decoder.y").unwrap();
        let x = params.find("fusion.x").unwrap();
        assert_eq!(params.get(y), before.get(y));
        assert!(adam.m.get(y).iter().chain(adam.v.get(y).iter()).all(|&v| v == 0.0));
        assert_ne!(params.get(x), before.get(x));
    }
}
