use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::params::{Gradients, Init, ModuleGroup, ParamId, ParamStore};
use crate::Scalar;

const LN_EPS: f64 = 1e-5;

/// Layer normalization over the last axis of a `(rows, dim)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, group: ModuleGroup, path: &str, dim: usize) -> Self {
        // gamma starts near one; the jitter keeps gradient checks from seeing a
        // perfectly symmetric scale.
        let gamma = init.uniform_around(group, &format!("{path}.gamma"), &[dim], 1.0, 0.1);
        let beta = init.uniform(group, &format!("{path}.beta"), &[dim], 0.1);
        Self { gamma, beta, dim }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: ArrayView2<'_, T>,
    ) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::of(self.dim as f64);
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = &x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| T::one() / (v + T::of(LN_EPS)).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &p.view1(self.gamma) + &p.view1(self.beta);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &LayerNormCache<T>,
        dy: ArrayView2<'_, T>,
        grads: &mut Gradients<T>,
    ) -> Array2<T> {
        let d = T::of(self.dim as f64);
        grads.accumulate(self.gamma, &(&dy * &cache.xhat).sum_axis(Axis(0)).view());
        grads.accumulate(self.beta, &dy.sum_axis(Axis(0)).view());
        let dxhat = &dy * &p.view1(self.gamma);
        let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
        let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
        let inner = dxhat.mapv(|v| v * d) - &sum_d - &(&cache.xhat * &sum_dx);
        inner * &cache.inv_std.mapv(|s| s / d).insert_axis(Axis(1))
    }
}
