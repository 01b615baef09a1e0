use ndarray::{Array2, ArrayView2, Axis};

use super::params::{Gradients, Init, ModuleGroup, ParamId, ParamStore};
use crate::Scalar;

/// Affine map applied row-wise: `y = x Wᵀ + b` with `W` stored `(out, in)`.
///
/// Used both as a dense layer on token matrices and as a 1×1 convolution on
/// feature maps flattened to `(pixels, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        group: ModuleGroup,
        path: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = init.fan_in_uniform(group, &format!("{path}.weight"), &[out_dim, in_dim], in_dim);
        let bias = Some(init.bias(group, &format!("{path}.bias"), out_dim, in_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn unbiased<T: Scalar>(
        init: &mut Init<'_, T>,
        group: ModuleGroup,
        path: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            weight: init.fan_in_uniform(group, &format!("{path}.weight"), &[out_dim, in_dim], in_dim),
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_dim * self.in_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView2<'_, T>) -> Array2<T> {
        debug_assert_eq!(x.ncols(), self.in_dim);
        let mut y = x.dot(&p.view2(self.weight).t());
        if let Some(b) = self.bias {
            y += &p.view1(b);
        }
        y
    }

    /// Accumulates weight and bias gradients and returns `dL/dx`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: ArrayView2<'_, T>,
        dy: ArrayView2<'_, T>,
        grads: &mut Gradients<T>,
    ) -> Array2<T> {
        grads.accumulate(self.weight, &dy.t().dot(&x).view());
        if let Some(b) = self.bias {
            grads.accumulate(b, &dy.sum_axis(Axis(0)).view());
        }
        dy.dot(&p.view2(self.weight))
    }
}
