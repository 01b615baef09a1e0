use ndarray::{s, Array2, ArrayView2, Axis};

use super::linear::Linear;
use super::params::{Gradients, Init, ModuleGroup, ParamStore};
use crate::Scalar;

/// Row-wise softmax.
pub fn softmax_rows<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Backward of [`softmax_rows`] given its output `p`.
pub fn softmax_rows_backward<T: Scalar>(p: ArrayView2<'_, T>, dp: ArrayView2<'_, T>) -> Array2<T> {
    let dot = (&dp * &p).sum_axis(Axis(1)).insert_axis(Axis(1));
    &p * &(&dp - &dot)
}

/// Multi-head scaled dot-product attention with separate q/k/v/out
/// projections, all `dim → dim`. The key projection has no bias: a key
/// offset shifts every logit in a row equally and cancels in the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q_in: Array2<T>,
    k_in: Array2<T>,
    v_in: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    mixed: Array2<T>,
}

impl Attention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, group: ModuleGroup, path: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q_proj: Linear::new(init, group, &format!("{path}.q_proj"), dim, dim),
            k_proj: Linear::unbiased(init, group, &format!("{path}.k_proj"), dim, dim),
            v_proj: Linear::new(init, group, &format!("{path}.v_proj"), dim, dim),
            out_proj: Linear::new(init, group, &format!("{path}.out_proj"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn num_params(&self) -> usize {
        4 * self.q_proj.num_params() - self.dim
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Queries `(nq, dim)` attend over keys/values `(nk, dim)`.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        q_in: ArrayView2<'_, T>,
        k_in: ArrayView2<'_, T>,
        v_in: ArrayView2<'_, T>,
    ) -> (Array2<T>, AttentionCache<T>) {
        let q = self.q_proj.forward(p, q_in);
        let k = self.k_proj.forward(p, k_in);
        let v = self.v_proj.forward(p, v_in);
        let dh = self.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut mixed = Array2::zeros((q.nrows(), self.dim));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let pr = softmax_rows(scores.view());
            mixed.slice_mut(cols).assign(&pr.dot(&v.slice(cols)));
            probs.push(pr);
        }
        let out = self.out_proj.forward(p, mixed.view());
        (
            out,
            AttentionCache {
                q_in: q_in.to_owned(),
                k_in: k_in.to_owned(),
                v_in: v_in.to_owned(),
                q,
                k,
                v,
                probs,
                mixed,
            },
        )
    }

    /// Returns gradients with respect to the three inputs `(dq_in, dk_in, dv_in)`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &AttentionCache<T>,
        dout: ArrayView2<'_, T>,
        grads: &mut Gradients<T>,
    ) -> (Array2<T>, Array2<T>, Array2<T>) {
        let dmixed = self.out_proj.backward(p, cache.mixed.view(), dout, grads);
        let dh = self.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let pr = &cache.probs[h];
            let dmix_h = dmixed.slice(cols);
            dv.slice_mut(cols).assign(&pr.t().dot(&dmix_h));
            let dpr = dmix_h.dot(&cache.v.slice(cols).t());
            let dscores = softmax_rows_backward(pr.view(), dpr.view()) * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
        }
        let dq_in = self.q_proj.backward(p, cache.q_in.view(), dq.view(), grads);
        let dk_in = self.k_proj.backward(p, cache.k_in.view(), dk.view(), grads);
        let dv_in = self.v_proj.backward(p, cache.v_in.view(), dv.view(), grads);
        (dq_in, dk_in, dv_in)
    }
}
