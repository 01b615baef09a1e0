//! Pixel-wise audio-visual fusion.
//!
//! For a stage with features `v ∈ R^{D×H×W}` and global audio `a ∈ R^D`:
//!
//! ```text
//! â       = a repeated at all H·W positions
//! S       = θ(v) · φ(â)ᵀ / (H·W)          (HW × HW)
//! z       = v + μ(S · ω(v))
//! ```
//!
//! θ, φ, ω, μ are 1×1 convolutions, i.e. `D → D` affine maps applied to every
//! pixel row. The similarity matrix is formed explicitly.
//!
//! Because every row of `φ(â)` is the same vector, `S[p, q]` does not depend on
//! `q`. The update at pixel `p` therefore reduces to
//! `μ((θ(v)_p · φ(a)) · mean_q ω(v)_q)`, a per-pixel audio–visual similarity
//! scaling one global direction.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis};

use crate::backbone::{duplicate_audio, from_pixel_rows, to_pixel_rows, AudioEmbedding, FeaturePyramid};
use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, softmax_rows_backward, Gradients, Init, Linear, ModuleGroup, ParamStore};
use crate::Scalar;

/// θ, φ, ω, μ for one pyramid stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFusion {
    pub theta: Linear,
    pub phi: Linear,
    pub omega: Linear,
    pub mu: Linear,
}

/// Fusion projections for every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub stages: Vec<StageFusion>,
    pub softmax: bool,
}

/// Audio-conditioned features, same shapes as the input pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPyramid<T> {
    pub stages: Vec<Array3<T>>,
}

impl<T: Scalar> FusedPyramid<T> {
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.stages.iter().map(|s| s.dim()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct StageCache<T> {
    hw: (usize, usize),
    v_rows: Array2<T>,
    a_rows: Array2<T>,
    theta: Array2<T>,
    phi: Array2<T>,
    omega: Array2<T>,
    similarity: Array2<T>,
    mixed: Array2<T>,
}

impl<T: Scalar> StageCache<T> {
    /// The `(HW × HW)` matrix multiplied into `ω(v)`.
    pub fn similarity(&self) -> &Array2<T> {
        &self.similarity
    }
}

impl StageFusion {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, stage: usize, dim: usize, zero_mu: bool) -> Self {
        let g = ModuleGroup::Fusion;
        let theta = Linear::new(init, g, &format!("stage{stage}.theta"), dim, dim);
        let phi = Linear::new(init, g, &format!("stage{stage}.phi"), dim, dim);
        let omega = Linear::new(init, g, &format!("stage{stage}.omega"), dim, dim);
        let mu = if zero_mu {
            Linear {
                weight: init.zeros(g, &format!("stage{stage}.mu.weight"), &[dim, dim]),
                bias: Some(init.zeros(g, &format!("stage{stage}.mu.bias"), &[dim])),
                in_dim: dim,
                out_dim: dim,
            }
        } else {
            Linear::new(init, g, &format!("stage{stage}.mu"), dim, dim)
        };
        Self {
            theta,
            phi,
            omega,
            mu,
        }
    }

    pub fn num_params(&self) -> usize {
        4 * self.theta.num_params()
    }
}

/// Fuses one stage.
pub fn fuse_stage<T: Scalar>(
    p: &ParamStore<T>,
    v: ArrayView3<'_, T>,
    a: ArrayView1<'_, T>,
    stage: &StageFusion,
    softmax: bool,
) -> Result<(Array3<T>, StageCache<T>)> {
    let (d, h, w) = v.dim();
    if a.len() != d || stage.theta.in_dim != d {
        return Err(Error::Shape(format!(
            "fusion stage expects D={}, got visual D={d} and audio D={}",
            stage.theta.in_dim,
            a.len()
        )));
    }
    let hw = T::of((h * w) as f64);
    let v_rows = to_pixel_rows(v);
    let a_rows = to_pixel_rows(duplicate_audio(a, h, w)?.view());
    let theta = stage.theta.forward(p, v_rows.view());
    let phi = stage.phi.forward(p, a_rows.view());
    let omega = stage.omega.forward(p, v_rows.view());
    let scores = theta.dot(&phi.t()) / hw;
    let similarity = if softmax { softmax_rows(scores.view()) } else { scores };
    let mixed = similarity.dot(&omega);
    let update = stage.mu.forward(p, mixed.view());
    let z_rows = &v_rows + &update;
    Ok((
        from_pixel_rows(z_rows.view(), h, w),
        StageCache {
            hw: (h, w),
            v_rows,
            a_rows,
            theta,
            phi,
            omega,
            similarity,
            mixed,
        },
    ))
}

/// Returns `(dL/dv, dL/da)` and accumulates projection gradients.
pub fn fuse_stage_backward<T: Scalar>(
    p: &ParamStore<T>,
    stage: &StageFusion,
    softmax: bool,
    cache: &StageCache<T>,
    dz: ArrayView3<'_, T>,
    grads: &mut Gradients<T>,
) -> (Array3<T>, Array1<T>) {
    let (h, w) = cache.hw;
    let hw = T::of((h * w) as f64);
    let dz_rows = to_pixel_rows(dz);
    let dmixed = stage.mu.backward(p, cache.mixed.view(), dz_rows.view(), grads);
    let dsim = dmixed.dot(&cache.omega.t());
    let domega = cache.similarity.t().dot(&dmixed);
    let dscores = if softmax {
        softmax_rows_backward(cache.similarity.view(), dsim.view())
    } else {
        dsim
    } / hw;
    let dtheta = dscores.dot(&cache.phi);
    let dphi = dscores.t().dot(&cache.theta);
    let mut dv_rows = dz_rows;
    dv_rows += &stage.theta.backward(p, cache.v_rows.view(), dtheta.view(), grads);
    dv_rows += &stage.omega.backward(p, cache.v_rows.view(), domega.view(), grads);
    let da_rows = stage.phi.backward(p, cache.a_rows.view(), dphi.view(), grads);
    (from_pixel_rows(dv_rows.view(), h, w), da_rows.sum_axis(Axis(0)))
}

impl FusionParams {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, stages: usize, dim: usize, cfg: &FusionConfig) -> Self {
        Self {
            stages: (0..stages)
                .map(|s| StageFusion::new(init, s, dim, cfg.zero_init_mu))
                .collect(),
            softmax: cfg.softmax,
        }
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(StageFusion::num_params).sum()
    }

    pub fn fuse_pyramid<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        pyramid: &FeaturePyramid<T>,
        audio: &AudioEmbedding<T>,
    ) -> Result<(FusedPyramid<T>, Vec<StageCache<T>>)> {
        if pyramid.len() != self.stages.len() {
            return Err(Error::Shape(format!(
                "pyramid has {} stages, fusion has {}",
                pyramid.len(),
                self.stages.len()
            )));
        }
        let mut out = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        for (v, stage) in pyramid.stages.iter().zip(&self.stages) {
            let (z, c) = fuse_stage(p, v.view(), audio.values.view(), stage, self.softmax)?;
            out.push(z);
            caches.push(c);
        }
        Ok((FusedPyramid { stages: out }, caches))
    }

    /// Per-stage `dL/dv` and the summed `dL/da`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        caches: &[StageCache<T>],
        dz: &[Array3<T>],
        grads: &mut Gradients<T>,
    ) -> (Vec<Array3<T>>, Array1<T>) {
        let dim = self.stages[0].theta.in_dim;
        let mut da = Array1::zeros(dim);
        let mut dv = Vec::with_capacity(self.stages.len());
        for ((stage, cache), g) in self.stages.iter().zip(caches).zip(dz) {
            let (dvs, das) = fuse_stage_backward(p, stage, self.softmax, cache, g.view(), grads);
            da += &das;
            dv.push(dvs);
        }
        (dv, da)
    }
}
