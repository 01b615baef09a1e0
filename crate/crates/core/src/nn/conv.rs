use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use super::params::{Gradients, Init, ModuleGroup, ParamId, ParamStore};
use crate::Scalar;

/// Geometry of a 2-D convolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeometry {
    pub const fn square(k: usize, s: usize, p: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: (s, s),
            pad: (p, p),
        }
    }

    /// Output spatial size, or `None` when the window does not fit.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.pad.0;
        let wp = w + 2 * self.pad.1;
        if hp < self.kernel.0 || wp < self.kernel.1 {
            return None;
        }
        Some((
            (hp - self.kernel.0) / self.stride.0 + 1,
            (wp - self.kernel.1) / self.stride.1 + 1,
        ))
    }
}

/// Cross-correlation layer with weight `(out, in, kh, kw)` and bias `(out)`,
/// evaluated as a GEMM over an im2col buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: ConvGeometry,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Array2<T>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        group: ModuleGroup,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeometry,
    ) -> Self {
        let (kh, kw) = geom.kernel;
        let fan_in = in_ch * kh * kw;
        let weight = init.fan_in_uniform(group, &format!("{path}.weight"), &[out_ch, in_ch, kh, kw], fan_in);
        let bias = init.bias(group, &format!("{path}.bias"), out_ch, fan_in);
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            geom,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_ch * (self.in_ch * self.geom.kernel.0 * self.geom.kernel.1 + 1)
    }

    fn weight_matrix<'a, T: Scalar>(&self, p: &'a ParamStore<T>) -> ArrayView2<'a, T> {
        let k = self.in_ch * self.geom.kernel.0 * self.geom.kernel.1;
        p.get(self.weight)
            .view()
            .into_shape_with_order((self.out_ch, k))
            .expect("conv weight layout")
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView3<'_, T>) -> (Array3<T>, ConvCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self
            .geom
            .output_size(h, w)
            .expect("conv window larger than padded input");
        let cols = im2col(x, self.geom, ho, wo);
        let mut y = self.weight_matrix(p).dot(&cols);
        y += &p.view1(self.bias).insert_axis(Axis(1));
        let y = y.into_shape_with_order((self.out_ch, ho, wo)).expect("conv output");
        (
            y,
            ConvCache {
                cols,
                in_shape: (c, h, w),
                out_hw: (ho, wo),
            },
        )
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `need_input_grad`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &ConvCache<T>,
        dy: ArrayView3<'_, T>,
        grads: &mut Gradients<T>,
        need_input_grad: bool,
    ) -> Option<Array3<T>> {
        let (ho, wo) = cache.out_hw;
        let dy = dy.as_standard_layout();
        let dy2 = dy
            .view()
            .into_shape_with_order((self.out_ch, ho * wo))
            .expect("conv grad layout");
        grads.accumulate(self.weight, &dy2.dot(&cache.cols.t()).view());
        grads.accumulate(self.bias, &dy2.sum_axis(Axis(1)).view());
        if !need_input_grad {
            return None;
        }
        let dcols = self.weight_matrix(p).t().dot(&dy2);
        Some(col2im(dcols.view(), cache.in_shape, self.geom, ho, wo))
    }
}

fn im2col<T: Scalar>(x: ArrayView3<'_, T>, g: ConvGeometry, ho: usize, wo: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let n = ho * wo;
    let mut cols = vec![T::zero(); c * kh * kw * n];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = oy * sh + ki;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    let src_row = &xs[(ci * h + iy - ph) * w..(ci * h + iy - ph + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = ox * sw + kj;
                        if ix >= pw && ix - pw < w {
                            *d = src_row[ix - pw];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * kh * kw, n), cols).expect("im2col shape")
}

fn col2im<T: Scalar>(
    cols: ArrayView2<'_, T>,
    (c, h, w): (usize, usize, usize),
    g: ConvGeometry,
    ho: usize,
    wo: usize,
) -> Array3<T> {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let n = ho * wo;
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cs[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = oy * sh + ki;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    let base = (ci * h + iy - ph) * w;
                    for ox in 0..wo {
                        let ix = ox * sw + kj;
                        if ix >= pw && ix - pw < w {
                            out[base + ix - pw] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("col2im shape")
}

/// Transposed convolution with a 2×2 kernel and stride 2: every input pixel
/// paints its own non-overlapping 2×2 output block. Weight `(in, out, 2, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvTranspose2x2 {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        group: ModuleGroup,
        path: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        let weight = init.fan_in_uniform(group, &format!("{path}.weight"), &[in_ch, out_ch, 2, 2], in_ch);
        let bias = init.bias(group, &format!("{path}.bias"), out_ch, in_ch);
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_ch * self.out_ch * 4 + self.out_ch
    }

    fn weight_matrix<'a, T: Scalar>(&self, p: &'a ParamStore<T>) -> ArrayView2<'a, T> {
        // (in, out*4): column o*4 + di*2 + dj
        p.get(self.weight)
            .view()
            .into_shape_with_order((self.in_ch, self.out_ch * 4))
            .expect("convT weight layout")
    }

    /// `x` is `(in, h, w)`; output `(out, 2h, 2w)`. The caller keeps `x` for
    /// the backward pass.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView3<'_, T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "convT input channels");
        let x = x.as_standard_layout();
        let xm = x.view().into_shape_with_order((c, h * w)).expect("layout");
        let y4 = self.weight_matrix(p).t().dot(&xm); // (out*4, h*w)
        let bias = p.view1(self.bias);
        let mut out = Array3::zeros((self.out_ch, 2 * h, 2 * w));
        for o in 0..self.out_ch {
            for di in 0..2 {
                for dj in 0..2 {
                    let row = y4.row(o * 4 + di * 2 + dj);
                    for i in 0..h {
                        for j in 0..w {
                            out[[o, 2 * i + di, 2 * j + dj]] = row[i * w + j] + bias[o];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: ArrayView3<'_, T>,
        dy: ArrayView3<'_, T>,
        grads: &mut Gradients<T>,
    ) -> Array3<T> {
        let (c, h, w) = x.dim();
        let mut dy4 = Array2::zeros((self.out_ch * 4, h * w));
        for o in 0..self.out_ch {
            for di in 0..2 {
                for dj in 0..2 {
                    let mut row = dy4.row_mut(o * 4 + di * 2 + dj);
                    for i in 0..h {
                        for j in 0..w {
                            row[i * w + j] = dy[[o, 2 * i + di, 2 * j + dj]];
                        }
                    }
                }
            }
        }
        let x = x.as_standard_layout();
        let xm = x.view().into_shape_with_order((c, h * w)).expect("layout");
        grads.accumulate(self.weight, &xm.dot(&dy4.t()).view());
        grads.accumulate(self.bias, &dy.sum_axis(Axis(2)).sum_axis(Axis(1)).view());
        let dx = self.weight_matrix(p).dot(&dy4);
        dx.into_shape_with_order((c, h, w)).expect("layout")
    }
}
