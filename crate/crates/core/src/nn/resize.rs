use ndarray::{Array2, ArrayView2};

use crate::Scalar;

/// Half-pixel-centred bilinear interpolation weights along one axis:
/// for each output index, `(i0, i1, w1)` with value `(1-w1)·x[i0] + w1·x[i1]`.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a single-channel map, corners not aligned.
pub fn bilinear_resize<T: Scalar>(x: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = x.dim();
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, wy) = ty[i];
        let (x0, x1, wx) = tx[j];
        let (wy, wx) = (T::of(wy), T::of(wx));
        let one = T::one();
        (one - wy) * ((one - wx) * x[[y0, x0]] + wx * x[[y0, x1]])
            + wy * ((one - wx) * x[[y1, x0]] + wx * x[[y1, x1]])
    })
}

/// Adjoint of [`bilinear_resize`]: scatters `dy` back onto the `(h, w)` grid.
pub fn bilinear_resize_backward<T: Scalar>(dy: ArrayView2<'_, T>, h: usize, w: usize) -> Array2<T> {
    let (out_h, out_w) = dy.dim();
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut dx = Array2::zeros((h, w));
    let one = T::one();
    for i in 0..out_h {
        let (y0, y1, wy) = ty[i];
        let wy = T::of(wy);
        for j in 0..out_w {
            let (x0, x1, wx) = tx[j];
            let wx = T::of(wx);
            let g = dy[[i, j]];
            dx[[y0, x0]] += g * (one - wy) * (one - wx);
            dx[[y0, x1]] += g * (one - wy) * wx;
            dx[[y1, x0]] += g * wy * (one - wx);
            dx[[y1, x1]] += g * wy * wx;
        }
    }
    dx
}
