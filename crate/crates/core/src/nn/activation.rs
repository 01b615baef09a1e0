use ndarray::{Array, ArrayView, Dimension, Zip};

use crate::Scalar;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU. Smooth everywhere, which keeps central finite
/// differences well-behaved in gradient checks.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of(SQRT_2_OVER_PI);
    let c = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(SQRT_2_OVER_PI);
    let c = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

pub fn gelu_forward<T: Scalar, D: Dimension>(x: ArrayView<'_, T, D>) -> Array<T, D> {
    x.mapv(gelu)
}

/// `dL/dx` given the pre-activation `x` and `dL/dy`.
pub fn gelu_backward<T: Scalar, D: Dimension>(
    x: ArrayView<'_, T, D>,
    dy: ArrayView<'_, T, D>,
) -> Array<T, D> {
    Zip::from(&x).and(&dy).map_collect(|&x, &d| d * gelu_grad(x))
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
