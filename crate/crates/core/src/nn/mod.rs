//! Minimal layer library with hand-written reverse-mode gradients.
//!
//! Every layer reads its weights from a [`ParamStore`] and accumulates into a
//! matching [`Gradients`]; activations needed by the backward pass are
//! returned to the caller as explicit caches.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod params;
pub mod resize;

pub use activation::{gelu, gelu_backward, gelu_forward, gelu_grad, sigmoid};
pub use attention::{softmax_rows, softmax_rows_backward, Attention, AttentionCache};
pub use conv::{Conv2d, ConvCache, ConvGeometry, ConvTranspose2x2};
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};
pub use params::{Gradients, Init, ModuleGroup, ParamId, ParamStore};
pub use resize::{bilinear_resize, bilinear_resize_backward};
