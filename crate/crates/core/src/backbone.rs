//! Dual-stream encoders: a global audio embedding from the log spectrogram
//! and a multi-scale visual feature pyramid from the RGB frame.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use crate::audio::Spectrogram;
use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{gelu_backward, gelu_forward, Conv2d, ConvCache, ConvGeometry, Gradients, Init, Linear, ModuleGroup, ParamStore};
use crate::Scalar;

/// Channels-first RGB frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    values: Array3<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(values: Array3<T>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image must be (3, H, W), got ({c}, {h}, {w})")));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::Contract(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            values: Array3::zeros((3, h, w)),
        }
    }

    pub fn values(&self) -> ArrayView3<'_, T> {
        self.values.view()
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }
}

/// Global audio feature `a ∈ R^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbedding<T> {
    pub values: Array1<T>,
}

impl<T: Scalar> AudioEmbedding<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: Array1::zeros(dim),
        }
    }
}

/// Stage features `(D, H_s, W_s)`, finest first, coarsest last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub stages: Vec<Array3<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.stages.iter().map(|s| s.dim()).collect()
    }

    pub fn coarsest(&self) -> &Array3<T> {
        self.stages.last().expect("non-empty pyramid")
    }
}

/// `(D, H, W)` → `(H·W, D)`: one row per pixel.
pub fn to_pixel_rows<T: Scalar>(x: ArrayView3<'_, T>) -> Array2<T> {
    let (d, h, w) = x.dim();
    let flat = x.into_shape_with_order((d, h * w)).map(|v| v.t().to_owned());
    match flat {
        Ok(m) => m,
        Err(_) => x
            .as_standard_layout()
            .into_shape_with_order((d, h * w))
            .expect("layout")
            .t()
            .to_owned(),
    }
}

/// Inverse of [`to_pixel_rows`].
pub fn from_pixel_rows<T: Scalar>(m: ArrayView2<'_, T>, h: usize, w: usize) -> Array3<T> {
    let d = m.ncols();
    m.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((d, h, w))
        .expect("layout")
}

/// Repeats `a` at every one of `h × w` positions: `â[:, y, x] = a`.
pub fn duplicate_audio<T: Scalar>(a: ArrayView1<'_, T>, h: usize, w: usize) -> Result<Array3<T>> {
    if h == 0 || w == 0 {
        return Err(Error::Contract(format!("duplicate_audio needs positive dims, got {h}×{w}")));
    }
    Ok(a.insert_axis(Axis(1))
        .insert_axis(Axis(2))
        .broadcast((a.len(), h, w))
        .expect("broadcast")
        .to_owned())
}

/// Strided conv stack, temporal average pool, linear projection to `D`.
///
/// The first block is anisotropic (stride 2 in frequency, 4 in time); the
/// remaining three are 3×3 stride-2. Pooling averages over time only, so the
/// projection still sees where along the frequency axis energy sits.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder {
    pub convs: Vec<Conv2d>,
    pub head: Linear,
    pub input_shape: (usize, usize),
    pub pooled_freq: usize,
}

#[derive(Debug, Clone)]
pub struct AudioEncoderCache<T> {
    convs: Vec<ConvCache<T>>,
    pre_acts: Vec<Array3<T>>,
    frames_out: usize,
    pooled: Array2<T>,
}

impl AudioEncoder {
    pub const GEOMETRY: [ConvGeometry; 4] = [
        ConvGeometry {
            kernel: (4, 4),
            stride: (2, 4),
            pad: (1, 0),
        },
        ConvGeometry::square(3, 2, 1),
        ConvGeometry::square(3, 2, 1),
        ConvGeometry::square(3, 2, 1),
    ];

    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &BackboneConfig, input_shape: (usize, usize)) -> Result<Self> {
        let g = ModuleGroup::AudioEncoder;
        let mut convs = Vec::with_capacity(4);
        let (mut f, mut t) = input_shape;
        let mut in_ch = 1;
        for (i, (geom, &out_ch)) in Self::GEOMETRY.iter().zip(&cfg.audio_channels).enumerate() {
            convs.push(Conv2d::new(init, g, &format!("block{i}"), in_ch, out_ch, *geom));
            (f, t) = geom.output_size(f, t).ok_or_else(|| {
                Error::Config(format!("spectrogram {input_shape:?} too small for audio block {i}"))
            })?;
            in_ch = out_ch;
        }
        let head = Linear::new(init, g, "proj", in_ch * f, cfg.dim);
        let _ = t;
        Ok(Self {
            convs,
            head,
            input_shape,
            pooled_freq: f,
        })
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(Conv2d::num_params).sum::<usize>() + self.head.num_params()
    }

    /// Per-spectrogram standardization (zero mean, unit variance); silence
    /// maps to all zeros.
    fn standardize<T: Scalar>(s: ArrayView2<'_, T>) -> Array3<T> {
        let n = T::of(s.len() as f64);
        let mean = s.sum() / n;
        let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::of(1e-6)).sqrt();
        s.mapv(|v| (v - mean) * inv).insert_axis(Axis(0))
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        spec: &Spectrogram<T>,
    ) -> Result<(AudioEmbedding<T>, AudioEncoderCache<T>)> {
        if spec.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "spectrogram {:?}, audio encoder expects {:?}",
                spec.shape(),
                self.input_shape
            )));
        }
        let mut h = Self::standardize(spec.values.view());
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut pre_acts = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (pre, cache) = conv.forward(p, h.view());
            h = gelu_forward(pre.view());
            caches.push(cache);
            pre_acts.push(pre);
        }
        let frames_out = h.dim().2;
        let pooled = h.mean_axis(Axis(2)).expect("non-empty time axis");
        let flat = pooled
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((1, pooled.len()))
            .expect("layout");
        let out = self.head.forward(p, flat.view());
        Ok((
            AudioEmbedding {
                values: out.row(0).to_owned(),
            },
            AudioEncoderCache {
                convs: caches,
                pre_acts,
                frames_out,
                pooled: flat,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &AudioEncoderCache<T>,
        da: ArrayView1<'_, T>,
        grads: &mut Gradients<T>,
    ) {
        let da = da.insert_axis(Axis(0));
        let dflat = self.head.backward(p, cache.pooled.view(), da, grads);
        let c = self.convs.last().expect("blocks").out_ch;
        let dpooled = dflat
            .into_shape_with_order((c, self.pooled_freq))
            .expect("layout")
            / T::of(cache.frames_out as f64);
        let mut dh = dpooled
            .insert_axis(Axis(2))
            .broadcast((c, self.pooled_freq, cache.frames_out))
            .expect("broadcast")
            .to_owned();
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let dpre = gelu_backward(cache.pre_acts[i].view(), dh.view());
            match conv.backward(p, &cache.convs[i], dpre.view(), grads, i > 0) {
                Some(dx) => dh = dx,
                None => break,
            }
        }
    }
}

/// Strided conv trunk with a per-stage 1×1 projection head.
///
/// Stage 1: 4×4/4 patch conv + 3×3 conv. Each further stage: 2×2/2
/// downsampling conv + 3×3 conv. GELU after every conv; the projection is
/// linear.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub stem: Conv2d,
    pub downs: Vec<Conv2d>,
    pub refines: Vec<Conv2d>,
    pub projs: Vec<Linear>,
    pub image_size: usize,
}

#[derive(Debug, Clone)]
struct ConvStep<T> {
    cache: ConvCache<T>,
    pre: Array3<T>,
}

#[derive(Debug, Clone)]
pub struct ImageEncoderCache<T> {
    stem: ConvStep<T>,
    downs: Vec<Option<ConvStep<T>>>,
    refines: Vec<ConvStep<T>>,
    trunk_rows: Vec<Array2<T>>,
}

impl ImageEncoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &BackboneConfig) -> Self {
        let g = ModuleGroup::ImageEncoder;
        let d = cfg.dim;
        let stem = Conv2d::new(init, g, "stem", 3, d, ConvGeometry::square(4, 4, 0));
        let mut downs = Vec::new();
        let mut refines = Vec::new();
        let mut projs = Vec::new();
        for s in 0..cfg.stages {
            if s > 0 {
                downs.push(Conv2d::new(init, g, &format!("stage{s}.down"), d, d, ConvGeometry::square(2, 2, 0)));
            }
            refines.push(Conv2d::new(init, g, &format!("stage{s}.conv"), d, d, ConvGeometry::square(3, 1, 1)));
            projs.push(Linear::new(init, g, &format!("stage{s}.proj"), d, d));
        }
        Self {
            stem,
            downs,
            refines,
            projs,
            image_size: cfg.image_size,
        }
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params()
            + self.downs.iter().map(Conv2d::num_params).sum::<usize>()
            + self.refines.iter().map(Conv2d::num_params).sum::<usize>()
            + self.projs.iter().map(Linear::num_params).sum::<usize>()
    }

    fn step<T: Scalar>(conv: &Conv2d, p: &ParamStore<T>, x: ArrayView3<'_, T>) -> (Array3<T>, ConvStep<T>) {
        let (pre, cache) = conv.forward(p, x);
        (gelu_forward(pre.view()), ConvStep { cache, pre })
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        image: &ImageTensor<T>,
    ) -> Result<(FeaturePyramid<T>, ImageEncoderCache<T>)> {
        let (h, w) = image.size();
        if h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!(
                "image {h}×{w}, encoder expects {0}×{0}",
                self.image_size
            )));
        }
        let (mut x, stem) = Self::step(&self.stem, p, image.values());
        let mut downs = Vec::new();
        let mut refines = Vec::new();
        let mut trunk_rows = Vec::new();
        let mut stages = Vec::new();
        for s in 0..self.refines.len() {
            if s > 0 {
                let (y, st) = Self::step(&self.downs[s - 1], p, x.view());
                x = y;
                downs.push(Some(st));
            } else {
                downs.push(None);
            }
            let (y, st) = Self::step(&self.refines[s], p, x.view());
            x = y;
            refines.push(st);
            let rows = to_pixel_rows(x.view());
            let (_, hs, ws) = x.dim();
            let v = self.projs[s].forward(p, rows.view());
            stages.push(from_pixel_rows(v.view(), hs, ws));
            trunk_rows.push(rows);
        }
        Ok((
            FeaturePyramid { stages },
            ImageEncoderCache {
                stem,
                downs,
                refines,
                trunk_rows,
            },
        ))
    }

    /// Backward from per-stage gradients `dv[s]` (same shapes as the pyramid).
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &ImageEncoderCache<T>,
        dv: &[Array3<T>],
        grads: &mut Gradients<T>,
    ) {
        let n = self.refines.len();
        let mut carry: Option<Array3<T>> = None;
        for s in (0..n).rev() {
            let (_, hs, ws) = dv[s].dim();
            let drows = to_pixel_rows(dv[s].view());
            let dtrunk = self.projs[s].backward(p, cache.trunk_rows[s].view(), drows.view(), grads);
            let mut dx = from_pixel_rows(dtrunk.view(), hs, ws);
            if let Some(c) = carry.take() {
                dx += &c;
            }
            let st = &cache.refines[s];
            let dpre = gelu_backward(st.pre.view(), dx.view());
            let mut dx = self.refines[s]
                .backward(p, &st.cache, dpre.view(), grads, true)
                .expect("input grad");
            if s > 0 {
                let st = cache.downs[s].as_ref().expect("down step");
                let dpre = gelu_backward(st.pre.view(), dx.view());
                dx = self.downs[s - 1]
                    .backward(p, &st.cache, dpre.view(), grads, true)
                    .expect("input grad");
            }
            carry = Some(dx);
        }
        let dx = carry.expect("at least one stage");
        let dpre = gelu_backward(cache.stem.pre.view(), dx.view());
        self.stem.backward(p, &cache.stem.cache, dpre.view(), grads, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SpectrogramParams;

    fn build(cfg: &BackboneConfig) -> (ParamStore<f64>, AudioEncoder, ImageEncoder) {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, cfg.seed);
        let audio = AudioEncoder::new(&mut init, cfg, (257, 300)).unwrap();
        let image = ImageEncoder::new(&mut init, cfg);
        (store, audio, image)
    }

    #[test]
    fn duplicate_audio_examples() {
        let a = ndarray::arr1(&[1.0f64, 2.0]);
        let d = duplicate_audio(a.view(), 1, 1).unwrap();
        assert_eq!(d, ndarray::arr3(&[[[1.0]], [[2.0]]]));

        let a = ndarray::arr1(&[0.5f64, -1.5, 3.0]);
        let d = duplicate_audio(a.view(), 2, 3).unwrap();
        assert_eq!(d.dim(), (3, 2, 3));
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(d.slice(ndarray::s![.., y, x]), a);
            }
        }
        let total = d.sum_axis(Axis(2)).sum_axis(Axis(1));
        assert_eq!(total, &a * 6.0);

        let z = duplicate_audio(Array1::<f64>::zeros(4).view(), 3, 3).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(duplicate_audio(a.view(), 0, 2).is_err());
    }

    #[test]
    fn pixel_row_layout_round_trips() {
        let x = Array3::from_shape_fn((3, 2, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let rows = to_pixel_rows(x.view());
        assert_eq!(rows.dim(), (8, 3));
        assert_eq!(rows[[5, 2]], x[[2, 1, 1]]);
        assert_eq!(from_pixel_rows(rows.view(), 2, 4), x);
    }

    #[test]
    fn pyramid_stage_shapes() {
        let cfg = BackboneConfig::default();
        let (store, _, image) = build(&cfg);
        let img = ImageTensor::new(Array3::from_elem((3, 64, 64), 0.5)).unwrap();
        let (pyr, _) = image.forward(&store, &img).unwrap();
        assert_eq!(pyr.shapes(), vec![(32, 16, 16), (32, 8, 8), (32, 4, 4)]);
        assert!(pyr.stages.iter().all(|s| s.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_pyramid() {
        let cfg = BackboneConfig::default();
        let (mut store, _, image) = build(&cfg);
        let names: Vec<String> = store
            .iter()
            .filter(|(_, n, g, _)| *g == ModuleGroup::ImageEncoder && n.ends_with(".bias"))
            .map(|(_, n, _, _)| n.to_string())
            .collect();
        for n in names {
            store.zero_matching(&n);
        }
        let (pyr, _) = image.forward(&store, &ImageTensor::zeros(64, 64)).unwrap();
        assert!(pyr.stages.iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn paper_resolution_is_accepted_when_configured() {
        let cfg = BackboneConfig {
            dim: 4,
            stages: 3,
            image_size: 1024,
            audio_channels: [1, 1, 1, 1],
            seed: 0,
        };
        cfg.validate().unwrap();
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(&mut store, 0);
        let image = ImageEncoder::new(&mut init, &cfg);
        let (pyr, _) = image.forward(&store, &ImageTensor::zeros(1024, 1024)).unwrap();
        assert_eq!(pyr.shapes(), vec![(4, 256, 256), (4, 128, 128), (4, 64, 64)]);
    }

    #[test]
    fn image_size_mismatch_is_an_error() {
        let cfg = BackboneConfig::default();
        let (store, _, image) = build(&cfg);
        assert!(matches!(image.forward(&store, &ImageTensor::zeros(32, 32)), Err(Error::Shape(_))));
    }

    #[test]
    fn audio_embedding_shape_and_determinism() {
        let cfg = BackboneConfig::default();
        let (store, audio, _) = build(&cfg);
        let p = SpectrogramParams::default();
        let spec = Spectrogram {
            values: Array2::from_shape_fn((257, 300), |(f, t)| ((f * 3 + t) as f64 * 0.01).sin()),
            params: p,
        };
        let (a, _) = audio.forward(&store, &spec).unwrap();
        let (b, _) = audio.forward(&store, &spec).unwrap();
        assert_eq!(a.dim(), 32);
        assert!(a.values.iter().zip(b.values.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let wrong = Spectrogram {
            values: Array2::zeros((128, 300)),
            params: p,
        };
        assert!(matches!(audio.forward(&store, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn weight_counts_are_functions_of_config() {
        let cfg = BackboneConfig::default();
        let (store, audio, image) = build(&cfg);
        // audio: 1→8 (4×4), 8→16, 16→16, 16→32 (3×3), head 32·16→32
        let want_audio = (8 * 16 + 8) + (16 * 8 * 9 + 16) + (16 * 16 * 9 + 16) + (32 * 16 * 9 + 32) + (32 * 16 * 32 + 32);
        assert_eq!(audio.pooled_freq, 16);
        assert_eq!(audio.num_params(), want_audio);
        assert_eq!(store.numel_in(ModuleGroup::AudioEncoder), want_audio);
        let d = 32;
        let want_image = (d * 3 * 16 + d) + 3 * (d * d * 9 + d) + 2 * (d * d * 4 + d) + 3 * (d * d + d);
        assert_eq!(image.num_params(), want_image);
        assert_eq!(store.numel_in(ModuleGroup::ImageEncoder), want_image);
    }
}
