//! Toy audio-visual scenes: two coloured shapes of different kinds on a dark
//! background, one of which "sounds". Each kind has its own pure tone, and
//! the mask covers the sounding shape.

use std::f64::consts::PI;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{compute_log_spectrogram, write_wav, SpectrogramParams, Waveform};
use crate::backbone::ImageTensor;
use crate::dataset::{save_mask_png, Manifest, ManifestEntry, Sample, Split};
use crate::error::{Error, Result};
use crate::seg_head::{GroundTruthMask, PromptSet};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn tone_hz(self) -> f64 {
        match self {
            ShapeKind::Circle => 440.0,
            ShapeKind::Square => 880.0,
            ShapeKind::Triangle => 1320.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Half the side length (square, triangle) or the radius (circle).
    pub half: f64,
    pub color: [u8; 3],
}

impl ShapeSpec {
    /// Whether the point `(x, y)` (pixel units, continuous) is inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.half * self.half,
            ShapeKind::Square => dx.abs() <= self.half && dy.abs() <= self.half,
            // Apex up, base at cy + half.
            ShapeKind::Triangle => dy <= self.half && dx.abs() <= (dy + self.half) * 0.5,
        }
    }

    /// Radius of a circle enclosing the shape.
    fn extent(&self) -> f64 {
        match self.kind {
            ShapeKind::Circle => self.half,
            _ => self.half * std::f64::consts::SQRT_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<ShapeSpec>,
    pub sounding: usize,
    pub background: [u8; 3],
    /// Initial phase of the tone.
    pub phase: f64,
}

impl SceneSpec {
    pub fn sounding_shape(&self) -> &ShapeSpec {
        &self.shapes[self.sounding]
    }

    /// Rasterizes at pixel centres; later shapes paint over earlier ones.
    pub fn render(&self, size: usize) -> (RgbImage, Array2<u8>) {
        let mut img = RgbImage::from_pixel(size as u32, size as u32, image::Rgb(self.background));
        let mut mask = Array2::zeros((size, size));
        for (i, s) in self.shapes.iter().enumerate() {
            for y in 0..size {
                for x in 0..size {
                    if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        img.put_pixel(x as u32, y as u32, image::Rgb(s.color));
                        mask[[y, x]] = u8::from(i == self.sounding);
                    }
                }
            }
        }
        (img, mask)
    }

    pub fn waveform(&self, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Waveform> {
        let f = self.sounding_shape().kind.tone_hz();
        let sr = cfg.sample_rate as f64;
        let n = (cfg.duration_s * sr).round() as usize;
        let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(format!("noise std: {e}")))?;
        let samples = (0..n)
            .map(|i| cfg.amplitude * (2.0 * PI * f * i as f64 / sr + self.phase).sin() + noise.sample(rng))
            .collect();
        Waveform::new(samples, cfg.sample_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub shapes_per_scene: usize,
    pub min_half: f64,
    pub max_half: f64,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    /// Train and val fractions; test takes the remainder.
    pub split: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 3000,
            image_size: 64,
            shapes_per_scene: 2,
            min_half: 9.0,
            max_half: 14.0,
            sample_rate: 22_050,
            duration_s: 3.0,
            amplitude: 0.5,
            noise_std: 0.05,
            split: (0.8, 0.1),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (tr, va) = self.split;
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if !(2..=ShapeKind::ALL.len()).contains(&self.shapes_per_scene) {
            return Err(Error::Config(format!(
                "shapes_per_scene must be in 2..={}",
                ShapeKind::ALL.len()
            )));
        }
        if !(self.min_half > 0.0 && self.min_half <= self.max_half) {
            return Err(Error::Config("need 0 < min_half <= max_half".into()));
        }
        let size = self.image_size as f64;
        if 2.0 * self.max_half * std::f64::consts::SQRT_2 >= size {
            return Err(Error::Config("shapes do not fit the image".into()));
        }
        // Two of the widest kinds at the middle size must fit in opposite
        // corners, or rejection sampling may practically never finish.
        let e = 0.5 * (self.min_half + self.max_half) * std::f64::consts::SQRT_2;
        if (size - 2.0 * e) * std::f64::consts::SQRT_2 <= 2.0 * e + 2.0 {
            return Err(Error::Config("two shapes cannot be placed without overlap".into()));
        }
        if !(tr >= 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return Err(Error::Config(format!("bad split fractions {:?}", self.split)));
        }
        if !(self.noise_std >= 0.0 && self.amplitude >= 0.0 && self.duration_s > 0.0) {
            return Err(Error::Config("amplitude, noise and duration must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sample_id(&self, i: usize) -> String {
        format!("s{i:05}")
    }

    /// Independent stream per sample, so sample `i` does not depend on how
    /// many others are generated.
    fn rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        rng
    }
}

/// Draws a scene: distinct kinds, non-overlapping (2 px margin between
/// enclosing circles), fully inside the frame. Kinds and the sounding index
/// are drawn once; failed placements only redraw geometry, so the sounding
/// kind stays uniform.
pub fn random_scene(cfg: &SynthConfig, rng: &mut impl Rng) -> SceneSpec {
    let size = cfg.image_size as f64;
    let mut kinds = ShapeKind::ALL.to_vec();
    for k in 0..cfg.shapes_per_scene {
        let j = rng.random_range(k..kinds.len());
        kinds.swap(k, j);
    }
    let sounding = rng.random_range(0..cfg.shapes_per_scene);
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(cfg.shapes_per_scene);
    'outer: loop {
        shapes.clear();
        for &kind in &kinds[..cfg.shapes_per_scene] {
            let half = rng.random_range(cfg.min_half..=cfg.max_half);
            let mut candidate = ShapeSpec {
                kind,
                cx: 0.0,
                cy: 0.0,
                half,
                color: [
                    rng.random_range(80..=255),
                    rng.random_range(80..=255),
                    rng.random_range(80..=255),
                ],
            };
            let r = candidate.extent();
            let mut placed = false;
            for _ in 0..100 {
                candidate.cx = rng.random_range(r..=size - r);
                candidate.cy = rng.random_range(r..=size - r);
                if shapes
                    .iter()
                    .all(|s| (s.cx - candidate.cx).hypot(s.cy - candidate.cy) > s.extent() + r + 2.0)
                {
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'outer;
            }
            shapes.push(candidate);
        }
        break;
    }
    SceneSpec {
        sounding,
        shapes,
        background: [rng.random_range(0..50), rng.random_range(0..50), rng.random_range(0..50)],
        phase: rng.random_range(0.0..2.0 * PI),
    }
}

/// Exact-size split: ids ranked by a seeded hash, the first `round(n·train)`
/// go to train, the next `round(n·val)` to val, the rest to test.
pub fn assign_splits(ids: &[String], fractions: (f64, f64), seed: u64) -> Vec<Split> {
    let n = ids.len();
    let n_train = (n as f64 * fractions.0).round() as usize;
    let n_val = ((n as f64 * fractions.1).round() as usize).min(n - n_train);
    let key = |id: &str| {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(id.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (key(&ids[i]), i));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

pub struct GeneratedSample {
    pub id: String,
    pub scene: SceneSpec,
    pub image: RgbImage,
    pub mask: Array2<u8>,
    pub audio: Waveform,
}

impl GeneratedSample {
    /// In-memory model input, bypassing the PNG/WAV round trip.
    pub fn to_sample<T: Scalar>(&self, audio: &SpectrogramParams) -> Result<Sample<T>> {
        let (w, h) = self.image.dimensions();
        let values = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            T::of(self.image.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
        });
        let wave = self.audio.resampled(audio.sample_rate)?.fit_length(audio.n_samples());
        Ok(Sample {
            id: self.id.clone(),
            image: ImageTensor::new(values)?,
            spectrogram: compute_log_spectrogram(&wave, audio)?,
            mask: Some(GroundTruthMask::new(self.mask.clone())?),
            prompts: PromptSet::empty(),
        })
    }
}

pub fn generate_sample(cfg: &SynthConfig, i: usize) -> Result<GeneratedSample> {
    cfg.validate()?;
    let mut rng = cfg.rng(i);
    let scene = random_scene(cfg, &mut rng);
    let (image, mask) = scene.render(cfg.image_size);
    let audio = scene.waveform(cfg, &mut rng)?;
    Ok(GeneratedSample {
        id: cfg.sample_id(i),
        scene,
        image,
        mask,
        audio,
    })
}

/// Writes `images/`, `audio/`, `masks/` and `manifest.jsonl` under `out`.
pub fn generate_dataset(out: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    for sub in ["images", "audio", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let ids: Vec<String> = (0..cfg.n_samples).map(|i| cfg.sample_id(i)).collect();
    let splits = assign_splits(&ids, cfg.split, cfg.seed);
    let entries = splits
        .into_par_iter()
        .enumerate()
        .map(|(i, split)| {
            let s = generate_sample(cfg, i)?;
            let image = Path::new("images").join(format!("{}.png", s.id));
            let audio = Path::new("audio").join(format!("{}.wav", s.id));
            let mask = Path::new("masks").join(format!("{}.png", s.id));
            let p = out.join(&image);
            s.image.save(&p).map_err(|e| Error::decode(&p, e))?;
            write_wav(&out.join(&audio), &s.audio)?;
            save_mask_png(&out.join(&mask), &s.mask)?;
            Ok(ManifestEntry {
                id: s.id,
                split,
                image,
                audio,
                mask: Some(mask),
                prompts: PromptSet::empty(),
                label: Some(s.scene.sounding_shape().kind.name().to_string()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.save(&out.join("manifest.jsonl"))?;
    Ok(manifest)
}
