//! On-disk datasets: a JSON-lines manifest of `(image, audio, mask)` triples
//! plus loaders that turn entries into model-ready samples.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rayon::prelude::*;
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::audio::{compute_log_spectrogram, load_waveform, Spectrogram, SpectrogramParams};
use crate::backbone::ImageTensor;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::seg_head::{GroundTruthMask, PromptSet};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown split {s:?}; expected train, val or test")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: PathBuf,
    pub audio: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "PromptSet::is_empty")]
    pub prompts: PromptSet,
    /// Free-form description of the sounding object, e.g. `"circle"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses and validates a manifest: well-formed lines, unique ids,
    /// referenced files present, masks on every val/test entry.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::Manifest(format!("{}:{}: {err}", path.display(), i + 1)))?;
            entries.push(e);
        }
        let m = Self { root, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.id.is_empty() {
                return Err(Error::Manifest("entry with empty id".into()));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id {:?}", e.id)));
            }
            if e.mask.is_none() && e.split != Split::Train {
                return Err(Error::Manifest(format!("{} entry {:?} has no mask", e.split, e.id)));
            }
            for rel in [Some(&e.image), Some(&e.audio), e.mask.as_ref()].into_iter().flatten() {
                let p = self.resolve(rel);
                if !p.is_file() {
                    return Err(Error::Manifest(format!("entry {:?}: missing file {}", e.id, p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn source(&self, split: Split, config: &ModelConfig) -> ManifestSource<'_> {
        ManifestSource {
            manifest: self,
            entries: self.split(split),
            config: config.clone(),
        }
    }
}

/// Decodes an RGB image, resized to `size × size` if needed, into `[0, 1]`.
pub fn load_image<T: Scalar>(path: &Path, size: usize) -> Result<ImageTensor<T>> {
    let img = image::open(path).map_err(|e| Error::decode(path, e))?.to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    let values = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        T::of(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    });
    ImageTensor::new(values)
}

/// Width and height of an image file without decoding the pixels.
pub fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::decode(path, e))?;
    Ok((w as usize, h as usize))
}

/// Log spectrogram of a WAV file, resampled and fitted to `params`.
pub fn load_spectrogram<T: Scalar>(path: &Path, params: &SpectrogramParams) -> Result<Spectrogram<T>> {
    compute_log_spectrogram(&load_waveform(path, params)?, params)
}

/// Decodes a mask image: any pixel with luma above 127 is foreground.
/// Nearest-neighbour resized to `size × size` if needed.
pub fn load_mask(path: &Path, size: usize) -> Result<GroundTruthMask> {
    let img = image::open(path).map_err(|e| Error::decode(path, e))?.to_luma8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Nearest)
    } else {
        img
    };
    GroundTruthMask::new(Array2::from_shape_fn((size, size), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] > 127)
    }))
}

/// Writes a binary mask as an 8-bit PNG with values 0 and 255.
pub fn save_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::decode(path, e))
}

pub fn save_rgb_png(path: &Path, image: &ImageTensor<impl Scalar>) -> Result<()> {
    let v = image.values();
    let (_, h, w) = v.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (v[[c, y as usize, x as usize]].as_f64() * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::decode(path, e))
}

/// Blends `color` over the foreground pixels of `mask` with weight `alpha`.
pub fn overlay_mask<T: Scalar>(
    image: &ImageTensor<T>,
    mask: ArrayView2<'_, u8>,
    color: [f64; 3],
    alpha: f64,
) -> Result<ImageTensor<T>> {
    let v = image.values();
    let (_, h, w) = v.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} does not match image ({h}, {w})", mask.dim())));
    }
    let out = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let px = v[[c, y, x]];
        if mask[[y, x]] > 0 {
            T::of((1.0 - alpha) * px.as_f64() + alpha * color[c])
        } else {
            px
        }
    });
    ImageTensor::new(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub image: ImageTensor<T>,
    pub spectrogram: Spectrogram<T>,
    pub mask: Option<GroundTruthMask>,
    pub prompts: PromptSet,
}

impl<T: Scalar> Sample<T> {
    pub fn load(manifest: &Manifest, entry: &ManifestEntry, config: &ModelConfig) -> Result<Self> {
        let size = config.backbone.image_size;
        let image = load_image(&manifest.resolve(&entry.image), size)?;
        let spectrogram = load_spectrogram(&manifest.resolve(&entry.audio), &config.audio)?;
        let mask = match &entry.mask {
            Some(m) => Some(load_mask(&manifest.resolve(m), size)?),
            None => None,
        };
        Ok(Self {
            id: entry.id.clone(),
            image,
            spectrogram,
            mask,
            prompts: entry.prompts.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            id: self.id.clone(),
            image: ImageTensor::new(self.image.values().mapv(|v| U::of(v.as_f64()))).expect("same values"),
            spectrogram: self.spectrogram.cast(),
            mask: self.mask.clone(),
            prompts: self.prompts.clone(),
        }
    }
}

/// Indexed access to samples, loaded on demand.
pub trait SampleSource<T>: Sync {
    fn len(&self) -> usize;
    fn id(&self, i: usize) -> &str;
    fn get(&self, i: usize) -> Result<Sample<T>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> SampleSource<T> for [Sample<T>] {
    fn len(&self) -> usize {
        <[Sample<T>]>::len(self)
    }

    fn id(&self, i: usize) -> &str {
        &self[i].id
    }

    fn get(&self, i: usize) -> Result<Sample<T>> {
        Ok(self[i].clone())
    }
}

impl<T: Scalar> SampleSource<T> for Vec<Sample<T>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn id(&self, i: usize) -> &str {
        &self[i].id
    }

    fn get(&self, i: usize) -> Result<Sample<T>> {
        Ok(self[i].clone())
    }
}

/// Entries of one split, decoded from disk on every access.
#[derive(Debug, Clone)]
pub struct ManifestSource<'a> {
    manifest: &'a Manifest,
    entries: Vec<&'a ManifestEntry>,
    config: ModelConfig,
}

impl ManifestSource<'_> {
    /// Decodes every entry up front, in parallel.
    pub fn load_all<T: Scalar>(&self) -> Result<Vec<Sample<T>>> {
        self.entries
            .par_iter()
            .map(|e| Sample::load(self.manifest, e, &self.config))
            .collect()
    }
}

impl<T: Scalar> SampleSource<T> for ManifestSource<'_> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn id(&self, i: usize) -> &str {
        &self.entries[i].id
    }

    fn get(&self, i: usize) -> Result<Sample<T>> {
        Sample::load(self.manifest, self.entries[i], &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_entry_files(dir: &Path, id: &str) {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::create_dir_all(dir.join("audio")).unwrap();
        std::fs::create_dir_all(dir.join("masks")).unwrap();
        let img = ImageTensor::<f32>::zeros(16, 16);
        save_rgb_png(&dir.join(format!("images/{id}.png")), &img).unwrap();
        save_mask_png(&dir.join(format!("masks/{id}.png")), &Array2::zeros((16, 16))).unwrap();
        crate::audio::write_wav(
            &dir.join(format!("audio/{id}.wav")),
            &crate::audio::Waveform::silence(100, 22_050),
        )
        .unwrap();
    }

    fn line(id: &str, split: &str, mask: bool) -> String {
        let mask = if mask { format!(r#","mask":"masks/{id}.png""#) } else { String::new() };
        format!(r#"{{"id":"{id}","split":"{split}","image":"images/{id}.png","audio":"audio/{id}.wav"{mask}}}"#)
    }

    #[test]
    fn valid_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_entry_files(dir.path(), "a");
        write_entry_files(dir.path(), "b");
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, format!("{}\n\n{}\n", line("a", "train", false), line("b", "test", true))).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.split(Split::Test)[0].id, "b");
        let copy = dir.path().join("copy.jsonl");
        m.save(&copy).unwrap();
        assert_eq!(Manifest::load(&copy).unwrap(), m);
    }

    #[test]
    fn malformed_lines_report_their_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write_entry_files(dir.path(), "a");
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, format!("{}\n{{\"id\": 3}}\n", line("a", "train", true))).unwrap();
        match Manifest::load(&path) {
            Err(Error::Manifest(msg)) => assert!(msg.contains(":2:"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicates_missing_files_and_missing_masks_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_entry_files(dir.path(), "a");
        let path = dir.path().join("manifest.jsonl");
        let cases = [
            format!("{}\n{}\n", line("a", "train", true), line("a", "val", true)),
            format!("{}\n", line("zzz", "train", false)),
            format!("{}\n", line("a", "val", false)),
        ];
        for text in cases {
            std::fs::write(&path, text).unwrap();
            assert!(matches!(Manifest::load(&path), Err(Error::Manifest(_))));
        }
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = Array2::from_shape_fn((8, 8), |(y, x)| u8::from(x > y));
        save_mask_png(&path, &m).unwrap();
        assert_eq!(load_mask(&path, 8).unwrap().values(), m.view());
        let raw = image::open(&path).unwrap().to_luma8();
        assert!(raw.pixels().all(|p| p[0] == 0 || p[0] == 255));
    }

    #[test]
    fn image_png_round_trip_is_exact_on_8_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let values = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| ((c * 16 + y * 4 + x) as f64) / 255.0);
        save_rgb_png(&path, &ImageTensor::new(values.clone()).unwrap()).unwrap();
        let back = load_image::<f64>(&path, 4).unwrap();
        assert!(back.values().iter().zip(values.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(load_image::<f64>(&path, 8).unwrap().size(), (8, 8));
    }

    #[test]
    fn overlay_blends_only_foreground() {
        let img = ImageTensor::new(Array3::from_elem((3, 2, 2), 0.5f64)).unwrap();
        let mut mask = Array2::zeros((2, 2));
        mask[[0, 1]] = 1;
        let out = overlay_mask(&img, mask.view(), [1.0, 0.0, 0.0], 0.5).unwrap();
        let v = out.values();
        assert_eq!(v[[0, 0, 1]], 0.75);
        assert_eq!(v[[1, 0, 1]], 0.25);
        assert_eq!(v[[2, 0, 1]], 0.25);
        assert_eq!(v[[0, 1, 1]], 0.5);
        assert!(overlay_mask(&img, Array2::zeros((3, 3)).view(), [1.0, 0.0, 0.0], 0.5).is_err());
    }
}
