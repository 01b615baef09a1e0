//! Waveform loading and the fixed-shape log-magnitude spectrogram fed to the
//! audio encoder.
//!
//! Default framing is `n_fft = 512`, `hop = 220`, periodic Hann window of 512
//! samples, centred frames with zero padding, first 300 frames kept. For a
//! 3 s clip at 22050 Hz this yields exactly 257 × 300 values.

use std::path::Path;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;

/// Mono audio, amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Contract(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * c).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Linear-interpolation resampling. Identity when the rate already matches.
    pub fn resampled(&self, target_rate: u32) -> Result<Self> {
        if target_rate == 0 {
            return Err(Error::Contract("target sample rate must be positive".into()));
        }
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Ok(Self {
                samples: self.samples.clone(),
                sample_rate: target_rate,
            });
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let n_out = (self.samples.len() as f64 / ratio).round() as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let t = i as f64 * ratio;
                let i0 = (t.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = t - i0 as f64;
                self.samples[i0] * (1.0 - frac) + self.samples[i1] * frac
            })
            .collect();
        Ok(Self {
            samples,
            sample_rate: target_rate,
        })
    }

    /// Centre-crop or symmetrically zero-pad to exactly `len` samples.
    pub fn fit_length(&self, len: usize) -> Self {
        let n = self.samples.len();
        let samples = if n >= len {
            let start = (n - len) / 2;
            self.samples[start..start + len].to_vec()
        } else {
            let offset = (len - n) / 2;
            let mut out = vec![0.0; len];
            out[offset..offset + n].copy_from_slice(&self.samples);
            out
        };
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// STFT framing and clip-length contract.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramParams {
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub frames: usize,
    pub eps: f64,
}

impl Default for SpectrogramParams {
    fn default() -> Self {
        Self {
            n_fft: 512,
            hop: 220,
            win_length: 512,
            sample_rate: DEFAULT_SAMPLE_RATE,
            duration_s: 3.0,
            frames: 300,
            eps: 1e-10,
        }
    }
}

impl SpectrogramParams {
    /// Framing given as window and hop durations in milliseconds. The window
    /// length in samples doubles as the FFT size, and every centred frame is
    /// kept. 50 ms / 25 ms at 22050 Hz gives 1103 × 121.
    pub fn from_window_ms(win_ms: f64, hop_ms: f64, sample_rate: u32, duration_s: f64) -> Self {
        let win = (win_ms * 1e-3 * sample_rate as f64).round() as usize;
        let hop = (hop_ms * 1e-3 * sample_rate as f64).round() as usize;
        let mut p = Self {
            n_fft: win,
            hop,
            win_length: win,
            sample_rate,
            duration_s,
            frames: 0,
            eps: 1e-10,
        };
        p.frames = p.available_frames();
        p
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_samples(&self) -> usize {
        (self.sample_rate as f64 * self.duration_s).round() as usize
    }

    /// Number of centred frames the clip supports before truncation.
    pub fn available_frames(&self) -> usize {
        let pad = self.n_fft / 2;
        let padded = self.n_samples() + 2 * pad;
        if padded < self.n_fft || self.hop == 0 {
            return 0;
        }
        (padded - self.n_fft) / self.hop + 1
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_bins(), self.frames)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("audio: {m}")));
        if self.n_fft < 2 {
            return bad("n_fft must be at least 2");
        }
        if self.hop == 0 {
            return bad("hop must be positive");
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return bad("window length must be in 1..=n_fft");
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive");
        }
        if !(self.duration_s > 0.0) {
            return bad("duration must be positive");
        }
        if self.frames == 0 || self.frames > self.available_frames() {
            return Err(Error::Config(format!(
                "audio: frames must be in 1..={} for this clip length and hop",
                self.available_frames()
            )));
        }
        if !(self.eps > 0.0) {
            return bad("epsilon floor must be positive");
        }
        Ok(())
    }
}

/// Log-magnitude spectrogram, frequency bins by frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T> {
    pub values: Array2<T>,
    pub params: SpectrogramParams,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn floor(&self) -> f64 {
        self.params.eps.ln()
    }

    pub fn cast<U: Scalar>(&self) -> Spectrogram<U> {
        Spectrogram {
            values: self.values.mapv(|v| U::of(v.as_f64())),
            params: self.params,
        }
    }
}

/// Reads a PCM16 mono WAV file as-is (no resampling or length fitting).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (sample_rate, samples) = parse_wav(&bytes).map_err(|m| Error::decode(path, m))?;
    Waveform::new(samples, sample_rate)
}

fn parse_wav(b: &[u8]) -> std::result::Result<(u32, Vec<f64>), String> {
    let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
    if b.len() < 12 || &b[0..4] != b"RIFF" || &b[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= b.len() {
        let id = &b[pos..pos + 4];
        let len = u32_at(pos + 4) as usize;
        let body = pos + 8;
        if body + len > b.len() {
            return Err(format!("chunk {:?} truncated", String::from_utf8_lossy(id)));
        }
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err("fmt chunk too short".into());
                }
                format = Some((u16_at(body), u16_at(body + 2), u32_at(body + 4), u16_at(body + 14)));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format.ok_or("data chunk before fmt chunk")?;
                if channels != 1 {
                    return Err(format!("expected mono, found {channels} channels"));
                }
                // 0xFFFE is WAVE_FORMAT_EXTENSIBLE; the bit depth check still applies.
                if !(tag == 1 || tag == 0xFFFE) || bits != 16 {
                    return Err(format!("expected 16-bit PCM, found format {tag} at {bits} bits"));
                }
                let samples = b[body..body + len - len % 2]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok((rate, samples));
            }
            _ => {}
        }
        pos = body + len + len % 2;
    }
    Err("no data chunk".into())
}

/// Writes PCM16 mono, the inverse of the `/ 32768` read scaling; values
/// outside the i16 range saturate.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let data_len = 2 * w.samples.len() as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(2 * w.sample_rate).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a WAV and brings it to the rate and clip length the spectrogram
/// expects.
pub fn load_waveform(path: &Path, params: &SpectrogramParams) -> Result<Waveform> {
    let raw = read_wav(path)?;
    Ok(raw.resampled(params.sample_rate)?.fit_length(params.n_samples()))
}

/// Periodic Hann window of `win_length`, centred inside `n_fft` zeros.
pub fn hann_window(win_length: usize, n_fft: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let offset = (n_fft - win_length) / 2;
    for i in 0..win_length {
        let phase = 2.0 * std::f64::consts::PI * i as f64 / win_length as f64;
        w[offset + i] = 0.5 - 0.5 * phase.cos();
    }
    w
}

pub fn compute_log_spectrogram<T: Scalar>(w: &Waveform, p: &SpectrogramParams) -> Result<Spectrogram<T>> {
    p.validate()?;
    if w.sample_rate != p.sample_rate {
        return Err(Error::Contract(format!(
            "waveform at {} Hz, spectrogram expects {} Hz",
            w.sample_rate, p.sample_rate
        )));
    }
    if w.len() != p.n_samples() {
        return Err(Error::Contract(format!(
            "waveform has {} samples, spectrogram expects {} ({} s)",
            w.len(),
            p.n_samples(),
            p.duration_s
        )));
    }
    let pad = p.n_fft / 2;
    let mut padded = vec![0.0; w.len() + 2 * pad];
    padded[pad..pad + w.len()].copy_from_slice(&w.samples);
    let window = hann_window(p.win_length, p.n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(p.n_fft);
    let bins = p.n_bins();
    let mut values = Array2::<T>::zeros((bins, p.frames));
    let mut buf = vec![Complex::new(0.0, 0.0); p.n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for f in 0..p.frames {
        let start = f * p.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            values[[k, f]] = T::of((buf[k].norm() + p.eps).ln());
        }
    }
    Ok(Spectrogram { values, params: *p })
}
