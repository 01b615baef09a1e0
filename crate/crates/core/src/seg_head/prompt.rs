use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Init, ModuleGroup, ParamId, ParamStore};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Background,
    Foreground,
}

impl PointLabel {
    fn index(self) -> usize {
        match self {
            PointLabel::Background => 0,
            PointLabel::Foreground => 1,
        }
    }
}

/// Point prompt in pixel coordinates (`x` along width).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

impl PromptPoint {
    /// Parses `x,y,fg` or `x,y,bg`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [x, y, l] = parts[..] else {
            return Err(Error::Contract(format!("point {s:?}: expected x,y,fg|bg")));
        };
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Contract(format!("point {s:?}: bad coordinate {v:?}")))
        };
        let label = match l {
            "fg" | "1" => PointLabel::Foreground,
            "bg" | "0" => PointLabel::Background,
            other => return Err(Error::Contract(format!("point {s:?}: bad label {other:?}"))),
        };
        Ok(Self {
            x: num(x)?,
            y: num(y)?,
            label,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PromptBox {
    /// Parses `x0,y0,x1,y1`; corners may come in either order.
    pub fn parse(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Contract(format!("box {s:?}: bad coordinate {p:?}")))
            })
            .collect::<Result<_>>()?;
        let [x0, y0, x1, y1] = v[..] else {
            return Err(Error::Contract(format!("box {s:?}: expected x0,y0,x1,y1")));
        };
        Ok(Self {
            x0: x0.min(x1),
            y0: y0.min(y1),
            x1: x0.max(x1),
            y1: y0.max(y1),
        })
    }
}

/// Sparse geometric prompts. Empty is the canonical audio-driven inference
/// path.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptSet {
    pub points: Vec<PromptPoint>,
    pub boxes: Vec<PromptBox>,
}

impl PromptSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.boxes.is_empty()
    }

    /// Every coordinate must lie in `[0, size]`.
    pub fn validate(&self, image_size: usize) -> Result<()> {
        let lim = image_size as f64;
        let ok = |v: f64| v.is_finite() && (0.0..=lim).contains(&v);
        for (i, p) in self.points.iter().enumerate() {
            if !ok(p.x) || !ok(p.y) {
                return Err(Error::Contract(format!(
                    "point {i} at ({}, {}) outside the {image_size}×{image_size} image",
                    p.x, p.y
                )));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if ![b.x0, b.y0, b.x1, b.y1].into_iter().all(ok) {
                return Err(Error::Contract(format!("box {i} outside the {image_size}×{image_size} image")));
            }
        }
        Ok(())
    }
}

/// Which learned embedding a sparse token carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSource {
    NoPrompt,
    Point(PointLabel),
    BoxCorner(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbeddings<T> {
    /// `(K, D)` sparse tokens.
    pub sparse: Array2<T>,
    /// `(D, h, w)` dense map at the coarsest pyramid resolution.
    pub dense: Array3<T>,
    pub sources: Vec<TokenSource>,
}

/// Angular frequency of the `k`-th sinusoid: `π · 2^(k/2)`.
fn frequency(k: usize) -> f64 {
    std::f64::consts::PI * 2f64.powf(k as f64 * 0.5)
}

/// Sinusoidal encoding of normalized coordinates `(u, v) ∈ [0, 1]²` into
/// `dim` values laid out as `[sin(ω u), cos(ω u), sin(ω v), cos(ω v)]`, each
/// block `dim / 4` wide.
pub fn positional_encoding<T: Scalar>(u: f64, v: f64, dim: usize) -> Array1<T> {
    let n = dim / 4;
    let mut out = Array1::zeros(dim);
    for k in 0..n {
        let w = frequency(k);
        out[k] = T::of((w * u).sin());
        out[n + k] = T::of((w * u).cos());
        out[2 * n + k] = T::of((w * v).sin());
        out[3 * n + k] = T::of((w * v).cos());
    }
    out
}

/// Encoding of every cell centre of an `h × w` grid, one row per pixel.
pub fn grid_encoding<T: Scalar>(h: usize, w: usize, dim: usize) -> Array2<T> {
    let mut out = Array2::zeros((h * w, dim));
    for y in 0..h {
        for x in 0..w {
            let pe = positional_encoding::<T>((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64, dim);
            out.row_mut(y * w + x).assign(&pe);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoder {
    pub no_prompt: ParamId,
    pub point_labels: ParamId,
    pub box_corners: ParamId,
    pub dense: ParamId,
    pub dim: usize,
    pub image_size: usize,
}

impl PromptEncoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize, image_size: usize) -> Self {
        let g = ModuleGroup::PromptEncoder;
        Self {
            no_prompt: init.uniform(g, "no_prompt", &[1, dim], 0.5),
            point_labels: init.uniform(g, "point_labels", &[2, dim], 0.5),
            box_corners: init.uniform(g, "box_corners", &[2, dim], 0.5),
            dense: init.uniform(g, "dense", &[dim], 0.5),
            dim,
            image_size,
        }
    }

    pub fn num_params(&self) -> usize {
        6 * self.dim
    }

    pub fn encode<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        prompts: &PromptSet,
        grid: (usize, usize),
    ) -> Result<PromptEmbeddings<T>> {
        prompts.validate(self.image_size)?;
        let size = self.image_size as f64;
        let mut rows: Vec<Array1<T>> = Vec::new();
        let mut sources = Vec::new();
        if prompts.is_empty() {
            rows.push(p.view2(self.no_prompt).row(0).to_owned());
            sources.push(TokenSource::NoPrompt);
        }
        let labels = p.view2(self.point_labels);
        for pt in &prompts.points {
            let pe = positional_encoding::<T>(pt.x / size, pt.y / size, self.dim);
            rows.push(pe + &labels.row(pt.label.index()));
            sources.push(TokenSource::Point(pt.label));
        }
        let corners = p.view2(self.box_corners);
        for b in &prompts.boxes {
            for (i, (x, y)) in [(b.x0, b.y0), (b.x1, b.y1)].into_iter().enumerate() {
                let pe = positional_encoding::<T>(x / size, y / size, self.dim);
                rows.push(pe + &corners.row(i));
                sources.push(TokenSource::BoxCorner(i));
            }
        }
        let mut sparse = Array2::zeros((rows.len(), self.dim));
        for (i, r) in rows.iter().enumerate() {
            sparse.row_mut(i).assign(r);
        }
        let dense = p
            .view1(self.dense)
            .insert_axis(Axis(1))
            .insert_axis(Axis(2))
            .broadcast((self.dim, grid.0, grid.1))
            .expect("broadcast")
            .to_owned();
        Ok(PromptEmbeddings { sparse, dense, sources })
    }

    pub fn backward<T: Scalar>(
        &self,
        sources: &[TokenSource],
        dsparse: ArrayView2<'_, T>,
        ddense: ArrayView3<'_, T>,
        grads: &mut Gradients<T>,
    ) {
        let mut d_no = Array2::<T>::zeros((1, self.dim));
        let mut d_labels = Array2::<T>::zeros((2, self.dim));
        let mut d_corners = Array2::<T>::zeros((2, self.dim));
        for (src, row) in sources.iter().zip(dsparse.rows()) {
            let mut target = match *src {
                TokenSource::NoPrompt => d_no.row_mut(0),
                TokenSource::Point(l) => d_labels.row_mut(l.index()),
                TokenSource::BoxCorner(i) => d_corners.row_mut(i),
            };
            target += &row;
        }
        grads.accumulate(self.no_prompt, &d_no.view());
        grads.accumulate(self.point_labels, &d_labels.view());
        grads.accumulate(self.box_corners, &d_corners.view());
        grads.accumulate(self.dense, &ddense.sum_axis(Axis(2)).sum_axis(Axis(1)).view());
    }
}
