//! Fields as collections of views, plus coordinate and timestep embeddings.
//!
//! Coordinates live in [0, 1] per axis with half-pixel centering: token `i`
//! of an axis with `n` entries sits at `(i + 0.5) / n`. A token coordinate is
//! the in-view `(row, col)` pair followed by the view-level components.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Default number of sinusoid bands per coordinate axis.
pub const DEFAULT_COORD_FREQS: usize = 10;
/// Default width of the timestep embedding.
pub const DEFAULT_TIME_EMBED_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Video,
    Views,
}

impl Modality {
    pub fn metric_dim(self) -> usize {
        match self {
            Modality::Image => 2,
            Modality::Video => 3,
            Modality::Views => 6,
        }
    }

    pub fn from_metric_dim(d: usize) -> Option<Self> {
        match d {
            2 => Some(Modality::Image),
            3 => Some(Modality::Video),
            6 => Some(Modality::Views),
            _ => None,
        }
    }
}

/// Shape of a field sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSpec {
    pub metric_dim: usize,
    pub signal_dim: usize,
    pub height: usize,
    pub width: usize,
    pub num_views: usize,
}

impl FieldSpec {
    pub fn new(metric_dim: usize, signal_dim: usize, height: usize, width: usize, num_views: usize) -> Result<Self> {
        if Modality::from_metric_dim(metric_dim).is_none() {
            return Err(Error::invalid(format!(
                "metric dimension must be 2, 3 or 6, got {metric_dim}"
            )));
        }
        if signal_dim == 0 || height == 0 || width == 0 || num_views == 0 {
            return Err(Error::invalid("field dimensions must be positive"));
        }
        if metric_dim == 2 && num_views != 1 {
            return Err(Error::invalid("an image field has exactly one view"));
        }
        Ok(FieldSpec {
            metric_dim,
            signal_dim,
            height,
            width,
            num_views,
        })
    }

    pub fn modality(&self) -> Modality {
        Modality::from_metric_dim(self.metric_dim).expect("validated at construction")
    }

    /// Length of the view-level coordinate: 0 for images, 1 for video frames,
    /// 4 for camera parameters.
    pub fn view_coord_dim(&self) -> usize {
        self.metric_dim - 2
    }

    /// Checks that views tile exactly into `patch`×`patch` blocks.
    pub fn check_patch(&self, patch: usize) -> Result<()> {
        if patch == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        if !self.height.is_multiple_of(patch) {
            return Err(Error::invalid(format!(
                "view height {} is not divisible by patch {patch}",
                self.height
            )));
        }
        if !self.width.is_multiple_of(patch) {
            return Err(Error::invalid(format!(
                "view width {} is not divisible by patch {patch}",
                self.width
            )));
        }
        Ok(())
    }
}

/// H×W×C pixel array, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "Image::new",
                format!("{height}x{width}x{channels}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.width + c) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[self.index(r, c, ch)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        let i = self.index(r, c, ch);
        self.data[i] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Single-channel object mask: `true` marks object pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("Mask::new", format!("{height}x{width}"), data.len()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// One view of a field: its location in the metric space plus its pixels
/// (normalized to [-1, 1]).
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub coord: Vec<f64>,
    pub pixels: Image,
}

impl View {
    pub fn new(coord: Vec<f64>, pixels: Image) -> Result<Self> {
        if coord.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!("view coordinate {coord:?} outside [0, 1]")));
        }
        Ok(View { coord, pixels })
    }
}

/// A field: ordered views sharing one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub spec: FieldSpec,
    pub views: Vec<View>,
    pub caption: String,
    pub masks: Option<Vec<Mask>>,
}

impl FieldSample {
    pub fn new(spec: FieldSpec, views: Vec<View>, caption: impl Into<String>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::invalid("a field needs at least one view"));
        }
        for (i, v) in views.iter().enumerate() {
            if v.coord.len() != spec.view_coord_dim() {
                return Err(Error::shape(
                    "FieldSample::new",
                    format!("{} view coordinates", spec.view_coord_dim()),
                    format!("{} in view {i}", v.coord.len()),
                ));
            }
            let p = &v.pixels;
            if p.height != spec.height || p.width != spec.width || p.channels != spec.signal_dim {
                return Err(Error::shape(
                    "FieldSample::new",
                    format!("{}x{}x{}", spec.height, spec.width, spec.signal_dim),
                    format!("{}x{}x{} in view {i}", p.height, p.width, p.channels),
                ));
            }
        }
        let spec = FieldSpec {
            num_views: views.len(),
            ..spec
        };
        Ok(FieldSample {
            spec,
            views,
            caption: caption.into(),
            masks: None,
        })
    }

    pub fn with_masks(mut self, masks: Vec<Mask>) -> Result<Self> {
        if masks.len() != self.views.len() {
            return Err(Error::shape("FieldSample::with_masks", self.views.len(), masks.len()));
        }
        self.masks = Some(masks);
        Ok(self)
    }
}

/// Normalized coordinate of entry `index` out of `count` along one axis.
#[inline]
pub fn centered(index: usize, count: usize) -> f64 {
    (index as f64 + 0.5) / count as f64
}

/// View coordinate of frame `index` in a clip of `frames` frames.
pub fn frame_coord(index: usize, frames: usize) -> Vec<f64> {
    vec![centered(index, frames)]
}

/// Camera placement used as the view-level coordinate of rendered views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraCoord {
    /// Radians in [0, 2π).
    pub azimuth: f64,
    /// Radians in [-π/2, π/2].
    pub elevation: f64,
    /// Distance from the object center in world units.
    pub radius: f64,
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point in pixels.
    pub principal: (f64, f64),
}

/// Largest camera distance representable in the normalized layout.
pub const CAMERA_RADIUS_SCALE: f64 = 4.0;

impl CameraCoord {
    /// Normalized 6-vector: azimuth/2π, (elevation+π/2)/π, radius/4,
    /// focal/(2·width), principal x / width, principal y / height.
    pub fn layout(&self, height: usize, width: usize) -> [f64; 6] {
        [
            self.azimuth.rem_euclid(2.0 * PI) / (2.0 * PI),
            (self.elevation + PI / 2.0) / PI,
            self.radius / CAMERA_RADIUS_SCALE,
            self.focal / (2.0 * width as f64),
            self.principal.0 / width as f64,
            self.principal.1 / height as f64,
        ]
    }

    /// View-level coordinate of a rendered view: the pose and focal
    /// entries of [`layout`](Self::layout). The image-plane position of a
    /// token comes from the in-view components instead of the principal point.
    pub fn view_coord(&self, height: usize, width: usize) -> Vec<f64> {
        self.layout(height, width)[..4].to_vec()
    }
}

/// Token coordinates of a `rows`×`cols` grid, row-major.
pub fn grid_coordinates(spec: &FieldSpec, rows: usize, cols: usize, view_coord: &[f64]) -> Result<Vec<Vec<f64>>> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("token grid must have at least one row and column"));
    }
    if view_coord.len() != spec.view_coord_dim() {
        return Err(Error::shape(
            "grid_coordinates",
            spec.view_coord_dim(),
            view_coord.len(),
        ));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut m = Vec::with_capacity(spec.metric_dim);
            m.push(centered(r, rows));
            m.push(centered(c, cols));
            m.extend_from_slice(view_coord);
            out.push(m);
        }
    }
    Ok(out)
}

/// Length of [`embed_coordinates`] output.
pub fn coord_embed_len(metric_dim: usize, num_freqs: usize) -> usize {
    metric_dim * 2 * num_freqs
}

/// Per axis, `sin(2^j π m)` and `cos(2^j π m)` interleaved for each band j.
pub fn embed_coordinates(m: &[f64], num_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(coord_embed_len(m.len(), num_freqs));
    for &x in m {
        let mut freq = PI;
        for _ in 0..num_freqs {
            let (s, c) = (freq * x).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
    out
}

/// Embeds a list of coordinates into an [N × embed] tensor.
pub fn embed_coordinate_rows<T: Scalar>(coords: &[Vec<f64>], num_freqs: usize) -> Result<Tensor<T>> {
    let first = coords
        .first()
        .ok_or_else(|| Error::invalid("no coordinates to embed"))?;
    let len = coord_embed_len(first.len(), num_freqs);
    let mut data = Vec::with_capacity(coords.len() * len);
    for m in coords {
        if m.len() != first.len() {
            return Err(Error::shape("embed_coordinate_rows", first.len(), m.len()));
        }
        data.extend(embed_coordinates(m, num_freqs).into_iter().map(T::of_f64));
    }
    Tensor::new(vec![coords.len(), len], data)
}

/// Sinusoidal timestep embedding: `dim/2` sines then `dim/2` cosines, with
/// frequencies spaced geometrically from 1 down to 1/10000.
pub fn embed_timestep(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "timestep embedding width must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            if half == 1 {
                1.0
            } else {
                (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp()
            }
        })
        .collect();
    let tf = t as f64;
    let mut out = Vec::with_capacity(dim);
    out.extend(freqs.iter().map(|f| (tf * f).sin()));
    out.extend(freqs.iter().map(|f| (tf * f).cos()));
    Ok(out)
}
