//! Procedural toy fields, rendered-view preprocessing and manifest I/O.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::{frame_coord, CameraCoord, FieldSample, FieldSpec, Image, Mask, View};
use crate::imageio::{read_image, read_pgm_mask, write_image, write_pgm_mask};

/// Pixel value of empty background.
pub const BACKGROUND: f64 = -1.0;
/// Frames kept from long clips.
pub const MAX_FRAMES: usize = 128;
pub const PREFILL_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ToyColor {
    Red,
    Green,
    Blue,
}

impl ToyColor {
    pub const ALL: [ToyColor; 3] = [ToyColor::Red, ToyColor::Green, ToyColor::Blue];

    pub fn name(self) -> &'static str {
        match self {
            ToyColor::Red => "red",
            ToyColor::Green => "green",
            ToyColor::Blue => "blue",
        }
    }

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        ToyColor::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    LeftToRight,
    TopToBottom,
}

impl Motion {
    pub fn phrase(self) -> &'static str {
        match self {
            Motion::LeftToRight => "left to right",
            Motion::TopToBottom => "top to bottom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyVideoSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub square_size: usize,
    /// Drawn from the seed when `None`.
    pub color: Option<ToyColor>,
    pub motion: Option<Motion>,
    /// Fixed row (left→right) or column (top→bottom) of the square.
    pub lane: Option<usize>,
}

impl Default for ToyVideoSpec {
    fn default() -> Self {
        ToyVideoSpec {
            height: 16,
            width: 16,
            frames: 8,
            square_size: 4,
            color: None,
            motion: None,
            lane: None,
        }
    }
}

pub fn toy_caption(color: ToyColor, motion: Option<Motion>) -> String {
    match motion {
        Some(m) => format!("a {} square moving {}", color.name(), m.phrase()),
        None => format!("a {} square", color.name()),
    }
}

/// Square of one primary colour sliding linearly across a black frame.
pub fn gen_toy_video(spec: &ToyVideoSpec, seed: u64) -> Result<FieldSample> {
    let s = spec.square_size;
    if s == 0 || s > spec.height || s > spec.width {
        return Err(Error::invalid(format!(
            "square of size {s} does not fit a {}x{} frame",
            spec.height, spec.width
        )));
    }
    if spec.frames == 0 {
        return Err(Error::invalid("a toy video needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = spec.color.unwrap_or_else(|| ToyColor::ALL[rng.random_range(0..3)]);
    let motion = spec.motion.unwrap_or_else(|| {
        if rng.random_bool(0.5) {
            Motion::LeftToRight
        } else {
            Motion::TopToBottom
        }
    });
    let (travel_extent, lane_extent) = match motion {
        Motion::LeftToRight => (spec.width, spec.height),
        Motion::TopToBottom => (spec.height, spec.width),
    };
    let lane = match spec.lane {
        Some(l) if l + s > lane_extent => {
            return Err(Error::invalid(format!("lane {l} puts the square outside the frame")));
        }
        Some(l) => l,
        None => rng.random_range(0..=lane_extent - s),
    };
    let travel = travel_extent - s;
    let mut views = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let pos = if spec.frames == 1 {
            0
        } else {
            (f as f64 * travel as f64 / (spec.frames - 1) as f64).round() as usize
        };
        let (top, left) = match motion {
            Motion::LeftToRight => (lane, pos),
            Motion::TopToBottom => (pos, lane),
        };
        let mut img = Image::filled(spec.height, spec.width, 3, BACKGROUND);
        for r in top..top + s {
            for c in left..left + s {
                img.set(r, c, color.channel(), 1.0);
            }
        }
        let coord = if spec.frames == 1 {
            vec![]
        } else {
            frame_coord(f, spec.frames)
        };
        views.push(View::new(coord, img)?);
    }
    let (metric_dim, caption) = if spec.frames == 1 {
        (2, toy_caption(color, None))
    } else {
        (3, toy_caption(color, Some(motion)))
    };
    let fs = FieldSpec::new(metric_dim, 3, spec.height, spec.width, spec.frames)?;
    FieldSample::new(fs, views, caption)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyMultiViewSpec {
    pub height: usize,
    pub width: usize,
    pub views: usize,
    /// Radians above the horizon for the whole azimuth ring.
    pub elevation: f64,
    /// Distance of the camera from the cube center (cube side 1).
    pub camera_radius: f64,
    /// Focal length in pixels; `None` means the view width.
    pub focal: Option<f64>,
    pub color: Option<ToyColor>,
}

impl Default for ToyMultiViewSpec {
    fn default() -> Self {
        ToyMultiViewSpec {
            height: 16,
            width: 16,
            views: 16,
            elevation: 0.5,
            camera_radius: 2.0,
            focal: None,
            color: None,
        }
    }
}

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn base_rgb(color: ToyColor) -> V3 {
    match color {
        ToyColor::Red => [1.0, 0.15, 0.15],
        ToyColor::Green => [0.15, 1.0, 0.15],
        ToyColor::Blue => [0.15, 0.15, 1.0],
    }
}

/// Flat-shaded unit cube seen from `cam`, faces drawn far to near.
fn render_cube(cam: &CameraCoord, height: usize, width: usize, rgb: V3) -> (Image, Mask) {
    let (ce, se) = (cam.elevation.cos(), cam.elevation.sin());
    let eye = [
        cam.radius * ce * cam.azimuth.sin(),
        cam.radius * se,
        cam.radius * ce * cam.azimuth.cos(),
    ];
    let fwd = normalize([-eye[0], -eye[1], -eye[2]]);
    let right = normalize(cross(fwd, [0.0, 1.0, 0.0]));
    let up = cross(right, fwd);
    let project = |p: V3| {
        let d = sub(p, eye);
        let z = dot(d, fwd);
        (
            cam.focal * dot(d, right) / z + cam.principal.0,
            -cam.focal * dot(d, up) / z + cam.principal.1,
        )
    };
    let light = normalize([0.3, 0.8, 0.5]);
    let mut faces = Vec::new();
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut n = [0.0; 3];
            n[axis] = sign;
            let center = [n[0] * 0.5, n[1] * 0.5, n[2] * 0.5];
            if dot(n, sub(eye, center)) <= 0.0 {
                continue;
            }
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let corners: Vec<(f64, f64)> = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
                .iter()
                .map(|&(a, b)| {
                    let mut p = center;
                    p[u] = a;
                    p[v] = b;
                    project(p)
                })
                .collect();
            let dist = dot(sub(center, eye), sub(center, eye));
            let shade = 0.35 + 0.65 * dot(n, light).max(0.0);
            faces.push((dist, corners, shade));
        }
    }
    faces.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut img = Image::filled(height, width, 3, BACKGROUND);
    let mut mask = Mask::filled(height, width, false);
    for (_, poly, shade) in &faces {
        for r in 0..height {
            for c in 0..width {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                let sides: Vec<f64> = (0..4)
                    .map(|i| {
                        let (a, b) = (poly[i], poly[(i + 1) % 4]);
                        (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                    })
                    .collect();
                if sides.iter().all(|&s| s >= 0.0) || sides.iter().all(|&s| s <= 0.0) {
                    for (ch, &base) in rgb.iter().enumerate() {
                        img.set(r, c, ch, 2.0 * base * shade - 1.0);
                    }
                    mask.data[r * width + c] = true;
                }
            }
        }
    }
    (img, mask)
}

/// Cameras of the azimuth ring used by [`gen_toy_views`].
pub fn toy_cameras(spec: &ToyMultiViewSpec) -> Vec<CameraCoord> {
    let focal = spec.focal.unwrap_or(spec.width as f64);
    (0..spec.views)
        .map(|i| CameraCoord {
            azimuth: 2.0 * PI * i as f64 / spec.views as f64,
            elevation: spec.elevation,
            radius: spec.camera_radius,
            focal,
            principal: (spec.width as f64 / 2.0, spec.height as f64 / 2.0),
        })
        .collect()
}

/// Renderings of a coloured cube around an azimuth ring, with object masks.
pub fn gen_toy_views(spec: &ToyMultiViewSpec, seed: u64) -> Result<FieldSample> {
    if spec.views == 0 {
        return Err(Error::invalid("need at least one view"));
    }
    if !(spec.camera_radius > 0.9 && spec.camera_radius <= crate::field::CAMERA_RADIUS_SCALE) {
        return Err(Error::invalid(format!(
            "camera radius {} must lie in (0.9, {}]",
            spec.camera_radius,
            crate::field::CAMERA_RADIUS_SCALE
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = spec.color.unwrap_or_else(|| ToyColor::ALL[rng.random_range(0..3)]);
    let mut views = Vec::with_capacity(spec.views);
    let mut masks = Vec::with_capacity(spec.views);
    for cam in toy_cameras(spec) {
        let (img, mask) = render_cube(&cam, spec.height, spec.width, base_rgb(color));
        views.push(View::new(cam.view_coord(spec.height, spec.width), img)?);
        masks.push(mask);
    }
    let fs = FieldSpec::new(6, 3, spec.height, spec.width, spec.views)?;
    FieldSample::new(fs, views, format!("a {} cube", color.name()))?.with_masks(masks)
}

fn check_mask(view: &View, mask: &Mask) -> Result<()> {
    if mask.height != view.pixels.height || mask.width != view.pixels.width {
        return Err(Error::shape(
            "mask",
            format!("{}x{}", view.pixels.height, view.pixels.width),
            format!("{}x{}", mask.height, mask.width),
        ));
    }
    Ok(())
}

/// Replaces background pixels with N(0, σ) draws clamped to [-1, 1].
pub fn prefill_blank<R: Rng + ?Sized>(view: &View, mask: &Mask, sigma: f64, rng: &mut R) -> Result<View> {
    check_mask(view, mask)?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(format!("sigma {sigma}: {e}")))?;
    let mut out = view.clone();
    let ch = out.pixels.channels;
    for (i, &object) in mask.data.iter().enumerate() {
        if !object {
            for v in &mut out.pixels.data[i * ch..(i + 1) * ch] {
                *v = normal.sample(rng).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Sets background pixels to `background`.
pub fn postprocess_mask(view: &View, mask: &Mask, background: f64) -> Result<View> {
    check_mask(view, mask)?;
    let mut out = view.clone();
    let ch = out.pixels.channels;
    for (i, &object) in mask.data.iter().enumerate() {
        if !object {
            out.pixels.data[i * ch..(i + 1) * ch].fill(background);
        }
    }
    Ok(out)
}

/// `floor(i·total/keep)` for `i < keep`, or every index when `total <= keep`.
pub fn subsample_frames(total: usize, keep: usize) -> Vec<usize> {
    if total <= keep {
        return (0..total).collect();
    }
    (0..keep).map(|i| i * total / keep).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub coord: Vec<f64>,
    pub caption: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRecord {
    pub line: usize,
    pub reason: String,
}

/// Manifest records grouped into fields; pixels load on demand.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    pub metric_dim: usize,
    pub fields: Vec<Vec<ManifestRecord>>,
    pub skipped: Vec<SkippedRecord>,
}

fn parse_header(line: &str) -> Option<usize> {
    let rest = line.strip_prefix('#')?.trim();
    let (key, value) = rest.split_once('=')?;
    (key.trim() == "metric_dim").then(|| value.trim().parse().ok())?
}

fn parse_record(
    line: &str,
    view_dims: usize,
    base: &Path,
    lineno: usize,
) -> std::result::Result<ManifestRecord, String> {
    let parts: Vec<&str> = line.splitn(view_dims + 2, ',').map(str::trim).collect();
    if parts.len() < 1 + view_dims {
        return Err(format!("expected {view_dims} coordinates, found {}", parts.len() - 1));
    }
    if parts[0].is_empty() {
        return Err("empty image path".into());
    }
    let mut coord = Vec::with_capacity(view_dims);
    for p in &parts[1..1 + view_dims] {
        let v: f64 = p.parse().map_err(|_| format!("coordinate {p:?} is not a number"))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("coordinate {v} outside [0, 1]"));
        }
        coord.push(v);
    }
    let caption = parts.get(1 + view_dims).copied().unwrap_or("");
    // a numeric token right after the coordinates means the record has too many
    if caption
        .split(',')
        .next()
        .is_some_and(|c| c.trim().parse::<f64>().is_ok())
    {
        return Err(format!("more than {view_dims} coordinates"));
    }
    Ok(ManifestRecord {
        image: base.join(parts[0]),
        coord,
        caption: caption.to_string(),
        line: lineno,
    })
}

/// Reads a manifest of `image_path, v1..v_dv, caption` lines. The metric
/// dimension comes from `metric_dim` or a `# metric_dim = N` header. Images
/// group into fields by parent directory; a still-image manifest has one
/// field per record. Invalid records are skipped and reported.
pub fn ingest_manifest(path: &Path, metric_dim: Option<usize>) -> Result<ManifestDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let header = text.lines().find_map(parse_header);
    let metric_dim = metric_dim
        .or(header)
        .ok_or_else(|| Error::invalid(format!("{}: metric dimension not given", path.display())))?;
    if ![2, 3, 6].contains(&metric_dim) {
        return Err(Error::invalid(format!(
            "metric dimension {metric_dim} not in {{2, 3, 6}}"
        )));
    }
    let view_dims = metric_dim - 2;
    let mut skipped = Vec::new();
    let mut fields: Vec<Vec<ManifestRecord>> = Vec::new();
    let mut index: HashMap<PathBuf, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_record(line, view_dims, base, i + 1) {
            Ok(rec) => {
                if metric_dim == 2 {
                    fields.push(vec![rec]);
                } else {
                    let key = rec.image.parent().map(Path::to_path_buf).unwrap_or_default();
                    let slot = *index.entry(key).or_insert_with(|| {
                        fields.push(Vec::new());
                        fields.len() - 1
                    });
                    fields[slot].push(rec);
                }
            }
            Err(reason) => {
                log::warn!("{}:{}: skipping record: {reason}", path.display(), i + 1);
                skipped.push(SkippedRecord { line: i + 1, reason });
            }
        }
    }
    if fields.is_empty() {
        log::warn!("{}: manifest has no usable records", path.display());
    }
    Ok(ManifestDataset {
        metric_dim,
        fields,
        skipped,
    })
}

fn mask_path(image: &Path) -> PathBuf {
    image.with_extension("mask.pgm")
}

impl ManifestDataset {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Loads field `i`; clips longer than 128 frames are subsampled
    /// uniformly. Masks load when every view has a `.mask.pgm` sibling.
    pub fn load_field(&self, i: usize) -> Result<FieldSample> {
        let records = self
            .fields
            .get(i)
            .ok_or_else(|| Error::invalid(format!("field {i} out of range ({} fields)", self.len())))?;
        let keep = if self.metric_dim == 3 {
            subsample_frames(records.len(), MAX_FRAMES)
        } else {
            (0..records.len()).collect()
        };
        let mut views = Vec::with_capacity(keep.len());
        let mut masks = Vec::new();
        for &k in &keep {
            let rec = &records[k];
            let pixels = read_image(&rec.image)?;
            views.push(View::new(rec.coord.clone(), pixels)?);
            let mp = mask_path(&rec.image);
            if mp.exists() {
                masks.push(read_pgm_mask(&mp)?);
            }
        }
        let first = &views[0].pixels;
        let spec = FieldSpec::new(self.metric_dim, first.channels, first.height, first.width, views.len())?;
        let sample = FieldSample::new(spec, views, records[0].caption.clone())?;
        if masks.len() == keep.len() {
            sample.with_masks(masks)
        } else {
            Ok(sample)
        }
    }

    pub fn load_all(&self) -> Result<Vec<FieldSample>> {
        (0..self.len()).map(|i| self.load_field(i)).collect()
    }
}

/// Writes `fields` under `dir` (one subdirectory per field) plus
/// `dir/manifest.txt`, and returns the manifest path.
pub fn write_manifest(dir: &Path, fields: &[FieldSample], ext: &str) -> Result<PathBuf> {
    let first = fields.first().ok_or_else(|| Error::invalid("no fields to write"))?;
    let metric_dim = first.spec.metric_dim;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = format!("# metric_dim = {metric_dim}\n");
    for (i, f) in fields.iter().enumerate() {
        if f.spec.metric_dim != metric_dim {
            return Err(Error::invalid("all fields of a manifest must share a metric dimension"));
        }
        let sub = format!("field_{i:04}");
        fs::create_dir_all(dir.join(&sub)).map_err(|e| Error::io(dir.join(&sub), e))?;
        for (j, v) in f.views.iter().enumerate() {
            let rel = format!("{sub}/view_{j:03}.{ext}");
            let path = dir.join(&rel);
            write_image(&path, &v.pixels)?;
            if let Some(m) = f.masks.as_ref().map(|m| &m[j]) {
                write_pgm_mask(&mask_path(&path), m)?;
            }
            text.push_str(&rel);
            for c in &v.coord {
                let _ = write!(text, ", {c:?}");
            }
            let _ = writeln!(text, ", {}", f.caption.replace(['\n', '\r'], " "));
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
