//! Patch codec: views to token grids and back.
//!
//! Each `patch`×`patch` block becomes one token: the block is flattened
//! row-major with channels innermost, then multiplied by a projection with
//! orthonormal rows or columns. When `token_dim >= patch²·channels` the rows
//! are orthonormal and decoding with the transpose is an exact left inverse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::field::{FieldSpec, Image, View};
use crate::numerics::tensor::shape_str;
use crate::numerics::{matmul, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const DEFAULT_PATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecMode {
    /// Fixed seeded projection.
    Raw,
    /// Projection is a trainable parameter; decoding uses its transpose.
    Learned,
}

impl CodecMode {
    pub fn name(self) -> &'static str {
        match self {
            CodecMode::Raw => "raw",
            CodecMode::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(CodecMode::Raw),
            "learned" => Ok(CodecMode::Learned),
            other => Err(Error::invalid(format!("unknown codec mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchCodecConfig {
    pub patch: usize,
    pub signal_dim: usize,
    pub token_dim: usize,
    pub mode: CodecMode,
    pub seed: u64,
}

impl PatchCodecConfig {
    /// Raw mode with `token_dim` equal to the flattened patch length.
    pub fn raw(patch: usize, signal_dim: usize) -> Self {
        PatchCodecConfig {
            patch,
            signal_dim,
            token_dim: patch * patch * signal_dim,
            mode: CodecMode::Raw,
            seed: 0,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.signal_dim
    }

    /// True when decode(encode(v)) == v for every view.
    pub fn is_lossless(&self) -> bool {
        self.token_dim >= self.patch_dim()
    }

    /// Raw mode at full width: token channel `k` is pixel value `k` of the
    /// patch (row-major, channel-minor). Other shapes use a seeded
    /// orthonormal map.
    pub fn is_identity(&self) -> bool {
        self.mode == CodecMode::Raw && self.token_dim == self.patch_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.signal_dim == 0 || self.token_dim == 0 {
            return Err(Error::invalid("codec dimensions must be positive"));
        }
        Ok(())
    }
}

/// Orthonormal columns spanning a Gaussian draw, via Gram-Schmidt with one
/// reorthogonalization pass. Returns `rows × cols` with `cols <= rows`.
fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    debug_assert!(cols <= rows);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        q.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for (c, col) in q.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            out[r * cols + c] = v;
        }
    }
    out
}

/// `patch_dim × token_dim` projection with orthonormal rows or columns.
pub fn orthonormal_projection<T: Scalar>(patch_dim: usize, token_dim: usize, seed: u64) -> Tensor<T> {
    let data = if token_dim <= patch_dim {
        orthonormal_columns(patch_dim, token_dim, seed)
    } else {
        let q = orthonormal_columns(token_dim, patch_dim, seed);
        let mut t = vec![0.0; patch_dim * token_dim];
        for r in 0..token_dim {
            for c in 0..patch_dim {
                t[c * token_dim + r] = q[r * patch_dim + c];
            }
        }
        t
    };
    Tensor::new(vec![patch_dim, token_dim], data.into_iter().map(T::of_f64).collect())
        .expect("projection dimensions are positive")
}

#[derive(Debug, Clone)]
pub struct PatchCodec<T> {
    cfg: PatchCodecConfig,
    projection: Tensor<T>,
}

impl<T: Scalar> PatchCodec<T> {
    pub fn new(cfg: PatchCodecConfig) -> Result<Self> {
        cfg.validate()?;
        let projection = if cfg.is_identity() {
            let d = cfg.token_dim;
            Tensor::from_fn(vec![d, d], |i| if i / d == i % d { T::one() } else { T::zero() })
        } else {
            orthonormal_projection(cfg.patch_dim(), cfg.token_dim, cfg.seed)
        };
        Ok(PatchCodec { cfg, projection })
    }

    pub fn with_projection(cfg: PatchCodecConfig, projection: Tensor<T>) -> Result<Self> {
        cfg.validate()?;
        if projection.shape() != [cfg.patch_dim(), cfg.token_dim] {
            return Err(Error::shape(
                "PatchCodec::with_projection",
                format!("[{}x{}]", cfg.patch_dim(), cfg.token_dim),
                shape_str(projection.shape()),
            ));
        }
        Ok(PatchCodec { cfg, projection })
    }

    pub fn config(&self) -> &PatchCodecConfig {
        &self.cfg
    }

    pub fn token_dim(&self) -> usize {
        self.cfg.token_dim
    }

    pub fn projection(&self) -> &Tensor<T> {
        &self.projection
    }

    pub fn set_projection(&mut self, projection: Tensor<T>) -> Result<()> {
        if projection.shape() != self.projection.shape() {
            return Err(Error::shape(
                "PatchCodec::set_projection",
                shape_str(self.projection.shape()),
                shape_str(projection.shape()),
            ));
        }
        self.projection = projection;
        Ok(())
    }

    /// Token grid dimensions for views of `spec`.
    pub fn grid(&self, spec: &FieldSpec) -> Result<(usize, usize)> {
        spec.check_patch(self.cfg.patch)?;
        Ok((spec.height / self.cfg.patch, spec.width / self.cfg.patch))
    }

    pub fn tokens_per_view(&self, spec: &FieldSpec) -> Result<usize> {
        self.grid(spec).map(|(r, c)| r * c)
    }

    /// Flattened patches, [Z × patch²·C], patches row-major.
    pub fn patchify(&self, pixels: &Image) -> Result<Tensor<T>> {
        let p = self.cfg.patch;
        if pixels.channels != self.cfg.signal_dim {
            return Err(Error::shape(
                "patchify",
                format!("{} channels", self.cfg.signal_dim),
                pixels.channels,
            ));
        }
        for (name, extent) in [("height", pixels.height), ("width", pixels.width)] {
            if extent % p != 0 {
                return Err(Error::invalid(format!(
                    "view {name} {extent} is not divisible by patch {p}"
                )));
            }
        }
        let (gr, gc) = (pixels.height / p, pixels.width / p);
        let mut data = Vec::with_capacity(pixels.data.len());
        for tr in 0..gr {
            for tc in 0..gc {
                for r in 0..p {
                    let start = pixels.index(tr * p + r, tc * p, 0);
                    let end = start + p * pixels.channels;
                    data.extend(pixels.data[start..end].iter().map(|&v| T::of_f64(v)));
                }
            }
        }
        Tensor::new(vec![gr * gc, self.cfg.patch_dim()], data)
    }

    /// Inverse of [`patchify`](Self::patchify).
    pub fn unpatchify(&self, patches: &Tensor<T>, height: usize, width: usize) -> Result<Image> {
        let p = self.cfg.patch;
        let c = self.cfg.signal_dim;
        let (gr, gc) = (height / p, width / p);
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) || patches.shape() != [gr * gc, self.cfg.patch_dim()] {
            return Err(Error::shape(
                "unpatchify",
                format!("[{}x{}]", gr * gc, self.cfg.patch_dim()),
                shape_str(patches.shape()),
            ));
        }
        let mut img = Image::filled(height, width, c, 0.0);
        let src = patches.data();
        let mut i = 0;
        for tr in 0..gr {
            for tc in 0..gc {
                for r in 0..p {
                    let start = img.index(tr * p + r, tc * p, 0);
                    for v in &mut img.data[start..start + p * c] {
                        *v = src[i].as_f64();
                        i += 1;
                    }
                }
            }
        }
        Ok(img)
    }

    /// Token grid of one view, [Z × token_dim].
    pub fn encode_view(&self, view: &View) -> Result<Tensor<T>> {
        matmul(&self.patchify(&view.pixels)?, &self.projection)
    }

    /// Tokens of several views stacked view-major, [n·Z × token_dim].
    pub fn encode_views<'a>(&self, views: impl IntoIterator<Item = &'a View>) -> Result<Tensor<T>> {
        let grids = views
            .into_iter()
            .map(|v| self.encode_view(v))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&grids)
    }

    /// Rebuilds a view of `spec` from its token grid.
    pub fn decode_view(&self, tokens: &Tensor<T>, spec: &FieldSpec, coord: Vec<f64>) -> Result<View> {
        let z = self.tokens_per_view(spec)?;
        if tokens.shape() != [z, self.cfg.token_dim] {
            return Err(Error::shape(
                "decode_view",
                format!("[{z}x{}]", self.cfg.token_dim),
                shape_str(tokens.shape()),
            ));
        }
        let (pd, td) = (self.cfg.patch_dim(), self.cfg.token_dim);
        // tokens · projectionᵀ
        let proj = self.projection.data();
        let mut patches = vec![T::zero(); z * pd];
        for (row, out) in tokens.data().chunks(td).zip(patches.chunks_mut(pd)) {
            for (i, o) in out.iter_mut().enumerate() {
                *o = row.iter().zip(&proj[i * td..(i + 1) * td]).map(|(&a, &b)| a * b).sum();
            }
        }
        let patches = Tensor::new(vec![z, pd], patches)?;
        let pixels = self.unpatchify(&patches, spec.height, spec.width)?;
        Ok(View { coord, pixels })
    }

    /// Splits stacked tokens [n·Z × D] back into `n` decoded views.
    pub fn decode_views(&self, tokens: &Tensor<T>, spec: &FieldSpec, coords: &[Vec<f64>]) -> Result<Vec<View>> {
        let z = self.tokens_per_view(spec)?;
        let d = self.cfg.token_dim;
        let (rows, _) = tokens.dims2()?;
        if rows != z * coords.len() {
            return Err(Error::shape("decode_views", z * coords.len(), rows));
        }
        coords
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let slice = Tensor::new(vec![z, d], tokens.data()[i * z * d..(i + 1) * z * d].to_vec())?;
                self.decode_view(&slice, spec, c.clone())
            })
            .collect()
    }

    /// Tied-weight reconstruction loss for learned mode:
    /// `mean((X·P·Pᵀ − X)²)` with `P` bound at `projection`.
    pub fn reconstruction_loss(&self, tape: &mut Tape<T>, projection: Var, patches: Var) -> Result<Var> {
        let tokens = tape.matmul(patches, projection)?;
        let pt = tape.transpose(projection)?;
        let recon = tape.matmul(tokens, pt)?;
        tape.mse(recon, patches)
    }
}
