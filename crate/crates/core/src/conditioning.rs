//! Condition embeddings: toy text, single-view statistics, null, external.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::{AnyTensor, Container};
use crate::error::{Error, Result};
use crate::field::View;
use crate::numerics::tensor::shape_str;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Largest per-token L2 norm a condition embedding may carry.
pub const MAX_TOKEN_NORM: f64 = 10.0;
/// Tensor name used inside embedding files.
pub const EMBEDDING_TENSOR: &str = "condition";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    Text,
    View,
    Null,
    External,
}

impl SourceTag {
    pub fn name(self) -> &'static str {
        match self {
            SourceTag::Text => "text",
            SourceTag::View => "view",
            SourceTag::Null => "null",
            SourceTag::External => "external",
        }
    }
}

/// Condition tokens, [Zc × cond_dim].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding<T> {
    pub tokens: Tensor<T>,
    pub source: SourceTag,
}

impl<T: Scalar> ConditionEmbedding<T> {
    pub fn new(tokens: Tensor<T>, source: SourceTag) -> Result<Self> {
        tokens.dims2()?;
        if !tokens.all_finite() {
            return Err(Error::NonFinite {
                op: "condition embedding",
            });
        }
        let (zc, dim) = tokens.dims2()?;
        for r in 0..zc {
            let norm = tokens.row(r).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if norm > MAX_TOKEN_NORM {
                return Err(Error::invalid(format!(
                    "condition token {r} has L2 norm {norm:.3} above {MAX_TOKEN_NORM} (cond_dim {dim})"
                )));
            }
        }
        Ok(ConditionEmbedding { tokens, source })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Mean over condition tokens, [1 × cond_dim].
    pub fn pooled(&self) -> Tensor<T> {
        let (zc, dim) = self.tokens.dims2().expect("rank 2 by construction");
        let mut out = vec![T::zero(); dim];
        for r in 0..zc {
            for (o, &v) in out.iter_mut().zip(self.tokens.row(r)) {
                *o += v;
            }
        }
        let inv = T::from_usize(zc).unwrap().recip();
        out.iter_mut().for_each(|v| *v *= inv);
        Tensor::new(vec![1, dim], out).expect("positive dims")
    }
}

/// How one field is conditioned when calling the score network.
#[derive(Debug, Clone, Copy)]
pub enum Condition<'a, T> {
    Embedding(&'a ConditionEmbedding<T>),
    /// The network's learned null embedding.
    Null,
}

/// FNV-1a, fixed so word vectors are identical across platforms.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn unit_gaussian(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

/// Hash-based stand-in for a text encoder: each whitespace-separated word
/// maps to a seeded unit vector; the word sequence is repeated cyclically
/// (or truncated) to `zc` tokens.
pub fn embed_text_toy<T: Scalar>(
    caption: &str,
    zc: usize,
    cond_dim: usize,
    seed: u64,
) -> Result<ConditionEmbedding<T>> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::invalid("caption is empty"));
    }
    if zc == 0 || cond_dim == 0 {
        return Err(Error::invalid("condition shape must be positive"));
    }
    let vectors: Vec<Vec<f64>> = words
        .iter()
        .map(|w| unit_gaussian(cond_dim, fnv1a(w.to_lowercase().as_bytes()) ^ seed))
        .collect();
    let data = (0..zc)
        .flat_map(|i| vectors[i % vectors.len()].iter().map(|&v| T::of_f64(v)))
        .collect();
    ConditionEmbedding::new(Tensor::new(vec![zc, cond_dim], data)?, SourceTag::Text)
}

/// Per-patch colour statistics: mean then std of each channel, patch-major.
pub fn view_statistics(view: &View, patch: usize) -> Result<Vec<f64>> {
    let img = &view.pixels;
    if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
        return Err(Error::invalid(format!(
            "view {}x{} does not tile into {patch}-pixel patches",
            img.height, img.width
        )));
    }
    let c = img.channels;
    let n = (patch * patch) as f64;
    let mut stats = Vec::new();
    for pr in 0..img.height / patch {
        for pc in 0..img.width / patch {
            let mut sum = vec![0.0; c];
            let mut sq = vec![0.0; c];
            for r in pr * patch..(pr + 1) * patch {
                for col in pc * patch..(pc + 1) * patch {
                    for ch in 0..c {
                        let v = img.get(r, col, ch);
                        sum[ch] += v;
                        sq[ch] += v * v;
                    }
                }
            }
            let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
            stats.extend_from_slice(&means);
            stats.extend(sq.iter().zip(&means).map(|(q, m)| (q / n - m * m).max(0.0).sqrt()));
        }
    }
    Ok(stats)
}

/// Single-view condition: patch statistics through a fixed seeded linear
/// map, one token, rescaled onto the norm bound if it would exceed it.
pub fn embed_view<T: Scalar>(view: &View, cond_dim: usize, patch: usize, seed: u64) -> Result<ConditionEmbedding<T>> {
    let stats = view_statistics(view, patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_u64.rotate_left(32));
    let scale = (stats.len() as f64).sqrt().recip();
    let mut out = vec![0.0; cond_dim];
    for &s in &stats {
        for o in out.iter_mut() {
            let w: f64 = StandardNormal.sample(&mut rng);
            *o += s * w * scale;
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > MAX_TOKEN_NORM {
        out.iter_mut().for_each(|v| *v *= MAX_TOKEN_NORM / norm);
    }
    let data = out.into_iter().map(T::of_f64).collect();
    ConditionEmbedding::new(Tensor::new(vec![1, cond_dim], data)?, SourceTag::View)
}

/// Initial value of the learned null embedding: zeros, tagged `Null`.
pub fn null_condition<T: Scalar>(zc: usize, cond_dim: usize) -> ConditionEmbedding<T> {
    ConditionEmbedding {
        tokens: Tensor::zeros(vec![zc, cond_dim]),
        source: SourceTag::Null,
    }
}

pub fn save_external_embeddings<T: Scalar>(path: &Path, emb: &ConditionEmbedding<T>) -> Result<()> {
    let mut c = Container::new(format!("kind = \"condition\"\nsource = \"{}\"\n", emb.source.name()));
    c.push(EMBEDDING_TENSOR, AnyTensor::from_scalar(&emb.tokens));
    c.save(path)
}

/// Loads precomputed embeddings, checking `[Zc × cond_dim]` against
/// `expected` when given.
pub fn load_external_embeddings<T: Scalar>(
    path: &Path,
    expected: Option<(usize, usize)>,
) -> Result<ConditionEmbedding<T>> {
    let c = Container::load(path)?;
    let t = c.require(EMBEDDING_TENSOR)?;
    if t.shape().len() != 2 {
        return Err(Error::shape("load_external_embeddings", "rank 2", shape_str(t.shape())));
    }
    if let Some((zc, dim)) = expected {
        if t.shape() != [zc, dim] {
            return Err(Error::shape(
                "load_external_embeddings",
                format!("[{zc}x{dim}]"),
                shape_str(t.shape()),
            ));
        }
    }
    ConditionEmbedding::new(t.to::<T>(), SourceTag::External)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Image;

    #[test]
    fn toy_text_is_deterministic_and_word_sensitive() {
        let a = embed_text_toy::<f64>("a red square moving left to right", 16, 64, 7).unwrap();
        let b = embed_text_toy::<f64>("a red square moving left to right", 16, 64, 7).unwrap();
        assert_eq!(a, b);
        let vocab = [
            "red", "green", "blue", "yellow", "square", "circle", "left", "right", "top", "bottom",
        ];
        let embs: Vec<_> = vocab
            .iter()
            .map(|w| embed_text_toy::<f64>(&format!("a {w} thing"), 4, 64, 7).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert_ne!(embs[i].tokens, embs[j].tokens, "{} vs {}", vocab[i], vocab[j]);
            }
        }
    }

    #[test]
    fn single_word_repeats_cyclically() {
        let e = embed_text_toy::<f64>("red", 4, 8, 0).unwrap();
        for r in 1..4 {
            assert_eq!(e.tokens.row(r), e.tokens.row(0));
        }
        let norm: f64 = e.tokens.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_caption_is_an_error() {
        assert!(embed_text_toy::<f32>("   ", 4, 8, 0).is_err());
    }

    fn flat_view(v: f64) -> View {
        View::new(vec![], Image::filled(32, 32, 3, v)).unwrap()
    }

    #[test]
    fn view_embedding_tracks_statistics() {
        let black = embed_view::<f64>(&flat_view(-1.0), 64, 16, 3).unwrap();
        let black2 = embed_view::<f64>(&flat_view(-1.0), 64, 16, 3).unwrap();
        let white = embed_view::<f64>(&flat_view(1.0), 64, 16, 3).unwrap();
        assert_eq!(black, black2);
        assert_ne!(black.tokens, white.tokens);
        assert_eq!(black.num_tokens(), 1);

        let stats_b = view_statistics(&flat_view(-1.0), 16).unwrap();
        let stats_w = view_statistics(&flat_view(1.0), 16).unwrap();
        // means differ, stds are zero for both
        assert_eq!(stats_b[0], -1.0);
        assert_eq!(stats_w[0], 1.0);
        assert_eq!(stats_b[3], 0.0);

        // swap red and blue inside every patch: same per-patch layout, new colours
        let mut v = flat_view(-1.0);
        for r in 0..32 {
            for c in 0..32 {
                v.pixels.set(r, c, 0, 0.8);
            }
        }
        let mut recolored = v.clone();
        for r in 0..32 {
            for c in 0..32 {
                recolored.pixels.set(r, c, 0, -1.0);
                recolored.pixels.set(r, c, 2, 0.8);
            }
        }
        let e1 = embed_view::<f64>(&v, 64, 16, 3).unwrap();
        let e2 = embed_view::<f64>(&recolored, 64, 16, 3).unwrap();
        assert_ne!(e1.tokens, e2.tokens);
    }

    #[test]
    fn null_condition_starts_at_zero() {
        let n = null_condition::<f32>(16, 64);
        assert!(n.tokens.data().iter().all(|&v| v == 0.0));
        assert_eq!(n.source.name(), "null");
    }

    #[test]
    fn external_embeddings_roundtrip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cond.t1cp");
        let e = embed_text_toy::<f32>("a blue square", 16, 64, 1).unwrap();
        save_external_embeddings(&path, &e).unwrap();
        let back = load_external_embeddings::<f32>(&path, Some((16, 64))).unwrap();
        assert_eq!(back.tokens, e.tokens);
        assert_eq!(back.source, SourceTag::External);

        let err = load_external_embeddings::<f32>(&path, Some((16, 32)))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[16x32]") && err.contains("[16x64]"), "{err}");
    }

    #[test]
    fn paper_sized_external_embeddings_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t5.t1cp");
        let tokens = Tensor::from_fn(vec![256, 4096], |i| ((i % 97) as f64 - 48.0) * 1e-3);
        let e = ConditionEmbedding::new(tokens, SourceTag::External).unwrap();
        save_external_embeddings(&path, &e).unwrap();
        let back = load_external_embeddings::<f64>(&path, Some((256, 4096))).unwrap();
        assert_eq!(back.tokens.shape(), &[256, 4096]);
    }

    #[test]
    fn norm_bound_is_enforced() {
        let t = Tensor::<f64>::full(vec![1, 4], 6.0);
        assert!(ConditionEmbedding::new(t, SourceTag::External).is_err());
    }
}
