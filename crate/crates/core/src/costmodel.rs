//! Analytic multiply-accumulate and memory counts for the score network.
//!
//! Per block, with `N` tokens and width `W`: the qkv and output projections
//! cost `4·N·W²`, the MLP `2·r·N·W²` (r = mlp ratio), and attention
//! `2·W·Σ_g N_g²` over attention groups (one per view when attention is
//! view-local, else one group of all tokens).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::Image;
use crate::imageio::write_ppm;
use crate::scorenet::ScoreNetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MacBreakdown {
    pub qkv: u64,
    pub attention: u64,
    pub projection: u64,
    pub mlp: u64,
    /// Timestep MLP and per-block adaLN heads, plus the text-token
    /// projection when text conditioning is on.
    pub conditioning: u64,
    /// Input and output token projections.
    pub embedding: u64,
}

impl MacBreakdown {
    /// The transformer blocks alone: qkv, attention, projection, MLP.
    pub fn core(&self) -> u64 {
        self.qkv + self.attention + self.projection + self.mlp
    }

    pub fn total(&self) -> u64 {
        self.core() + self.conditioning + self.embedding
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostQuery {
    pub tokens_per_view: usize,
    pub n_views: usize,
    pub view_local: bool,
    pub text: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub macs: u64,
    pub breakdown: MacBreakdown,
}

fn check(cfg: &ScoreNetConfig, q: &CostQuery) -> Result<()> {
    if cfg.depth == 0 || cfg.width == 0 || cfg.heads == 0 || q.tokens_per_view == 0 || q.n_views == 0 {
        return Err(Error::invalid("cost model dimensions must be positive"));
    }
    Ok(())
}

/// Sum of squared attention group sizes.
fn attention_pairs(q: &CostQuery) -> u64 {
    let (z, n) = (q.tokens_per_view as u64, q.n_views as u64);
    if q.view_local {
        n * z * z
    } else {
        (n * z) * (n * z)
    }
}

/// MACs of one forward pass over `n_views` views of `tokens_per_view` tokens.
pub fn estimate_macs(cfg: &ScoreNetConfig, q: &CostQuery) -> Result<CostReport> {
    check(cfg, q)?;
    let d = cfg.depth as u64;
    let w = cfg.width as u64;
    let n = (q.tokens_per_view * q.n_views) as u64;
    let chunks = if cfg.ada_gate { 6 } else { 4 };
    let mut conditioning = cfg.time_dim as u64 * w + w * w + d * chunks * w * w + 2 * w * w;
    if q.text {
        conditioning += (cfg.cond_tokens * cfg.cond_dim) as u64 * w;
    }
    let breakdown = MacBreakdown {
        qkv: d * 3 * n * w * w,
        attention: d * 2 * w * attention_pairs(q),
        projection: d * n * w * w,
        mlp: d * 2 * cfg.mlp_ratio as u64 * n * w * w,
        conditioning,
        embedding: n * ((cfg.token_dim + cfg.coord_dim) as u64 * w + w * cfg.token_dim as u64),
    };
    Ok(CostReport {
        macs: breakdown.total(),
        breakdown,
    })
}

/// Scalar count of every parameter of [`crate::scorenet::ScoreNet`].
pub fn parameter_count(cfg: &ScoreNetConfig) -> u64 {
    let w = cfg.width as u64;
    let r = cfg.mlp_ratio as u64;
    let chunks = if cfg.ada_gate { 6 } else { 4 };
    let lin = |i: u64, o: u64| i * o + o;
    let block = lin(w, chunks * w) + lin(w, 3 * w) + lin(w, w) + lin(w, r * w) + lin(r * w, w);
    lin((cfg.token_dim + cfg.coord_dim) as u64, w)
        + lin(cfg.time_dim as u64, w)
        + lin(w, w)
        + lin(cfg.cond_dim as u64, w)
        + (cfg.cond_tokens * cfg.cond_dim) as u64
        + cfg.depth as u64 * block
        + lin(w, 2 * w)
        + lin(w, cfg.token_dim as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub parameters: u64,
    /// Stored attention probabilities, summed over blocks and heads.
    pub attention_scores: u64,
    /// Other per-token activations kept for the backward pass.
    pub activations: u64,
    pub bytes_per_scalar: u64,
}

impl MemoryReport {
    pub fn attention_bytes(&self) -> u64 {
        self.attention_scores * self.bytes_per_scalar
    }

    pub fn activation_bytes(&self) -> u64 {
        (self.attention_scores + self.activations) * self.bytes_per_scalar
    }

    pub fn total_bytes(&self) -> u64 {
        (self.parameters + self.attention_scores + self.activations) * self.bytes_per_scalar
    }
}

/// Peak training footprint without activation checkpointing.
pub fn estimate_memory(cfg: &ScoreNetConfig, q: &CostQuery, bytes_per_scalar: usize) -> Result<MemoryReport> {
    check(cfg, q)?;
    let n = (q.tokens_per_view * q.n_views) as u64;
    let w = cfg.width as u64;
    // per block: residual input, two normalized copies, qkv, attention
    // output, projection, two MLP hidden copies, MLP output
    let per_token = w * (1 + 2 + 3 + 1 + 1 + 1) + 2 * cfg.mlp_ratio as u64 * w;
    Ok(MemoryReport {
        parameters: parameter_count(cfg),
        attention_scores: cfg.depth as u64 * cfg.heads as u64 * attention_pairs(q),
        activations: cfg.depth as u64 * n * per_token + n * (cfg.token_dim + cfg.coord_dim) as u64,
        bytes_per_scalar: bytes_per_scalar as u64,
    })
}

/// Axes of a cost sweep; the cross product is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRanges {
    pub depth: Vec<usize>,
    pub width: Vec<usize>,
    pub heads: Vec<usize>,
    pub tokens: Vec<usize>,
    pub n_views: Vec<usize>,
    pub view_local: Vec<bool>,
    pub text: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepRow {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub query: CostQuery,
    pub report: CostReport,
    pub memory: MemoryReport,
}

pub const SWEEP_CSV_HEADER: &str = "depth,width,heads,Z,n_views,view_local,text,macs,act_mem,params";

/// Every combination of `ranges`, with the remaining dimensions from `base`.
pub fn sweep(base: &ScoreNetConfig, ranges: &SweepRanges, bytes_per_scalar: usize) -> Result<Vec<SweepRow>> {
    let r = ranges;
    if [
        r.depth.len(),
        r.width.len(),
        r.heads.len(),
        r.tokens.len(),
        r.n_views.len(),
        r.view_local.len(),
        r.text.len(),
    ]
    .contains(&0)
    {
        return Err(Error::invalid("every sweep axis needs at least one value"));
    }
    let mut rows = Vec::new();
    for &depth in &r.depth {
        for &width in &r.width {
            for &heads in &r.heads {
                let cfg = ScoreNetConfig {
                    depth,
                    width,
                    heads,
                    ..*base
                };
                for &z in &r.tokens {
                    for &n in &r.n_views {
                        for &view_local in &r.view_local {
                            for &text in &r.text {
                                let query = CostQuery {
                                    tokens_per_view: z,
                                    n_views: n,
                                    view_local,
                                    text,
                                };
                                rows.push(SweepRow {
                                    depth,
                                    width,
                                    heads,
                                    query,
                                    report: estimate_macs(&cfg, &query)?,
                                    memory: estimate_memory(&cfg, &query, bytes_per_scalar)?,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.depth,
            r.width,
            r.heads,
            r.query.tokens_per_view,
            r.query.n_views,
            r.query.view_local,
            r.query.text,
            r.report.macs,
            r.memory.activation_bytes(),
            r.memory.parameters
        );
    }
    s
}

/// Bar chart of MACs per sweep row, bars scaled to the largest value.
pub fn write_bar_chart(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let (bar, gap, height) = (12, 4, 120);
    let width = (rows.len() * (bar + gap) + gap).max(1);
    let mut img = Image::filled(height, width, 3, 1.0);
    let max = rows.iter().map(|r| r.report.macs).max().unwrap_or(1).max(1) as f64;
    for (i, r) in rows.iter().enumerate() {
        let h = ((r.report.macs as f64 / max) * (height - 1) as f64).round().max(1.0) as usize;
        let x0 = gap + i * (bar + gap);
        for y in height - h..height {
            for x in x0..x0 + bar {
                img.set(y, x, 0, -0.6);
                img.set(y, x, 1, -0.2);
                img.set(y, x, 2, 0.6);
            }
        }
    }
    write_ppm(path, &img)
}
