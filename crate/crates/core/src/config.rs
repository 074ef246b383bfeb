//! Run configuration as TOML with one table per stage.
//!
//! ```toml
//! [data]
//! kind = "video"
//! count = 256
//!
//! [model]
//! depth = 4
//! width = 128
//!
//! [sample]
//! guidance = 8.5
//! ```
//!
//! Every key has a default; unknown keys are rejected with their line.

use serde::{Deserialize, Serialize};

use crate::codec::{CodecMode, PatchCodecConfig};
use crate::diffusion::{make_schedule, ChannelMask, GuidanceOptions, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::{coord_embed_len, FieldSpec, DEFAULT_COORD_FREQS, DEFAULT_TIME_EMBED_DIM};
use crate::scorenet::ScoreNetConfig;
use crate::training::{Conditioner, TrainConfig};

pub const DEFAULT_GUIDANCE: f64 = 8.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Image,
    Video,
    Views,
}

impl DataKind {
    pub fn metric_dim(self) -> usize {
        match self {
            DataKind::Image => 2,
            DataKind::Video => 3,
            DataKind::Views => 6,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(DataKind::Image),
            "video" => Ok(DataKind::Video),
            "views" => Ok(DataKind::Views),
            other => Err(Error::invalid(format!(
                "unknown data kind {other:?} (image, video, views)"
            ))),
        }
    }
}

/// Procedural toy data used when no manifest is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub square_size: usize,
    pub views: usize,
    pub elevation: f64,
    pub camera_radius: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Video,
            count: 256,
            seed: 0,
            height: 16,
            width: 16,
            frames: 8,
            square_size: 4,
            views: 16,
            elevation: 0.5,
            camera_radius: 2.0,
        }
    }
}

/// Field shape recorded at training time so checkpoints are self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    pub metric_dim: usize,
    pub signal_dim: usize,
    pub height: usize,
    pub width: usize,
    pub views: usize,
}

impl FieldSection {
    pub fn from_spec(spec: &FieldSpec) -> Self {
        FieldSection {
            metric_dim: spec.metric_dim,
            signal_dim: spec.signal_dim,
            height: spec.height,
            width: spec.width,
            views: spec.num_views,
        }
    }

    pub fn spec(&self) -> Result<FieldSpec> {
        FieldSpec::new(self.metric_dim, self.signal_dim, self.height, self.width, self.views)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub patch: usize,
    pub mode: String,
    /// Defaults to the flattened patch length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_dim: Option<usize>,
    pub seed: u64,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            patch: 4,
            mode: "raw".into(),
            token_dim: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cond_dim: usize,
    pub cond_tokens: usize,
    pub time_dim: usize,
    pub coord_freqs: usize,
    pub ada_gate: bool,
    pub max_tokens: usize,
    pub init_seed: u64,
    /// "f32" or "f64".
    pub precision: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ScoreNetConfig::desk(1, 1);
        ModelSection {
            depth: d.depth,
            width: d.width,
            heads: d.heads,
            mlp_ratio: d.mlp_ratio,
            cond_dim: d.cond_dim,
            cond_tokens: d.cond_tokens,
            time_dim: DEFAULT_TIME_EMBED_DIM,
            coord_freqs: DEFAULT_COORD_FREQS,
            ada_gate: d.ada_gate,
            max_tokens: d.max_tokens,
            init_seed: 0,
            precision: "f32".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let s = NoiseSchedule::desk(crate::diffusion::DESK_STEPS).expect("valid desk schedule");
        DiffusionSection {
            steps: s.steps(),
            beta_start: s.beta(1),
            beta_end: s.beta(s.steps()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub n_views: usize,
    pub batch_fields: usize,
    pub lr: f64,
    pub steps: usize,
    pub cond_dropout: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            n_views: t.n_views,
            batch_fields: t.batch_fields,
            lr: t.lr,
            steps: t.steps,
            cond_dropout: t.cond_dropout,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionSection {
    /// "text" (caption hash) or "first_view".
    pub source: String,
    pub seed: u64,
}

impl Default for ConditionSection {
    fn default() -> Self {
        ConditionSection {
            source: "text".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub guidance: f64,
    /// "pixel_colors", "all", "none" or "first:N".
    pub mask: String,
    /// Reverse steps; fewer than the schedule length respaces it.
    pub steps: usize,
    pub shared_init: bool,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            guidance: DEFAULT_GUIDANCE,
            mask: "pixel_colors".into(),
            steps: crate::diffusion::DESK_STEPS,
            shared_init: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Diffusion step of the reconstruction; 0 means half the schedule.
    pub t: usize,
    pub seed: u64,
    pub samples_per_class: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            t: 0,
            seed: 0,
            samples_per_class: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSection>,
    pub codec: CodecSection,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub train: TrainSection,
    pub condition: ConditionSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.train_config().validate()?;
        let m = &self.model;
        if m.heads == 0 || !m.width.is_multiple_of(m.heads) {
            return Err(Error::invalid(format!(
                "width {} not divisible by {} heads",
                m.width, m.heads
            )));
        }
        if !matches!(m.precision.as_str(), "f32" | "f64") {
            return Err(Error::invalid(format!("precision {:?} (f32 or f64)", m.precision)));
        }
        if !matches!(self.condition.source.as_str(), "text" | "first_view") {
            return Err(Error::invalid(format!(
                "condition source {:?} (text or first_view)",
                self.condition.source
            )));
        }
        CodecMode::parse(&self.codec.mode)?;
        self.mask_for(1, 1)?;
        if self.sample.guidance < 0.0 {
            return Err(Error::invalid("guidance scale must be non-negative"));
        }
        if self.sample.steps == 0 || self.sample.steps > self.diffusion.steps {
            return Err(Error::invalid(format!(
                "sample steps {} outside 1..={}",
                self.sample.steps, self.diffusion.steps
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.diffusion;
        make_schedule(d.steps, d.beta_start, d.beta_end)
    }

    pub fn codec_config(&self, signal_dim: usize) -> Result<PatchCodecConfig> {
        let c = &self.codec;
        let raw = PatchCodecConfig::raw(c.patch, signal_dim);
        Ok(PatchCodecConfig {
            token_dim: c.token_dim.unwrap_or(raw.token_dim),
            mode: CodecMode::parse(&c.mode)?,
            seed: c.seed,
            ..raw
        })
    }

    pub fn net_config(&self, token_dim: usize, metric_dim: usize) -> ScoreNetConfig {
        let m = &self.model;
        ScoreNetConfig {
            depth: m.depth,
            width: m.width,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            token_dim,
            coord_dim: coord_embed_len(metric_dim, m.coord_freqs),
            cond_dim: m.cond_dim,
            cond_tokens: m.cond_tokens,
            time_dim: m.time_dim,
            ada_gate: m.ada_gate,
            max_tokens: m.max_tokens,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            n_views: t.n_views,
            batch_fields: t.batch_fields,
            lr: t.lr,
            steps: t.steps,
            cond_dropout: t.cond_dropout,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn conditioner(&self) -> Conditioner {
        let m = &self.model;
        match self.condition.source.as_str() {
            "first_view" => Conditioner::FirstView {
                dim: m.cond_dim,
                patch: self.codec.patch,
                seed: self.condition.seed,
            },
            _ => Conditioner::Text {
                tokens: m.cond_tokens,
                dim: m.cond_dim,
                seed: self.condition.seed,
            },
        }
    }

    /// Guidance channel mask for tokens of width `token_dim`.
    pub fn mask_for(&self, token_dim: usize, signal_dim: usize) -> Result<ChannelMask> {
        let identity = self
            .codec
            .token_dim
            .is_none_or(|d| d == self.codec.patch.pow(2) * signal_dim)
            && self.codec.mode == "raw";
        let spec = self.sample.mask.as_str();
        match spec {
            "none" => Ok(ChannelMask::none()),
            "all" => Ok(ChannelMask::all(token_dim)),
            // colour channels only exist per token channel for identity tokens
            "pixel_colors" if identity => Ok(ChannelMask::pixel_colors(token_dim, signal_dim, 3)),
            "pixel_colors" => Ok(ChannelMask::all(token_dim)),
            _ => match spec.strip_prefix("first:").map(str::parse::<usize>) {
                Some(Ok(n)) => Ok(ChannelMask::first(n)),
                _ => Err(Error::invalid(format!(
                    "guidance mask {spec:?} (pixel_colors, all, none or first:N)"
                ))),
            },
        }
    }

    pub fn guidance(&self, token_dim: usize, signal_dim: usize) -> Result<GuidanceOptions> {
        Ok(GuidanceOptions {
            scale: self.sample.guidance,
            mask: self.mask_for(token_dim, signal_dim)?,
            shared_init: self.sample.shared_init,
        })
    }
}
