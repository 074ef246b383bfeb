//! A configured model: codec, score network and the glue used by the
//! command line and the evaluation suite.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::codec::PatchCodec;
use crate::conditioning::{embed_text_toy, Condition, ConditionEmbedding};
use crate::config::{DataKind, DataSection, FieldSection, RunConfig};
use crate::container::Container;
use crate::datasets::{gen_toy_video, gen_toy_views, toy_cameras, ToyMultiViewSpec, ToyVideoSpec};
use crate::diffusion::{diffuse_with_noise, forward_coefficients, sample_tokens, GuidanceOptions, SampleRequest};
use crate::error::{Error, Result};
use crate::field::{frame_coord, FieldSample, FieldSpec, View};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::scorenet::{FieldInput, ScoreNet};
use crate::training::{fit, prepare_field, view_coordinates, Adam, FitOutput, PreparedField, StepLog};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "T1_THREADS";

/// Worker count: `T1_THREADS` when set to a positive integer, else the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `f` over `items` on up to `workers` scoped threads; results keep input
/// order, so the output does not depend on the worker count.
pub fn parallel_map<A: Sync, B: Send>(
    items: &[A],
    workers: usize,
    f: impl Fn(&A) -> Result<B> + Sync,
) -> Result<Vec<B>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Result<Vec<B>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Seed of toy field `i` in a dataset seeded with `seed`.
pub fn field_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
}

pub fn toy_video_spec(d: &DataSection) -> ToyVideoSpec {
    ToyVideoSpec {
        height: d.height,
        width: d.width,
        frames: if d.kind == DataKind::Image { 1 } else { d.frames },
        square_size: d.square_size,
        ..Default::default()
    }
}

pub fn toy_views_spec(d: &DataSection) -> ToyMultiViewSpec {
    ToyMultiViewSpec {
        height: d.height,
        width: d.width,
        views: d.views,
        elevation: d.elevation,
        camera_radius: d.camera_radius,
        ..Default::default()
    }
}

/// The procedural dataset described by `d`.
pub fn generate_toy(d: &DataSection) -> Result<Vec<FieldSample>> {
    (0..d.count)
        .map(|i| match d.kind {
            DataKind::Image | DataKind::Video => gen_toy_video(&toy_video_spec(d), field_seed(d.seed, i)),
            DataKind::Views => gen_toy_views(&toy_views_spec(d), field_seed(d.seed, i)),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: RunConfig,
    pub spec: FieldSpec,
    pub codec: PatchCodec<T>,
    pub net: ScoreNet<T>,
    /// Threads used for per-field work; 1 in strict-deterministic runs.
    pub workers: usize,
}

impl<T: Scalar> Model<T> {
    /// Fresh network for fields shaped like `spec`.
    pub fn new(mut config: RunConfig, spec: FieldSpec) -> Result<Self> {
        config.field = Some(FieldSection::from_spec(&spec));
        config.validate()?;
        let codec = PatchCodec::new(config.codec_config(spec.signal_dim)?)?;
        codec.grid(&spec)?;
        let cfg = config.net_config(codec.token_dim(), spec.metric_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.model.init_seed);
        let net = ScoreNet::new(cfg, &mut rng)?;
        Ok(Model {
            config,
            spec,
            codec,
            net,
            workers: worker_count(),
        })
    }

    pub fn from_checkpoint(c: &Container) -> Result<Self> {
        let config = RunConfig::parse(&c.config)?;
        let field = config
            .field
            .ok_or_else(|| Error::format("checkpoint", "config lacks a [field] table"))?;
        let mut model = Model::new(config, field.spec()?)?;
        checkpoint::restore_params(c, &mut model.net)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Container::load(path)?)
    }

    pub fn checkpoint(&self, opt: &Adam<T>) -> Container {
        checkpoint::capture(&self.config.to_text(), &self.net, opt)
    }

    fn check_field(&self, f: &FieldSample) -> Result<()> {
        let s = &self.spec;
        if f.spec.metric_dim != s.metric_dim
            || f.spec.signal_dim != s.signal_dim
            || f.spec.height != s.height
            || f.spec.width != s.width
        {
            return Err(Error::shape(
                "Model",
                format!("d_m {} {}x{}x{}", s.metric_dim, s.height, s.width, s.signal_dim),
                format!(
                    "d_m {} {}x{}x{}",
                    f.spec.metric_dim, f.spec.height, f.spec.width, f.spec.signal_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn prepare(&self, fields: &[FieldSample]) -> Result<Vec<PreparedField<T>>> {
        let cond = self.config.conditioner();
        parallel_map(fields, self.workers, |f| {
            self.check_field(f)?;
            prepare_field(f, &self.codec, &cond, self.config.model.coord_freqs)
        })
    }

    /// Trains on `fields` from the optimizer state in `resume` (or from
    /// scratch) up to the configured step count.
    pub fn train(
        &mut self,
        fields: &[FieldSample],
        out: Option<&Path>,
        resume: Option<&Container>,
    ) -> Result<(Adam<T>, Vec<StepLog>)> {
        let data = self.prepare(fields)?;
        let cfg = self.config.train_config();
        let mut opt = match resume {
            Some(c) => {
                checkpoint::restore_params(c, &mut self.net)?;
                checkpoint::restore_optimizer(c, &self.net, cfg.lr)?
            }
            None => Adam::new(self.net.params(), cfg.lr),
        };
        let output = out.map(|dir| FitOutput {
            dir: dir.to_path_buf(),
            config_text: self.config.to_text(),
        });
        let logs = fit(
            &mut self.net,
            &mut opt,
            &data,
            &self.config.schedule()?,
            &cfg,
            output.as_ref(),
        )?;
        Ok((opt, logs))
    }

    pub fn embed_caption(&self, caption: &str) -> Result<ConditionEmbedding<T>> {
        let m = &self.config.model;
        embed_text_toy(caption, m.cond_tokens, m.cond_dim, self.config.condition.seed)
    }

    pub fn condition_of(&self, field: &FieldSample) -> Result<ConditionEmbedding<T>> {
        self.config.conditioner().embed(field)
    }

    /// View coordinates for generating `n` views: evenly spaced frames, or
    /// the toy camera ring.
    pub fn default_view_coords(&self, n: usize) -> Vec<Vec<f64>> {
        match self.spec.metric_dim {
            2 => vec![Vec::new(); n],
            3 => (0..n).map(|i| frame_coord(i, n)).collect(),
            _ => {
                let spec = ToyMultiViewSpec {
                    height: self.spec.height,
                    width: self.spec.width,
                    views: n,
                    elevation: self.config.data.elevation,
                    camera_radius: self.config.data.camera_radius,
                    ..Default::default()
                };
                toy_cameras(&spec)
                    .iter()
                    .map(|c| c.view_coord(self.spec.height, self.spec.width))
                    .collect()
            }
        }
    }

    fn spec_with(&self, n: usize) -> FieldSpec {
        FieldSpec {
            num_views: n,
            ..self.spec
        }
    }

    /// Generates one field per condition; field `i` uses its own stream
    /// seeded by `seeds[i]`. Pixels are clamped to [-1, 1].
    pub fn sample(
        &self,
        conds: &[Condition<'_, T>],
        view_coords: &[Vec<f64>],
        opts: &GuidanceOptions,
        steps: usize,
        seeds: &[u64],
    ) -> Result<Vec<Vec<View>>> {
        if conds.len() != seeds.len() {
            return Err(Error::invalid(format!(
                "{} conditions but {} seeds",
                conds.len(),
                seeds.len()
            )));
        }
        let n = view_coords.len();
        let spec = self.spec_with(n);
        let coords = view_coordinates(&spec, &self.codec, view_coords, self.config.model.coord_freqs)?;
        let requests: Vec<SampleRequest<'_, T>> = conds
            .iter()
            .map(|&cond| SampleRequest {
                cond,
                coords: coords.clone(),
                views: n,
            })
            .collect();
        let sched = self.config.schedule()?;
        let plan = sched.respace(steps)?;
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let tokens = sample_tokens(&self.net, &requests, self.codec.token_dim(), &plan, opts, &mut rngs)?;
        tokens
            .iter()
            .map(|t| {
                let mut views = self.codec.decode_views(t, &spec, view_coords)?;
                for v in &mut views {
                    v.pixels.data.iter_mut().for_each(|p| *p = p.clamp(-1.0, 1.0));
                }
                Ok(views)
            })
            .collect()
    }

    /// One forward-diffuse / denoise cycle at step `t`: noises every view
    /// with one ε, predicts it, and inverts the forward map.
    pub fn reconstruct<R: Rng + ?Sized>(&self, field: &FieldSample, t: usize, rng: &mut R) -> Result<Vec<View>> {
        self.check_field(field)?;
        let sched = self.config.schedule()?;
        let prepared = prepare_field(
            field,
            &self.codec,
            &self.config.conditioner(),
            self.config.model.coord_freqs,
        )?;
        let eps = Tensor::<T>::randn(prepared.tokens.shape()[1..].to_vec(), rng);
        let batch = diffuse_with_noise(&prepared.tokens, &eps, t, sched.alpha_bar(t))?;
        let noisy = batch.noisy_rows();
        let pred = self.net.predict(&[FieldInput {
            noisy: &noisy,
            coords: &prepared.coords,
            views: field.views.len(),
            t,
            cond: Condition::Embedding(&prepared.cond),
        }])?;
        let (a, b) = forward_coefficients(batch.alpha_bar);
        let y0 = noisy
            .data()
            .iter()
            .zip(pred[0].data())
            .map(|(&y, &e)| T::of_f64((y.as_f64() - b * e.as_f64()) / a));
        let y0 = Tensor::new(noisy.shape().to_vec(), y0.collect())?;
        let coords: Vec<Vec<f64>> = field.views.iter().map(|v| v.coord.clone()).collect();
        self.codec.decode_views(&y0, &field.spec, &coords)
    }
}
