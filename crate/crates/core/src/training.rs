//! View-wise batches with one shared ε per field, Adam, and the fit loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::PatchCodec;
use crate::conditioning::{embed_text_toy, embed_view, Condition, ConditionEmbedding};
use crate::diffusion::{forward_diffuse_views, DiffusionBatch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::{embed_coordinate_rows, grid_coordinates, FieldSample};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::scalar::Scalar;
use crate::scorenet::{FieldInput, ScoreNet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Views drawn per field per step.
    pub n_views: usize,
    /// Fields per optimizer step.
    pub batch_fields: usize,
    pub lr: f64,
    pub steps: usize,
    pub cond_dropout: f64,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_views: 8,
            batch_fields: 16,
            lr: 1e-4,
            steps: 2000,
            cond_dropout: 0.1,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 || self.batch_fields == 0 {
            return Err(Error::invalid("n_views and batch_fields must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid(format!(
                "cond_dropout {} outside [0, 1]",
                self.cond_dropout
            )));
        }
        Ok(())
    }
}

/// Adam without weight decay. Moments are kept in the parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Adam {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Restores saved state; moments must match the parameter shapes.
    pub fn from_state(
        params: &ParamStore<T>,
        lr: f64,
        step: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::shape("Adam::from_state", params.len(), m.len().min(v.len())));
        }
        for ((p, a), b) in params.tensors().iter().zip(&m).zip(&v) {
            if p.shape() != a.shape() || p.shape() != b.shape() {
                return Err(Error::invalid("optimizer moments do not match parameter shapes"));
            }
        }
        Ok(Adam {
            step,
            m,
            v,
            ..Adam::new(params, lr)
        })
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("Adam::update", self.m.len(), grads.len()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (g, w)) in grads.iter().zip(params.tensors_mut()).enumerate() {
            if g.shape() != w.shape() {
                return Err(Error::shape(
                    "Adam::update",
                    format!("{:?}", w.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in w.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k].as_f64();
                let mk = self.beta1 * m[k].as_f64() + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v[k].as_f64() + (1.0 - self.beta2) * gk * gk;
                m[k] = T::of_f64(mk);
                v[k] = T::of_f64(vk);
                let upd = self.lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                *w = T::of_f64(w.as_f64() - upd);
            }
        }
        Ok(())
    }
}

/// `n` distinct view indices out of `total`, uniform without replacement,
/// returned in ascending order.
pub fn sample_views<R: Rng + ?Sized>(total: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::invalid(format!(
            "cannot sample {n} views from a field with {total}"
        )));
    }
    let mut idx = rand::seq::index::sample(rng, total, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Source of the condition embedding attached to each training field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conditioner {
    /// Hash embedding of the caption.
    Text { tokens: usize, dim: usize, seed: u64 },
    /// Statistics of the field's first view.
    FirstView { dim: usize, patch: usize, seed: u64 },
}

impl Conditioner {
    pub fn dim(&self) -> usize {
        match *self {
            Conditioner::Text { dim, .. } | Conditioner::FirstView { dim, .. } => dim,
        }
    }

    pub fn embed<T: Scalar>(&self, field: &FieldSample) -> Result<ConditionEmbedding<T>> {
        match *self {
            Conditioner::Text { tokens, dim, seed } => embed_text_toy(&field.caption, tokens, dim, seed),
            Conditioner::FirstView { dim, patch, seed } => embed_view(&field.views[0], dim, patch, seed),
        }
    }
}

/// A field encoded once: tokens, coordinate embeddings and condition.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedField<T> {
    /// [V × Z × D]
    pub tokens: Tensor<T>,
    /// [V·Z × E]
    pub coords: Tensor<T>,
    pub cond: ConditionEmbedding<T>,
}

impl<T: Scalar> PreparedField<T> {
    pub fn views(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_view(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Coordinate embeddings of every token of `views`, [n·Z × E].
pub fn view_coordinates<T: Scalar>(
    spec: &crate::field::FieldSpec,
    codec: &PatchCodec<T>,
    view_coords: &[Vec<f64>],
    num_freqs: usize,
) -> Result<Tensor<T>> {
    let (rows, cols) = codec.grid(spec)?;
    let mut all = Vec::with_capacity(view_coords.len() * rows * cols);
    for vc in view_coords {
        all.extend(grid_coordinates(spec, rows, cols, vc)?);
    }
    embed_coordinate_rows(&all, num_freqs)
}

pub fn prepare_field<T: Scalar>(
    field: &FieldSample,
    codec: &PatchCodec<T>,
    conditioner: &Conditioner,
    num_freqs: usize,
) -> Result<PreparedField<T>> {
    let tokens = codec.encode_views(&field.views)?;
    let z = codec.tokens_per_view(&field.spec)?;
    let tokens = tokens.reshape(vec![field.views.len(), z, codec.token_dim()])?;
    let vc: Vec<Vec<f64>> = field.views.iter().map(|v| v.coord.clone()).collect();
    Ok(PreparedField {
        tokens,
        coords: view_coordinates(&field.spec, codec, &vc, num_freqs)?,
        cond: conditioner.embed(field)?,
    })
}

/// One field of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBatch<T> {
    pub source: usize,
    pub views: Vec<usize>,
    pub diffusion: DiffusionBatch<T>,
    /// [n·Z × D]
    pub noisy: Tensor<T>,
    /// [n·Z × E]
    pub coords: Tensor<T>,
    /// `None` after condition dropout.
    pub cond: Option<ConditionEmbedding<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewWiseBatch<T> {
    pub fields: Vec<FieldBatch<T>>,
}

impl<T: Scalar> ViewWiseBatch<T> {
    pub fn inputs(&self) -> Vec<FieldInput<'_, T>> {
        self.fields
            .iter()
            .map(|f| FieldInput {
                noisy: &f.noisy,
                coords: &f.coords,
                views: f.views.len(),
                t: f.diffusion.t,
                cond: f.cond.as_ref().map_or(Condition::Null, Condition::Embedding),
            })
            .collect()
    }

    /// Shared noise of every field, stacked like the network output.
    pub fn targets(&self) -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = self.fields.iter().map(|f| f.diffusion.target_rows()).collect();
        Tensor::concat_rows(&parts)
    }
}

/// Per field of `picks`: sample views, draw `t` uniform in [1, T], noise all
/// chosen views with one ε, and drop the condition with probability
/// `cond_dropout`.
pub fn build_batch<T: Scalar, R: Rng + ?Sized>(
    data: &[PreparedField<T>],
    picks: &[usize],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ViewWiseBatch<T>> {
    if picks.is_empty() {
        return Err(Error::invalid("a batch needs at least one field"));
    }
    let mut fields = Vec::with_capacity(picks.len());
    for &src in picks {
        let f = data
            .get(src)
            .ok_or_else(|| Error::invalid(format!("field {src} out of range")))?;
        let views = sample_views(f.views(), cfg.n_views.min(f.views()), rng)?;
        let (z, d) = (f.tokens_per_view(), f.tokens.shape()[2]);
        let e = f.coords.shape()[1];
        let mut y0 = Vec::with_capacity(views.len() * z * d);
        let mut coords = Vec::with_capacity(views.len() * z * e);
        for &v in &views {
            y0.extend_from_slice(&f.tokens.data()[v * z * d..(v + 1) * z * d]);
            coords.extend_from_slice(&f.coords.data()[v * z * e..(v + 1) * z * e]);
        }
        let y0 = Tensor::new(vec![views.len(), z, d], y0)?;
        let t = rng.random_range(1..=sched.steps());
        let diffusion = forward_diffuse_views(&y0, t, sched, rng)?;
        let drop = rng.random::<f64>() < cfg.cond_dropout;
        fields.push(FieldBatch {
            source: src,
            noisy: diffusion.noisy_rows(),
            coords: Tensor::new(vec![views.len() * z, e], coords)?,
            views,
            diffusion,
            cond: if drop { None } else { Some(f.cond.clone()) },
        });
    }
    Ok(ViewWiseBatch { fields })
}

/// Forward, MSE against the shared noise, backward and one Adam update.
/// Returns the loss before the update.
pub fn train_step<T: Scalar>(net: &mut ScoreNet<T>, batch: &ViewWiseBatch<T>, opt: &mut Adam<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.bind(net.params(), true)?;
    let pred = net.forward(&mut tape, &p, &batch.inputs())?;
    let target = tape.constant(batch.targets()?)?;
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    let grads = tape.backward(loss)?.collect(&p);
    opt.update(net.params_mut(), &grads)?;
    Ok(value)
}

/// Field order of epoch `epoch`: a seeded permutation.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch | 1 << 63);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Fields used at 1-based `step`: consecutive slots of the epoch orders.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let start = (step - 1) * batch as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|i| {
            let g = start + i;
            let epoch = g / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_order(n, seed, epoch)));
            }
            cached.as_ref().unwrap().1[(g % n as u64) as usize]
        })
        .collect()
}

/// RNG for the batch of 1-based `step`; independent of earlier steps so a
/// resumed run continues identically.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss,lr,seconds";

/// Where [`fit`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub dir: PathBuf,
    /// Stored as the config text of every checkpoint.
    pub config_text: String,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const LAST_CHECKPOINT: &str = "checkpoint.t1cp";

pub fn periodic_checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.t1cp")
}

fn read_loss_rows(path: &Path, up_to: u64) -> Result<String> {
    let mut out = String::new();
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if step.is_some_and(|s| s <= up_to) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Runs `train_step` from the optimizer's current step up to `cfg.steps`.
/// With `out` set, writes `loss.csv`, periodic checkpoints and a final
/// `checkpoint.t1cp`; loss rows past the resume point are replaced.
pub fn fit<T: Scalar>(
    net: &mut ScoreNet<T>,
    opt: &mut Adam<T>,
    data: &[PreparedField<T>],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    out: Option<&FitOutput>,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let start = opt.step_count();
    let csv_path = out.map(|o| o.dir.join(LOSS_CSV));
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
        csv.push_str(&read_loss_rows(csv_path.as_ref().unwrap(), start)?);
    }
    let clock = Instant::now();
    let mut logs = Vec::new();
    for step in start + 1..=cfg.steps as u64 {
        let picks = batch_indices(data.len(), cfg.batch_fields, cfg.seed, step);
        let mut rng = step_rng(cfg.seed, step);
        let batch = build_batch(data, &picks, cfg, sched, &mut rng)?;
        let loss = train_step(net, &batch, opt).map_err(|e| match e {
            Error::NonFinite { .. } => Error::invalid(format!("non-finite value at step {step}: {e}")),
            other => other,
        })?;
        let log = StepLog {
            step,
            loss,
            lr: opt.lr,
            seconds: clock.elapsed().as_secs_f64(),
        };
        let _ = writeln!(csv, "{},{},{},{:.3}", log.step, log.loss, log.lr, log.seconds);
        logs.push(log);
        if let Some(o) = out {
            let periodic = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0;
            let last = step == cfg.steps as u64;
            if periodic || last {
                let ck = crate::checkpoint::capture(&o.config_text, net, opt);
                if periodic {
                    ck.save(&o.dir.join(periodic_checkpoint_name(step)))?;
                }
                ck.save(&o.dir.join(LAST_CHECKPOINT))?;
                let p = csv_path.as_ref().unwrap();
                fs::write(p, &csv).map_err(|e| Error::io(p, e))?;
            }
        }
    }
    Ok(logs)
}
