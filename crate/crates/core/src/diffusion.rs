//! DDPM noise schedule, the shared-noise forward process over the views of
//! a field, the ε-prediction loss, the reverse step and channel-masked
//! classifier-free guidance.
//!
//! The forward process runs on a fixed-point grid: coefficients are rounded
//! to multiples of 2⁻²⁴ and token/noise values to multiples of 2⁻²², which
//! makes every product and sum exact in `f64`. As a consequence the noise
//! recovered from any view, `(y_t − √ᾱ·y_0)/√(1−ᾱ)`, is bit-identical to the
//! stored draw.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conditioning::Condition;
use crate::error::{Error, Result};
use crate::numerics::tensor::shape_str;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const PAPER_STEPS: usize = 1000;
pub const PAPER_BETA_START: f64 = 1e-4;
pub const PAPER_BETA_END: f64 = 0.02;
pub const DESK_STEPS: usize = 200;

const COEF_SCALE: f64 = (1u64 << 24) as f64;
const VALUE_SCALE: f64 = (1u64 << 22) as f64;
/// Token and noise magnitudes the exact forward arithmetic supports.
pub const FORWARD_RANGE: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear β from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    /// T=1000, β linear in [1e-4, 0.02].
    pub fn paper() -> Self {
        make_schedule(PAPER_STEPS, PAPER_BETA_START, PAPER_BETA_END).expect("valid constants")
    }

    /// Shorter schedule with the β range stretched by 1000/T so that ᾱ_T
    /// stays near the 1000-step value.
    pub fn desk(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let k = PAPER_STEPS as f64 / steps as f64;
        make_schedule(steps, PAPER_BETA_START * k, (PAPER_BETA_END * k).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// A `steps`-step schedule visiting evenly spaced timesteps of this one,
    /// plus the original timestep of each new step (1-based).
    pub fn respace(&self, steps: usize) -> Result<SamplingPlan> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::invalid(format!("sampling steps {steps} outside [1, {total}]")));
        }
        let timesteps: Vec<usize> = (1..=steps)
            .map(|i| ((i as f64 * total as f64 / steps as f64).round() as usize).clamp(1, total))
            .collect();
        let mut prev = 0;
        let mut beta = Vec::with_capacity(steps);
        for &t in &timesteps {
            beta.push(1.0 - self.alpha_bar(t) / self.alpha_bar(prev));
            prev = t;
        }
        Ok(SamplingPlan {
            schedule: NoiseSchedule::from_betas(beta)?,
            timesteps,
        })
    }
}

/// Reverse-process schedule plus the network timestep for each of its steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub schedule: NoiseSchedule,
    pub timesteps: Vec<usize>,
}

impl SamplingPlan {
    pub fn full(schedule: &NoiseSchedule) -> Self {
        SamplingPlan {
            schedule: schedule.clone(),
            timesteps: (1..=schedule.steps()).collect(),
        }
    }
}

fn quantize(v: f64, scale: f64) -> f64 {
    (v * scale).round() / scale
}

/// Grid-rounded (√ᾱ, √(1−ᾱ)) used by the forward process.
pub fn forward_coefficients(alpha_bar: f64) -> (f64, f64) {
    (
        quantize(alpha_bar.sqrt(), COEF_SCALE),
        quantize((1.0 - alpha_bar).sqrt(), COEF_SCALE),
    )
}

fn grid_values<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<Vec<f64>> {
    t.data()
        .iter()
        .map(|v| {
            let v = v.as_f64();
            if !v.is_finite() || v.abs() >= FORWARD_RANGE {
                return Err(Error::invalid(format!(
                    "{what} value {v} outside the forward-process range ±{FORWARD_RANGE}"
                )));
            }
            Ok(quantize(v, VALUE_SCALE))
        })
        .collect()
}

/// One field's noised views.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionBatch<T> {
    /// [n × Z × D], rounded onto the forward grid.
    pub clean: Tensor<T>,
    /// [Z × D], shared by every view.
    pub noise: Tensor<T>,
    pub t: usize,
    pub alpha_bar: f64,
    /// [n × Z × D].
    pub noisy: Tensor<T>,
}

impl<T: Scalar> DiffusionBatch<T> {
    pub fn views(&self) -> usize {
        self.clean.shape()[0]
    }

    pub fn tokens_per_view(&self) -> usize {
        self.clean.shape()[1]
    }

    pub fn token_dim(&self) -> usize {
        self.clean.shape()[2]
    }

    /// `(y_t − √ᾱ·y_0)/√(1−ᾱ)` for view `v`, evaluated with the forward
    /// coefficients.
    pub fn recover_noise(&self, v: usize) -> Vec<T> {
        let (a, b) = forward_coefficients(self.alpha_bar);
        let n = self.tokens_per_view() * self.token_dim();
        let range = v * n..(v + 1) * n;
        self.noisy.data()[range.clone()]
            .iter()
            .zip(&self.clean.data()[range])
            .map(|(&y, &y0)| T::of_f64((y.as_f64() - a * y0.as_f64()) / b))
            .collect()
    }

    /// The shared noise repeated per view, [n·Z × D]: the regression target.
    pub fn target_rows(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.clean.numel());
        for _ in 0..self.views() {
            data.extend_from_slice(self.noise.data());
        }
        Tensor::new(vec![self.views() * self.tokens_per_view(), self.token_dim()], data).expect("positive dims")
    }

    /// Noisy tokens flattened to [n·Z × D].
    pub fn noisy_rows(&self) -> Tensor<T> {
        self.noisy
            .clone()
            .reshape(vec![self.views() * self.tokens_per_view(), self.token_dim()])
            .expect("same numel")
    }
}

/// `y_t = √ᾱ·y_0 + √(1−ᾱ)·ε` for every view of `y0` [n×Z×D] with the one
/// `eps` [Z×D], on the exact forward grid.
pub fn diffuse_with_noise<T: Scalar>(
    y0: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    alpha_bar: f64,
) -> Result<DiffusionBatch<T>> {
    if y0.rank() != 3 {
        return Err(Error::shape(
            "forward_diffuse_views",
            "[n x Z x D]",
            shape_str(y0.shape()),
        ));
    }
    if eps.shape() != &y0.shape()[1..] {
        return Err(Error::shape(
            "forward_diffuse_views",
            shape_str(&y0.shape()[1..]),
            shape_str(eps.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let (a, b) = forward_coefficients(alpha_bar);
    let clean = grid_values(y0, "token")?;
    let noise = grid_values(eps, "noise")?;
    let noisy: Vec<T> = clean
        .chunks(noise.len())
        .flat_map(|view| view.iter().zip(&noise).map(|(&y, &e)| T::of_f64(a * y + b * e)))
        .collect();
    Ok(DiffusionBatch {
        clean: Tensor::new(y0.shape().to_vec(), clean.into_iter().map(T::of_f64).collect())?,
        noise: Tensor::new(eps.shape().to_vec(), noise.into_iter().map(T::of_f64).collect())?,
        t,
        alpha_bar,
        noisy: Tensor::new(y0.shape().to_vec(), noisy)?,
    })
}

/// Draws one ε of shape [Z×D] and noises every view of `y0` with it.
pub fn forward_diffuse_views<T: Scalar, R: Rng + ?Sized>(
    y0: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<DiffusionBatch<T>> {
    sched.check_t(t)?;
    if y0.rank() != 3 {
        return Err(Error::shape(
            "forward_diffuse_views",
            "[n x Z x D]",
            shape_str(y0.shape()),
        ));
    }
    let eps = Tensor::<T>::randn(y0.shape()[1..].to_vec(), rng);
    diffuse_with_noise(y0, &eps, t, sched.alpha_bar(t))
}

/// Mean squared error against the shared noise, over all views.
pub fn training_loss<T: Scalar>(eps_pred: &Tensor<T>, batch: &DiffusionBatch<T>) -> Result<f64> {
    let target = batch.target_rows();
    if eps_pred.numel() != target.numel() {
        return Err(Error::shape(
            "training_loss",
            shape_str(batch.clean.shape()),
            shape_str(eps_pred.shape()),
        ));
    }
    let sum: f64 = eps_pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &e)| (p.as_f64() - e.as_f64()).powi(2))
        .sum();
    Ok(sum / target.numel() as f64)
}

/// Posterior mean `(y_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn ddpm_mean<T: Scalar>(
    y_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    if y_t.shape() != eps_hat.shape() {
        return Err(Error::shape(
            "ddpm_step",
            shape_str(y_t.shape()),
            shape_str(eps_hat.shape()),
        ));
    }
    let inv_sqrt_alpha = sched.alpha(t).sqrt().recip();
    let eps_coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let data = y_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&y, &e)| T::of_f64(inv_sqrt_alpha * (y.as_f64() - eps_coef * e.as_f64())))
        .collect();
    Tensor::new(y_t.shape().to_vec(), data)
}

/// One reverse step, `μ + √β_t·z` with `z = 0` at t = 1.
pub fn ddpm_step<T: Scalar, R: Rng + ?Sized>(
    y_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut mu = ddpm_mean(y_t, eps_hat, t, sched)?;
    if t > 1 {
        let sigma = sched.beta(t).sqrt();
        for v in mu.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += T::of_f64(sigma * z);
        }
    }
    Ok(mu)
}

/// Which token channels receive guidance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChannelMask(Vec<bool>);

impl ChannelMask {
    pub fn none() -> Self {
        ChannelMask(Vec::new())
    }

    pub fn first(n: usize) -> Self {
        ChannelMask(vec![true; n])
    }

    pub fn all(dim: usize) -> Self {
        ChannelMask(vec![true; dim])
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        ChannelMask(flags)
    }

    /// Channels of an identity raw-patch token whose colour index is below
    /// `colors`: channel `k` carries colour `k % signal_dim`.
    pub fn pixel_colors(token_dim: usize, signal_dim: usize, colors: usize) -> Self {
        ChannelMask((0..token_dim).map(|k| k % signal_dim < colors).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&f| f)
    }

    pub fn is_set(&self, k: usize) -> bool {
        self.0.get(k).copied().unwrap_or(false)
    }
}

/// `ε_u + s·(ε_c − ε_u)` on masked channels, `ε_c` elsewhere. Channels are
/// the last axis.
pub fn cfg_combine<T: Scalar>(
    eps_cond: &Tensor<T>,
    eps_uncond: &Tensor<T>,
    s: f64,
    mask: &ChannelMask,
) -> Result<Tensor<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::shape(
            "cfg_combine",
            shape_str(eps_cond.shape()),
            shape_str(eps_uncond.shape()),
        ));
    }
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("guidance scale {s} must be finite and >= 0")));
    }
    let d = *eps_cond.shape().last().expect("rank >= 1");
    if mask.len() > d {
        return Err(Error::invalid(format!(
            "channel mask of length {} exceeds channel dim {d}",
            mask.len()
        )));
    }
    let mut out = eps_cond.clone();
    if s == 1.0 {
        return Ok(out);
    }
    let s = T::of_f64(s);
    for (i, (o, &u)) in out.data_mut().iter_mut().zip(eps_uncond.data()).enumerate() {
        if mask.is_set(i % d) {
            *o = u + s * (*o - u);
        }
    }
    Ok(out)
}

/// One field presented to a noise predictor.
#[derive(Debug, Clone, Copy)]
pub struct FieldQuery<'a, T> {
    /// [n·Z × D]
    pub noisy: &'a Tensor<T>,
    /// [n·Z × E]
    pub coords: &'a Tensor<T>,
    pub views: usize,
    pub cond: Condition<'a, T>,
}

/// Anything that predicts ε for a batch of fields at one timestep.
pub trait NoisePredictor<T: Scalar> {
    fn predict_noise(&self, queries: &[FieldQuery<'_, T>], t: usize) -> Result<Vec<Tensor<T>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceOptions {
    pub scale: f64,
    pub mask: ChannelMask,
    /// Start every view of a field from the same y_T draw.
    pub shared_init: bool,
}

impl GuidanceOptions {
    pub fn unguided() -> Self {
        GuidanceOptions {
            scale: 1.0,
            mask: ChannelMask::none(),
            shared_init: false,
        }
    }
}

/// One field to generate.
#[derive(Debug, Clone)]
pub struct SampleRequest<'a, T> {
    pub cond: Condition<'a, T>,
    /// [n·Z × E]
    pub coords: Tensor<T>,
    pub views: usize,
}

/// Runs the reverse process for several fields at once and returns their
/// final tokens, [n·Z × D] each. Field `i` draws only from `rngs[i]`, so the
/// result does not depend on how fields are grouped.
pub fn sample_tokens<T: Scalar, N: NoisePredictor<T> + ?Sized, R: Rng>(
    net: &N,
    requests: &[SampleRequest<'_, T>],
    token_dim: usize,
    plan: &SamplingPlan,
    opts: &GuidanceOptions,
    rngs: &mut [R],
) -> Result<Vec<Tensor<T>>> {
    if rngs.len() != requests.len() {
        return Err(Error::invalid(format!(
            "{} requests but {} rng streams",
            requests.len(),
            rngs.len()
        )));
    }
    let mut state = Vec::with_capacity(requests.len());
    for (req, rng) in requests.iter().zip(rngs.iter_mut()) {
        let (rows, _) = req.coords.dims2()?;
        if req.views == 0 || rows % req.views != 0 {
            return Err(Error::invalid(format!(
                "{rows} coordinate rows do not split into {} views",
                req.views
            )));
        }
        let z = rows / req.views;
        let y = if opts.shared_init {
            let one = Tensor::<T>::randn(vec![z, token_dim], rng);
            let mut data = Vec::with_capacity(rows * token_dim);
            (0..req.views).for_each(|_| data.extend_from_slice(one.data()));
            Tensor::new(vec![rows, token_dim], data)?
        } else {
            Tensor::randn(vec![rows, token_dim], rng)
        };
        state.push(y);
    }
    let guided = opts.scale != 1.0 && !opts.mask.is_empty();
    for i in (1..=plan.schedule.steps()).rev() {
        let t_net = plan.timesteps[i - 1];
        let mut queries: Vec<FieldQuery<'_, T>> = requests
            .iter()
            .zip(&state)
            .map(|(r, y)| FieldQuery {
                noisy: y,
                coords: &r.coords,
                views: r.views,
                cond: r.cond,
            })
            .collect();
        if guided {
            let nulls: Vec<_> = queries
                .iter()
                .map(|q| FieldQuery {
                    cond: Condition::Null,
                    ..*q
                })
                .collect();
            queries.extend(nulls);
        }
        let eps = net.predict_noise(&queries, t_net)?;
        drop(queries);
        let n = requests.len();
        if eps.len() != if guided { 2 * n } else { n } {
            return Err(Error::invalid("noise predictor returned the wrong number of fields"));
        }
        for f in 0..n {
            let e = if guided {
                cfg_combine(&eps[f], &eps[n + f], opts.scale, &opts.mask)?
            } else {
                eps[f].clone()
            };
            state[f] = ddpm_step(&state[f], &e, i, &plan.schedule, &mut rngs[f])?;
        }
    }
    Ok(state)
}
