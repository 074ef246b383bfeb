use fieldiff::conditioning::Condition;
use fieldiff::diffusion::{
    cfg_combine, ddpm_mean, ddpm_step, diffuse_with_noise, forward_diffuse_views, make_schedule, sample_tokens,
    training_loss, ChannelMask, FieldQuery, GuidanceOptions, NoisePredictor, NoiseSchedule, SampleRequest,
    SamplingPlan,
};
use fieldiff::{Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn paper_schedule_final_alpha_bar() {
    // independent product over the linear betas
    let mut prod = 1.0f64;
    for i in 0..1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
        prod *= 1.0 - beta;
    }
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
    assert!((s.alpha_bar(1000) - 4.04e-5).abs() < 0.01e-5, "{}", s.alpha_bar(1000));
}

#[test]
fn eq1_direct_evaluation() {
    let y0 = Tensor::new(vec![1, 1, 1], vec![1.0f64]).unwrap();
    let eps = Tensor::new(vec![1, 1], vec![0.5f64]).unwrap();
    let b = diffuse_with_noise(&y0, &eps, 1, 0.25).unwrap();
    let want = 0.5 * 1.0 + 0.75f64.sqrt() * 0.5;
    assert!((b.noisy.data()[0] - want).abs() < 1e-6);
    assert!((b.noisy.data()[0] - 0.9330).abs() < 1e-4);
}

#[test]
fn forward_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y0 = Tensor::<f64>::uniform(vec![3, 4, 5], -1.0, 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(vec![4, 5], &mut rng);
    let b = diffuse_with_noise(&y0, &eps, 0, 1.0).unwrap();
    assert_eq!(b.noisy, b.clean);
    let b = diffuse_with_noise(&y0, &eps, 1, 0.0).unwrap();
    for v in 0..3 {
        assert_eq!(&b.noisy.data()[v * 20..(v + 1) * 20], b.noise.data());
    }
}

#[test]
fn training_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sched = NoiseSchedule::desk(200).unwrap();
    let y0 = Tensor::<f64>::uniform(vec![2, 64, 64], -1.0, 1.0, &mut rng);
    let b = forward_diffuse_views(&y0, 100, &sched, &mut rng).unwrap();

    assert_eq!(training_loss(&b.target_rows(), &b).unwrap(), 0.0);

    let zero = Tensor::zeros(vec![128, 64]);
    let loss = training_loss(&zero, &b).unwrap();
    assert!((loss - 1.0).abs() < 0.05, "{loss}");

    let mean_sq = b.noise.data().iter().map(|e| e * e).sum::<f64>() / 4096.0;
    let mut half = b.target_rows();
    half.data_mut()[4096..].iter_mut().for_each(|v| *v = 0.0);
    assert!((training_loss(&half, &b).unwrap() - 0.5 * mean_sq).abs() < 1e-12);

    assert!(training_loss(&Tensor::zeros(vec![3, 3]), &b).is_err());
}

#[test]
fn ddpm_first_step_inverts_the_forward_process() {
    let sched = NoiseSchedule::desk(200).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y0 = Tensor::<f64>::uniform(vec![16, 8], -1.0, 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(vec![16, 8], &mut rng);
    let (a, b) = (sched.alpha_bar(1).sqrt(), (1.0 - sched.alpha_bar(1)).sqrt());
    let y1 = Tensor::from_fn(vec![16, 8], |i| a * y0.data()[i] + b * eps.data()[i]);
    let out = ddpm_step(&y1, &eps, 1, &sched, &mut rng).unwrap();
    assert!(out.max_abs_diff(&y0).unwrap() < 1e-12);
}

#[test]
fn ddpm_vanishing_beta_is_identity() {
    let sched = NoiseSchedule::from_betas(vec![1e-30, 1e-30]).unwrap();
    let y = Tensor::from_fn(vec![4, 4], |i| i as f64 * 0.25 - 2.0);
    let out = ddpm_mean(&y, &Tensor::zeros(vec![4, 4]), 2, &sched).unwrap();
    assert!(out.max_abs_diff(&y).unwrap() < 1e-14);
}

fn reverse_oracle(steps: usize) -> f64 {
    let sched = NoiseSchedule::desk(steps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(steps as u64);
    let y0 = Tensor::<f64>::uniform(vec![32, 6], -1.0, 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(vec![32, 6], &mut rng);
    let ab = sched.alpha_bar(steps);
    let mut y = Tensor::from_fn(vec![32, 6], |i| {
        ab.sqrt() * y0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i]
    });
    for t in (1..=steps).rev() {
        let ab = sched.alpha_bar(t);
        let eps_hat = Tensor::from_fn(vec![32, 6], |i| {
            (y.data()[i] - ab.sqrt() * y0.data()[i]) / (1.0 - ab).sqrt()
        });
        y = ddpm_mean(&y, &eps_hat, t, &sched).unwrap();
    }
    y.max_abs_diff(&y0).unwrap()
}

#[test]
fn deterministic_reverse_oracle() {
    for steps in [1, 10, 25, 50] {
        let err = reverse_oracle(steps);
        assert!(err < 1e-6, "T={steps}: {err}");
    }
    let paper = make_schedule(50, 1e-4, 0.02).unwrap();
    assert!(paper.alpha_bar(50) > 0.0);
}

#[test]
fn guidance_examples() {
    let c = Tensor::new(vec![1, 4], vec![1.0f64; 4]).unwrap();
    let u = Tensor::zeros(vec![1, 4]);
    let out = cfg_combine(&c, &u, 8.5, &ChannelMask::first(3)).unwrap();
    assert_eq!(out.data(), &[8.5, 8.5, 8.5, 1.0]);
    assert_eq!(cfg_combine(&c, &u, 8.5, &ChannelMask::none()).unwrap(), c);
    assert_eq!(cfg_combine(&c, &u, 1.0, &ChannelMask::all(4)).unwrap(), c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_strictly_decreasing(steps in 1usize..400, lo in 1e-5f64..0.05, extra in 0.0f64..0.5) {
        let s = make_schedule(steps, lo, lo + extra).unwrap();
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha_bar(t) > 0.0);
            let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
            prop_assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_recovered_from_every_view_is_the_stored_draw(
        seed in any::<u64>(), views in 1usize..6, z in 1usize..9, d in 1usize..9, t in 1usize..=200, amp in 0.1f64..30.0,
    ) {
        let sched = NoiseSchedule::desk(200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y0 = Tensor::<f64>::uniform(vec![views, z, d], -amp, amp, &mut rng);
        let b = forward_diffuse_views(&y0, t, &sched, &mut rng).unwrap();
        for v in 0..views {
            let rec = b.recover_noise(v);
            prop_assert!(rec.iter().zip(b.noise.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn unmasked_channels_are_untouched(seed in any::<u64>(), s in 0.0f64..20.0, n in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Tensor::<f64>::randn(vec![5, 6], &mut rng);
        let u = Tensor::<f64>::randn(vec![5, 6], &mut rng);
        let out = cfg_combine(&c, &u, s, &ChannelMask::first(n)).unwrap();
        for (i, (&o, &e)) in out.data().iter().zip(c.data()).enumerate() {
            if i % 6 >= n {
                prop_assert_eq!(o.to_bits(), e.to_bits());
            }
        }
        prop_assert_eq!(cfg_combine(&c, &u, 1.0, &ChannelMask::all(6)).unwrap(), c);
    }
}

/// Predicts zero noise regardless of input.
struct Zero;

impl NoisePredictor<f64> for Zero {
    fn predict_noise(&self, q: &[FieldQuery<'_, f64>], _t: usize) -> Result<Vec<Tensor<f64>>> {
        Ok(q.iter().map(|q| Tensor::zeros(q.noisy.shape().to_vec())).collect())
    }
}

/// Deterministic function of its inputs, conditional branch offset by one.
struct Affine;

impl NoisePredictor<f64> for Affine {
    fn predict_noise(&self, q: &[FieldQuery<'_, f64>], t: usize) -> Result<Vec<Tensor<f64>>> {
        Ok(q.iter()
            .map(|q| {
                let shift = match q.cond {
                    Condition::Null => 0.0,
                    Condition::Embedding(_) => 1.0,
                };
                q.noisy.map(|v| 0.1 * v + shift * 1e-3 * t as f64)
            })
            .collect())
    }
}

fn request(views: usize, z: usize) -> SampleRequest<'static, f64> {
    SampleRequest {
        cond: Condition::Null,
        coords: Tensor::zeros(vec![views * z, 3]),
        views,
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let sched = NoiseSchedule::desk(20).unwrap();
    let plan = SamplingPlan::full(&sched);
    let opts = GuidanceOptions::unguided();
    let run = |seed| {
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(seed)];
        sample_tokens(&Affine, &[request(2, 4)], 3, &plan, &opts, &mut rngs).unwrap()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

#[test]
fn batched_sampling_matches_one_at_a_time() {
    let sched = NoiseSchedule::desk(10).unwrap();
    let plan = SamplingPlan::full(&sched);
    let emb = fieldiff::conditioning::embed_text_toy::<f64>("a red square", 2, 4, 0).unwrap();
    let opts = GuidanceOptions {
        scale: 3.0,
        mask: ChannelMask::first(2),
        shared_init: false,
    };
    let mut reqs = vec![request(2, 3), request(1, 3)];
    reqs[1].cond = Condition::Embedding(&emb);
    let mut rngs: Vec<_> = (0..2).map(ChaCha8Rng::seed_from_u64).collect();
    let together = sample_tokens(&Affine, &reqs, 3, &plan, &opts, &mut rngs).unwrap();
    for (i, r) in reqs.iter().enumerate() {
        let mut rng = vec![ChaCha8Rng::seed_from_u64(i as u64)];
        let alone = sample_tokens(&Affine, std::slice::from_ref(r), 3, &plan, &opts, &mut rng).unwrap();
        assert_eq!(alone[0], together[i]);
    }
}

#[test]
fn shared_init_flag_starts_views_equal() {
    let sched = NoiseSchedule::desk(1).unwrap();
    let plan = SamplingPlan::full(&sched);
    let mut opts = GuidanceOptions::unguided();
    opts.shared_init = true;
    let mut rngs = vec![ChaCha8Rng::seed_from_u64(1)];
    // one step at t=1 adds no noise, so the views stay identical
    let out = sample_tokens(&Zero, &[request(3, 4)], 2, &plan, &opts, &mut rngs).unwrap();
    let d = out[0].data();
    assert_eq!(&d[..8], &d[8..16]);
    assert_eq!(&d[..8], &d[16..24]);
    opts.shared_init = false;
    let out = sample_tokens(&Zero, &[request(3, 4)], 2, &plan, &opts, &mut rngs).unwrap();
    assert_ne!(&out[0].data()[..8], &out[0].data()[8..16]);
}

#[test]
fn zero_predictor_matches_analytic_marginal() {
    let sched = NoiseSchedule::desk(50).unwrap();
    let plan = SamplingPlan::full(&sched);
    // y_{t-1} = y_t/√α_t + √β_t z  ⇒  var_{t-1} = var_t/α_t + β_t (no z at t = 1)
    let mut var = 1.0;
    for t in (1..=50).rev() {
        var = var / sched.alpha(t) + if t > 1 { sched.beta(t) } else { 0.0 };
    }
    let sigma = var.sqrt();
    let opts = GuidanceOptions::unguided();
    let mut firsts = Vec::new();
    let mut all = Vec::new();
    for seed in 0..64 {
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(seed)];
        let out = sample_tokens(&Zero, &[request(2, 8)], 4, &plan, &opts, &mut rngs).unwrap();
        firsts.push(out[0].data()[0]);
        all.extend_from_slice(out[0].data());
    }
    let mean = firsts.iter().sum::<f64>() / 64.0;
    assert!(mean.abs() < 3.0 * sigma / 8.0, "mean {mean} sigma {sigma}");
    let emp = all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64;
    assert!((emp / var - 1.0).abs() < 0.1, "var {emp} vs {var}");
}
