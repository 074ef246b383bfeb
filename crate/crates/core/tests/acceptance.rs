//! Acceptance criteria, run in order. Each prints one PASS/FAIL line; the
//! process exits non-zero if any fails.

use std::fs;
use std::time::{Duration, Instant};

use fieldiff::codec::{PatchCodec, PatchCodecConfig};
use fieldiff::conditioning::{embed_text_toy, Condition};
use fieldiff::config::RunConfig;
use fieldiff::costmodel::{estimate_macs, estimate_memory, CostQuery};
use fieldiff::datasets::{prefill_blank, toy_caption, Motion, ToyColor, PREFILL_SIGMA};
use fieldiff::diffusion::{cfg_combine, ddpm_mean, forward_diffuse_views, ChannelMask, NoiseSchedule};
use fieldiff::evalsuite::{condition_accuracy, evaluate_reconstruction, ClassCentroids, ConditionClass};
use fieldiff::field::{FieldSpec, Image, Mask, View};
use fieldiff::imageio::write_image;
use fieldiff::numerics::Tape;
use fieldiff::pipeline::{generate_toy, Model};
use fieldiff::scorenet::{FieldInput, ScoreNet, ScoreNetConfig};
use fieldiff::training::LAST_CHECKPOINT;
use fieldiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn cost_reproduction() -> Outcome {
    let cfg = ScoreNetConfig::paper(16, 40);
    let q = |text| CostQuery {
        tokens_per_view: 256,
        n_views: 1,
        view_local: true,
        text,
    };
    let on = estimate_macs(&cfg, &q(true)).unwrap().macs as f64;
    let off = estimate_macs(&cfg, &q(false)).unwrap().macs as f64;
    let (e_on, e_off) = (on / 117.06e9 - 1.0, off / 113.31e9 - 1.0);
    outcome(
        e_on.abs() <= 0.10 && e_off.abs() <= 0.10,
        format!(
            "text on {:.2}G ({:+.1}% of 117.06G), text off {:.2}G ({:+.1}% of 113.31G), tolerance ±10%",
            on / 1e9,
            100.0 * e_on,
            off / 1e9,
            100.0 * e_off
        ),
    )
}

fn attention_scaling() -> Outcome {
    let cfg = ScoreNetConfig::paper(16, 40);
    let q = |z, n, view_local| CostQuery {
        tokens_per_view: z,
        n_views: n,
        view_local,
        text: false,
    };
    let attn: Vec<u64> = [1, 4, 8]
        .iter()
        .map(|&n| estimate_macs(&cfg, &q(256, n, true)).unwrap().breakdown.attention)
        .collect();
    let local = estimate_memory(&cfg, &q(1024, 8, true), 4).unwrap().attention_scores;
    let global = estimate_memory(&cfg, &q(1024, 8, false), 4).unwrap().attention_scores;
    let linear = attn[1] == 4 * attn[0] && attn[2] == 8 * attn[0];
    outcome(
        linear && global == 8 * local,
        format!(
            "attention MACs 1:{}:{} (want 1:4:8 exact), global/local score memory {}/{} = {} (want 8 exact)",
            attn[1] / attn[0],
            attn[2] / attn[0],
            global,
            local,
            global as f64 / local as f64
        ),
    )
}

fn shared_noise() -> Outcome {
    let sched = NoiseSchedule::desk(200).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for _ in 0..1000 {
        let views = rng.random_range(1..=8);
        let z = rng.random_range(1..=16);
        let d = rng.random_range(1..=48);
        let t = rng.random_range(1..=200);
        let y0 = Tensor::<f64>::uniform(vec![views, z, d], -1.0, 1.0, &mut rng);
        let b = forward_diffuse_views(&y0, t, &sched, &mut rng).unwrap();
        let first = b.recover_noise(0);
        for v in 0..views {
            let rec = b.recover_noise(v);
            checked += rec.len();
            mismatches += rec
                .iter()
                .zip(&first)
                .zip(b.noise.data())
                .filter(|((r, f), e)| r.to_bits() != f.to_bits() || r.to_bits() != e.to_bits())
                .count();
        }
    }
    outcome(
        mismatches == 0,
        format!("1000 batches, {checked} recovered values, {mismatches} not bit-identical (want 0)"),
    )
}

fn gradient_check() -> Outcome {
    let mut cfg = ScoreNetConfig::desk(12, 10);
    cfg.cond_dim = 16;
    cfg.cond_tokens = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut net = ScoreNet::<f64>::new(cfg, &mut rng).unwrap();
    // every parameter random, including the zero-initialized heads
    net.params_mut().randomize(0.15, &mut rng);
    let noisy = Tensor::<f64>::randn(vec![6, 12], &mut rng);
    let coords = Tensor::<f64>::uniform(vec![6, 10], -1.0, 1.0, &mut rng);
    let target = Tensor::<f64>::randn(vec![12, 12], &mut rng);
    let emb = embed_text_toy::<f64>("a yellow square", 4, 16, 2).unwrap();
    let build = |n: &ScoreNet<f64>| {
        let mut tape = Tape::new();
        let p = tape.bind(n.params(), true).unwrap();
        let fields = [
            FieldInput {
                noisy: &noisy,
                coords: &coords,
                views: 2,
                t: 40,
                cond: Condition::Embedding(&emb),
            },
            FieldInput {
                noisy: &noisy,
                coords: &coords,
                views: 2,
                t: 90,
                cond: Condition::Null,
            },
        ];
        let out = n.forward(&mut tape, &p, &fields).unwrap();
        let tgt = tape.constant(target.clone()).unwrap();
        let loss = tape.mse(out, tgt).unwrap();
        (tape, loss, p)
    };
    let (tape, loss, p) = build(&net);
    let grads = tape.backward(loss).unwrap();
    let names = net.params().names().to_vec();
    let ids: Vec<_> = names.iter().map(|n| net.params().id(n).unwrap()).collect();
    let mut probes: Vec<(usize, usize)> = ids
        .iter()
        .enumerate()
        .map(|(k, &id)| (k, rng.random_range(0..net.params().get(id).numel())))
        .collect();
    while probes.len() < 240 {
        let k = rng.random_range(0..ids.len());
        probes.push((k, rng.random_range(0..net.params().get(ids[k]).numel())));
    }
    let value = |n: &ScoreNet<f64>| {
        let (tape, loss, _) = build(n);
        tape.value(loss).data()[0]
    };
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for (k, i) in probes {
        let id = ids[k];
        let g = grads.wrt(p[id]).data()[i];
        let h = 1e-5;
        let mut plus = net.clone();
        plus.params_mut().get_mut(id).data_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut().get_mut(id).data_mut()[i] -= h;
        let fd = (value(&plus) - value(&minus)) / (2.0 * h);
        if g.abs().max(fd.abs()) > 1e-7 {
            worst = worst.max(rel_err(g, fd));
            checked += 1;
        }
    }
    outcome(
        checked >= 200 && worst < 1e-4,
        format!(
            "depth 4 width 128, {checked} parameters probed (want >= 200), max rel error {worst:.2e} (want < 1e-4)"
        ),
    )
}

fn reverse_oracle() -> Outcome {
    let sched = NoiseSchedule::desk(50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let y0 = Tensor::<f64>::uniform(vec![64, 12], -1.0, 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(vec![64, 12], &mut rng);
    let ab = sched.alpha_bar(50);
    let mut y = Tensor::from_fn(vec![64, 12], |i| {
        ab.sqrt() * y0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i]
    });
    for t in (1..=50).rev() {
        let ab = sched.alpha_bar(t);
        let exact = Tensor::from_fn(vec![64, 12], |i| {
            (y.data()[i] - ab.sqrt() * y0.data()[i]) / (1.0 - ab).sqrt()
        });
        y = ddpm_mean(&y, &exact, t, &sched).unwrap();
    }
    let err = y.max_abs_diff(&y0).unwrap();
    outcome(err < 1e-6, format!("T=50, max abs error {err:.2e} (want < 1e-6)"))
}

fn view_isolation() -> Outcome {
    let mut cfg = ScoreNetConfig::desk(12, 10);
    cfg.cond_dim = 16;
    cfg.cond_tokens = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = ScoreNet::<f64>::new(cfg, &mut rng).unwrap();
    net.params_mut().randomize(0.3, &mut rng);
    let emb = embed_text_toy::<f64>("a red square", 4, 16, 0).unwrap();
    let (views, z, d) = (3, 4, 12);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let noisy = Tensor::<f64>::randn(vec![views * z, d], &mut rng);
        let coords = Tensor::<f64>::uniform(vec![views * z, 10], -1.0, 1.0, &mut rng);
        let keep = rng.random_range(0..views);
        let mut changed = noisy.clone();
        for (r, row) in changed.data_mut().chunks_mut(d).enumerate() {
            if r / z != keep {
                row.iter_mut().for_each(|v| *v += rng.random_range(-10.0..10.0));
            }
        }
        let t = rng.random_range(1..=200);
        let run = |n: &Tensor<f64>| {
            net.predict(&[FieldInput {
                noisy: n,
                coords: &coords,
                views,
                t,
                cond: Condition::Embedding(&emb),
            }])
            .unwrap()
            .remove(0)
        };
        let (a, b) = (run(&noisy), run(&changed));
        let range = keep * z * d..(keep + 1) * z * d;
        let diff = a.data()[range.clone()]
            .iter()
            .zip(&b.data()[range])
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    outcome(
        worst == 0.0,
        format!("100 trials, max change of the untouched view {worst:e} (want exactly 0)"),
    )
}

fn guidance_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // four channels per pixel, guidance on the first three
    let c = Tensor::<f64>::randn(vec![64, 64], &mut rng);
    let u = Tensor::<f64>::randn(vec![64, 64], &mut rng);
    let mask = ChannelMask::pixel_colors(64, 4, 3);
    let same =
        cfg_combine(&c, &u, 1.0, &ChannelMask::all(64)).unwrap() == c && cfg_combine(&c, &u, 1.0, &mask).unwrap() == c;
    let g = cfg_combine(&c, &u, 8.5, &mask).unwrap();
    let mut untouched = 0;
    let mut bad = 0;
    for (i, (&o, &e)) in g.data().iter().zip(c.data()).enumerate() {
        if !mask.is_set(i % 64) {
            untouched += 1;
            bad += usize::from(o.to_bits() != e.to_bits());
        }
    }
    outcome(
        same && bad == 0 && untouched > 0,
        format!("s=1 equals conditional: {same}; s=8.5: {bad} of {untouched} unmasked values differ (want 0)"),
    )
}

fn end_to_end() -> Outcome {
    let cfg = RunConfig::default();
    let fields = generate_toy(&cfg.data).unwrap();
    let mut model = Model::<f32>::new(cfg.clone(), fields[0].spec).unwrap();
    let untrained = model.clone();
    let clock = Instant::now();
    let (_, logs) = model.train(&fields, None, None).unwrap();
    let train_time = clock.elapsed();
    let mean = |s: &[fieldiff::training::StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
    let first = logs[0].loss;
    let last = mean(&logs[logs.len() - 100..]);

    let label = |c: &str| ToyColor::ALL.iter().position(|k| c.contains(k.name())).unwrap();
    let labeled: Vec<(usize, &[View])> = fields.iter().map(|f| (label(&f.caption), f.views.as_slice())).collect();
    let centroids = ClassCentroids::fit(3, &labeled).unwrap();
    let classes: Vec<ConditionClass> = ToyColor::ALL
        .iter()
        .map(|&c| ConditionClass {
            name: c.name().into(),
            captions: [Motion::LeftToRight, Motion::TopToBottom]
                .iter()
                .map(|&m| toy_caption(c, Some(m)))
                .collect(),
        })
        .collect();
    let opts = cfg.guidance(model.codec.token_dim(), 3).unwrap();
    let acc = condition_accuracy(
        &model,
        &classes,
        &centroids,
        cfg.eval.samples_per_class,
        cfg.train.n_views,
        &opts,
        cfg.sample.steps,
        cfg.sample.seed,
    )
    .unwrap();

    let mut held = cfg.data.clone();
    held.count = 32;
    held.seed = cfg.data.seed.wrapping_add(1);
    let held = generate_toy(&held).unwrap();
    let trained_psnr = evaluate_reconstruction(&model, &held, cfg.eval.t, cfg.eval.seed)
        .unwrap()
        .mean_psnr();
    let base_psnr = evaluate_reconstruction(&untrained, &held, cfg.eval.t, cfg.eval.seed)
        .unwrap()
        .mean_psnr();
    let gain = trained_psnr - base_psnr;
    let total = clock.elapsed();
    outcome(
        last < 0.3 && (first - 1.0).abs() < 0.05 && acc >= 0.9 && gain >= 6.0 && total < Duration::from_secs(30 * 60),
        format!(
            "loss {first:.3} -> {last:.4} (trailing 100; want < 0.3), condition accuracy {acc:.3} (want >= 0.9), \
             PSNR {trained_psnr:.2} vs untrained {base_psnr:.2} dB, gain {gain:.2} (want >= 6), train {:.0}s total {:.0}s (want < 1800s)",
            train_time.as_secs_f64(),
            total.as_secs_f64()
        ),
    )
}

fn codec_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (patch, h, w) = if i % 2 == 0 { (16, 32, 48) } else { (4, 16, 16) };
        let spec = FieldSpec::new(2, 3, h, w, 1).unwrap();
        let codec = PatchCodec::<f64>::new(PatchCodecConfig::raw(patch, 3)).unwrap();
        let data = Tensor::<f64>::uniform(vec![h * w * 3], -1.0, 1.0, &mut rng);
        let v = View::new(vec![], Image::new(h, w, 3, data.data().to_vec()).unwrap()).unwrap();
        let back = codec
            .decode_view(&codec.encode_view(&v).unwrap(), &spec, vec![])
            .unwrap();
        let err = back
            .pixels
            .data
            .iter()
            .zip(&v.pixels.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    outcome(
        worst < 1e-6,
        format!("100 views, max abs pixel error {worst:.2e} (want < 1e-6)"),
    )
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.data.count = 16;
    cfg.model.depth = 2;
    cfg.model.width = 64;
    cfg.train.steps = 20;
    cfg.train.batch_fields = 4;
    cfg.train.checkpoint_every = 10;
    let fields = generate_toy(&cfg.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut m = Model::<f32>::new(cfg.clone(), fields[0].spec).unwrap();
        m.workers = 1;
        let out = dir.path().join(name);
        m.train(&fields, Some(&out), None).unwrap();
        fs::read(out.join(LAST_CHECKPOINT)).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let ckpt_same = a == b;
    let model = Model::<f32>::load(&dir.path().join("a").join(LAST_CHECKPOINT)).unwrap();
    let emb = model.embed_caption("a green square moving left to right").unwrap();
    let opts = cfg.guidance(model.codec.token_dim(), 3).unwrap();
    let coords = model.default_view_coords(8);
    let sample = |name: &str| -> Vec<Vec<u8>> {
        let views = model
            .sample(&[Condition::Embedding(&emb)], &coords, &opts, 20, &[42])
            .unwrap();
        views[0]
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let p = dir.path().join(format!("{name}_{i}.png"));
                write_image(&p, &v.pixels).unwrap();
                fs::read(p).unwrap()
            })
            .collect()
    };
    let images_same = sample("s1") == sample("s2");
    outcome(
        ckpt_same && images_same,
        format!(
            "checkpoints byte-identical: {ckpt_same} ({} bytes); sampled images byte-identical: {images_same}",
            a.len()
        ),
    )
}

fn prefill_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let view = View::new(vec![], Image::filled(128, 128, 3, -1.0)).unwrap();
    let empty = Mask::filled(128, 128, false);
    let filled = prefill_blank(&view, &empty, PREFILL_SIGMA, &mut rng).unwrap();
    let n = filled.pixels.data.len() as f64;
    let mean = filled.pixels.data.iter().sum::<f64>() / n;
    let sd = (filled.pixels.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();

    let obj = View::new(
        vec![],
        Image::new(
            128,
            128,
            3,
            Tensor::<f64>::uniform(vec![128 * 128 * 3], -1.0, 1.0, &mut rng)
                .data()
                .to_vec(),
        )
        .unwrap(),
    )
    .unwrap();
    let mask = Mask::new(128, 128, (0..128 * 128).map(|i| (i / 128 + i % 128) % 3 == 0).collect()).unwrap();
    let out = prefill_blank(&obj, &mask, PREFILL_SIGMA, &mut rng).unwrap();
    let mut changed = 0;
    for i in 0..128 * 128 {
        if mask.data[i] {
            changed += (0..3)
                .filter(|&k| out.pixels.data[i * 3 + k].to_bits() != obj.pixels.data[i * 3 + k].to_bits())
                .count();
        }
    }
    outcome(
        (sd - 0.1).abs() <= 0.02 && changed == 0,
        format!("background std {sd:.4} (want 0.1 ± 0.02), mean {mean:+.4}, object values changed {changed} (want 0)"),
    )
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 11] = [
        ("cost-model reproduction", cost_reproduction, Duration::from_secs(1)),
        ("attention scaling law", attention_scaling, Duration::from_secs(1)),
        ("cross-view shared noise", shared_noise, Duration::from_secs(10)),
        ("gradient correctness", gradient_check, Duration::from_secs(300)),
        ("reverse-process oracle", reverse_oracle, Duration::from_secs(10)),
        ("view isolation", view_isolation, Duration::from_secs(30)),
        ("guidance contract", guidance_contract, Duration::from_secs(1)),
        ("end-to-end toy training", end_to_end, Duration::from_secs(30 * 60)),
        ("codec roundtrip", codec_roundtrip, Duration::from_secs(5)),
        ("determinism", determinism, Duration::from_secs(600)),
        ("preprocessing statistics", prefill_statistics, Duration::from_secs(1)),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|k| k != n) {
            continue;
        }
        let clock = Instant::now();
        let o = run();
        let took = clock.elapsed();
        let pass = o.pass && took <= *budget;
        failed += usize::from(!pass);
        println!(
            "criterion {n:>2} {name}: {} | {} | {:.2}s (budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
