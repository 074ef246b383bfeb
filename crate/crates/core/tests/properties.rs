use fieldiff::checkpoint;
use fieldiff::codec::{PatchCodec, PatchCodecConfig};
use fieldiff::conditioning::{embed_text_toy, embed_view, MAX_TOKEN_NORM};
use fieldiff::config::RunConfig;
use fieldiff::container::{AnyTensor, Container};
use fieldiff::datasets::{gen_toy_video, ToyVideoSpec};
use fieldiff::field::{coord_embed_len, embed_coordinates, grid_coordinates, FieldSpec, Image, View};
use fieldiff::numerics::Tape;
use fieldiff::pipeline::Model;
use fieldiff::training::{build_batch, train_step, Adam};
use fieldiff::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_view(h: usize, w: usize, c: usize, seed: u64) -> View {
    let t = Tensor::<f64>::uniform(vec![h * w * c], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    View::new(vec![], Image::new(h, w, c, t.data().to_vec()).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn raw_roundtrip_is_exact(rows in 1usize..4, cols in 1usize..4, patch in 1usize..6, extra in 0usize..8, seed in any::<u64>()) {
        let (h, w) = (rows * patch, cols * patch);
        let spec = FieldSpec::new(2, 3, h, w, 1).unwrap();
        let cfg = PatchCodecConfig { token_dim: patch * patch * 3 + extra, ..PatchCodecConfig::raw(patch, 3) };
        let codec = PatchCodec::<f64>::new(cfg).unwrap();
        let v = random_view(h, w, 3, seed);
        let tokens = codec.encode_view(&v).unwrap();
        prop_assert_eq!(tokens.shape(), &[rows * cols, cfg.token_dim]);
        let back = codec.decode_view(&tokens, &spec, vec![]).unwrap();
        let err = back.pixels.data.iter().zip(&v.pixels.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn editing_a_patch_changes_only_its_token(rows in 1usize..4, cols in 1usize..4, seed in any::<u64>(), pr in 0usize..4, pc in 0usize..4) {
        let patch = 4;
        let (pr, pc) = (pr % rows, pc % cols);
        let codec = PatchCodec::<f64>::new(PatchCodecConfig::raw(patch, 3)).unwrap();
        let v = random_view(rows * patch, cols * patch, 3, seed);
        let mut edited = v.clone();
        edited.pixels.set(pr * patch + 1, pc * patch + 2, 1, 0.123);
        let (a, b) = (codec.encode_view(&v).unwrap(), codec.encode_view(&edited).unwrap());
        let d = codec.token_dim();
        for k in 0..rows * cols {
            let same = a.data()[k * d..(k + 1) * d] == b.data()[k * d..(k + 1) * d];
            prop_assert_eq!(same, k != pr * cols + pc || v.pixels.get(pr * patch + 1, pc * patch + 2, 1) == 0.123);
        }
    }

    #[test]
    fn grid_coordinates_are_normalized(rows in 1usize..20, cols in 1usize..20, dm in prop::sample::select(vec![2usize, 3, 6]), seed in any::<u64>()) {
        let spec = FieldSpec::new(dm, 3, 16, 16, if dm == 2 { 1 } else { 4 }).unwrap();
        let vc: Vec<f64> = Tensor::<f64>::uniform(vec![dm - 2 + 1], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).data()[..dm - 2].to_vec();
        let g = grid_coordinates(&spec, rows, cols, &vc).unwrap();
        prop_assert_eq!(g.len(), rows * cols);
        for (i, m) in g.iter().enumerate() {
            prop_assert_eq!(m.len(), dm);
            prop_assert!(m.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert_eq!(m[0], ((i / cols) as f64 + 0.5) / rows as f64);
            prop_assert_eq!(m[1], ((i % cols) as f64 + 0.5) / cols as f64);
            prop_assert_eq!(&m[2..], &vc[..]);
            let e = embed_coordinates(m, 10);
            prop_assert_eq!(e.len(), coord_embed_len(dm, 10));
        }
    }

    #[test]
    fn text_embeddings_are_pure_and_bounded(words in prop::collection::vec("[a-z]{1,8}", 1..12), zc in 1usize..20, dim in 1usize..40, seed in any::<u64>()) {
        let caption = words.join(" ");
        let a = embed_text_toy::<f64>(&caption, zc, dim, seed).unwrap();
        let b = embed_text_toy::<f64>(&caption, zc, dim, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for row in a.tokens.data().chunks(dim) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(n.is_finite() && n <= MAX_TOKEN_NORM);
        }
    }

    #[test]
    fn view_embeddings_are_pure_and_bounded(seed in any::<u64>(), dim in 1usize..40) {
        let v = random_view(8, 8, 3, seed);
        let a = embed_view::<f32>(&v, dim, 4, 3).unwrap();
        prop_assert_eq!(&a, &embed_view::<f32>(&v, dim, 4, 3).unwrap());
        let n = a.tokens.data().iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
        prop_assert!(n <= MAX_TOKEN_NORM);
    }

    #[test]
    fn container_roundtrip_is_bitwise(seed in any::<u64>(), n in 1usize..5, config in "[ -~]{0,40}") {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Container::new(config);
        for i in 0..n {
            let t = Tensor::<f64>::randn(vec![i + 1, 3], &mut rng);
            if i % 2 == 0 {
                c.push(format!("t{i}"), AnyTensor::F64(t));
            } else {
                c.push(format!("t{i}"), AnyTensor::F32(t.cast()));
            }
        }
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

fn tiny() -> (Model<f64>, Vec<fieldiff::field::FieldSample>) {
    let mut cfg = RunConfig::default();
    cfg.model.depth = 1;
    cfg.model.width = 16;
    cfg.model.heads = 2;
    cfg.model.cond_dim = 8;
    cfg.model.cond_tokens = 4;
    cfg.model.time_dim = 16;
    let fields: Vec<_> = (0..2)
        .map(|s| gen_toy_video(&ToyVideoSpec::default(), s).unwrap())
        .collect();
    let mut m = Model::<f64>::new(cfg, fields[0].spec).unwrap();
    m.workers = 1;
    (m, fields)
}

#[test]
fn null_condition_learns_under_dropout() {
    let (mut m, fields) = tiny();
    let data = m.prepare(&fields).unwrap();
    let mut tc = m.config.train_config();
    tc.cond_dropout = 1.0;
    tc.lr = 1e-2;
    let sched = m.config.schedule().unwrap();
    let mut opt = Adam::new(m.net.params(), tc.lr);
    let null = m.net.null_param();
    assert!(m.net.params().get(null).data().iter().all(|&x| x == 0.0));
    let b = build_batch(&data, &[0, 1], &tc, &sched, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // zero-initialized output and modulation heads block the path to the
    // condition until both have moved, which takes two updates
    for _ in 0..3 {
        train_step(&mut m.net, &b, &mut opt).unwrap();
    }
    let mut tape = Tape::new();
    let p = tape.bind(m.net.params(), true).unwrap();
    let out = m.net.forward(&mut tape, &p, &b.inputs()).unwrap();
    let tgt = tape.constant(b.targets().unwrap()).unwrap();
    let loss = tape.mse(out, tgt).unwrap();
    let g = tape.backward(loss).unwrap().wrt(p[null]);
    assert!(g.data().iter().any(|&x| x != 0.0));
    // and conditional batches leave it alone
    tc.cond_dropout = 0.0;
    let b = build_batch(&data, &[0, 1], &tc, &sched, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut tape = Tape::new();
    let p = tape.bind(m.net.params(), true).unwrap();
    let out = m.net.forward(&mut tape, &p, &b.inputs()).unwrap();
    let tgt = tape.constant(b.targets().unwrap()).unwrap();
    let loss = tape.mse(out, tgt).unwrap();
    assert!(tape
        .backward(loss)
        .unwrap()
        .wrt(p[null])
        .data()
        .iter()
        .all(|&x| x == 0.0));
}

#[test]
fn dropout_replaces_only_the_condition() {
    let (m, fields) = tiny();
    let data = m.prepare(&fields).unwrap();
    let sched = m.config.schedule().unwrap();
    let mut tc = m.config.train_config();
    tc.cond_dropout = 0.0;
    let kept = build_batch(&data, &[0, 1], &tc, &sched, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    tc.cond_dropout = 1.0;
    let dropped = build_batch(&data, &[0, 1], &tc, &sched, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for (a, b) in kept.fields.iter().zip(&dropped.fields) {
        assert_eq!(
            (&a.views, &a.noisy, &a.coords, &a.diffusion),
            (&b.views, &b.noisy, &b.coords, &b.diffusion)
        );
        assert!(a.cond.is_some() && b.cond.is_none());
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let (mut m, fields) = tiny();
    let dir = tempfile::tempdir().unwrap();
    m.config.train.steps = 2;
    let (opt, _) = m.train(&fields, None, None).unwrap();
    let c = m.checkpoint(&opt);
    let p = dir.path().join("a.t1cp");
    c.save(&p).unwrap();
    let loaded = Model::<f64>::load(&p).unwrap();
    let opt2 = checkpoint::restore_optimizer(&Container::load(&p).unwrap(), &loaded.net, 1e-4).unwrap();
    assert_eq!(opt2.step_count(), 2);
    let again = loaded.checkpoint(&opt2);
    assert_eq!(again.to_bytes().unwrap(), std::fs::read(&p).unwrap());
    assert_eq!(loaded.net.params(), m.net.params());
}

#[test]
fn checkpoints_reject_foreign_parameters() {
    let (m, _) = tiny();
    let opt = Adam::new(m.net.params(), 1e-4);
    let mut c = m.checkpoint(&opt);
    c.push("param.bogus", AnyTensor::F64(Tensor::zeros(vec![1])));
    let mut net = m.net.clone();
    assert!(checkpoint::restore_params(&c, &mut net).is_err());
    let c = Container::new(m.config.to_text());
    assert!(checkpoint::restore_params(&c, &mut net).is_err());
    // no optimizer tensors: a fresh optimizer
    assert_eq!(checkpoint::restore_optimizer(&c, &net, 1e-4).unwrap().step_count(), 0);
}

#[test]
fn f32_model_roundtrips_through_its_checkpoint() {
    let mut cfg = RunConfig::default();
    cfg.model.depth = 1;
    cfg.model.width = 16;
    cfg.model.heads = 2;
    cfg.model.precision = "f32".into();
    let f = gen_toy_video(&ToyVideoSpec::default(), 3).unwrap();
    let m = Model::<f32>::new(cfg, f.spec).unwrap();
    let c = m.checkpoint(&Adam::new(m.net.params(), 1e-4));
    let back = Model::<f32>::from_checkpoint(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.net.params(), m.net.params());
    assert_eq!(back.config, m.config);
}
