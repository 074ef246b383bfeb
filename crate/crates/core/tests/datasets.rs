use std::fs;

use fieldiff::datasets::*;
use fieldiff::field::{Image, Mask, View};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Column of the square center in a frame, found by scanning for lit pixels.
fn square_center(img: &Image, channel: usize) -> (f64, f64) {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
    for r in 0..img.height {
        for c in 0..img.width {
            if img.get(r, c, channel) > 0.0 {
                sr += r as f64;
                sc += c as f64;
                n += 1.0;
            }
        }
    }
    assert!(n > 0.0, "no square pixels");
    (sr / n, sc / n)
}

#[test]
fn single_frame_is_an_image() {
    let spec = ToyVideoSpec {
        frames: 1,
        ..Default::default()
    };
    let f = gen_toy_video(&spec, 3).unwrap();
    assert_eq!(f.spec.metric_dim, 2);
    assert_eq!(f.views.len(), 1);
    assert!(f.views[0].coord.is_empty());
}

#[test]
fn red_square_moves_right() {
    let spec = ToyVideoSpec {
        color: Some(ToyColor::Red),
        motion: Some(Motion::LeftToRight),
        ..Default::default()
    };
    let f = gen_toy_video(&spec, 0).unwrap();
    assert_eq!(f.views.len(), 8);
    assert_eq!(f.caption, "a red square moving left to right");
    let cols: Vec<f64> = f.views.iter().map(|v| square_center(&v.pixels, 0).1).collect();
    assert!(cols.windows(2).all(|w| w[1] > w[0]), "{cols:?}");
    let rows: Vec<f64> = f.views.iter().map(|v| square_center(&v.pixels, 0).0).collect();
    assert!(rows.iter().all(|&r| r == rows[0]));
    // other channels stay black
    for v in &f.views {
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(v.pixels.get(r, c, 1), -1.0);
                assert_eq!(v.pixels.get(r, c, 2), -1.0);
            }
        }
    }
}

#[test]
fn oversized_square_is_rejected() {
    let spec = ToyVideoSpec {
        square_size: 17,
        ..Default::default()
    };
    assert!(gen_toy_video(&spec, 0).is_err());
}

#[test]
fn views_are_deterministic() {
    let spec = ToyMultiViewSpec::default();
    assert_eq!(gen_toy_views(&spec, 5).unwrap(), gen_toy_views(&spec, 5).unwrap());
}

#[test]
fn opposite_azimuths_mirror_silhouettes() {
    let f = gen_toy_views(&ToyMultiViewSpec::default(), 1).unwrap();
    let masks = f.masks.as_ref().unwrap();
    for i in 0..8 {
        let (a, b) = (&masks[i], &masks[i + 8]);
        assert_eq!(a.count(), b.count(), "views {i} and {}", i + 8);
    }
}

#[test]
fn ring_coordinates_are_distinct_and_valid() {
    let spec = ToyMultiViewSpec::default();
    let f = gen_toy_views(&spec, 2).unwrap();
    assert_eq!(f.spec.metric_dim, 6);
    let cams = toy_cameras(&spec);
    let layouts: Vec<[f64; 6]> = cams.iter().map(|c| c.layout(16, 16)).collect();
    for (i, l) in layouts.iter().enumerate() {
        assert!(l.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(&l[..4], &f.views[i].coord[..]);
        for m in &layouts[..i] {
            assert_ne!(l, m);
        }
    }
}

#[test]
fn cube_fills_a_quarter_of_every_view() {
    let f = gen_toy_views(&ToyMultiViewSpec::default(), 9).unwrap();
    for m in f.masks.as_ref().unwrap() {
        assert!(m.count() * 4 >= 256, "object covers {} of 256 pixels", m.count());
    }
}

fn view_with(pixels: Vec<f64>, h: usize, w: usize) -> View {
    View::new(vec![], Image::new(h, w, 3, pixels).unwrap()).unwrap()
}

#[test]
fn prefill_statistics() {
    let n = 128;
    let v = view_with(vec![0.5; n * n * 3], n, n);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = prefill_blank(&v, &Mask::filled(n, n, false), PREFILL_SIGMA, &mut rng).unwrap();
    let len = out.pixels.data.len() as f64;
    let mean = out.pixels.data.iter().sum::<f64>() / len;
    let std = (out.pixels.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len).sqrt();
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((std - 0.1).abs() < 0.02, "std {std}");

    let full = prefill_blank(&v, &Mask::filled(n, n, true), PREFILL_SIGMA, &mut rng).unwrap();
    assert_eq!(full, v);
}

#[test]
fn mask_dims_must_match() {
    let v = view_with(vec![0.0; 12], 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(prefill_blank(&v, &Mask::filled(2, 3, true), 0.1, &mut rng).is_err());
    assert!(postprocess_mask(&v, &Mask::filled(3, 2, true), BACKGROUND).is_err());
}

#[test]
fn postprocess_cases() {
    let v = view_with((0..12).map(|i| i as f64 / 12.0).collect(), 2, 2);
    assert_eq!(postprocess_mask(&v, &Mask::filled(2, 2, true), BACKGROUND).unwrap(), v);
    let bg = postprocess_mask(&v, &Mask::filled(2, 2, false), BACKGROUND).unwrap();
    assert!(bg.pixels.data.iter().all(|&x| x == BACKGROUND));
}

#[test]
fn prefill_then_postprocess_restores_rendered_view() {
    let f = gen_toy_views(&ToyMultiViewSpec::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (v, m) in f.views.iter().zip(f.masks.as_ref().unwrap()) {
        let noisy = prefill_blank(v, m, PREFILL_SIGMA, &mut rng).unwrap();
        assert_ne!(&noisy, v);
        assert_eq!(&postprocess_mask(&noisy, m, BACKGROUND).unwrap(), v);
    }
}

proptest! {
    #[test]
    fn prefill_keeps_object_pixels(bits in proptest::collection::vec(any::<bool>(), 36), seed in any::<u64>()) {
        let mask = Mask::new(6, 6, bits).unwrap();
        let v = view_with((0..108).map(|i| (i as f64 / 54.0) - 1.0).collect(), 6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = prefill_blank(&v, &mask, 0.1, &mut rng).unwrap();
        for p in 0..36 {
            for ch in 0..3 {
                let (a, b) = (out.pixels.data[p * 3 + ch], v.pixels.data[p * 3 + ch]);
                if mask.data[p] {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                } else {
                    prop_assert!((-1.0..=1.0).contains(&a));
                }
            }
        }
    }

    #[test]
    fn generators_are_deterministic(seed in any::<u64>()) {
        let spec = ToyVideoSpec::default();
        prop_assert_eq!(gen_toy_video(&spec, seed).unwrap(), gen_toy_video(&spec, seed).unwrap());
    }

    #[test]
    fn square_stays_inside(seed in any::<u64>(), frames in 1usize..12, size in 1usize..10) {
        let spec = ToyVideoSpec { frames, square_size: size, ..Default::default() };
        let f = gen_toy_video(&spec, seed).unwrap();
        for v in &f.views {
            let lit = v.pixels.data.chunks(3).filter(|p| p.iter().any(|&x| x > 0.0)).count();
            prop_assert_eq!(lit, size * size);
        }
    }

    #[test]
    fn subsampling_is_monotone(total in 1usize..2000) {
        let idx = subsample_frames(total, MAX_FRAMES);
        prop_assert_eq!(idx.len(), total.min(MAX_FRAMES));
        prop_assert_eq!(idx[0], 0);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*idx.last().unwrap() < total);
    }
}

#[test]
fn empty_manifest_gives_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.txt");
    fs::write(&p, "# metric_dim = 3\n").unwrap();
    let ds = ingest_manifest(&p, None).unwrap();
    assert!(ds.is_empty());
    assert!(ds.skipped.is_empty());
}

#[test]
fn unreadable_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ingest_manifest(&dir.path().join("none.txt"), Some(2)).is_err());
}

#[test]
fn bad_records_are_skipped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let f = gen_toy_views(
        &ToyMultiViewSpec {
            views: 2,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let manifest = write_manifest(dir.path(), &[f], "ppm").unwrap();
    let mut text = fs::read_to_string(&manifest).unwrap();
    text.push_str("field_0000/view_000.ppm, 0.1, 0.2, 0.3, 0.4, 0.5, a red cube\n");
    text.push_str("field_0000/view_001.ppm, 0.1, 0.2, 1.5, 0.4, a red cube\n");
    fs::write(&manifest, text).unwrap();
    let ds = ingest_manifest(&manifest, None).unwrap();
    assert_eq!(ds.skipped.len(), 2);
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.fields[0].len(), 2);
}

#[test]
fn long_clips_are_subsampled() {
    let dir = tempfile::tempdir().unwrap();
    let frame = Image::filled(2, 2, 3, 0.0);
    fieldiff::imageio::write_ppm(&dir.path().join("f.ppm"), &frame).unwrap();
    let mut text = String::from("# metric_dim = 3\n");
    for i in 0..300 {
        // the same payload under distinct coordinates
        text.push_str(&format!("f.ppm, {}, clip\n", (i as f64 + 0.5) / 300.0));
    }
    let p = dir.path().join("m.txt");
    fs::write(&p, text).unwrap();
    let ds = ingest_manifest(&p, None).unwrap();
    let field = ds.load_field(0).unwrap();
    assert_eq!(field.views.len(), 128);
    for (i, v) in field.views.iter().enumerate() {
        let src = i * 300 / 128;
        assert_eq!(v.coord[0], (src as f64 + 0.5) / 300.0);
    }
}

#[test]
fn manifest_roundtrip_preserves_views() {
    let dir = tempfile::tempdir().unwrap();
    let fields: Vec<_> = (0..3)
        .map(|s| {
            gen_toy_views(
                &ToyMultiViewSpec {
                    views: 4,
                    ..Default::default()
                },
                s,
            )
            .unwrap()
        })
        .collect();
    let manifest = write_manifest(dir.path(), &fields, "png").unwrap();
    let ds = ingest_manifest(&manifest, None).unwrap();
    assert_eq!(ds.metric_dim, 6);
    let loaded = ds.load_all().unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in fields.iter().zip(&loaded) {
        assert_eq!(a.caption, b.caption);
        assert_eq!(a.masks, b.masks);
        for (va, vb) in a.views.iter().zip(&b.views) {
            let ca: Vec<u64> = va.coord.iter().map(|c| c.to_bits()).collect();
            let cb: Vec<u64> = vb.coord.iter().map(|c| c.to_bits()).collect();
            assert_eq!(ca, cb);
            let err = va
                .pixels
                .data
                .iter()
                .zip(&vb.pixels.data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1.0 / 255.0, "quantization error {err}");
        }
    }
}

#[test]
fn video_manifest_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let fields: Vec<_> = (0..2)
        .map(|s| gen_toy_video(&ToyVideoSpec::default(), s).unwrap())
        .collect();
    let manifest = write_manifest(dir.path(), &fields, "ppm").unwrap();
    let loaded = ingest_manifest(&manifest, Some(3)).unwrap().load_all().unwrap();
    // toy video pixels are exactly -1 or 1, so 8-bit storage is lossless
    assert_eq!(loaded, fields);
}
