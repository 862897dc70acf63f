use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage, Rgba, RgbaImage};
use malaria_core::data::*;
use malaria_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn write_rgb(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y)))
        .save(path)
        .unwrap();
}

fn fixture(dir: &Path, parasitized: usize, uninfected: usize) {
    for (class, count) in [("Parasitized", parasitized), ("Uninfected", uninfected)] {
        let d = dir.join(class);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..count {
            write_rgb(&d.join(format!("cell_{i}.png")), 8, 8, |x, y| {
                [(x * 30) as u8, (y * 30) as u8, (i * 40) as u8]
            });
        }
    }
}

fn synthetic_index(n: usize) -> DatasetIndex {
    DatasetIndex::new(
        (0..n)
            .map(|i| ImageRecord {
                path: PathBuf::from(format!("img_{i:06}.png")),
                label: usize::from(i % 2 == 1),
            })
            .collect(),
    )
}

#[test]
fn scan_labels_by_directory() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path(), 2, 3);
    let index = scan_dataset(tmp.path()).unwrap();
    assert_eq!(index.len(), 5);
    assert_eq!(index.labels(), vec![0, 0, 1, 1, 1]);
    assert_eq!(index.class_names, vec!["parasitized", "uninfected"]);
    assert_eq!(scan_dataset(tmp.path()).unwrap(), index);
    let mut sorted = index.records.clone();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    assert_eq!(sorted, index.records);
}

#[test]
fn scan_is_case_insensitive_and_skips_non_png() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("PARASITIZED");
    let u = tmp.path().join("uninfected");
    std::fs::create_dir_all(&p).unwrap();
    std::fs::create_dir_all(&u).unwrap();
    write_rgb(&p.join("a.png"), 4, 4, |_, _| [1, 2, 3]);
    write_rgb(&u.join("b.PNG"), 4, 4, |_, _| [1, 2, 3]);
    std::fs::write(u.join("Thumbs.db"), b"junk").unwrap();
    std::fs::write(u.join("fake.png"), b"not really a png").unwrap();
    let index = scan_dataset(tmp.path()).unwrap();
    assert_eq!(index.labels(), vec![0, 1]);
}

#[test]
fn scan_errors() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(tmp.path().join("Parasitized")).unwrap();
    match scan_dataset(tmp.path()) {
        Err(DataError::MissingClassDir { class, .. }) => assert_eq!(class, "uninfected"),
        other => panic!("expected missing class dir, got {other:?}"),
    }
    std::fs::create_dir_all(tmp.path().join("Uninfected")).unwrap();
    assert!(matches!(scan_dataset(tmp.path()), Err(DataError::Empty(_))));
    let missing = tmp.path().join("nope");
    let err = scan_dataset(&missing).unwrap_err();
    assert!(err.to_string().contains("nope"), "{err}");
}

#[test]
fn split_sizes() {
    for (n, expected) in [(10, (6, 2, 2)), (27_558, (16_534, 5_511, 5_513))] {
        let s = split_dataset(&synthetic_index(n), SplitSpec::new(42)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), expected);
    }
    assert_eq!(5_513, 2_808 + 2_705);
    assert!(matches!(
        split_dataset(&synthetic_index(2), SplitSpec::new(0)),
        Err(DataError::TooFewRecords(2))
    ));
}

#[test]
fn split_is_a_seeded_partition() {
    for n in [10, 1000, 27_558] {
        let index = synthetic_index(n);
        let all: HashSet<&PathBuf> = index.records.iter().map(|r| &r.path).collect();
        for seed in 0..100 {
            let s = split_dataset(&index, SplitSpec::new(seed)).unwrap();
            let mut seen = HashSet::new();
            for (_, part) in s.parts() {
                for r in &part.records {
                    assert!(seen.insert(&r.path), "duplicate {:?}", r.path);
                }
            }
            assert_eq!(seen, all);
        }
    }
    let index = synthetic_index(1000);
    let a = split_dataset(&index, SplitSpec::new(1)).unwrap();
    assert_eq!(a, split_dataset(&index, SplitSpec::new(1)).unwrap());
    assert_ne!(
        a.train,
        split_dataset(&index, SplitSpec::new(2)).unwrap().train
    );
}

#[test]
fn split_keeps_class_mix() {
    let index = synthetic_index(27_558);
    let s = split_dataset(&index, SplitSpec::new(7)).unwrap();
    for (_, part) in s.parts() {
        let frac = part.class_counts()[0] as f64 / part.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "class mix {frac}");
    }
}

#[test]
fn manifest_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let s = split_dataset(&synthetic_index(25), SplitSpec::new(3)).unwrap();
    let path = tmp.path().join("split.csv");
    write_manifest(&path, &s).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("path,label,split\n"));
    assert!(!text.contains('\r'));
    assert_eq!(text.lines().count(), 26);
    assert_eq!(read_manifest(&path).unwrap(), s);
}

#[test]
fn preprocess_constant_image() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("white.png");
    write_rgb(&path, 50, 50, |_, _| [255, 255, 255]);
    let t = load_image(&path).unwrap();
    assert_eq!(t, Tensor::ones(&[3, 224, 224]));
}

#[test]
fn preprocess_native_size_is_pixel_over_255() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("native.png");
    let f = |x: u32, y: u32| [(x % 256) as u8, (y % 256) as u8, ((x * y) % 256) as u8];
    write_rgb(&path, 224, 224, f);
    let t = load_image(&path).unwrap();
    for c in 0..3 {
        for y in 0..224 {
            for x in 0..224 {
                let expected = f(x as u32, y as u32)[c] as f64 / 255.0;
                assert_eq!(t.data()[(c * 224 + y) * 224 + x], expected as f32);
            }
        }
    }
}

/// Direct evaluation of the half-pixel bilinear formula at one target center.
fn bilinear_oracle(src: &[Vec<f64>], ty: usize, tx: usize, out_h: usize, out_w: usize) -> f64 {
    let (h, w) = (src.len(), src[0].len());
    let sy = ((ty as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let sx = ((tx as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (a, b) = (sy - y0 as f64, sx - x0 as f64);
    (1.0 - a) * (1.0 - b) * src[y0][x0]
        + (1.0 - a) * b * src[y0][x1]
        + a * (1.0 - b) * src[y1][x0]
        + a * b * src[y1][x1]
}

#[test]
fn bilinear_upscale_matches_formula() {
    let src = vec![vec![0.0, 255.0], vec![0.0, 255.0]];
    let planes = Planes {
        channels: 1,
        height: 2,
        width: 2,
        data: src.concat(),
    };
    let out = resize_bilinear(&planes, 4, 4);
    for y in 0..4 {
        assert_eq!(
            (0..4).map(|x| out.at(0, y, x)).collect::<Vec<_>>(),
            vec![0.0, 63.75, 191.25, 255.0]
        );
    }

    // the same grayscale PNG through the full pipeline
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("gray.png");
    GrayImage::from_fn(2, 2, |x, _| Luma([if x == 0 { 0 } else { 255 }]))
        .save(&path)
        .unwrap();
    let t = load_image(&path).unwrap();
    for c in 0..3 {
        for y in [0, 100, 223] {
            for x in 0..224 {
                let expected = bilinear_oracle(&src, y, x, 224, 224) / 255.0;
                let got = t.data()[(c * 224 + y) * 224 + x] as f64;
                assert!(
                    (got - expected).abs() < 1e-6,
                    "({c},{y},{x}) {got} vs {expected}"
                );
            }
        }
    }
}

#[test]
fn bilinear_downscale_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let src: Vec<Vec<f64>> = (0..13)
        .map(|_| (0..9).map(|_| rng.random_range(0.0..255.0)).collect())
        .collect();
    let planes = Planes {
        channels: 1,
        height: 13,
        width: 9,
        data: src.concat(),
    };
    let out = resize_bilinear(&planes, 5, 7);
    for y in 0..5 {
        for x in 0..7 {
            assert!((out.at(0, y, x) - bilinear_oracle(&src, y, x, 5, 7)).abs() < 1e-9);
        }
    }
}

#[test]
fn rgba_drops_alpha_and_text_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("rgba.png");
    RgbaImage::from_fn(224, 224, |_, _| Rgba([255, 0, 51, 7]))
        .save(&path)
        .unwrap();
    let t = load_image(&path).unwrap();
    assert_eq!(t.data()[0], 1.0);
    assert_eq!(t.data()[224 * 224], 0.0);
    assert_eq!(t.data()[2 * 224 * 224], 0.2);

    assert!(matches!(
        preprocess_image(b"hello, world"),
        Err(DataError::Decode(_))
    ));
    let mut truncated = std::fs::read(&path).unwrap();
    truncated.truncate(40);
    assert!(matches!(
        preprocess_image(&truncated),
        Err(DataError::Decode(_))
    ));
}

fn planes_from(t: &Tensor<f32>) -> Planes {
    Planes::from_tensor(t)
}

#[test]
fn identity_augment_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = Tensor::from_fn(&[3, 224, 224], |_| rng.random::<f32>());
    let out = augment(&t, &AugmentConfig::identity(), &mut rng);
    assert_eq!(out, t);
    let explicit = AugmentParams {
        angle_deg: 0.0,
        scale: 1.0,
        flip: false,
    };
    assert_eq!(apply_augment(&planes_from(&t), &explicit).to_tensor(), t);
}

#[test]
fn flip_is_an_involution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = Tensor::from_fn(&[3, 224, 224], |_| rng.random::<f32>());
    let forced = AugmentConfig {
        hflip_prob: 1.0,
        ..AugmentConfig::identity()
    };
    let once = augment(&t, &forced, &mut rng);
    assert_ne!(once, t);
    assert_eq!(once.data()[223], t.data()[0]);
    assert_eq!(augment(&once, &forced, &mut rng), t);
}

#[test]
fn quarter_turn_moves_pixel_per_coordinate_map() {
    let mut t = Tensor::<f32>::zeros(&[3, 224, 224]);
    for c in 0..3 {
        t.data_mut()[(c * 224 + 10) * 224 + 20] = 1.0;
    }
    let params = AugmentParams {
        angle_deg: 90.0,
        scale: 1.0,
        flip: false,
    };
    let out = apply_augment(&planes_from(&t), &params);
    // forward map of a counter-clockwise turn on screen (rows grow downward):
    // dx' = dx cos θ + dy sin θ, dy' = -dx sin θ + dy cos θ, about the center
    let centre = 111.5;
    let (dy, dx) = (10.0 - centre, 20.0 - centre);
    let (sin, cos) = (1.0f64, 0.0f64);
    let tx = (centre + dx * cos + dy * sin).round() as usize;
    let ty = (centre - dx * sin + dy * cos).round() as usize;
    assert_eq!((ty, tx), (203, 10));
    for c in 0..3 {
        let mut best = (0.0, 0, 0);
        let mut mass = 0.0;
        for y in 0..224 {
            for x in 0..224 {
                let v = out.at(c, y, x);
                mass += v;
                if v > best.0 {
                    best = (v, y, x);
                }
            }
        }
        assert_eq!((best.1, best.2), (ty, tx));
        assert!(
            best.0 > 0.999 && (mass - 1.0).abs() < 1e-6,
            "{best:?} {mass}"
        );
    }
}

#[test]
fn zoom_in_magnifies_about_center() {
    // a centered bright square grows by the zoom factor
    let t = Tensor::<f32>::from_fn(&[1, 100, 100], |i| {
        let (y, x) = (i / 100, i % 100);
        if (40..60).contains(&y) && (40..60).contains(&x) {
            1.0
        } else {
            0.0
        }
    });
    let zoomed = |scale| {
        let p = AugmentParams {
            angle_deg: 0.0,
            scale,
            flip: false,
        };
        let out = apply_augment(&planes_from(&t), &p);
        out.data.iter().sum::<f64>()
    };
    assert!((zoomed(2.0) / 400.0 - 4.0).abs() < 0.1);
    assert!((zoomed(0.5) / 400.0 - 0.25).abs() < 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn augment_preserves_shape_and_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&[3, 64, 48], |_| rng.random::<f32>());
        let out = augment(&t, &AugmentConfig::default(), &mut rng);
        prop_assert_eq!(out.shape(), t.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut r1 = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut r2 = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let cfg = AugmentConfig { rotation_deg: 30.0, zoom_range: [0.8, 1.3], hflip_prob: 0.5 };
        prop_assert_eq!(augment(&t, &cfg, &mut r1), augment(&t, &cfg, &mut r2));
    }

    #[test]
    fn preprocess_output_in_unit_range(w in 1u32..40, h in 1u32..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
        let img = RgbImage::from_raw(w, h, pixels).unwrap();
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png).unwrap();
        let t = preprocess_image(&bytes).unwrap();
        prop_assert_eq!(t.shape(), &[3, 224, 224]);
        prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn augment_config_validation() {
    assert!(AugmentConfig::default().validate().is_ok());
    for bad in [
        AugmentConfig {
            rotation_deg: -1.0,
            ..Default::default()
        },
        AugmentConfig {
            zoom_range: [1.2, 0.9],
            ..Default::default()
        },
        AugmentConfig {
            zoom_range: [0.0, 1.0],
            ..Default::default()
        },
        AugmentConfig {
            hflip_prob: 1.5,
            ..Default::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn batches_partition_each_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path(), 2, 3);
    let index = scan_dataset(tmp.path()).unwrap();
    let cfg = BatchConfig {
        batch_size: 2,
        shuffle: false,
        seed: 0,
        augment: None,
    };
    let run = |cfg: &BatchConfig, epoch| -> Vec<Batch> {
        Batches::new(&index, cfg, epoch)
            .unwrap()
            .map(|b| b.unwrap())
            .collect()
    };
    let first = run(&cfg, 0);
    assert_eq!(
        first.iter().map(|b| b.labels.len()).collect::<Vec<_>>(),
        vec![2, 2, 1]
    );
    assert_eq!(first[0].images.shape(), &[2, 3, 224, 224]);
    assert_eq!(Batches::new(&index, &cfg, 0).unwrap().num_batches(), 3);
    let again = run(&cfg, 0);
    for (a, b) in first.iter().zip(&again) {
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    let shuffled = BatchConfig {
        shuffle: true,
        seed: 9,
        augment: Some(AugmentConfig::default()),
        ..cfg
    };
    for epoch in 0..4 {
        let mut labels: Vec<usize> = run(&shuffled, epoch)
            .into_iter()
            .flat_map(|b| b.labels)
            .collect();
        labels.sort();
        assert_eq!(labels, index.labels());
    }
    let orders: HashSet<Vec<usize>> = (0..8).map(|e| epoch_order(5, true, 9, e)).collect();
    assert!(orders.len() > 1);
    assert_eq!(epoch_order(5, true, 9, 3), epoch_order(5, true, 9, 3));
}

#[test]
fn batches_reject_empty_index() {
    let empty = DatasetIndex::new(Vec::new());
    let cfg = BatchConfig {
        batch_size: 2,
        shuffle: false,
        seed: 0,
        augment: None,
    };
    assert!(Batches::new(&empty, &cfg, 0).is_err());
}
