use std::path::Path;

use pbe_core::data::{
    contrast, encode_pgm, extract_boundary, load_dataset, load_split, parse_pgm, read_pgm, resize_nearest, split,
    synth_generate, synth_sample, write_dataset, write_pgm, BinaryMap, SynthConfig, MAX_MASK_FRACTION, MIN_CONTRAST,
    MIN_MASK_FRACTION,
};
use pbe_core::{Error, Tensor};

fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMap {
    BinaryMap::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
}

fn small_cfg(count: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        count,
        size: 32,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn boundary_examples() {
    let zeros = map(8, 8, |_, _| false);
    assert_eq!(extract_boundary(&zeros).count(), 0);
    let square = map(8, 8, |r, c| (2..6).contains(&r) && (2..6).contains(&c));
    let b = extract_boundary(&square);
    assert_eq!(b.count(), 12);
    let full = map(3, 3, |_, _| true);
    assert_eq!(extract_boundary(&full).count(), 8);
}

#[test]
fn boundary_is_rim_of_mask() {
    let cfg = small_cfg(10, 4);
    for s in synth_generate(&cfg).unwrap() {
        let mask = BinaryMap::from_tensor(&s.mask).unwrap();
        let b = BinaryMap::from_tensor(&s.boundary).unwrap();
        let (h, w) = (mask.height, mask.width);
        for (r, c) in b.points() {
            assert!(mask.get(r, c));
            let bg = |dr: isize, dc: isize| {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize || !mask.get(rr as usize, cc as usize)
            };
            assert!(bg(-1, 0) || bg(1, 0) || bg(0, -1) || bg(0, 1));
        }
        for (r, c) in mask.points() {
            if !b.get(r, c) {
                assert!(r > 0 && c > 0 && mask.get(r - 1, c) && mask.get(r, c - 1));
            }
        }
    }
}

#[test]
fn synth_is_deterministic() {
    let a = synth_generate(&small_cfg(6, 7)).unwrap();
    let b = synth_generate(&small_cfg(6, 7)).unwrap();
    assert_eq!(a, b);
    let c = synth_generate(&small_cfg(6, 8)).unwrap();
    assert_ne!(a, c);
    assert_eq!(a[4], synth_sample(&small_cfg(6, 7), 4).unwrap());
    let mean = |v: &[pbe_core::data::Sample]| v.iter().flat_map(|s| s.image.data()).map(|&x| x as f64).sum::<f64>();
    assert_eq!(mean(&a), mean(&b));
}

#[test]
fn synth_postconditions() {
    for cfg in [
        small_cfg(40, 1),
        SynthConfig {
            count: 4,
            ..SynthConfig::default()
        },
    ] {
        for s in synth_generate(&cfg).unwrap() {
            let m = BinaryMap::from_tensor(&s.mask).unwrap();
            let frac = m.count() as f64 / m.bits.len() as f64;
            assert!(frac > MIN_MASK_FRACTION && frac < MAX_MASK_FRACTION, "{frac}");
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(s.image.shape(), &[1, 1, cfg.size, cfg.size]);
        }
    }
}

#[test]
fn synth_contrast_floor_before_noise() {
    let cfg = SynthConfig {
        speckle_strength: 0.0,
        ..small_cfg(30, 3)
    };
    for s in synth_generate(&cfg).unwrap() {
        let m = BinaryMap::from_tensor(&s.mask).unwrap();
        let img: Vec<f64> = s.image.data().iter().map(|&v| v as f64).collect();
        assert!(contrast(&img, &m) >= MIN_CONTRAST - 1e-6);
    }
}

#[test]
fn synth_config_validation() {
    assert!(SynthConfig {
        size: 40,
        ..SynthConfig::default()
    }
    .validate()
    .is_err());
    assert!(SynthConfig {
        blob_count_range: [2, 1],
        ..SynthConfig::default()
    }
    .validate()
    .is_err());
    assert!(serde_json::from_str::<SynthConfig>(r#"{"sizes": 32}"#).is_err());
}

#[test]
fn pgm_header_example() {
    let mut bytes = b"P5\n4 2\n255\n".to_vec();
    bytes.extend([0, 51, 102, 153, 204, 255, 0, 255]);
    let t = parse_pgm(&bytes, Path::new("x.pgm")).unwrap();
    assert_eq!(t.shape(), &[1, 1, 2, 4]);
    assert_eq!(t.data()[1], 0.2);
    assert_eq!(encode_pgm(&t).unwrap(), bytes);
}

#[test]
fn pgm_errors_report_offsets() {
    let p = Path::new("bad.pgm");
    let err = parse_pgm(b"P6\n1 1\n255\n\0", p).unwrap_err();
    assert!(matches!(err, Error::Format { offset: 0, .. }));
    let err = parse_pgm(b"P5\n2 2\n65535\n", p).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    let err = parse_pgm(b"P5\n2 2\n255\n\x01\x02", p).unwrap_err();
    match err {
        Error::Format { offset, msg, .. } => {
            assert_eq!(offset, 13);
            assert!(msg.contains("truncated"));
        }
        e => panic!("{e}"),
    }
    assert!(parse_pgm(b"P5\n2 x\n255\n", p).is_err());
}

#[test]
fn pgm_roundtrip_and_comments() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.pgm");
    let t = Tensor::from_fn(&[1, 1, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0).unwrap();
    write_pgm(&path, &t).unwrap();
    assert_eq!(read_pgm(&path).unwrap(), t);
    let mut bytes = b"P5 # comment\n2 1\n255\n".to_vec();
    bytes.extend([10, 20]);
    assert_eq!(parse_pgm(&bytes, &path).unwrap().shape(), &[1, 1, 1, 2]);
}

#[test]
fn nearest_resize_keeps_binary() {
    let src: Vec<f32> = (0..48).map(|i| (i % 3 == 0) as u8 as f32).collect();
    let out = resize_nearest(&src, 6, 8, 13, 5);
    assert_eq!(out.len(), 65);
    assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(resize_nearest(&src, 6, 8, 6, 8), src);
}

#[test]
fn split_ratio_and_determinism() {
    let items: Vec<usize> = (0..10).collect();
    let (t, v) = split(&items, 0.8, 3);
    assert_eq!((t.len(), v.len()), (8, 2));
    assert_eq!(split(&items, 0.8, 3), (t.clone(), v.clone()));
    let mut all = [t, v].concat();
    all.sort();
    assert_eq!(all, items);
}

#[test]
fn dataset_roundtrip_and_resize() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_generate(&small_cfg(10, 5)).unwrap();
    write_dataset(dir.path(), &samples, 0.8, 5).unwrap();
    let loaded = load_dataset(dir.path(), 32).unwrap();
    assert_eq!(loaded.len(), 10);
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.boundary, b.boundary);
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
    let (train, val) = load_split(dir.path(), 16, 0.5, 0).unwrap();
    assert_eq!((train.len(), val.len()), (8, 2));
    for s in train.iter().chain(&val) {
        assert_eq!(s.image.shape(), &[1, 1, 16, 16]);
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let m = BinaryMap::from_tensor(&s.mask).unwrap();
        assert_eq!(BinaryMap::from_tensor(&s.boundary).unwrap(), extract_boundary(&m));
    }
}

#[test]
fn missing_mask_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_generate(&small_cfg(2, 5)).unwrap();
    write_dataset(dir.path(), &samples, 0.5, 5).unwrap();
    std::fs::remove_file(dir.path().join("masks").join(format!("{}.pgm", samples[1].id))).unwrap();
    match load_dataset(dir.path(), 32) {
        Err(Error::MissingMask(id)) => assert_eq!(id, samples[1].id),
        other => panic!("{other:?}"),
    }
}
