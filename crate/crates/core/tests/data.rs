use std::fs;

use latis::data::{list_images, load_image, make_pair, save_image, BitDepth, Dataset};
use latis::{Error, Image};

fn pattern(h: usize, w: usize) -> Image<f32> {
    Image::from_fn(h, w, |y, x| ((y * 7 + x * 13) % 256) as f32 / 255.0)
}

#[test]
fn pgm_scaling_by_maxval() {
    let dir = tempfile::tempdir().unwrap();
    let p8 = dir.path().join("a.pgm");
    fs::write(&p8, [b"P5\n2 1\n255\n".as_slice(), &[255, 0]].concat()).unwrap();
    let img: Image<f32> = load_image(&p8).unwrap();
    assert_eq!(img.data(), &[1.0, 0.0]);

    let p16 = dir.path().join("b.pgm");
    fs::write(&p16, [b"P5\n2 1\n65535\n".as_slice(), &[0, 0, 0xff, 0xff]].concat()).unwrap();
    let img: Image<f32> = load_image(&p16).unwrap();
    assert_eq!(img.data(), &[0.0, 1.0]);

    // 16-bit sources use their own maxval, not 255
    let p12 = dir.path().join("c.pgm");
    fs::write(&p12, [b"P5\n1 1\n4095\n".as_slice(), &[0x08, 0x00]].concat()).unwrap();
    let img: Image<f64> = load_image(&p12).unwrap();
    assert_eq!(img.data(), &[2048.0 / 4095.0]);
}

#[test]
fn eight_bit_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let img = pattern(17, 23);
    for name in ["x.pgm", "x.png"] {
        let path = dir.path().join(name);
        save_image(&path, &img, BitDepth::Eight).unwrap();
        let back: Image<f32> = load_image(&path).unwrap();
        assert_eq!(back, img, "{name}");
        save_image(&path, &back, BitDepth::Eight).unwrap();
        let again: Image<f32> = load_image(&path).unwrap();
        assert_eq!(again, img);
    }
}

#[test]
fn sixteen_bit_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(5, 6, |y, x| ((y * 6 + x) * 2000) as f64 / 65535.0);
    for name in ["y.pgm", "y.png"] {
        let path = dir.path().join(name);
        save_image(&path, &img, BitDepth::Sixteen).unwrap();
        let back: Image<f64> = load_image(&path).unwrap();
        assert_eq!(back, img, "{name}");
    }
}

#[test]
fn unknown_format_reports_magic_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.pgm");
    fs::write(&path, b"GIF89a....").unwrap();
    match load_image::<f32>(&path) {
        Err(Error::Format(msg)) => {
            assert!(msg.contains("47 49 46 38"), "{msg}");
            assert!(msg.contains("GIF89a"), "{msg}");
        }
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn truncated_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.pgm");
    fs::write(&path, [b"P5\n4 4\n255\n".as_slice(), &[1, 2, 3]].concat()).unwrap();
    assert!(matches!(load_image::<f32>(&path), Err(Error::Io(_))));

    let png = dir.path().join("t.png");
    save_image(&png, &pattern(16, 16), BitDepth::Eight).unwrap();
    let bytes = fs::read(&png).unwrap();
    fs::write(&png, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_image::<f32>(&png).is_err());
}

#[test]
fn colour_png_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rgb.png");
    let file = fs::File::create(&path).unwrap();
    let mut enc = png::Encoder::new(file, 1, 1);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().unwrap();
    w.write_image_data(&[1, 2, 3]).unwrap();
    w.finish().unwrap();
    assert!(matches!(load_image::<f32>(&path), Err(Error::Format(_))));
}

#[test]
fn pairs_follow_divisibility_and_resolution() {
    let (lr, hr) = make_pair(&pattern(160, 128), 2).unwrap();
    assert_eq!((lr.height(), lr.width()), (80, 64));
    assert_eq!((hr.height(), hr.width()), (160, 128));
    let c = Image::from_fn(30, 27, |_, _| 0.25f32);
    let (lr, hr) = make_pair(&c, 3).unwrap();
    assert_eq!((hr.height(), hr.width()), (30, 27));
    assert!(lr.data().iter().all(|&v| v == 0.25));
}

#[test]
fn directory_and_manifest_listing() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["b.pgm", "a.png", "c.txt"] {
        let p = dir.path().join(name);
        if name.ends_with(".txt") {
            fs::write(&p, "x").unwrap();
        } else {
            save_image(&p, &pattern(8, 8), BitDepth::Eight).unwrap();
        }
    }
    let listed = list_images(dir.path()).unwrap();
    let names: Vec<_> = listed.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
    assert_eq!(names, ["a.png", "b.pgm"]);

    let manifest = dir.path().join("list.txt");
    fs::write(&manifest, "b.pgm\n\n# comment\na.png\n").unwrap();
    let listed = list_images(&manifest).unwrap();
    assert_eq!(listed, vec![dir.path().join("b.pgm"), dir.path().join("a.png")]);

    let empty = tempfile::tempdir().unwrap();
    assert!(list_images(empty.path()).is_err());
}

fn dataset(seed: u64) -> Dataset {
    let images = (0..3)
        .map(|i| (format!("img{i}"), Image::from_fn(80 + 8 * i, 96, |y, x| ((x * 3 + y * (i + 1)) % 97) as f32 / 96.0)))
        .collect();
    Dataset::from_images(images, 2, Some(32), seed).unwrap()
}

#[test]
fn batches_are_deterministic_per_seed_and_step() {
    let ds = dataset(7);
    let (a_lr, a_hr) = ds.sample_batch::<f32>(4, 3).unwrap();
    let (b_lr, b_hr) = dataset(7).sample_batch::<f32>(4, 3).unwrap();
    assert_eq!(a_lr, b_lr);
    assert_eq!(a_hr, b_hr);
    assert_ne!(ds.sample_batch::<f32>(4, 4).unwrap().1, a_hr);
    assert_ne!(dataset(8).sample_batch::<f32>(4, 3).unwrap().1, a_hr);
}

#[test]
fn batch_shapes_at_default_crop() {
    let img = Image::from_fn(80, 80, |y, x| ((x + y) % 10) as f32 / 9.0);
    let ds = Dataset::from_images(vec![("a".into(), img)], 2, None, 0).unwrap();
    let (lr, hr) = ds.sample_batch::<f32>(64, 0).unwrap();
    assert_eq!(lr.shape(), &[64, 1, 32, 32]);
    assert_eq!(hr.shape(), &[64, 1, 64, 64]);
}

#[test]
fn crops_are_geometrically_aligned() {
    let ds = dataset(1);
    let origins = ds.crop_origins(6, 11);
    let (lr, hr) = ds.sample_batch::<f32>(6, 11).unwrap();
    for (b, &(i, top, left)) in origins.iter().enumerate() {
        let src = Image::from_fn(80 + 8 * i, 96, |y, x| ((x * 3 + y * (i + 1)) % 97) as f32 / 96.0);
        let (full_lr, full_hr) = make_pair(&src, 2).unwrap();
        let want_hr = full_hr.crop(2 * top, 2 * left, 32, 32).unwrap();
        let want_lr = full_lr.crop(top, left, 16, 16).unwrap();
        assert_eq!(&hr.data()[b * 1024..(b + 1) * 1024], want_hr.data());
        assert_eq!(&lr.data()[b * 256..(b + 1) * 256], want_lr.data());
    }
}

#[test]
fn crop_offsets_are_uniform() {
    // LR images are 40x48 with a 16x16 window: 25 row offsets, 33 column offsets.
    let images = vec![("a".to_string(), Image::from_fn(80, 96, |_, _| 0.5f32))];
    let ds = Dataset::from_images(images, 2, Some(32), 12345).unwrap();
    let mut rows = vec![0usize; 25];
    let mut cols = vec![0usize; 33];
    let draws = 10_000;
    for step in 0..draws {
        let (_, top, left) = ds.crop_origins(1, step as u64)[0];
        rows[top] += 1;
        cols[left] += 1;
    }
    let chi2 = |counts: &[usize]| {
        let e = draws as f64 / counts.len() as f64;
        counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum::<f64>()
    };
    // 0.1% upper critical values for 24 and 32 degrees of freedom
    assert!(chi2(&rows) < 51.18, "rows chi2 {}", chi2(&rows));
    assert!(chi2(&cols) < 62.49, "cols chi2 {}", chi2(&cols));
}
